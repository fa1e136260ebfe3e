#include "tsdc/glm.hpp"

#include <algorithm>
#include <cmath>

namespace tsdc {

namespace {

double expit(double e) { return 1.0 / (1.0 + std::exp(-e)); }

// log(1 + exp(e)) without overflow
double softplus(double e) {
  return e > 0.0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
}

Vec to_vec(const std::vector<int>& t) {
  Vec v(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) v[static_cast<int>(i)] = t[i];
  return v;
}

}  // namespace

FittedPs fit_logistic(const DesignMatrix& design, const std::vector<int>& t,
                      const LogisticOptions& opts) {
  const Mat& X = design.values;
  const int n = static_cast<int>(X.rows());
  const int p = static_cast<int>(X.cols());
  if (n != static_cast<int>(t.size())) throw DataError("design rows do not match t");
  if (p == 0) throw DataError("empty design");
  for (int v : t)
    if (v != 0 && v != 1) throw DataError("t must be 0 or 1");

  const Vec tv = to_vec(t);
  Vec gamma = Vec::Zero(p);
  Vec eta = Vec::Zero(n);
  auto loglik = [&](const Vec& e) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += tv[i] * e[i] - softplus(e[i]);
    return s / n;
  };
  double ll = loglik(eta);

  FittedPs out;
  Vec pvec(n), score(p);
  Mat H(p, p);
  int it = 0;
  bool converged = false;
  for (; it < opts.max_iter; ++it) {
    for (int i = 0; i < n; ++i) pvec[i] = expit(eta[i]);
    score = X.transpose() * (tv - pvec) / n;
    out.score_norm = linf(score);
    if (out.score_norm < opts.tol) {
      converged = true;
      break;
    }
    const Vec w = pvec.array() * (1.0 - pvec.array());
    H = X.transpose() * w.asDiagonal() * X / n;
    Eigen::LLT<Mat> llt(H);
    if (llt.info() != Eigen::Success)
      throw FitError("logistic fit: singular information matrix");
    const Vec step = llt.solve(score);

    double s = 1.0;
    int hb = 0;
    for (;;) {
      const Vec cand = gamma + s * step;
      const Vec ceta = X * cand;
      const double cll = loglik(ceta);
      if (cll >= ll - 1e-14) {
        gamma = cand;
        eta = ceta;
        ll = cll;
        break;
      }
      if (++hb > opts.max_halvings)
        throw FitError("logistic fit: step search failed to improve the likelihood");
      s *= 0.5;
    }
    if (gamma.cwiseAbs().maxCoeff() > opts.separation_norm)
      throw FitError("logistic fit: separation suspected (coefficient norm > " +
                     std::to_string(opts.separation_norm) + ")");
  }
  if (!converged) {
    for (int i = 0; i < n; ++i) pvec[i] = expit(eta[i]);
    score = X.transpose() * (tv - pvec) / n;
    out.score_norm = linf(score);
    if (out.score_norm >= opts.tol)
      throw FitError("logistic fit did not converge in " + std::to_string(opts.max_iter) +
                     " iterations (score " + std::to_string(out.score_norm) + ")");
  }
  // a vanishing score with every row classified to numerical 0/1 means the
  // likelihood has no interior maximum (perfect separation); the finite
  // coefficients are an artifact of the stopping rule
  double worst_fit = 0.0;
  for (int i = 0; i < n; ++i) worst_fit = std::max(worst_fit, std::abs(tv[i] - pvec[i]));
  if (worst_fit < 1e-6)
    throw FitError("logistic fit: separation suspected (every row classified to 0/1)");

  out.gamma = gamma;
  out.iterations = it;
  out.loglik = ll;
  out.design = design;
  // keep probabilities strictly inside (0, 1); extreme indexes would
  // otherwise round to exactly 0 or 1 in double precision
  out.pi = pvec.cwiseMax(1e-15).cwiseMin(1.0 - 1e-12);

  const Vec w = out.pi.array() * (1.0 - out.pi.array());
  H = X.transpose() * w.asDiagonal() * X / n;
  Eigen::LLT<Mat> llt(H);
  if (llt.info() != Eigen::Success)
    throw FitError("logistic fit: singular information matrix at the solution");
  out.cov = llt.solve(Mat::Identity(p, p)) / n;
  return out;
}

double FittedOr::se(int coef, int xcol) const {
  return std::sqrt(sigma2[xcol] * xtx_inv(coef, coef));
}

FittedOr fit_or_linear(const DesignMatrix& design, const MergedSample& sample) {
  const Mat& G = design.values;
  const int n = static_cast<int>(G.rows());
  const int p = static_cast<int>(G.cols());
  if (n != sample.n()) throw DataError("design rows do not match the sample");
  if (sample.x.cols() == 0) throw DataError("sample carries no x columns");

  std::vector<int> aux;
  for (int i = 0; i < n; ++i)
    if (sample.t[i] == 0) aux.push_back(i);
  const int n0 = static_cast<int>(aux.size());
  if (n0 <= p)
    throw DataError("auxiliary sample (" + std::to_string(n0) +
                    " rows) is too small for a " + std::to_string(p) + "-column basis");

  const int dx = static_cast<int>(sample.x.cols());
  Mat G0(n0, p), X0(n0, dx);
  for (int r = 0; r < n0; ++r) {
    G0.row(r) = G.row(aux[r]);
    X0.row(r) = sample.x.row(aux[r]);
  }

  Eigen::ColPivHouseholderQR<Mat> qr(G0);
  qr.setThreshold(1e-8);
  if (qr.rank() < p)
    throw FitError("outcome regression: auxiliary design is rank-deficient");

  FittedOr out;
  out.alpha = qr.solve(X0);
  out.m_hat = G * out.alpha;
  out.design = design;
  out.n_aux = n0;
  out.xtx_inv = (G0.transpose() * G0).ldlt().solve(Mat::Identity(p, p));
  out.sigma2.resize(dx);
  const Mat resid = X0 - G0 * out.alpha;
  const int dof = n0 > p ? n0 - p : 1;
  for (int j = 0; j < dx; ++j) out.sigma2[j] = resid.col(j).squaredNorm() / dof;
  return out;
}

FittedAugPs fit_augmented_ps(const DesignMatrix& f, const Mat& psi_cols,
                             const std::vector<int>& t, const LogisticOptions& opts,
                             double prune_tol, const std::vector<std::string>& psi_labels) {
  const int n = static_cast<int>(f.values.rows());
  const int pf = f.p();
  const int k = static_cast<int>(psi_cols.cols());
  if (psi_cols.rows() != n) throw DataError("psi rows do not match the design");

  Mat combined(n, pf + k);
  combined.leftCols(pf) = f.values;
  combined.rightCols(k) = psi_cols;

  const std::vector<int> kept =
      independent_columns(combined, prune_tol, f.intercept_col);
  // f is already full rank, so all of its columns survive; only psi columns
  // can drop (constants, duplicates of f, or collinear augmentations).
  FittedAugPs out;
  out.p_f = pf;
  DesignMatrix aug;
  aug.values.resize(n, static_cast<int>(kept.size()));
  int m = 0;
  for (int j : kept) {
    aug.values.col(m) = combined.col(j);
    aug.kept.push_back(j);
    if (j < pf) {
      aug.labels.push_back(f.labels[j]);
      if (j == f.intercept_col) aug.intercept_col = m;
    } else {
      const int pj = j - pf;
      out.kept_psi.push_back(pj);
      aug.labels.push_back(pj < static_cast<int>(psi_labels.size())
                               ? psi_labels[pj]
                               : "aug" + std::to_string(pj));
    }
    ++m;
  }
  const int kept_f = m - static_cast<int>(out.kept_psi.size());
  if (kept_f != pf)
    throw FitError("augmented propensity fit: base design lost rank unexpectedly");

  out.fit = fit_logistic(aug, t, opts);
  out.psi_kept.resize(n, out.k_psi());
  for (int j = 0; j < out.k_psi(); ++j)
    out.psi_kept.col(j) = psi_cols.col(out.kept_psi[j]);

  const Vec tv = to_vec(t);
  const Vec resid = tv - out.fit.pi;
  out.score_f = linf(f.values.transpose() * resid / n);
  out.score_psi =
      out.k_psi() ? linf(out.psi_kept.transpose() * resid / n) : 0.0;
  return out;
}

}  // namespace tsdc
