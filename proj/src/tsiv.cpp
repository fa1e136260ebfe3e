#include "tsdc/tsiv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tsdc {

Vec IvProblem::u_row(int i) const {
  Vec out(k());
  for (int j = 0; j < k(); ++j) out[j] = s->u(i, u_cols[j]);
  return out;
}

IvProblem make_iv_problem(const MergedSample& s, int instrument_col,
                          const std::vector<int>& exog_cols, int x_col, int y_col) {
  IvProblem iv;
  iv.s = &s;
  iv.u_cols.push_back(instrument_col);
  for (int c : exog_cols) iv.u_cols.push_back(c);
  iv.x_col = x_col;
  iv.y_col = y_col;
  if (instrument_col < 0 || instrument_col >= s.u.cols())
    throw DataError("instrument column out of range");
  for (int c : exog_cols)
    if (c < 0 || c >= s.u.cols()) throw DataError("exogenous column out of range");
  std::vector<int> sorted = iv.u_cols;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw DataError("instrument and exogenous columns must be distinct");
  if (!s.y_observed()) throw DataError("IV problem requires y on primary rows");
  const bool any_x =
      std::any_of(s.has_x.begin(), s.has_x.end(), [](std::uint8_t b) { return b != 0; });
  if (s.x.cols() == 0 || !any_x) throw DataError("IV problem requires x on auxiliary rows");
  if (x_col < 0 || x_col >= s.x.cols()) throw DataError("x column out of range");
  if (y_col < 0 || y_col >= s.y.cols()) throw DataError("y column out of range");
  return iv;
}

Mu12 estimate_mu12(const IvProblem& iv) {
  const MergedSample& s = *iv.s;
  const int n = s.n();
  const int k = iv.k();
  Mu12 out;
  out.mu1 = Vec::Zero(k);
  out.mu2 = Mat::Zero(k, k - 1);
  double p1 = 0.0;
  for (int i = 0; i < n; ++i) {
    if (s.t[i] != 1) continue;
    p1 += 1.0;
    const Vec u = iv.u_row(i);
    out.mu1 += u * iv.yval(i);
    for (int j = 1; j < k; ++j) out.mu2.col(j - 1) += u * u[j];
  }
  if (p1 == 0.0) throw DataError("no primary rows");
  out.mu1 /= p1;
  out.mu2 /= p1;
  return out;
}

Vec beta_from_mu(const Vec& mu1, const Mat& mu2, const Vec& mu3) {
  const int k = static_cast<int>(mu1.size());
  Mat M(k, k);
  M.col(0) = mu3;
  M.rightCols(k - 1) = mu2;
  Eigen::FullPivLU<Mat> lu(M);
  if (!lu.isInvertible())
    throw FitError("IV moment matrix is numerically singular (weak instrument?)");
  return lu.solve(mu1);
}

Vec tsiv_classic(const IvProblem& iv) {
  const MergedSample& s = *iv.s;
  const int n = s.n();
  const int k = iv.k();
  Mat A = Mat::Zero(k, k);
  Vec b = Vec::Zero(k);
  double c1 = 0.0, c0 = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vec u = iv.u_row(i);
    if (s.t[i] == 1) {
      b += u * iv.yval(i);
      c1 += 1.0;
    } else {
      A.col(0) += u * iv.xval(i);
      for (int j = 1; j < k; ++j) A.col(j) += u * u[j];
      c0 += 1.0;
    }
  }
  A /= c0;
  b /= c1;
  Eigen::FullPivLU<Mat> lu(A);
  if (!lu.isInvertible())
    throw FitError("IV moment matrix is numerically singular (weak instrument?)");
  return lu.solve(b);
}

Vec ts2sls(const IvProblem& iv) {
  const MergedSample& s = *iv.s;
  const int n = s.n();
  const int k = iv.k();

  // first stage: x on U over auxiliary rows, through the origin
  Mat U0(s.n0(), k);
  Vec x0(s.n0());
  int r = 0;
  for (int i = 0; i < n; ++i)
    if (s.t[i] == 0) {
      U0.row(r) = iv.u_row(i).transpose();
      x0[r] = iv.xval(i);
      ++r;
    }
  Eigen::ColPivHouseholderQR<Mat> qr1(U0);
  qr1.setThreshold(1e-8);
  if (qr1.rank() < k) throw FitError("ts2sls: first-stage design is rank-deficient");
  const Vec alpha = qr1.solve(x0);

  // second stage: y on (x_hat, exog) over primary rows
  Mat R1(s.n1(), k);
  Vec y1(s.n1());
  r = 0;
  for (int i = 0; i < n; ++i)
    if (s.t[i] == 1) {
      const Vec u = iv.u_row(i);
      R1(r, 0) = u.dot(alpha);
      for (int j = 1; j < k; ++j) R1(r, j) = u[j];
      y1[r] = iv.yval(i);
      ++r;
    }
  Eigen::ColPivHouseholderQR<Mat> qr2(R1);
  qr2.setThreshold(1e-8);
  if (qr2.rank() < k) throw FitError("ts2sls: second-stage design is rank-deficient");
  return qr2.solve(y1);
}

namespace {

// psi columns m_hat(U) * U used to augment the propensity index; theta-free,
// so the augmented fit and calibration happen once.
Mat iv_psi_cols(const IvProblem& iv, const FittedOr& orf) {
  const int n = iv.s->n();
  Mat cols(n, iv.k());
  for (int i = 0; i < n; ++i)
    cols.row(i) = (orf.m_hat(i, iv.x_col) * iv.u_row(i)).transpose();
  return cols;
}

std::vector<std::string> iv_psi_labels(const IvProblem& iv) {
  std::vector<std::string> lab;
  for (int j : iv.u_cols) lab.push_back("m:" + iv.s->u_names[j]);
  return lab;
}

double primary_share(const MergedSample& s) {
  return static_cast<double>(s.n1()) / s.n();
}

}  // namespace

Mu3Result estimate_mu3(const IvProblem& iv, Mu3Method method, const TsivFits& fits,
                       bool include_h2, const WeightPolicy& policy) {
  const MergedSample& s = *iv.s;
  const int n = s.n();
  const int k = iv.k();
  Mu3Result out;
  out.mu3 = Vec::Zero(k);

  switch (method) {
    case Mu3Method::Pooled: {
      double c0 = 0.0;
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 0) {
          out.mu3 += iv.u_row(i) * iv.xval(i);
          c0 += 1.0;
        }
      out.mu3 /= c0;
      return out;
    }

    case Mu3Method::OR: {
      if (!fits.orf) throw DataError("mu3 OR route requires an outcome regression fit");
      Vec num = Vec::Zero(k);
      double den = 0.0;
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 1) {
          num += iv.u_row(i) * fits.orf->m_hat(i, iv.x_col);
          den += 1.0;
        }
      out.mu3 = num / den;
      return out;
    }

    case Mu3Method::IPW: {
      if (!fits.ps) throw DataError("mu3 IPW route requires a propensity fit");
      Vec pi = fits.ps->pi;
      int clipped = 0;
      std::string bad;
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 0 && 1.0 - pi[i] < policy.floor) {
          if (policy.clip) {
            pi[i] = 1.0 - policy.floor;
            ++clipped;
          } else {
            if (!bad.empty()) bad += ", ";
            bad += std::to_string(i);
          }
        }
      if (!bad.empty())
        throw FitError("propensity too close to 1 on auxiliary rows [" + bad +
                       "]; rerun with weight clipping to proceed");
      Vec num = Vec::Zero(k);
      double den = 0.0;
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 0) {
          const double w = pi[i] / (1.0 - pi[i]);
          num += w * iv.u_row(i) * iv.xval(i);
          den += w;
        }
      out.mu3 = num / den;
      out.diag["clipped"] = clipped;
      return out;
    }

    case Mu3Method::AIPW: {
      if (!fits.ps || !fits.orf) throw DataError("mu3 AIPW route requires both model fits");
      Vec pi = fits.ps->pi;
      int clipped = 0;
      std::string bad;
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 0 && 1.0 - pi[i] < policy.floor) {
          if (policy.clip) {
            pi[i] = 1.0 - policy.floor;
            ++clipped;
          } else {
            if (!bad.empty()) bad += ", ";
            bad += std::to_string(i);
          }
        }
      if (!bad.empty())
        throw FitError("propensity too close to 1 on auxiliary rows [" + bad +
                       "]; rerun with weight clipping to proceed");
      Vec num = Vec::Zero(k);
      for (int i = 0; i < n; ++i) {
        const Vec u = iv.u_row(i);
        const double m = fits.orf->m_hat(i, iv.x_col);
        if (s.t[i] == 0) {
          const double w = pi[i] / (1.0 - pi[i]);
          num += w * u * (iv.xval(i) - m);
        } else {
          num += u * m;
        }
      }
      out.mu3 = (num / n) / primary_share(s);
      out.diag["clipped"] = clipped;
      return out;
    }

    case Mu3Method::REG: {
      if (!fits.ps || !fits.orf || !fits.f)
        throw DataError("mu3 REG route requires propensity and regression fits");
      const FittedAugPs aug = fit_augmented_ps(*fits.f, iv_psi_cols(iv, *fits.orf), s.t, {},
                                               1e-8, iv_psi_labels(iv));
      const CalibrationPieces pc = make_pieces(aug, s.t, include_h2, policy);
      out.diag["clipped"] = pc.clipped;

      Mat eta = Mat::Zero(n, k);  // (1-T) pi/(1-pi) U x
      Vec rho = Vec::Zero(n);
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 0) {
          const double w = pc.pi[i] / (1.0 - pc.pi[i]);
          eta.row(i) = (w * iv.u_row(i) * iv.xval(i)).transpose();
          rho[i] = w;
        }

      const Mat xz = pc.xi.transpose() * pc.zeta / n;
      Eigen::FullPivLU<Mat> lu(xz);
      if (!lu.isInvertible()) throw FitError("reg: singular calibration cross-moment matrix");
      const Mat beta_t = lu.solve(pc.xi.transpose() * eta / n);   // dim_h x k
      const Vec kappa_den = lu.solve(pc.xi.transpose() * rho / n);

      const Vec num = (eta - pc.xi * beta_t).colwise().mean();
      const double den = (rho - pc.xi * kappa_den).mean();
      out.diag["denominator_gap"] = std::abs(den - primary_share(s));
      if (std::abs(den) < 1e-12) throw FitError("reg: degenerate denominator");
      out.mu3 = num / den;
      out.diag["aug_score_f"] = aug.score_f;
      out.diag["aug_score_psi"] = aug.score_psi;
      return out;
    }

    case Mu3Method::LIK: {
      if (!fits.ps || !fits.orf || !fits.f)
        throw DataError("mu3 LIK route requires propensity and regression fits");
      const FittedAugPs aug = fit_augmented_ps(*fits.f, iv_psi_cols(iv, *fits.orf), s.t, {},
                                               1e-8, iv_psi_labels(iv));
      const CalibrationPieces pc = make_pieces(aug, s.t, include_h2, policy);
      out.diag["clipped"] = pc.clipped;

      const ElState el = solve_el(pc, s.t, {});
      out.diag["el_iterations_l"] = el.iterations_l;
      out.diag["el_iterations_kappa"] = el.iterations_kappa;

      Vec num = Vec::Zero(k);
      double den = 0.0, wmin = std::numeric_limits<double>::infinity();
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 0) {
          const double w = pc.pi[i] / (1.0 - el.omega_tilde[i]);
          num += w * iv.u_row(i) * iv.xval(i);
          den += w;
          wmin = std::min(wmin, 1.0 / (n * (1.0 - el.omega_tilde[i])));
        }
      num /= n;
      den /= n;
      out.diag["denominator_gap"] = std::abs(den - primary_share(s));
      out.diag["min_aux_weight"] = wmin;
      if (std::abs(den) < 1e-12) throw FitError("lik: degenerate denominator");
      out.mu3 = num / den;
      return out;
    }

    case Mu3Method::AST: {
      if (!fits.ps || !fits.orf || !fits.f)
        throw DataError("mu3 AST route requires propensity and regression fits");
      // run the generic tilted-weight solver on Phi = Ux - mu3
      MomentModel mm;
      mm.k = k;
      mm.phi = [iv](const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& u,
                    const Vec& theta) {
        Vec uu(iv.u_cols.size());
        for (std::size_t j = 0; j < iv.u_cols.size(); ++j) uu[j] = u[iv.u_cols[j]];
        return (uu * x[iv.x_col] - theta).eval();
      };
      mm.jac = [k](const Eigen::Ref<const Vec>&, const Eigen::Ref<const Vec>&, const Vec&) {
        return (-Mat::Identity(k, k)).eval();
      };
      PsiHat psi = make_psi_hat(mm, s.u, *fits.orf);
      SolveOptions opts;
      opts.include_h2 = include_h2;
      opts.weights = policy;
      const EstimateResult r = solve_ast(s, mm, *fits.f, psi, opts);
      out.mu3 = r.theta;
      out.diag = r.diagnostics;
      return out;
    }
  }
  throw DataError("unknown mu3 method");
}

BetaResult estimate_beta(const IvProblem& iv, Mu3Method method, const TsivFits& fits,
                         bool include_h2, const WeightPolicy& policy) {
  BetaResult out;
  out.mu3 = estimate_mu3(iv, method, fits, include_h2, policy);
  if (method == Mu3Method::Pooled) {
    // classic pooled estimator: the exogenous cross moments come from the
    // auxiliary sample as well
    out.beta = tsiv_classic(iv);
    return out;
  }
  const Mu12 m12 = estimate_mu12(iv);
  out.beta = beta_from_mu(m12.mu1, m12.mu2, out.mu3.mu3);
  return out;
}

}  // namespace tsdc
