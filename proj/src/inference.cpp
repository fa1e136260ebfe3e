#include "tsdc/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <thread>

namespace tsdc {

namespace {

double expit(double z) { return 1.0 / (1.0 + std::exp(-z)); }

int pick_threads(int requested, int jobs) {
  int t = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  if (t < 1) t = 1;
  return std::min(t, jobs);
}

}  // namespace

MergedSample resample_two_sample(const MergedSample& s, RngStream& rng) {
  const int n = s.n();
  std::vector<int> p_idx, a_idx;
  p_idx.reserve(s.n1());
  a_idx.reserve(s.n0());
  for (int i = 0; i < n; ++i) (s.t[i] == 1 ? p_idx : a_idx).push_back(i);

  MergedSample out;
  out.u_names = s.u_names;
  out.x_names = s.x_names;
  out.y_names = s.y_names;
  out.t.resize(n);
  out.u.resize(n, s.u.cols());
  out.x.resize(n, s.x.cols());
  out.y.resize(n, s.y.cols());
  out.has_x.resize(n);
  out.has_y.resize(n);

  auto copy_row = [&](int r, int i) {
    out.t[r] = s.t[i];
    out.u.row(r) = s.u.row(i);
    if (s.x.cols()) out.x.row(r) = s.x.row(i);
    if (s.y.cols()) out.y.row(r) = s.y.row(i);
    out.has_x[r] = s.has_x[i];
    out.has_y[r] = s.has_y[i];
  };

  int r = 0;
  const int n1 = static_cast<int>(p_idx.size());
  const int n0 = static_cast<int>(a_idx.size());
  for (int d = 0; d < n1; ++d) copy_row(r++, p_idx[rng.next_index(n1)]);
  for (int d = 0; d < n0; ++d) copy_row(r++, a_idx[rng.next_index(n0)]);
  return out;
}

double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw DataError("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw DataError("quantile level must lie in [0, 1]");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  const double frac = h - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

BootstrapReport bootstrap(const MergedSample& s, const EstimatorClosure& est, int B,
                          std::uint64_t seed, double level, int threads) {
  if (B < 2) throw DataError("bootstrap needs at least two replicates");
  if (!(level > 0.0 && level < 1.0)) throw DataError("bootstrap level must lie in (0, 1)");

  BootstrapReport rep;
  rep.B = B;
  rep.level = level;
  rep.point = est(s);
  const int k = static_cast<int>(rep.point.size());

  std::vector<Vec> results(B);
  std::vector<std::uint8_t> ok(B, 0);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= B) return;
      RngStream rng(seed, static_cast<std::uint64_t>(r));
      try {
        const MergedSample draw = resample_two_sample(s, rng);
        Vec theta = est(draw);
        if (theta.size() != k) continue;  // shape mismatch counts as failure
        results[r] = std::move(theta);
        ok[r] = 1;
      } catch (const Error&) {
        // dropped and counted below
      }
    }
  };

  const int nt = pick_threads(threads, B);
  if (nt <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (int i = 0; i < nt; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  int succ = 0;
  for (int r = 0; r < B; ++r) succ += ok[r];
  rep.n_failed = B - succ;
  if (2 * rep.n_failed > B)
    throw FitError("bootstrap: more than half of the replicates failed (" +
                   std::to_string(rep.n_failed) + " of " + std::to_string(B) + ")");
  if (succ < 2) throw FitError("bootstrap: fewer than two replicates succeeded");

  rep.draws.resize(succ, k);
  int rr = 0;
  for (int r = 0; r < B; ++r)
    if (ok[r]) rep.draws.row(rr++) = results[r].transpose();

  rep.se.resize(k);
  rep.ci.resize(k, 2);
  const double alpha = 1.0 - level;
  for (int j = 0; j < k; ++j) {
    const Vec col = rep.draws.col(j);
    const double m = col.mean();
    rep.se[j] = std::sqrt((col.array() - m).square().sum() / (succ - 1));
    std::vector<double> vals(col.data(), col.data() + succ);
    rep.ci(j, 0) = quantile(vals, alpha / 2.0);
    rep.ci(j, 1) = quantile(vals, 1.0 - alpha / 2.0);
  }
  return rep;
}

std::pair<int, int> EqStack::block_span(const std::string& name) const {
  int off = 0;
  for (const auto& [bname, size] : blocks) {
    if (bname == name) return {off, size};
    off += size;
  }
  throw DataError("unknown block '" + name + "' in equation stack");
}

Mat sandwich_cov(const EqStack& stack, double fd_scale) {
  const int d = stack.dim();
  if (!stack.row_g || stack.n <= 0 || d == 0) throw DataError("empty equation stack");

  Vec row(d);
  auto mean_g = [&](const Vec& p) {
    Vec acc = Vec::Zero(d);
    for (int i = 0; i < stack.n; ++i) {
      stack.row_g(i, p, row);
      acc += row;
    }
    return (acc / stack.n).eval();
  };

  Mat A(d, d);
  for (int j = 0; j < d; ++j) {
    const double h = fd_scale * (1.0 + std::abs(stack.params[j]));
    Vec pp = stack.params, pm = stack.params;
    pp[j] += h;
    pm[j] -= h;
    A.col(j) = (mean_g(pp) - mean_g(pm)) / (2.0 * h);
  }

  Mat B = Mat::Zero(d, d);
  for (int i = 0; i < stack.n; ++i) {
    stack.row_g(i, stack.params, row);
    B.noalias() += row * row.transpose();
  }
  B /= stack.n;

  Eigen::FullPivLU<Mat> lu(A);
  if (!lu.isInvertible()) throw FitError("sandwich: singular mean-equation Jacobian");
  const Mat Ainv = lu.inverse();
  return Ainv * B * Ainv.transpose() / stack.n;
}

Vec sandwich_se(const EqStack& stack, const std::string& block, double fd_scale) {
  const Mat cov = sandwich_cov(stack, fd_scale);
  const auto [off, size] = stack.block_span(block);
  return cov.diagonal().segment(off, size).cwiseMax(0.0).cwiseSqrt();
}

EqStack make_mean_stack(const Vec& data) {
  EqStack st;
  st.n = static_cast<int>(data.size());
  st.params = Vec::Constant(1, data.mean());
  st.blocks = {{"mean", 1}};
  st.row_g = [data](int i, const Vec& p, Eigen::Ref<Vec> out) { out[0] = data[i] - p[0]; };
  return st;
}

EqStack make_or_stack(const MergedSample& s, const MomentModel& mm, const FittedOr& orf,
                      const Vec& theta) {
  EqStack st;
  st.n = s.n();
  const int p = orf.design.p();
  const int dx = static_cast<int>(orf.alpha.cols());
  const int k = mm.k;
  st.blocks = {{"alpha", p * dx}, {"theta", k}};
  st.params.resize(p * dx + k);
  for (int c = 0; c < dx; ++c) st.params.segment(c * p, p) = orf.alpha.col(c);
  st.params.tail(k) = theta;

  const Mat G = orf.design.values;
  const Mat U = s.u;
  const Mat X = s.x;
  const std::vector<int> t = s.t;
  st.row_g = [G, U, X, t, mm, p, dx, k](int i, const Vec& par, Eigen::Ref<Vec> out) {
    out.setZero();
    const Vec g = G.row(i).transpose();
    Vec m(dx);
    for (int c = 0; c < dx; ++c) m[c] = g.dot(par.segment(c * p, p));
    if (t[i] == 0) {
      for (int c = 0; c < dx; ++c) out.segment(c * p, p) = g * (X(i, c) - m[c]);
    } else {
      out.tail(k) = mm.phi(m, U.row(i).transpose(), par.tail(k));
    }
  };
  return st;
}

EqStack make_ipw_stack(const MergedSample& s, const MomentModel& mm, const FittedPs& ps,
                       const Vec& theta) {
  EqStack st;
  st.n = s.n();
  const int p = ps.design.p();
  const int k = mm.k;
  st.blocks = {{"gamma", p}, {"theta", k}};
  st.params.resize(p + k);
  st.params.head(p) = ps.gamma;
  st.params.tail(k) = theta;

  const Mat F = ps.design.values;
  const Mat U = s.u;
  const Mat X = s.x;
  const std::vector<int> t = s.t;
  st.row_g = [F, U, X, t, mm, p, k](int i, const Vec& par, Eigen::Ref<Vec> out) {
    out.setZero();
    const Vec f = F.row(i).transpose();
    const double pi = expit(f.dot(par.head(p)));
    out.head(p) = (t[i] - pi) * f;
    if (t[i] == 0)
      out.tail(k) =
          pi / (1.0 - pi) * mm.phi(X.row(i).transpose(), U.row(i).transpose(), par.tail(k));
  };
  return st;
}

EqStack make_aipw_stack(const MergedSample& s, const MomentModel& mm, const FittedPs& ps,
                        const FittedOr& orf, AipwVariant variant, const Vec& theta) {
  EqStack st;
  st.n = s.n();
  const int pa = orf.design.p();
  const int dx = static_cast<int>(orf.alpha.cols());
  const int pg = ps.design.p();
  const int k = mm.k;
  st.blocks = {{"alpha", pa * dx}, {"gamma", pg}, {"theta", k}};
  st.params.resize(pa * dx + pg + k);
  for (int c = 0; c < dx; ++c) st.params.segment(c * pa, pa) = orf.alpha.col(c);
  st.params.segment(pa * dx, pg) = ps.gamma;
  st.params.tail(k) = theta;

  const Mat G = orf.design.values;
  const Mat F = ps.design.values;
  const Mat U = s.u;
  const Mat X = s.x;
  const std::vector<int> t = s.t;
  const bool sp = variant == AipwVariant::SP;
  st.row_g = [G, F, U, X, t, mm, pa, dx, pg, k, sp](int i, const Vec& par,
                                                    Eigen::Ref<Vec> out) {
    out.setZero();
    const Vec g = G.row(i).transpose();
    const Vec f = F.row(i).transpose();
    Vec m(dx);
    for (int c = 0; c < dx; ++c) m[c] = g.dot(par.segment(c * pa, pa));
    const double pi = expit(f.dot(par.segment(pa * dx, pg)));
    out.segment(pa * dx, pg) = (t[i] - pi) * f;
    const Vec u = U.row(i).transpose();
    const Vec th = par.tail(k);
    const Vec psi = mm.phi(m, u, th);
    if (t[i] == 0) {
      for (int c = 0; c < dx; ++c) out.segment(c * pa, pa) = g * (X(i, c) - m[c]);
      out.tail(k) = pi / (1.0 - pi) * (mm.phi(X.row(i).transpose(), u, th) - psi);
    } else {
      out.tail(k) = psi;
    }
    if (sp) out.tail(k) += pi * psi;
  };
  return st;
}

std::string iv_estimator_name(IvEstimator e) {
  switch (e) {
    case IvEstimator::TSIV: return "tsiv";
    case IvEstimator::TS2SLS: return "ts2sls";
    case IvEstimator::OR: return "or";
    case IvEstimator::IPW: return "ipw";
    case IvEstimator::AIPW: return "aipw";
    case IvEstimator::REG: return "reg";
    case IvEstimator::LIK: return "lik";
    case IvEstimator::AST: return "ast";
  }
  return "?";
}

namespace {

// Everything a row evaluator needs for the IV stacks, frozen at the solution.
struct IvCtx {
  IvProblem iv;
  std::vector<int> t;
  Mat f_vals;   // propensity design (base design for the calibrated methods)
  Mat or_vals;  // outcome-regression design
  std::vector<int> kept_psi;
  bool include_h2 = false;
  bool psi_shifted = false;  // AST: psi columns are m_hat * U - mu3

  int k() const { return iv.k(); }
  int kp() const { return static_cast<int>(kept_psi.size()); }
  int p_f() const { return static_cast<int>(f_vals.cols()); }
  int p_or() const { return static_cast<int>(or_vals.cols()); }
  int dim_v() const { return 1 + kp(); }
  int dim_h() const { return include_h2 ? dim_v() + p_f() + kp() : dim_v(); }

  double m_hat(int i, const Vec& alpha) const { return or_vals.row(i).dot(alpha); }

  Vec psi_row(int i, const Vec& alpha, const Vec* mu3) const {
    const double m = m_hat(i, alpha);
    Vec ps(kp());
    for (int j = 0; j < kp(); ++j) {
      ps[j] = m * iv.s->u(i, iv.u_cols[kept_psi[j]]);
      if (mu3) ps[j] -= (*mu3)[kept_psi[j]];
    }
    return ps;
  }

  // augmented design row [f_i, psi_i]
  Vec aug_row(int i, const Vec& psi) const {
    Vec a(p_f() + kp());
    a.head(p_f()) = f_vals.row(i).transpose();
    a.tail(kp()) = psi;
    return a;
  }

  Vec v_row(double pi, const Vec& psi) const {
    Vec v(dim_v());
    v[0] = pi;
    v.tail(kp()) = pi * psi;
    return v;
  }

  Vec h_row(double pi, const Vec& psi, const Vec& a) const {
    Vec h(dim_h());
    h.head(dim_v()) = pi * v_row(pi, psi);
    if (include_h2) h.tail(p_f() + kp()) = pi * (1.0 - pi) * a;
    return h;
  }
};

// chi solving the auxiliary balancing equation mean{((1-T)/w - 1) pi psi} = 0
// for the tilted weights w_i = 1 - expit(eta_i + psi_i' chi).
Vec solve_chi(const std::vector<int>& t, const Vec& eta, const Mat& psi, const Vec& pi,
              const Vec& warm) {
  const int n = static_cast<int>(t.size());
  const int kp = static_cast<int>(psi.cols());
  if (kp == 0) return Vec();
  Vec chi = warm.size() == kp ? warm : Vec::Zero(kp);
  auto wts = [&](const Vec& ch) {
    Vec w(n);
    for (int i = 0; i < n; ++i) w[i] = 1.0 / (1.0 + std::exp(eta[i] + psi.row(i).dot(ch)));
    return w;
  };
  auto gval = [&](const Vec& w) {
    Vec g = Vec::Zero(kp);
    for (int i = 0; i < n; ++i) {
      if (t[i] == 0) g += pi[i] / w[i] * psi.row(i).transpose();
      g -= pi[i] * psi.row(i).transpose();
    }
    return (g / n).eval();
  };
  Vec w = wts(chi);
  Vec g = gval(w);
  double gn = linf(g);
  for (int it = 0; it < 100 && gn >= 1e-10; ++it) {
    Mat J = Mat::Zero(kp, kp);
    for (int i = 0; i < n; ++i)
      if (t[i] == 0)
        J += (pi[i] * (1.0 - w[i]) / w[i]) * (psi.row(i).transpose() * psi.row(i)) / n;
    Eigen::FullPivLU<Mat> lu(J);
    if (!lu.isInvertible()) throw FitError("ast: singular Jacobian in the tilt solve");
    const Vec step = lu.solve(-g);
    double sfac = 1.0;
    for (int hb = 0;; ++hb) {
      const Vec cand = chi + sfac * step;
      const Vec cw = wts(cand);
      bool feas = true;
      for (int i = 0; i < n; ++i)
        if (t[i] == 0 && cw[i] < 1e-12) {
          feas = false;
          break;
        }
      if (feas) {
        const Vec cg = gval(cw);
        const double cgn = linf(cg);
        if (cgn < gn || cgn < 1e-10) {
          chi = cand;
          w = cw;
          g = cg;
          gn = cgn;
          break;
        }
      }
      if (hb > 40) throw FitError("ast: tilt solve line search stalled");
      sfac *= 0.5;
    }
  }
  if (gn >= 1e-8) throw FitError("ast: tilt solve did not converge");
  return chi;
}

}  // namespace

EqStack make_iv_stack(const IvProblem& iv, IvEstimator method, const TsivFits& fits,
                      bool include_h2, const WeightPolicy& policy, const Vec& beta) {
  const MergedSample& s = *iv.s;
  const int n = s.n();
  const int k = iv.k();
  const int kk1 = k * (k - 1);

  EqStack st;
  st.n = n;

  auto ctx = std::make_shared<IvCtx>();
  ctx->iv = iv;
  ctx->t = s.t;
  ctx->include_h2 = include_h2;

  // ----- TS2SLS: its own two-block stack -------------------------------
  if (method == IvEstimator::TS2SLS) {
    Mat U0(s.n0(), k);
    Vec x0(s.n0());
    int r = 0;
    for (int i = 0; i < n; ++i)
      if (s.t[i] == 0) {
        U0.row(r) = iv.u_row(i).transpose();
        x0[r] = iv.xval(i);
        ++r;
      }
    Eigen::ColPivHouseholderQR<Mat> qr(U0);
    qr.setThreshold(1e-8);
    if (qr.rank() < k) throw FitError("ts2sls: first-stage design is rank-deficient");
    const Vec alpha = qr.solve(x0);

    st.blocks = {{"alpha", k}, {"beta", k}};
    st.params.resize(2 * k);
    st.params.head(k) = alpha;
    st.params.tail(k) = beta;
    st.row_g = [ctx, k](int i, const Vec& par, Eigen::Ref<Vec> out) {
      out.setZero();
      const Vec u = ctx->iv.u_row(i);
      if (ctx->t[i] == 0) {
        out.head(k) = u * (ctx->iv.xval(i) - u.dot(par.head(k)));
      } else {
        Vec rrow(k);
        rrow[0] = u.dot(par.head(k));
        rrow.tail(k - 1) = u.tail(k - 1);
        out.tail(k) = rrow * (ctx->iv.yval(i) - rrow.dot(par.tail(k)));
      }
    };
    return st;
  }

  // ----- everything else shares the mu blocks and the beta link --------
  const bool aux_mu = method == IvEstimator::TSIV;
  Vec mu1;
  Mat mu2(k, k - 1);
  if (aux_mu) {
    mu1 = Vec::Zero(k);
    mu2.setZero();
    double c1 = 0.0, c0 = 0.0;
    for (int i = 0; i < n; ++i) {
      const Vec u = iv.u_row(i);
      if (s.t[i] == 1) {
        mu1 += u * iv.yval(i);
        c1 += 1.0;
      } else {
        for (int j = 1; j < k; ++j) mu2.col(j - 1) += u * u[j];
        c0 += 1.0;
      }
    }
    mu1 /= c1;
    mu2 /= c0;
  } else {
    const Mu12 m12 = estimate_mu12(iv);
    mu1 = m12.mu1;
    mu2 = m12.mu2;
  }

  Mu3Method m3m;
  switch (method) {
    case IvEstimator::TSIV: m3m = Mu3Method::Pooled; break;
    case IvEstimator::OR: m3m = Mu3Method::OR; break;
    case IvEstimator::IPW: m3m = Mu3Method::IPW; break;
    case IvEstimator::AIPW: m3m = Mu3Method::AIPW; break;
    case IvEstimator::REG: m3m = Mu3Method::REG; break;
    case IvEstimator::LIK: m3m = Mu3Method::LIK; break;
    case IvEstimator::AST: m3m = Mu3Method::AST; break;
    default: throw DataError("unsupported IV estimator");
  }
  const Vec mu3 = estimate_mu3(iv, m3m, fits, include_h2, policy).mu3;

  // nuisance blocks per method
  std::vector<std::pair<std::string, int>> blocks;
  Vec nuisance;
  const bool needs_alpha = method != IvEstimator::TSIV && method != IvEstimator::IPW;
  const bool needs_gamma = method == IvEstimator::IPW || method == IvEstimator::AIPW;
  const bool calibrated = method == IvEstimator::REG || method == IvEstimator::LIK ||
                          method == IvEstimator::AST;

  if (needs_alpha) {
    if (!fits.orf) throw DataError("stack requires an outcome regression fit");
    ctx->or_vals = fits.orf->design.values;
    blocks.emplace_back("alpha", ctx->p_or());
  }
  if (needs_gamma) {
    if (!fits.ps) throw DataError("stack requires a propensity fit");
    ctx->f_vals = fits.ps->design.values;
    blocks.emplace_back("gamma", ctx->p_f());
  }

  Vec gamma_aug, beta_t_flat, kappa_den, lambda, lambda1, chi;
  if (calibrated) {
    if (!fits.orf || !fits.f) throw DataError("stack requires regression and design fits");
    ctx->f_vals = fits.f->values;
    ctx->psi_shifted = method == IvEstimator::AST;

    // one-shot augmented fit on the psi columns actually used by the solver
    Mat cols(n, k);
    for (int i = 0; i < n; ++i) {
      Vec c = fits.orf->m_hat(i, iv.x_col) * iv.u_row(i);
      if (ctx->psi_shifted) c -= mu3;
      cols.row(i) = c.transpose();
    }
    const FittedAugPs aug = fit_augmented_ps(*fits.f, cols, s.t, {}, 1e-8);
    ctx->kept_psi = aug.kept_psi;
    gamma_aug = aug.fit.gamma;
    blocks.emplace_back("gamma_aug", ctx->p_f() + ctx->kp());

    if (method == IvEstimator::REG) {
      const CalibrationPieces pc = make_pieces(aug, s.t, include_h2, policy);
      Mat eta = Mat::Zero(n, k);
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
      const Mat bt = lu.solve(pc.xi.transpose() * eta / n);
      kappa_den = lu.solve(pc.xi.transpose() * rho / n);
      beta_t_flat.resize(ctx->dim_h() * k);
      for (int c = 0; c < k; ++c) beta_t_flat.segment(c * ctx->dim_h(), ctx->dim_h()) = bt.col(c);
      blocks.emplace_back("beta_t", ctx->dim_h() * k);
      blocks.emplace_back("kappa_den", ctx->dim_h());
    } else if (method == IvEstimator::LIK) {
      const CalibrationPieces pc = make_pieces(aug, s.t, include_h2, policy);
      const ElState el = solve_el(pc, s.t, {});
      lambda = el.lambda;
      lambda1 = el.lambda1;
      blocks.emplace_back("lambda", ctx->dim_h());
      blocks.emplace_back("lambda1", ctx->dim_v());
    } else {  // AST
      const Vec eta_idx = aug.fit.design.values * aug.fit.gamma;
      chi = solve_chi(s.t, eta_idx, aug.psi_kept, aug.fit.pi, Vec());
      blocks.emplace_back("chi", ctx->kp());
    }
  }

  blocks.emplace_back("mu1", k);
  blocks.emplace_back("mu2", kk1);
  blocks.emplace_back("mu3", k);
  blocks.emplace_back("beta", k);

  // assemble the parameter vector in block order
  int dim = 0;
  for (const auto& [name, size] : blocks) dim += size;
  st.blocks = blocks;
  st.params.resize(dim);
  int off = 0;
  auto put = [&](const Vec& v) {
    st.params.segment(off, v.size()) = v;
    off += static_cast<int>(v.size());
  };
  if (needs_alpha || calibrated) put(fits.orf->alpha.col(iv.x_col));
  if (needs_gamma) put(fits.ps->gamma);
  if (calibrated) {
    put(gamma_aug);
    if (method == IvEstimator::REG) {
      put(beta_t_flat);
      put(kappa_den);
    } else if (method == IvEstimator::LIK) {
      put(lambda);
      put(lambda1);
    } else if (chi.size()) {
      put(chi);
    }
  }
  put(mu1);
  for (int j = 0; j < k - 1; ++j) put(mu2.col(j));
  put(mu3);
  put(beta);

  // resolve offsets once
  std::map<std::string, int> o;
  {
    int acc = 0;
    for (const auto& [name, size] : st.blocks) {
      o[name] = acc;
      acc += size;
    }
  }

  const IvEstimator mth = method;
  st.row_g = [ctx, o, mth, k](int i, const Vec& par, Eigen::Ref<Vec> out) {
    out.setZero();
    const Vec u = ctx->iv.u_row(i);
    const int t = ctx->t[i];
    const Vec mu3v = par.segment(o.at("mu3"), k);

    // mu1 / mu2 rows
    if (mth == IvEstimator::TSIV) {
      if (t == 1) out.segment(o.at("mu1"), k) = u * ctx->iv.yval(i) - par.segment(o.at("mu1"), k);
      if (t == 0) {
        for (int j = 1; j < k; ++j)
          out.segment(o.at("mu2") + (j - 1) * k, k) =
              u * u[j] - par.segment(o.at("mu2") + (j - 1) * k, k);
        out.segment(o.at("mu3"), k) = u * ctx->iv.xval(i) - mu3v;
      }
    } else {
      if (t == 1) {
        out.segment(o.at("mu1"), k) = u * ctx->iv.yval(i) - par.segment(o.at("mu1"), k);
        for (int j = 1; j < k; ++j)
          out.segment(o.at("mu2") + (j - 1) * k, k) =
              u * u[j] - par.segment(o.at("mu2") + (j - 1) * k, k);
      }
    }

    // nuisance + mu3 rows
    switch (mth) {
      case IvEstimator::TSIV:
        break;

      case IvEstimator::OR: {
        const Vec alpha = par.segment(o.at("alpha"), ctx->p_or());
        const double m = ctx->m_hat(i, alpha);
        if (t == 0)
          out.segment(o.at("alpha"), ctx->p_or()) =
              ctx->or_vals.row(i).transpose() * (ctx->iv.xval(i) - m);
        else
          out.segment(o.at("mu3"), k) = u * m - mu3v;
        break;
      }

      case IvEstimator::IPW: {
        const Vec gam = par.segment(o.at("gamma"), ctx->p_f());
        const Vec f = ctx->f_vals.row(i).transpose();
        const double pi = expit(f.dot(gam));
        out.segment(o.at("gamma"), ctx->p_f()) = (t - pi) * f;
        if (t == 0)
          out.segment(o.at("mu3"), k) = pi / (1.0 - pi) * (u * ctx->iv.xval(i) - mu3v);
        break;
      }

      case IvEstimator::AIPW: {
        const Vec alpha = par.segment(o.at("alpha"), ctx->p_or());
        const Vec gam = par.segment(o.at("gamma"), ctx->p_f());
        const double m = ctx->m_hat(i, alpha);
        const Vec f = ctx->f_vals.row(i).transpose();
        const double pi = expit(f.dot(gam));
        out.segment(o.at("gamma"), ctx->p_f()) = (t - pi) * f;
        if (t == 0) {
          out.segment(o.at("alpha"), ctx->p_or()) =
              ctx->or_vals.row(i).transpose() * (ctx->iv.xval(i) - m);
          out.segment(o.at("mu3"), k) = pi / (1.0 - pi) * u * (ctx->iv.xval(i) - m);
        } else {
          out.segment(o.at("mu3"), k) = u * m - mu3v;
        }
        break;
      }

      case IvEstimator::REG:
      case IvEstimator::LIK:
      case IvEstimator::AST: {
        const Vec alpha = par.segment(o.at("alpha"), ctx->p_or());
        const double m = ctx->m_hat(i, alpha);
        if (t == 0)
          out.segment(o.at("alpha"), ctx->p_or()) =
              ctx->or_vals.row(i).transpose() * (ctx->iv.xval(i) - m);

        const Vec psi = ctx->psi_row(i, alpha, ctx->psi_shifted ? &mu3v : nullptr);
        const Vec a = ctx->aug_row(i, psi);
        const int pa = ctx->p_f() + ctx->kp();
        const Vec ga = par.segment(o.at("gamma_aug"), pa);
        const double pi = expit(a.dot(ga));
        out.segment(o.at("gamma_aug"), pa) = (t - pi) * a;

        if (mth == IvEstimator::REG) {
          const int dh = ctx->dim_h();
          const Vec h = ctx->h_row(pi, psi, a);
          const Vec xi = (t == 0 ? 1.0 / (1.0 - pi) : -1.0 / pi) * h;
          const Vec zeta = t == 0 ? (h / ((1.0 - pi) * pi)).eval() : Vec::Zero(dh).eval();
          Vec eta = Vec::Zero(k);
          double rho = 0.0;
          if (t == 0) {
            const double w = pi / (1.0 - pi);
            eta = w * u * ctx->iv.xval(i);
            rho = w;
          }
          const Vec kd = par.segment(o.at("kappa_den"), dh);
          for (int c = 0; c < k; ++c) {
            const Vec bc = par.segment(o.at("beta_t") + c * dh, dh);
            out.segment(o.at("beta_t") + c * dh, dh) = xi * (eta[c] - zeta.dot(bc));
            out[o.at("mu3") + c] = (eta[c] - bc.dot(xi)) - (rho - kd.dot(xi)) * mu3v[c];
          }
          out.segment(o.at("kappa_den"), dh) = xi * (rho - zeta.dot(kd));
        } else if (mth == IvEstimator::LIK) {
          const int dh = ctx->dim_h();
          const int dv = ctx->dim_v();
          const Vec h = ctx->h_row(pi, psi, a);
          const Vec v = ctx->v_row(pi, psi);
          const Vec lam = par.segment(o.at("lambda"), dh);
          const Vec lam1 = par.segment(o.at("lambda1"), dv);
          const double omega_hat = pi - h.dot(lam);
          double omega_tilde = pi - h.head(dv).dot(lam1);
          if (dh > dv) omega_tilde -= h.tail(dh - dv).dot(lam.tail(dh - dv));
          out.segment(o.at("lambda"), dh) =
              h * (t == 0 ? 1.0 / (1.0 - omega_hat) : -1.0 / omega_hat);
          out.segment(o.at("lambda1"), dv) =
              (t == 0 ? 1.0 / (1.0 - omega_tilde) : 0.0) * v - v;
          if (t == 0)
            out.segment(o.at("mu3"), k) =
                pi / (1.0 - omega_tilde) * (u * ctx->iv.xval(i) - mu3v);
        } else {  // AST
          const Vec ch = par.segment(o.at("chi"), ctx->kp());
          const double w = 1.0 / (1.0 + std::exp(a.dot(ga) + psi.dot(ch)));
          out.segment(o.at("chi"), ctx->kp()) =
              ((t == 0 ? 1.0 / w : 0.0) - 1.0) * pi * psi;
          if (t == 0)
            out.segment(o.at("mu3"), k) = pi / w * (u * ctx->iv.xval(i) - mu3v);
        }
        break;
      }

      default:
        break;
    }

    // deterministic beta link rows: M(mu3, mu2) beta = mu1
    const Vec bet = par.segment(o.at("beta"), k);
    Vec link = mu3v * bet[0] - par.segment(o.at("mu1"), k);
    for (int j = 1; j < k; ++j)
      link += par.segment(o.at("mu2") + (j - 1) * k, k) * bet[j];
    out.segment(o.at("beta"), k) = link;
  };

  return st;
}

}  // namespace tsdc
