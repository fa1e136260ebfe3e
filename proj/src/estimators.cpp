#include "tsdc/estimators.hpp"

#include <cmath>
#include <limits>

namespace tsdc {

Vec PsiHat::value(int i, const Vec& theta) const {
  if (hook) return hook(u->row(i).transpose(), theta);
  return mm->phi(m_hat.row(i).transpose(), u->row(i).transpose(), theta);
}

Mat PsiHat::eval_all(const Vec& theta) const {
  const int nn = static_cast<int>(u->rows());
  Mat out(nn, mm->k);
  for (int i = 0; i < nn; ++i) out.row(i) = value(i, theta).transpose();
  return out;
}

PsiHat make_psi_hat(const MomentModel& mm, const Mat& u, const FittedOr& orf) {
  PsiHat psi;
  psi.mm = &mm;
  psi.u = &u;
  psi.m_hat = orf.m_hat;
  return psi;
}

std::string method_name(Method m) {
  switch (m) {
    case Method::OR: return "or";
    case Method::IPW: return "ipw";
    case Method::AIPW_NP: return "aipw";
    case Method::AIPW_SP: return "aipw_sp";
    case Method::REG: return "reg";
    case Method::LIK: return "lik";
    case Method::AST: return "ast";
  }
  return "?";
}

std::optional<Method> method_from_name(const std::string& name) {
  if (name == "or") return Method::OR;
  if (name == "ipw") return Method::IPW;
  if (name == "aipw" || name == "aipw_np") return Method::AIPW_NP;
  if (name == "aipw_sp") return Method::AIPW_SP;
  if (name == "reg") return Method::REG;
  if (name == "lik") return Method::LIK;
  if (name == "ast") return Method::AST;
  return std::nullopt;
}

namespace {

struct EqSystem {
  std::function<Vec(const Vec&)> value;
  std::function<Mat(const Vec&)> jac;  // empty -> finite differences
};

Mat fd_jac(const std::function<Vec(const Vec&)>& G, const Vec& theta, int k) {
  Mat J(k, k);
  for (int j = 0; j < k; ++j) {
    const double h = 1e-6 * (1.0 + std::abs(theta[j]));
    Vec tp = theta, tm = theta;
    tp[j] += h;
    tm[j] -= h;
    J.col(j) = (G(tp) - G(tm)) / (2.0 * h);
  }
  return J;
}

Vec newton_root(const EqSystem& sys, Vec theta, const SolveOptions& opts,
                const std::string& label, int* iters, double* resid) {
  Vec g = sys.value(theta);
  double gn = linf(g);
  const int k = static_cast<int>(theta.size());
  int it = 0;
  for (; it < opts.max_iter && gn >= opts.tol; ++it) {
    const Mat J = sys.jac ? sys.jac(theta) : fd_jac(sys.value, theta, k);
    Eigen::FullPivLU<Mat> lu(J);
    if (!lu.isInvertible())
      throw FitError(label + ": singular Jacobian in the moment solve");
    const Vec step = lu.solve(-g);

    double s = 1.0;
    int hb = 0;
    for (;;) {
      const Vec cand = theta + s * step;
      const Vec gc = sys.value(cand);
      const double gcn = linf(gc);
      if (gcn < gn || gcn < opts.tol) {
        theta = cand;
        g = gc;
        gn = gcn;
        break;
      }
      if (++hb > opts.max_halvings)
        throw FitError(label + ": moment solve line search stalled");
      s *= 0.5;
    }
  }
  if (gn >= opts.tol)
    throw FitError(label + ": moment solve did not converge in " +
                   std::to_string(opts.max_iter) + " iterations");
  if (iters) *iters = it;
  if (resid) *resid = gn;
  return theta;
}

Vec phi_at(const MergedSample& s, const MomentModel& mm, int i, const Vec& theta) {
  return mm.phi(s.x.row(i).transpose(), s.u.row(i).transpose(), theta);
}

Mat phi_jac_at(const MergedSample& s, const MomentModel& mm, int i, const Vec& theta) {
  return mm.jac(s.x.row(i).transpose(), s.u.row(i).transpose(), theta);
}

// Auxiliary-row coefficients c_i with G(theta) = sum_i c_i Phi_i(theta),
// optionally flipped into the split form P(theta) - G(theta).
EqSystem weighted_system(const MergedSample& s, const MomentModel& mm, const Vec& c,
                         const PrimaryTerm* primary) {
  EqSystem sys;
  const int n = s.n();
  sys.value = [&s, &mm, c, primary, n](const Vec& theta) {
    Vec g = Vec::Zero(mm.k);
    for (int i = 0; i < n; ++i)
      if (c[i] != 0.0) g += c[i] * phi_at(s, mm, i, theta);
    if (primary) g = primary->value(theta) - g;
    return g;
  };
  if (mm.jac && (!primary || primary->jac)) {
    sys.jac = [&s, &mm, c, primary, n](const Vec& theta) {
      Mat J = Mat::Zero(mm.k, mm.k);
      for (int i = 0; i < n; ++i)
        if (c[i] != 0.0) J += c[i] * phi_jac_at(s, mm, i, theta);
      if (primary) J = primary->jac(theta) - J;
      return J;
    };
  }
  return sys;
}

// Inverse-propensity coefficients pi/(n(1-pi)) on auxiliary rows, with the
// near-unit floor applied per policy.
Vec ipw_coefficients(const MergedSample& s, const Vec& pi_in, const WeightPolicy& policy,
                     std::map<std::string, double>& diag) {
  const int n = s.n();
  Vec pi = pi_in;
  int clipped = 0;
  std::string bad;
  for (int i = 0; i < n; ++i) {
    if (s.t[i] == 0 && 1.0 - pi[i] < policy.floor) {
      if (policy.clip) {
        pi[i] = 1.0 - policy.floor;
        ++clipped;
      } else {
        if (!bad.empty()) bad += ", ";
        bad += std::to_string(i);
      }
    }
  }
  if (!bad.empty())
    throw FitError("propensity too close to 1 on auxiliary rows [" + bad +
                   "]; rerun with weight clipping to proceed");
  Vec c = Vec::Zero(n);
  double wmax = 0.0;
  for (int i = 0; i < n; ++i)
    if (s.t[i] == 0) {
      const double w = pi[i] / (1.0 - pi[i]);
      c[i] = w / n;
      wmax = std::max(wmax, w);
    }
  diag["clipped"] = clipped;
  diag["max_ipw_weight"] = wmax;
  return c;
}

void stash_pi_range(const Vec& pi, std::map<std::string, double>& diag) {
  diag["min_pi"] = pi.minCoeff();
  diag["max_pi"] = pi.maxCoeff();
}

}  // namespace

EstimateResult solve_or(const MergedSample& s, const MomentModel& mm, const PsiHat& psi,
                        const SolveOptions& opts, const PrimaryTerm* primary) {
  const int n = s.n();
  EstimateResult res;
  res.estimator = "or";

  EqSystem sys;
  sys.value = [&s, &psi, n, primary](const Vec& theta) {
    Vec g = Vec::Zero(psi.mm->k);
    for (int i = 0; i < n; ++i)
      if (s.t[i] == 1) g += psi.value(i, theta);
    g /= n;
    if (primary) g = primary->value(theta) - g;
    return g;
  };
  if (psi.mm->jac && !psi.hook && (!primary || primary->jac)) {
    sys.jac = [&s, &psi, n, primary](const Vec& theta) {
      Mat J = Mat::Zero(psi.mm->k, psi.mm->k);
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 1)
          J += psi.mm->jac(psi.m_hat.row(i).transpose(), psi.u->row(i).transpose(), theta);
      J /= n;
      if (primary) J = primary->jac(theta) - J;
      return J;
    };
  }

  Vec theta0 = opts.theta0.size() ? opts.theta0 : Vec::Zero(mm.k);
  res.theta = newton_root(sys, theta0, opts, "or", &res.iterations, &res.residual);
  res.converged = true;
  return res;
}

EstimateResult solve_ipw(const MergedSample& s, const MomentModel& mm, const FittedPs& ps,
                         const SolveOptions& opts, const PrimaryTerm* primary) {
  EstimateResult res;
  res.estimator = "ipw";
  stash_pi_range(ps.pi, res.diagnostics);
  const Vec c = ipw_coefficients(s, ps.pi, opts.weights, res.diagnostics);
  const EqSystem sys = weighted_system(s, mm, c, primary);
  Vec theta0 = opts.theta0.size() ? opts.theta0 : Vec::Zero(mm.k);
  res.theta = newton_root(sys, theta0, opts, "ipw", &res.iterations, &res.residual);
  res.converged = true;
  return res;
}

EstimateResult solve_aipw(const MergedSample& s, const MomentModel& mm, const FittedPs& ps,
                          const PsiHat& psi, AipwVariant variant, const SolveOptions& opts,
                          const PrimaryTerm* primary) {
  const int n = s.n();
  EstimateResult res;
  res.estimator = variant == AipwVariant::NP ? "aipw" : "aipw_sp";
  stash_pi_range(ps.pi, res.diagnostics);
  const Vec c = ipw_coefficients(s, ps.pi, opts.weights, res.diagnostics);
  const bool sp = variant == AipwVariant::SP;

  EqSystem sys;
  sys.value = [&s, &mm, &psi, &ps, c, n, sp, primary](const Vec& theta) {
    Vec g = Vec::Zero(mm.k);
    for (int i = 0; i < n; ++i) {
      const Vec psi_i = psi.value(i, theta);
      if (s.t[i] == 0)
        g += c[i] * (phi_at(s, mm, i, theta) - psi_i);
      else
        g += psi_i / n;
      if (sp) g += ps.pi[i] * psi_i / n;
    }
    if (primary) g = primary->value(theta) - g;
    return g;
  };
  if (mm.jac && !psi.hook && (!primary || primary->jac)) {
    sys.jac = [&s, &mm, &psi, &ps, c, n, sp, primary](const Vec& theta) {
      Mat J = Mat::Zero(mm.k, mm.k);
      for (int i = 0; i < n; ++i) {
        const Mat psij =
            mm.jac(psi.m_hat.row(i).transpose(), psi.u->row(i).transpose(), theta);
        if (s.t[i] == 0)
          J += c[i] * (phi_jac_at(s, mm, i, theta) - psij);
        else
          J += psij / n;
        if (sp) J += ps.pi[i] * psij / n;
      }
      if (primary) J = primary->jac(theta) - J;
      return J;
    };
  }

  Vec theta0 = opts.theta0.size() ? opts.theta0 : Vec::Zero(mm.k);
  res.theta = newton_root(sys, theta0, opts, res.estimator, &res.iterations, &res.residual);
  res.converged = true;
  return res;
}

namespace {

enum class CalibMode { REG, LIK, AST };

// One pass of the stage that turns a fitted augmented propensity model into
// auxiliary-row coefficients c_i for the theta equation.
struct StageOut {
  Vec c;
  std::map<std::string, double> diag;
  std::map<std::string, Vec> extras;
};

StageOut reg_stage(const MergedSample& s, const FittedAugPs& aug, const SolveOptions& opts) {
  StageOut out;
  const int n = s.n();
  const CalibrationPieces pc = make_pieces(aug, s.t, opts.include_h2, opts.weights);
  out.diag["clipped"] = pc.clipped;

  const Mat zx = pc.zeta.transpose() * pc.xi / n;
  const Vec xibar = pc.xi.colwise().mean();
  Eigen::FullPivLU<Mat> lu(zx);
  if (!lu.isInvertible())
    throw FitError("reg: singular calibration cross-moment matrix");
  const Vec kappa = lu.solve(xibar);
  out.extras["kappa"] = kappa;

  out.c = Vec::Zero(n);
  Vec w = Vec::Zero(n);
  for (int i = 0; i < n; ++i)
    if (s.t[i] == 0) {
      const double pi = pc.pi[i];
      const double q = 1.0 - pi;
      w[i] = (1.0 - pc.h.row(i).dot(kappa) / q) / (n * q);
      out.c[i] = w[i] * pi;
    }
  // calibration identity: auxiliary weights reproduce the v targets on average
  Vec gap = -pc.v.colwise().mean().transpose();
  for (int i = 0; i < n; ++i)
    if (s.t[i] == 0) gap += w[i] * pc.v.row(i).transpose();
  out.diag["calibration_gap"] = linf(gap);
  out.diag["min_aux_weight"] = [&] {
    double m = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i)
      if (s.t[i] == 0) m = std::min(m, w[i]);
    return m;
  }();
  return out;
}

StageOut lik_stage(const MergedSample& s, const FittedAugPs& aug, const SolveOptions& opts) {
  StageOut out;
  const int n = s.n();
  const CalibrationPieces pc = make_pieces(aug, s.t, opts.include_h2, opts.weights);
  out.diag["clipped"] = pc.clipped;

  const ElState el = solve_el(pc, s.t, opts.el);
  out.extras["lambda"] = el.lambda;
  out.extras["lambda1"] = el.lambda1;
  out.diag["el_iterations_l"] = el.iterations_l;
  out.diag["el_iterations_kappa"] = el.iterations_kappa;

  const Vec w = el_weights(pc, s.t, el);
  out.c = w.cwiseProduct(pc.pi);

  double wmin = std::numeric_limits<double>::infinity();
  Vec gap = -pc.v.colwise().mean().transpose();
  for (int i = 0; i < n; ++i)
    if (s.t[i] == 0) {
      wmin = std::min(wmin, w[i]);
      gap += w[i] * pc.v.row(i).transpose();
    }
  out.diag["min_aux_weight"] = wmin;
  out.diag["calibration_gap"] = linf(gap);
  return out;
}

StageOut ast_stage(const MergedSample& s, const FittedAugPs& aug, const SolveOptions& opts,
                   Vec& chi_warm) {
  StageOut out;
  const int n = s.n();
  const int kp = aug.k_psi();
  const Vec eta = aug.fit.design.values * aug.fit.gamma;
  const Mat& psi = aug.psi_kept;
  const Vec& pi = aug.fit.pi;

  Vec chi = chi_warm.size() == kp ? chi_warm : Vec::Zero(kp);
  auto wtilde = [&](const Vec& ch) {
    Vec w(n);
    for (int i = 0; i < n; ++i) {
      const double e = eta[i] + (kp ? psi.row(i).dot(ch) : 0.0);
      w[i] = 1.0 / (1.0 + std::exp(e));  // 1 - expit(e)
    }
    return w;
  };
  auto feasible = [&](const Vec& w) {
    for (int i = 0; i < n; ++i)
      if (s.t[i] == 0 && w[i] < 1e-12) return false;
    return true;
  };

  Vec w = wtilde(chi);
  if (kp > 0) {
    const Vec target = [&] {
      Vec tgt = Vec::Zero(kp);
      for (int i = 0; i < n; ++i) tgt += pi[i] * psi.row(i).transpose();
      return (tgt / n).eval();
    }();
    auto gval = [&](const Vec& wv) {
      Vec g = -target;
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 0) g += pi[i] / wv[i] * psi.row(i).transpose() / n;
      return g;
    };
    Vec g = gval(w);
    double gn = linf(g);
    int it = 0;
    for (; it < opts.max_iter && gn >= opts.tol; ++it) {
      Mat J = Mat::Zero(kp, kp);
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 0) {
          const double pichi = 1.0 - w[i];
          J += (pi[i] * pichi / w[i]) * (psi.row(i).transpose() * psi.row(i)) / n;
        }
      Eigen::FullPivLU<Mat> lu(J);
      if (!lu.isInvertible()) throw FitError("ast: singular Jacobian in the tilt solve");
      const Vec step = lu.solve(-g);
      double sfac = 1.0;
      int hb = 0;
      for (;;) {
        const Vec cand = chi + sfac * step;
        const Vec cw = wtilde(cand);
        if (feasible(cw)) {
          const Vec cg = gval(cw);
          const double cgn = linf(cg);
          if (cgn < gn || cgn < opts.tol) {
            chi = cand;
            w = cw;
            g = cg;
            gn = cgn;
            break;
          }
        }
        if (++hb > opts.max_halvings)
          throw FitError("ast: tilt solve line search stalled");
        sfac *= 0.5;
      }
    }
    if (gn >= opts.tol) throw FitError("ast: tilt solve did not converge");
    out.diag["chi_residual"] = gn;
  }
  chi_warm = chi;
  out.extras["chi"] = chi;

  int clipped = 0;
  std::string bad;
  for (int i = 0; i < n; ++i)
    if (s.t[i] == 0 && w[i] < opts.weights.floor) {
      if (opts.weights.clip) {
        w[i] = opts.weights.floor;
        ++clipped;
      } else {
        if (!bad.empty()) bad += ", ";
        bad += std::to_string(i);
      }
    }
  if (!bad.empty())
    throw FitError("ast: tilted weight too small on auxiliary rows [" + bad +
                   "]; rerun with weight clipping to proceed");
  out.diag["clipped"] = clipped;

  out.c = Vec::Zero(n);
  for (int i = 0; i < n; ++i)
    if (s.t[i] == 0) out.c[i] = pi[i] / (n * w[i]);
  return out;
}

EstimateResult alternating_solve(CalibMode mode, const MergedSample& s, const MomentModel& mm,
                                 const DesignMatrix& f, const PsiHat& psi,
                                 const SolveOptions& opts, const PrimaryTerm* primary) {
  EstimateResult res;
  res.estimator = mode == CalibMode::REG ? "reg" : mode == CalibMode::LIK ? "lik" : "ast";

  Vec theta = opts.theta0.size() ? opts.theta0 : Vec::Zero(mm.k);
  Vec chi_warm;
  double prev_move = std::numeric_limits<double>::infinity();
  bool converged = false;

  for (int outer = 1; outer <= opts.max_outer; ++outer) {
    res.outer_iterations = outer;
    const Mat psi_cols = psi.eval_all(theta);
    const FittedAugPs aug =
        fit_augmented_ps(f, psi_cols, s.t, opts.logistic, opts.prune_tol);

    StageOut stage;
    switch (mode) {
      case CalibMode::REG: stage = reg_stage(s, aug, opts); break;
      case CalibMode::LIK: stage = lik_stage(s, aug, opts); break;
      case CalibMode::AST: stage = ast_stage(s, aug, opts, chi_warm); break;
    }

    const EqSystem sys = weighted_system(s, mm, stage.c, primary);
    const Vec theta_new =
        newton_root(sys, theta, opts, res.estimator, &res.iterations, &res.residual);

    const double move = linf(theta_new - theta);
    res.diagnostics = std::move(stage.diag);
    res.extras = std::move(stage.extras);
    res.diagnostics["aug_score_f"] = aug.score_f;
    res.diagnostics["aug_score_psi"] = aug.score_psi;
    res.diagnostics["kept_psi"] = aug.k_psi();

    if (move < opts.tol) {
      theta = theta_new;
      converged = true;
      break;
    }
    // damped fixed point: halve the move whenever it stopped contracting
    theta = move > prev_move ? (0.5 * (theta_new + theta)).eval() : theta_new;
    prev_move = move;
  }
  if (!converged)
    throw FitError(res.estimator + ": alternating refit did not converge in " +
                   std::to_string(opts.max_outer) + " passes");
  res.theta = theta;
  res.converged = true;
  return res;
}

}  // namespace

EstimateResult solve_calibrated_reg(const MergedSample& s, const MomentModel& mm,
                                    const DesignMatrix& f, const PsiHat& psi,
                                    const SolveOptions& opts, const PrimaryTerm* primary) {
  return alternating_solve(CalibMode::REG, s, mm, f, psi, opts, primary);
}

EstimateResult solve_calibrated_lik(const MergedSample& s, const MomentModel& mm,
                                    const DesignMatrix& f, const PsiHat& psi,
                                    const SolveOptions& opts, const PrimaryTerm* primary) {
  return alternating_solve(CalibMode::LIK, s, mm, f, psi, opts, primary);
}

EstimateResult solve_ast(const MergedSample& s, const MomentModel& mm, const DesignMatrix& f,
                         const PsiHat& psi, const SolveOptions& opts,
                         const PrimaryTerm* primary) {
  return alternating_solve(CalibMode::AST, s, mm, f, psi, opts, primary);
}

EstimateResult solve_setting2(const MergedSample& s, const MomentPair& pair, Method method,
                              const DesignMatrix& f, const PsiHat& psi, const FittedPs* ps,
                              const SolveOptions& opts) {
  const int n = s.n();
  if (!s.y_observed()) throw DataError("split restriction requires y on primary rows");

  PrimaryTerm primary;
  primary.value = [&s, &pair, n](const Vec& theta) {
    Vec g = Vec::Zero(pair.phi1.k);
    for (int i = 0; i < n; ++i)
      if (s.t[i] == 1)
        g += pair.phi1.phi(s.y.row(i).transpose(), s.u.row(i).transpose(), theta);
    return (g / n).eval();
  };
  if (pair.phi1.jac) {
    primary.jac = [&s, &pair, n](const Vec& theta) {
      Mat J = Mat::Zero(pair.phi1.k, pair.phi1.k);
      for (int i = 0; i < n; ++i)
        if (s.t[i] == 1)
          J += pair.phi1.jac(s.y.row(i).transpose(), s.u.row(i).transpose(), theta);
      return (J / n).eval();
    };
  }

  switch (method) {
    case Method::OR:
      return solve_or(s, pair.phi0, psi, opts, &primary);
    case Method::IPW:
      if (!ps) throw DataError("ipw requires a fitted propensity model");
      return solve_ipw(s, pair.phi0, *ps, opts, &primary);
    case Method::AIPW_NP:
    case Method::AIPW_SP:
      if (!ps) throw DataError("aipw requires a fitted propensity model");
      return solve_aipw(s, pair.phi0, *ps, psi,
                        method == Method::AIPW_NP ? AipwVariant::NP : AipwVariant::SP, opts,
                        &primary);
    case Method::REG:
      return solve_calibrated_reg(s, pair.phi0, f, psi, opts, &primary);
    case Method::LIK:
      return solve_calibrated_lik(s, pair.phi0, f, psi, opts, &primary);
    case Method::AST:
      return solve_ast(s, pair.phi0, f, psi, opts, &primary);
  }
  throw DataError("unknown method");
}

}  // namespace tsdc
