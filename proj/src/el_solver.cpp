#include "tsdc/el_solver.hpp"

#include <cmath>

namespace tsdc {

namespace {

// omega(lambda) = pi - H lambda for the active block(s)
Vec omega_of(const CalibrationPieces& pc, const Mat& H, const Vec& lambda, const Vec& offset) {
  Vec om = pc.pi - H * lambda;
  if (offset.size()) om -= offset;
  return om;
}

bool feasible_stage1(const Vec& om, const std::vector<int>& t, double margin) {
  for (int i = 0; i < om.size(); ++i) {
    if (t[i] == 1 && om[i] < margin) return false;
    if (t[i] == 0 && om[i] > 1.0 - margin) return false;
  }
  return true;
}

bool feasible_aux(const Vec& om, const std::vector<int>& t, double margin) {
  for (int i = 0; i < om.size(); ++i)
    if (t[i] == 0 && om[i] > 1.0 - margin) return false;
  return true;
}

double stage1_objective(const Vec& om, const std::vector<int>& t) {
  double s = 0.0;
  for (int i = 0; i < om.size(); ++i)
    s += t[i] == 1 ? std::log(om[i]) : std::log1p(-om[i]);
  return s / static_cast<double>(om.size());
}

}  // namespace

ElState maximize_l(const CalibrationPieces& pc, const std::vector<int>& t,
                   const ElOptions& opts) {
  const int n = static_cast<int>(pc.pi.size());
  const int d = pc.dim_h();
  const Mat& H = pc.h;

  ElState st;
  st.lambda = Vec::Zero(d);
  Vec om = pc.pi;
  double obj = stage1_objective(om, t);

  Vec grad(d);
  for (st.iterations_l = 0; st.iterations_l < opts.max_iter; ++st.iterations_l) {
    // gradient of the mean log likelihood in lambda; its negative is the
    // usual (T - omega) / {omega(1-omega)} weighted average of h
    Vec gi(n);
    for (int i = 0; i < n; ++i)
      gi[i] = t[i] == 1 ? -1.0 / om[i] : 1.0 / (1.0 - om[i]);
    grad = H.transpose() * gi / n;
    st.score_l = linf(grad);
    if (st.score_l < opts.tol) break;

    Vec wi(n);
    for (int i = 0; i < n; ++i) {
      const double a = t[i] == 1 ? 1.0 / (om[i] * om[i])
                                 : 1.0 / ((1.0 - om[i]) * (1.0 - om[i]));
      wi[i] = a;
    }
    const Mat hess = -(H.transpose() * wi.asDiagonal() * H) / n;  // negative definite
    Eigen::LDLT<Mat> ldlt(hess);
    if (ldlt.info() != Eigen::Success)
      throw ElError("empirical likelihood stage 1: singular Hessian");
    const Vec step = -ldlt.solve(grad);

    double s = 1.0;
    int bt = 0;
    for (;;) {
      const Vec cand = st.lambda + s * step;
      const Vec com = pc.pi - H * cand;
      if (feasible_stage1(com, t, opts.margin)) {
        const double cobj = stage1_objective(com, t);
        if (cobj >= obj - 1e-14) {
          st.lambda = cand;
          om = com;
          obj = cobj;
          break;
        }
      }
      if (++bt > opts.max_backtracks)
        throw ElError("empirical likelihood stage 1: no feasible ascent step");
      s *= 0.5;
    }
  }
  if (st.score_l >= opts.tol)
    throw ElError("empirical likelihood stage 1 did not converge (score " +
                  std::to_string(st.score_l) + ")");

  st.omega_hat = om;
  st.p_hat.resize(n);
  for (int i = 0; i < n; ++i) {
    const double denom = 1.0 + pc.xi.row(i).dot(st.lambda);
    st.p_hat[i] = 1.0 / (n * denom);
  }
  return st;
}

void maximize_kappa(const CalibrationPieces& pc, const std::vector<int>& t,
                    ElState& st, const ElOptions& opts) {
  const int n = static_cast<int>(pc.pi.size());
  const int d1 = pc.dim_h1;
  const Mat H1 = pc.h.leftCols(d1);

  // contribution of the fixed h2 block to omega
  Vec offset = Vec::Zero(n);
  if (pc.dim_h() > d1)
    offset = pc.h.rightCols(pc.dim_h() - d1) * st.lambda.tail(pc.dim_h() - d1);

  Vec lambda1 = st.lambda.head(d1);  // warm start at the stage-1 block
  Vec om = omega_of(pc, H1, lambda1, offset);
  if (!feasible_aux(om, t, opts.margin))
    throw ElError("empirical likelihood stage 2: warm start infeasible");

  const Vec vbar = pc.v.colwise().mean();
  auto objective = [&](const Vec& o) {
    // kappa(lambda1) up to a constant: mean{(1-T) log(1-omega)/pi} - lambda1'vbar
    double s = 0.0;
    for (int i = 0; i < n; ++i)
      if (t[i] == 0) s += std::log1p(-o[i]) / pc.pi[i];
    return s / n;
  };
  double obj = objective(om) - lambda1.dot(vbar);

  Vec grad(d1);
  for (st.iterations_kappa = 0; st.iterations_kappa < opts.max_iter; ++st.iterations_kappa) {
    Vec gi = Vec::Zero(n);
    for (int i = 0; i < n; ++i)
      if (t[i] == 0) gi[i] = 1.0 / (1.0 - om[i]);
    grad = pc.v.transpose() * gi / n - vbar;
    st.score_kappa = linf(grad);
    if (st.score_kappa < opts.tol) break;

    Vec wi = Vec::Zero(n);
    for (int i = 0; i < n; ++i)
      if (t[i] == 0)
        wi[i] = 1.0 / (pc.pi[i] * (1.0 - om[i]) * (1.0 - om[i]));
    const Mat hess = -(H1.transpose() * wi.asDiagonal() * H1) / n;
    Eigen::LDLT<Mat> ldlt(hess);
    if (ldlt.info() != Eigen::Success)
      throw ElError("empirical likelihood stage 2: singular Hessian");
    const Vec step = -ldlt.solve(grad);

    double s = 1.0;
    int bt = 0;
    for (;;) {
      const Vec cand = lambda1 + s * step;
      const Vec com = omega_of(pc, H1, cand, offset);
      if (feasible_aux(com, t, opts.margin)) {
        const double cobj = objective(com) - cand.dot(vbar);
        if (cobj >= obj - 1e-14) {
          lambda1 = cand;
          om = com;
          obj = cobj;
          break;
        }
      }
      if (++bt > opts.max_backtracks)
        throw ElError("empirical likelihood stage 2: no feasible ascent step");
      s *= 0.5;
    }
  }
  if (st.score_kappa >= opts.tol)
    throw ElError("empirical likelihood stage 2 did not converge (score " +
                  std::to_string(st.score_kappa) + ")");

  st.lambda1 = lambda1;
  st.omega_tilde = om;
}

ElState solve_el(const CalibrationPieces& pc, const std::vector<int>& t,
                 const ElOptions& opts) {
  ElState st = maximize_l(pc, t, opts);
  maximize_kappa(pc, t, st, opts);
  return st;
}

Vec el_weights(const CalibrationPieces& pc, const std::vector<int>& t, const ElState& st) {
  const int n = static_cast<int>(pc.pi.size());
  if (st.omega_tilde.size() != n)
    throw ElError("el_weights: stage 2 has not been solved");
  Vec w = Vec::Zero(n);
  for (int i = 0; i < n; ++i)
    if (t[i] == 0) w[i] = 1.0 / (n * (1.0 - st.omega_tilde[i]));
  return w;
}

}  // namespace tsdc
