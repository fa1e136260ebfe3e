#include <doctest.h>

#include "oracles.hpp"
#include "tsdc/el_solver.hpp"
#include "tsdc/simulation.hpp"

using namespace tsdc;

namespace {

struct Setup {
  MergedSample s;
  CalibrationPieces pieces;
};

Setup make_setup(int n1, int n0, std::uint64_t seed, bool include_h2 = false) {
  Setup out;
  DgpConfig cfg;
  cfg.n1 = n1;
  cfg.n0 = n0;
  out.s = generate(cfg, seed, 0);

  const DesignMatrix f =
      build_design(out.s.u, BasisSpec::intercept_and_columns(out.s.u_names));
  const FittedOr orf = fit_or_linear(f, out.s);
  Mat psi(out.s.n(), 3);
  for (int i = 0; i < out.s.n(); ++i)
    psi.row(i) = (orf.m_hat(i, 0) * out.s.u.row(i).transpose()).transpose();
  const FittedAugPs aug = fit_augmented_ps(f, psi, out.s.t);
  out.pieces = make_pieces(aug, out.s.t, include_h2);
  return out;
}

// stage-1 objective rebuilt from scratch; -inf outside the feasible region
double stage1_objective(const CalibrationPieces& pc, const std::vector<int>& t,
                        const Vec& lambda) {
  const int n = static_cast<int>(t.size());
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double omega = pc.pi[i] - pc.h.row(i).dot(lambda);
    if (t[i] == 1) {
      if (omega <= 0.0) return -std::numeric_limits<double>::infinity();
      acc += std::log(omega);
    } else {
      if (omega >= 1.0) return -std::numeric_limits<double>::infinity();
      acc += std::log(1.0 - omega);
    }
  }
  return acc / n;
}

}  // namespace

TEST_SUITE("el_solver") {

TEST_CASE("stage-1 gradient vanishes and matches a first-order oracle") {
  const Setup su = make_setup(70, 50, 31);
  const ElState el = maximize_l(su.pieces, su.s.t);
  const int n = su.s.n();

  // gradient of the rebuilt objective at lambda_hat
  Vec grad = Vec::Zero(su.pieces.dim_h());
  for (int i = 0; i < n; ++i) {
    const double w =
        su.s.t[i] == 0 ? 1.0 / (1.0 - el.omega_hat[i]) : -1.0 / el.omega_hat[i];
    grad += w * su.pieces.h.row(i).transpose();
  }
  grad /= n;
  CHECK(grad.lpNorm<Eigen::Infinity>() < 1e-8);

  const Vec lambda_oracle = oracle::gradient_ascent(
      [&](const Vec& l) { return stage1_objective(su.pieces, su.s.t, l); },
      Vec::Zero(su.pieces.dim_h()));
  CHECK((el.lambda - lambda_oracle).lpNorm<Eigen::Infinity>() < 1e-5);
}

TEST_CASE("stage-2 first-order condition calibrates the v targets") {
  const Setup su = make_setup(120, 80, 7);
  const ElState el = solve_el(su.pieces, su.s.t);
  const int n = su.s.n();

  Vec gap = -su.pieces.v.colwise().mean().transpose();
  for (int i = 0; i < n; ++i)
    if (su.s.t[i] == 0)
      gap += su.pieces.v.row(i).transpose() / ((1.0 - el.omega_tilde[i]) * n);
  CHECK(gap.lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("implied masses match the per-group closed form") {
  const Setup su = make_setup(60, 45, 19);
  const ElState el = maximize_l(su.pieces, su.s.t);
  const int n = su.s.n();

  for (int i = 0; i < n; ++i) {
    const double direct = 1.0 / (n * (1.0 + su.pieces.xi.row(i).dot(el.lambda)));
    CHECK(el.p_hat[i] == doctest::Approx(direct).epsilon(1e-12));
    const double grouped = su.s.t[i] == 1
                               ? su.pieces.pi[i] / el.omega_hat[i] / n
                               : (1.0 - su.pieces.pi[i]) / (1.0 - el.omega_hat[i]) / n;
    CHECK(std::abs(el.p_hat[i] - grouped) < 1e-10);
  }
  // masses are a probability vector
  double total = el.p_hat.sum();
  CHECK(std::abs(total - 1.0) < 1e-8);
}

TEST_CASE("profile likelihood differs from the binomial one by a constant") {
  const Setup su = make_setup(50, 40, 23);
  const std::vector<int>& t = su.s.t;
  const int n = su.s.n();

  // constant predicted by the identity
  double expect = 0.0;
  for (int i = 0; i < n; ++i)
    expect -= t[i] == 1 ? std::log(su.pieces.pi[i]) : std::log(1.0 - su.pieces.pi[i]);
  expect /= n;

  RngStream rng(5);
  int tried = 0;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  while (tried < 20) {
    Vec lambda(su.pieces.dim_h());
    for (int j = 0; j < lambda.size(); ++j) lambda[j] = 0.02 * rng.next_normal();
    const double l = stage1_objective(su.pieces, t, lambda);
    if (!std::isfinite(l)) continue;
    ++tried;
    double lel = 0.0;
    for (int i = 0; i < n; ++i) lel += std::log1p(su.pieces.xi.row(i).dot(lambda));
    lel /= n;
    const double diff = lel - l;  // should equal `expect` for every lambda
    lo = std::min(lo, diff);
    hi = std::max(hi, diff);
  }
  CHECK(hi - lo < 1e-10);
  CHECK(std::abs(0.5 * (hi + lo) - expect) < 1e-10);
}

TEST_CASE("stage-2 weights are nonnegative and reproduce the pi total") {
  const Setup su = make_setup(140, 90, 41);
  const ElState el = solve_el(su.pieces, su.s.t);
  const Vec w = el_weights(su.pieces, su.s.t, el);
  const int n = su.s.n();

  double pi_total = 0.0, target = 0.0;
  for (int i = 0; i < n; ++i) {
    if (su.s.t[i] == 0) {
      CHECK(w[i] >= 0.0);
      pi_total += w[i] * su.pieces.pi[i];
    } else {
      CHECK(w[i] == 0.0);
    }
    target += su.pieces.pi[i] / n;
  }
  CHECK(std::abs(pi_total - target) < 1e-8);
}

TEST_CASE("feasibility holds at the accepted optimum") {
  const Setup su = make_setup(90, 70, 53, true);  // with the h2 block
  const ElState el = solve_el(su.pieces, su.s.t);
  for (int i = 0; i < su.s.n(); ++i) {
    if (su.s.t[i] == 1) {
      CHECK(el.omega_hat[i] > 0.0);
    } else {
      CHECK(el.omega_hat[i] < 1.0);
      CHECK(el.omega_tilde[i] < 1.0);
    }
  }
  CHECK(el.lambda.size() == su.pieces.dim_h());
  CHECK(el.lambda1.size() == su.pieces.dim_h1);
  CHECK(su.pieces.dim_h() > su.pieces.dim_h1);  // h2 extends the span
}

TEST_CASE("weights before stage 2 raise an error") {
  const Setup su = make_setup(40, 30, 61);
  const ElState el = maximize_l(su.pieces, su.s.t);
  CHECK_THROWS_AS(el_weights(su.pieces, su.s.t, el), ElError);
}

}  // TEST_SUITE
