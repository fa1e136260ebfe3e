#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "tsdc/estimators.hpp"
#include "tsdc/simulation.hpp"
#include "tsdc/tsiv.hpp"

using namespace tsdc;

namespace {

struct Fixture {
  MergedSample s;
  DesignMatrix f;
  FittedPs ps;
  FittedOr orf;
  MomentModel mm;  // Phi = U x - theta, k = 3
  PsiHat psi;
};

Fixture make_fixture(int n1 = 400, int n0 = 150, std::uint64_t seed = 71) {
  Fixture fx;
  DgpConfig cfg;
  cfg.n1 = n1;
  cfg.n0 = n0;
  fx.s = generate(cfg, seed, 0);
  fx.f = build_design(fx.s.u, BasisSpec::intercept_and_columns(fx.s.u_names));
  fx.ps = fit_logistic(fx.f, fx.s.t);
  fx.orf = fit_or_linear(fx.f, fx.s);

  fx.mm.k = 3;
  fx.mm.phi = [](const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& u,
                 const Vec& theta) { return (u * x[0] - theta).eval(); };
  fx.mm.jac = [](const Eigen::Ref<const Vec>&, const Eigen::Ref<const Vec>&, const Vec&) {
    return (-Mat::Identity(3, 3)).eval();
  };
  fx.psi = make_psi_hat(fx.mm, fx.s.u, fx.orf);
  return fx;
}

}  // namespace

TEST_SUITE("estimators") {

TEST_CASE("method names round trip") {
  for (Method m : {Method::OR, Method::IPW, Method::AIPW_NP, Method::AIPW_SP, Method::REG,
                   Method::LIK, Method::AST})
    CHECK(method_from_name(method_name(m)) == m);
  CHECK(!method_from_name("nope").has_value());
}

TEST_CASE("outcome-regression solver equals its closed form") {
  const Fixture fx = make_fixture();
  const EstimateResult r = solve_or(fx.s, fx.mm, fx.psi);
  REQUIRE(r.converged);
  CHECK(r.residual < 1e-8);

  Vec closed = Vec::Zero(3);
  double c1 = 0.0;
  for (int i = 0; i < fx.s.n(); ++i)
    if (fx.s.t[i] == 1) {
      closed += fx.orf.m_hat(i, 0) * fx.s.u.row(i).transpose();
      c1 += 1.0;
    }
  closed /= c1;
  CHECK((r.theta - closed).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("ipw solver equals its closed form and a bisection oracle") {
  const Fixture fx = make_fixture(300, 120, 29);
  const EstimateResult r = solve_ipw(fx.s, fx.mm, fx.ps);
  REQUIRE(r.converged);

  Vec num = Vec::Zero(3);
  double den = 0.0;
  for (int i = 0; i < fx.s.n(); ++i)
    if (fx.s.t[i] == 0) {
      const double w = fx.ps.pi[i] / (1.0 - fx.ps.pi[i]);
      num += w * fx.s.x(i, 0) * fx.s.u.row(i).transpose();
      den += w;
    }
  CHECK((r.theta - num / den).lpNorm<Eigen::Infinity>() < 1e-8);

  // scalar moment Phi = x - theta solved by bisection on the same equation
  MomentModel m1;
  m1.k = 1;
  m1.phi = [](const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>&, const Vec& th) {
    return Vec::Constant(1, x[0] - th[0]).eval();
  };
  const EstimateResult r1 = solve_ipw(fx.s, m1, fx.ps);
  auto g = [&](double th) {
    double acc = 0.0;
    for (int i = 0; i < fx.s.n(); ++i)
      if (fx.s.t[i] == 0)
        acc += fx.ps.pi[i] / (1.0 - fx.ps.pi[i]) * (fx.s.x(i, 0) - th);
    return acc / fx.s.n();
  };
  const double root = oracle::bisect(g, -50.0, 50.0);
  CHECK(std::abs(r1.theta[0] - root) < 1e-6);
}

TEST_CASE("aipw solver hits the augmented closed form") {
  const Fixture fx = make_fixture(350, 130, 37);
  const EstimateResult r = solve_aipw(fx.s, fx.mm, fx.ps, fx.psi, AipwVariant::NP);
  REQUIRE(r.converged);

  const int n = fx.s.n();
  Vec num = Vec::Zero(3);
  double p1 = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vec u = fx.s.u.row(i).transpose();
    const double m = fx.orf.m_hat(i, 0);
    if (fx.s.t[i] == 0) {
      num += fx.ps.pi[i] / (1.0 - fx.ps.pi[i]) * (fx.s.x(i, 0) - m) * u;
    } else {
      num += m * u;
      p1 += 1.0;
    }
  }
  CHECK((r.theta - num / p1).lpNorm<Eigen::Infinity>() < 1e-8);

  SUBCASE("the sp variant solves its own equation") {
    const EstimateResult rs = solve_aipw(fx.s, fx.mm, fx.ps, fx.psi, AipwVariant::SP);
    REQUIRE(rs.converged);
    CHECK(rs.residual < 1e-8);
    CHECK(rs.estimator == "aipw_sp");
    CHECK((rs.theta - r.theta).lpNorm<Eigen::Infinity>() < 0.5);  // same estimand
  }
}

TEST_CASE("near-unit propensities abort unless clipping is on") {
  const Fixture fx = make_fixture(200, 90, 43);
  FittedPs ps = fx.ps;
  int aux = -1;
  for (int i = 0; i < fx.s.n(); ++i)
    if (fx.s.t[i] == 0) {
      aux = i;
      break;
    }
  ps.pi[aux] = 1.0 - 1e-9;  // inside the default floor

  CHECK_THROWS_AS(solve_ipw(fx.s, fx.mm, ps), FitError);
  CHECK_THROWS_WITH_AS(solve_ipw(fx.s, fx.mm, ps),
                       doctest::Contains("weight clipping"), FitError);

  SolveOptions opts;
  opts.weights.clip = true;
  const EstimateResult r = solve_ipw(fx.s, fx.mm, ps, opts);
  CHECK(r.converged);
  CHECK(r.diagnostics.at("clipped") == 1.0);
}

TEST_CASE("calibrated regression satisfies the calibration equation") {
  const Fixture fx = make_fixture(500, 200, 57);
  const EstimateResult r = solve_calibrated_reg(fx.s, fx.mm, fx.f, fx.psi);
  REQUIRE(r.converged);
  CHECK(r.residual < 1e-8);
  CHECK(r.diagnostics.at("calibration_gap") < 1e-8);
  CHECK(r.outer_iterations < 50);
}

TEST_CASE("calibrated likelihood satisfies the calibration equation") {
  const Fixture fx = make_fixture(500, 200, 63);
  const EstimateResult r = solve_calibrated_lik(fx.s, fx.mm, fx.f, fx.psi);
  REQUIRE(r.converged);
  CHECK(r.residual < 1e-8);
  CHECK(r.diagnostics.at("calibration_gap") < 1e-8);
  CHECK(r.diagnostics.at("min_aux_weight") >= 0.0);
  CHECK(r.extras.count("lambda") == 1);
  CHECK(r.extras.count("lambda1") == 1);
}

TEST_CASE("tilted-weight comparator balances pi psi") {
  const Fixture fx = make_fixture(500, 200, 69);
  const EstimateResult r = solve_ast(fx.s, fx.mm, fx.f, fx.psi);
  REQUIRE(r.converged);
  CHECK(r.residual < 1e-8);
  CHECK(r.diagnostics.at("chi_residual") < 1e-8);
  CHECK(r.extras.count("chi") == 1);
}

TEST_CASE("calibrated estimators stay near the truth on a correct design") {
  const Fixture fx = make_fixture(2000, 600, 77);
  // truth: E(U X | T=1) under the generating model; the tolerance is wide
  // because the effective auxiliary sample size under inverse weighting is
  // far below n0
  Vec truth(3);
  truth << 1.0 * 2.0 + 0.6 + (-0.5), 1.0 + 0.6 * 2.0 - 0.5, 1.0 + 0.6 - 0.5 * 2.0;
  for (const auto& r : {solve_calibrated_reg(fx.s, fx.mm, fx.f, fx.psi),
                        solve_calibrated_lik(fx.s, fx.mm, fx.f, fx.psi),
                        solve_ast(fx.s, fx.mm, fx.f, fx.psi)}) {
    CHECK((r.theta - truth).lpNorm<Eigen::Infinity>() < 0.6);
  }
}

TEST_CASE("split-restriction front end") {
  const Fixture fx = make_fixture(400, 160, 83);

  // E{ Y - theta X | T=1 } = 0  ->  theta = sum y / sum m_hat on primary rows
  MomentPair pair;
  pair.phi1.k = 1;
  pair.phi1.phi = [](const Eigen::Ref<const Vec>& y, const Eigen::Ref<const Vec>&,
                     const Vec&) { return Vec::Constant(1, y[0]).eval(); };
  pair.phi0.k = 1;
  pair.phi0.phi = [](const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>&,
                     const Vec& th) { return Vec::Constant(1, x[0] * th[0]).eval(); };
  PsiHat psi0 = make_psi_hat(pair.phi0, fx.s.u, fx.orf);

  const EstimateResult r = solve_setting2(fx.s, pair, Method::OR, fx.f, psi0, &fx.ps);
  double ysum = 0.0, msum = 0.0;
  for (int i = 0; i < fx.s.n(); ++i)
    if (fx.s.t[i] == 1) {
      ysum += fx.s.y(i, 0);
      msum += fx.orf.m_hat(i, 0);
    }
  CHECK(std::abs(r.theta[0] - ysum / msum) < 1e-8);

  SUBCASE("ipw route solves the cross-sample equation") {
    const EstimateResult ri = solve_setting2(fx.s, pair, Method::IPW, fx.f, psi0, &fx.ps);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < fx.s.n(); ++i) {
      if (fx.s.t[i] == 1) num += fx.s.y(i, 0);
      if (fx.s.t[i] == 0)
        den += fx.ps.pi[i] / (1.0 - fx.ps.pi[i]) * fx.s.x(i, 0);
    }
    CHECK(std::abs(ri.theta[0] - num / den) < 1e-8);
  }
  SUBCASE("ipw and aipw require a propensity fit") {
    CHECK_THROWS_AS(solve_setting2(fx.s, pair, Method::IPW, fx.f, psi0, nullptr),
                    DataError);
    CHECK_THROWS_AS(solve_setting2(fx.s, pair, Method::AIPW_NP, fx.f, psi0, nullptr),
                    DataError);
  }
  SUBCASE("a zero primary term recovers the one-sample restriction") {
    MomentPair zero = pair;
    zero.phi1.phi = [](const Eigen::Ref<const Vec>&, const Eigen::Ref<const Vec>&,
                       const Vec&) { return Vec::Zero(1).eval(); };
    // with phi1 = 0 the OR route solves mean_t1{ m_hat theta } = 0 -> theta = 0
    const EstimateResult rz = solve_setting2(fx.s, zero, Method::OR, fx.f, psi0, &fx.ps);
    CHECK(std::abs(rz.theta[0]) < 1e-10);
  }
}

TEST_CASE("split-restriction front end requires observed outcomes") {
  Fixture fx = make_fixture(60, 40, 89);
  fx.s.y.resize(fx.s.n(), 0);
  std::fill(fx.s.has_y.begin(), fx.s.has_y.end(), 0);
  fx.s.y_names.clear();

  MomentPair pair;
  pair.phi1.k = 1;
  pair.phi1.phi = [](const Eigen::Ref<const Vec>& y, const Eigen::Ref<const Vec>&,
                     const Vec&) { return Vec::Constant(1, y[0]).eval(); };
  pair.phi0 = pair.phi1;
  PsiHat psi0 = make_psi_hat(pair.phi0, fx.s.u, fx.orf);
  CHECK_THROWS_AS(solve_setting2(fx.s, pair, Method::OR, fx.f, psi0, &fx.ps), DataError);
}

TEST_CASE("custom psi hook overrides the plug-in route") {
  const Fixture fx = make_fixture(300, 120, 97);
  PsiHat hooked = fx.psi;
  hooked.hook = [&](const Eigen::Ref<const Vec>& u, const Vec& theta) {
    return (u * (u[0] * 0.5) - theta).eval();  // pretend E(X|U) = 0.5 z0
  };
  const EstimateResult r = solve_or(fx.s, fx.mm, hooked);
  Vec closed = Vec::Zero(3);
  double c1 = 0.0;
  for (int i = 0; i < fx.s.n(); ++i)
    if (fx.s.t[i] == 1) {
      closed += 0.5 * fx.s.u(i, 0) * fx.s.u.row(i).transpose();
      c1 += 1.0;
    }
  CHECK((r.theta - closed / c1).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("solvers are deterministic") {
  const Fixture a = make_fixture(300, 120, 101);
  const Fixture b = make_fixture(300, 120, 101);
  const Vec ta = solve_calibrated_lik(a.s, a.mm, a.f, a.psi).theta;
  const Vec tb = solve_calibrated_lik(b.s, b.mm, b.f, b.psi).theta;
  CHECK((ta - tb).lpNorm<Eigen::Infinity>() == 0.0);
}

}  // TEST_SUITE
