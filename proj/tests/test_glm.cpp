#include <doctest.h>

#include "oracles.hpp"
#include "tsdc/glm.hpp"
#include "tsdc/simulation.hpp"

using namespace tsdc;

namespace {

double expit(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// small two-group sample with overlap, fixed seed
MergedSample small_sample(int n1 = 40, int n0 = 30, std::uint64_t seed = 11) {
  DgpConfig cfg;
  cfg.n1 = n1;
  cfg.n0 = n0;
  return generate(cfg, seed, 0);
}

double direct_loglik(const Mat& design, const std::vector<int>& t, const Vec& gamma) {
  double ll = 0.0;
  for (int i = 0; i < design.rows(); ++i) {
    const double p = expit(design.row(i).dot(gamma));
    ll += t[i] == 1 ? std::log(p) : std::log(1.0 - p);
  }
  return ll / design.rows();
}

}  // namespace

TEST_SUITE("glm") {

TEST_CASE("logistic fit matches a derivative-free maximizer") {
  const MergedSample s = small_sample();
  const DesignMatrix d = build_design(s.u, BasisSpec::intercept_and_columns(s.u_names));
  const FittedPs fit = fit_logistic(d, s.t);

  const Vec gamma_oracle = oracle::nelder_mead(
      [&](const Vec& g) { return -direct_loglik(d.values, s.t, g); }, Vec::Zero(d.p()), 0.5);

  CHECK((fit.gamma - gamma_oracle).lpNorm<Eigen::Infinity>() < 1e-5);
  CHECK(fit.loglik == doctest::Approx(direct_loglik(d.values, s.t, fit.gamma)).epsilon(1e-12));
}

TEST_CASE("logistic score vanishes at the fit") {
  const MergedSample s = small_sample(60, 45, 3);
  const DesignMatrix d = build_design(s.u, BasisSpec::intercept_and_columns(s.u_names));
  const FittedPs fit = fit_logistic(d, s.t);

  Vec score = Vec::Zero(d.p());
  for (int i = 0; i < s.n(); ++i)
    score += (s.t[i] - fit.pi[i]) * d.values.row(i).transpose();
  score /= s.n();
  CHECK(score.lpNorm<Eigen::Infinity>() < 1e-8);
  CHECK(fit.score_norm < 1e-8);
  CHECK(fit.se().size() == d.p());
  CHECK(fit.se().minCoeff() > 0.0);
}

TEST_CASE("logistic recovers the generating coefficients at scale") {
  // t drawn from a known logistic model on one covariate
  RngStream rng(99);
  const int n = 20000;
  Mat u(n, 1);
  std::vector<int> t(n);
  int n1 = 0;
  for (int i = 0; i < n; ++i) {
    u(i, 0) = rng.next_normal();
    const double p = expit(-0.3 + 0.8 * u(i, 0));
    t[i] = rng.next_double() < p ? 1 : 0;
    n1 += t[i];
  }
  REQUIRE(n1 > 100);
  REQUIRE(n - n1 > 100);
  const DesignMatrix d = build_design(u, BasisSpec::intercept_and_columns({"z"}));
  const FittedPs fit = fit_logistic(d, t);
  CHECK(std::abs(fit.gamma[0] + 0.3) < 0.08);
  CHECK(std::abs(fit.gamma[1] - 0.8) < 0.08);
}

TEST_CASE("separated data raises FitError") {
  Mat u(8, 1);
  u << -4, -3, -2, -1, 1, 2, 3, 4;
  const std::vector<int> t = {0, 0, 0, 0, 1, 1, 1, 1};
  const DesignMatrix d = build_design(u, BasisSpec::intercept_and_columns({"z"}));
  CHECK_THROWS_AS(fit_logistic(d, t), FitError);
}

TEST_CASE("outcome regression matches the pseudoinverse solution") {
  const MergedSample s = small_sample(35, 30, 21);
  const DesignMatrix d = build_design(s.u, BasisSpec::intercept_and_columns(s.u_names));
  const FittedOr fit = fit_or_linear(d, s);

  // assemble the auxiliary-row system and solve by SVD
  Mat G0(s.n0(), d.p());
  Vec x0(s.n0());
  int r = 0;
  for (int i = 0; i < s.n(); ++i)
    if (s.t[i] == 0) {
      G0.row(r) = d.values.row(i);
      x0[r] = s.x(i, 0);
      ++r;
    }
  Eigen::JacobiSVD<Mat> svd(G0, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec alpha_oracle = svd.solve(x0);

  CHECK((fit.alpha.col(0) - alpha_oracle).lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK(fit.m_hat.rows() == s.n());  // fitted values on every row
  for (int i = 0; i < s.n(); ++i)
    CHECK(fit.m_hat(i, 0) ==
          doctest::Approx(d.values.row(i).dot(alpha_oracle)).epsilon(1e-10));
  CHECK(fit.n_aux == s.n0());
  CHECK(fit.se(0, 0) > 0.0);
}

TEST_CASE("outcome regression recovers exact coefficients on noiseless data") {
  MergedSample s = small_sample(20, 25, 5);
  for (int i = 0; i < s.n(); ++i)
    if (s.t[i] == 0) s.x(i, 0) = 2.0 - 0.5 * s.u(i, 0) + 0.25 * s.u(i, 1);
  const DesignMatrix d = build_design(s.u, BasisSpec::intercept_and_columns(s.u_names));
  const FittedOr fit = fit_or_linear(d, s);
  Vec expect(4);
  expect << 2.0, -0.5, 0.25, 0.0;
  CHECK((fit.alpha.col(0) - expect).lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("outcome regression rejects underdetermined systems") {
  MergedSample s = small_sample(30, 3, 8);
  const DesignMatrix d = build_design(s.u, BasisSpec::intercept_and_columns(s.u_names));
  CHECK_THROWS_AS(fit_or_linear(d, s), DataError);  // n0 <= p
}

TEST_CASE("augmented fit zeroes the score over both blocks") {
  const MergedSample s = small_sample(80, 60, 13);
  const DesignMatrix f = build_design(s.u, BasisSpec::intercept_and_columns(s.u_names));
  const FittedOr orf = fit_or_linear(f, s);

  Mat psi(s.n(), 1);
  for (int i = 0; i < s.n(); ++i) psi(i, 0) = orf.m_hat(i, 0) * s.u(i, 0);

  const FittedAugPs aug = fit_augmented_ps(f, psi, s.t);
  CHECK(aug.p_f == f.p());
  CHECK(aug.k_psi() == 1);
  CHECK(aug.score_f < 1e-8);
  CHECK(aug.score_psi < 1e-8);

  // score identity recomputed directly
  Vec score = Vec::Zero(f.p() + 1);
  for (int i = 0; i < s.n(); ++i) {
    Vec row(f.p() + 1);
    row.head(f.p()) = f.values.row(i).transpose();
    row[f.p()] = psi(i, 0);
    score += (s.t[i] - aug.pi()[i]) * row;
  }
  score /= s.n();
  CHECK(score.lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("augmented fit prunes redundant psi columns") {
  const MergedSample s = small_sample(50, 40, 17);
  const DesignMatrix f = build_design(s.u, BasisSpec::intercept_and_columns(s.u_names));

  SUBCASE("constant column is dropped") {
    Mat psi = Mat::Constant(s.n(), 1, 3.25);
    const FittedAugPs aug = fit_augmented_ps(f, psi, s.t);
    CHECK(aug.k_psi() == 0);
  }
  SUBCASE("copy of an f column is dropped, genuine signal kept") {
    Mat psi(s.n(), 2);
    psi.col(0) = f.values.col(1);
    for (int i = 0; i < s.n(); ++i) psi(i, 1) = s.u(i, 0) * s.u(i, 1);
    const FittedAugPs aug = fit_augmented_ps(f, psi, s.t);
    CHECK(aug.kept_psi == std::vector<int>{1});
    CHECK((aug.psi_kept.col(0) - psi.col(1)).lpNorm<Eigen::Infinity>() == 0.0);
  }
}

}  // TEST_SUITE
