#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsdc/rng.hpp"
#include "tsdc/tsiv.hpp"

namespace tsdc {

using EstimatorClosure = std::function<Vec(const MergedSample&)>;

// Stratified two-sample bootstrap: replicate r redraws n1 primary rows and
// n0 auxiliary rows with replacement using RngStream(seed, r), so draws are
// reproducible and independent of thread scheduling.  Replicates whose
// closure throws a tsdc::Error are dropped and counted.
struct BootstrapReport {
  int B = 0;
  int n_failed = 0;
  Mat draws;  // successes x k, in replicate order
  Vec point;  // estimate on the original sample
  Vec se;     // per-coordinate sd over successes (ddof = 1)
  Mat ci;     // k x 2 percentile interval
  double level = 0.95;
};

BootstrapReport bootstrap(const MergedSample& s, const EstimatorClosure& est, int B,
                          std::uint64_t seed, double level = 0.95, int threads = 0);

MergedSample resample_two_sample(const MergedSample& s, RngStream& rng);

// Linearly interpolated empirical quantile (the common "type 7" rule).
double quantile(std::vector<double> sorted_or_not, double p);

// Stacked estimating equations g(eta) with mean zero at the solution.  blocks
// names consecutive parameter slices; row_g writes row i's contribution.
struct EqStack {
  int n = 0;
  Vec params;
  std::vector<std::pair<std::string, int>> blocks;
  std::function<void(int row, const Vec& params, Eigen::Ref<Vec> out)> row_g;

  int dim() const { return static_cast<int>(params.size()); }
  std::pair<int, int> block_span(const std::string& name) const;  // (offset, size)
};

// Sandwich covariance A^-1 B A^-T / n with A the finite-difference Jacobian
// of the mean equations (central differences, step fd_scale * (1 + |eta_j|))
// and B the mean outer product of the row contributions.
Mat sandwich_cov(const EqStack& stack, double fd_scale = 1e-6);

// Convenience: sandwich SEs for one named block.
Vec sandwich_se(const EqStack& stack, const std::string& block, double fd_scale = 1e-6);

// Stack for a plain mean (used to anchor the machinery against the textbook
// variance of the sample mean).
EqStack make_mean_stack(const Vec& data);

// Stacks for the moment-restriction estimators on a fitted solution; blocks
// are "alpha" (outcome regression), "gamma" (propensity), and "theta".
EqStack make_or_stack(const MergedSample& s, const MomentModel& mm, const FittedOr& orf,
                      const Vec& theta);
EqStack make_ipw_stack(const MergedSample& s, const MomentModel& mm, const FittedPs& ps,
                       const Vec& theta);
EqStack make_aipw_stack(const MergedSample& s, const MomentModel& mm, const FittedPs& ps,
                        const FittedOr& orf, AipwVariant variant, const Vec& theta);

// Full stack for the IV pipeline: nuisance blocks as required by the method,
// then mu1 / mu2 / mu3 and the linear system defining beta.  SEs for the
// reported coefficients come from the "beta" block.
enum class IvEstimator { TSIV, TS2SLS, OR, IPW, AIPW, REG, LIK, AST };

std::string iv_estimator_name(IvEstimator e);

EqStack make_iv_stack(const IvProblem& iv, IvEstimator method, const TsivFits& fits,
                      bool include_h2, const WeightPolicy& policy, const Vec& beta);

}  // namespace tsdc
