#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsdc/inference.hpp"
#include "tsdc/rng.hpp"

namespace tsdc {

// Linear IV design with three common covariates.  Primary draws Z ~ N(1,1)
// i.i.d., auxiliary draws Z ~ N(0,1); the errors (eps, e) are unit-variance
// normals with correlation 0.8 on the primary side and e ~ N(0,1) on the
// auxiliary side.  Structural equations:
//   x = iv_coef z0 + 0.6 z1 - 0.5 z2 + e
//   y = 0.5 x - 0.4 z1 + 0.5 z2 + eps
// y is kept on primary rows, x on auxiliary rows.  The implied propensity of
// membership in the pooled sample is expit(log(n1/n0) - 1.5 + z0 + z1 + z2).
struct DgpConfig {
  int n1 = 5000;
  int n0 = 500;
  double iv_coef = 1.0;

  double true_beta = 0.5;
  double ps_intercept() const;  // log(n1/n0) - 1.5
};

MergedSample generate(const DgpConfig& config, std::uint64_t seed, std::uint64_t rep = 0);

// Correct specification uses the raw covariates; the misspecified variant
// feeds monotone distortions w0 = exp(-0.5 z0) + 5, w1 = z1 / (1 + 0.1
// exp(z0)) + 10, w2 = exp(0.4 z2) + 3 to the model in question.
struct ModelCell {
  bool ps_correct = true;
  bool or_correct = true;
};

BasisSpec simulation_basis(bool correct);

struct McOptions {
  int reps = 200;
  std::vector<IvEstimator> estimators;
  bool include_h2 = false;
  bool clip_weights = false;
  std::uint64_t seed = 20240801;
  int threads = 0;  // 0: take TSDC_THREADS or hardware concurrency
};

struct McRow {
  IvEstimator estimator;
  double bias = 0.0;
  double sd = 0.0;
  int failures = 0;
  int used = 0;
};

struct McTable {
  ModelCell cell;
  int reps = 0;
  std::vector<McRow> rows;

  const McRow& row(IvEstimator e) const;
};

McTable run_monte_carlo(const DgpConfig& config, const ModelCell& cell, const McOptions& opts);

// Scenario presets used by the CLI: "table1" (n1=5000, n0=500, iv_coef=1),
// "s1" (iv_coef=0.8), "s2" (iv_coef=0.6), "s3" (n1=500, n0=5000).
DgpConfig scenario_config(const std::string& name);

int resolve_threads(int requested);

// Order-independent pairwise summation; mean/sd aggregation uses it so that
// results do not depend on how replicates were scheduled.
double pairwise_sum(const std::vector<double>& xs);
double pairwise_mean(const std::vector<double>& xs);
double pairwise_sd(const std::vector<double>& xs);  // ddof = 1

}  // namespace tsdc
