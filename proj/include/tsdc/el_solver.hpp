#pragma once

#include <vector>

#include "tsdc/calibration.hpp"

namespace tsdc {

struct ElOptions {
  double tol = 1e-8;  // max-norm of the stage gradient at convergence
  int max_iter = 100;
  int max_backtracks = 50;
  double margin = 1e-12;  // strict feasibility buffer for omega
};

// Empirical-likelihood stages built on omega(lambda) = pi - lambda' h.
//
// Stage 1 maximizes the binomial log likelihood
//   l(lambda) = mean[ T log omega + (1-T) log(1 - omega) ]
// over lambda keeping omega > 0 on primary rows and omega < 1 on auxiliary
// rows.  This is the dual of maximizing prod p_i subject to the xi moment
// constraints; p_hat_i = n^-1 / (1 + lambda' xi_i) are the implied masses.
//
// Stage 2 re-solves the leading h1 block (lambda1, warm-started at the
// stage-1 value) holding the h2 block fixed, which calibrates the final
// auxiliary weights n^-1 / (1 - omega_tilde) to the v targets.
struct ElState {
  Vec lambda;        // stage-1 maximizer, dim h
  Vec lambda1;       // stage-2 maximizer of the leading block, dim h1
  Vec omega_hat;     // omega at lambda
  Vec omega_tilde;   // omega at (lambda1, lambda2 from stage 1)
  Vec p_hat;         // n^-1 / (1 + lambda' xi_i)
  int iterations_l = 0;
  int iterations_kappa = 0;
  double score_l = 0.0;
  double score_kappa = 0.0;
};

ElState maximize_l(const CalibrationPieces& pieces, const std::vector<int>& t,
                   const ElOptions& opts = {});

void maximize_kappa(const CalibrationPieces& pieces, const std::vector<int>& t,
                    ElState& state, const ElOptions& opts = {});

// Convenience: stage 1 followed by stage 2.
ElState solve_el(const CalibrationPieces& pieces, const std::vector<int>& t,
                 const ElOptions& opts = {});

// Auxiliary-row weights n^-1 / (1 - omega_tilde); zero on primary rows.
// Nonnegative whenever stage 2 stayed feasible.
Vec el_weights(const CalibrationPieces& pieces, const std::vector<int>& t,
               const ElState& state);

}  // namespace tsdc
