#pragma once

#include <vector>

#include "tsdc/glm.hpp"

namespace tsdc {

// Handling of near-unit propensity scores on auxiliary rows.  Inverse weights
// blow up as 1 - pi -> 0; with clip = false any auxiliary row with
// 1 - pi < floor aborts, with clip = true pi is capped and the rows counted.
struct WeightPolicy {
  bool clip = false;
  double floor = 1e-6;
};

// Row-wise building blocks shared by the calibrated estimators.
//
//   v    = (pi, pi * psi')'                  "calibration targets"
//   h1   = pi * v
//   h2   = pi (1 - pi) (f, psi)'             optional second block
//   xi   = ((1-T)/(1-pi) - 1) h / pi
//   zeta = (1-T) h / ((1-pi) pi)
//
// Row-wise, zeta - xi = h / pi, whose leading block equals v.
struct CalibrationPieces {
  Vec pi;    // augmented propensity, after any clipping
  Mat v;     // n x (1 + k')
  Mat h;     // n x dim_h
  Mat xi;    // n x dim_h
  Mat zeta;  // n x dim_h
  int dim_h1 = 0;
  bool include_h2 = false;
  int clipped = 0;

  int dim_h() const { return static_cast<int>(h.cols()); }
  int dim_v() const { return static_cast<int>(v.cols()); }
};

CalibrationPieces make_pieces(const FittedAugPs& aug, const std::vector<int>& t,
                              bool include_h2, const WeightPolicy& policy = {});

}  // namespace tsdc
