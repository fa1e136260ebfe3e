#include "tsdc/calibration.hpp"

#include <string>

namespace tsdc {

CalibrationPieces make_pieces(const FittedAugPs& aug, const std::vector<int>& t,
                              bool include_h2, const WeightPolicy& policy) {
  const int n = static_cast<int>(aug.fit.pi.size());
  if (n != static_cast<int>(t.size())) throw DataError("t does not match the fitted model");

  CalibrationPieces pc;
  pc.include_h2 = include_h2;
  pc.pi = aug.fit.pi;

  std::string bad_rows;
  for (int i = 0; i < n; ++i) {
    if (t[i] == 0 && 1.0 - pc.pi[i] < policy.floor) {
      if (policy.clip) {
        pc.pi[i] = 1.0 - policy.floor;
        ++pc.clipped;
      } else {
        if (!bad_rows.empty()) bad_rows += ", ";
        bad_rows += std::to_string(i);
      }
    }
  }
  if (!bad_rows.empty())
    throw FitError("propensity too close to 1 on auxiliary rows [" + bad_rows +
                   "]; rerun with weight clipping to proceed");

  const int kp = aug.k_psi();
  pc.v.resize(n, 1 + kp);
  pc.v.col(0) = pc.pi;
  for (int j = 0; j < kp; ++j)
    pc.v.col(1 + j) = pc.pi.cwiseProduct(aug.psi_kept.col(j));

  const int dh1 = 1 + kp;
  pc.dim_h1 = dh1;
  const int p_aug = static_cast<int>(aug.fit.design.values.cols());
  const int dh = include_h2 ? dh1 + p_aug : dh1;
  pc.h.resize(n, dh);
  pc.h.leftCols(dh1) = pc.pi.asDiagonal() * pc.v;
  if (include_h2) {
    const Vec w2 = pc.pi.array() * (1.0 - pc.pi.array());
    pc.h.rightCols(p_aug) = w2.asDiagonal() * aug.fit.design.values;
  }

  pc.xi.resize(n, dh);
  pc.zeta.resize(n, dh);
  for (int i = 0; i < n; ++i) {
    const double pi = pc.pi[i];
    // ((1-T)/(1-pi) - 1)/pi: equals 1/(1-pi) on auxiliary rows, -1/pi on
    // primary rows
    const double a = t[i] == 0 ? 1.0 / (1.0 - pi) : -1.0 / pi;
    const double b = t[i] == 0 ? 1.0 / ((1.0 - pi) * pi) : 0.0;
    pc.xi.row(i) = a * pc.h.row(i);
    pc.zeta.row(i) = b * pc.h.row(i);
  }
  return pc;
}

}  // namespace tsdc
