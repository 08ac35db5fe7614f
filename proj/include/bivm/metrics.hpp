#pragma once
// Alpha-matte quality metrics over clips (frame axis = batch axis).
// Scaling conventions, also flagged in every rendered report: MAD, MSE,
// Grad, Conn and the foreground MSE are x1e3; dtSSD is x1e2.
//
// Grad compares Gaussian-derivative gradient magnitudes (sigma 1.4, radius
// ceil(3 sigma), replicate border). Conn sweeps thresholds in steps of 0.15,
// keeps for each pixel the last level at which it belonged to the largest
// 4-connected component of the jointly thresholded maps, and compares the
// degradation phi = 1 - d * [d >= 0.15].

#include <string>

#include "bivm/tensor.hpp"

namespace bivm {

struct MetricsReport {
  double mad = 0, mse = 0, grad = 0, conn = 0, dtssd = 0, mse_fg = 0;
  std::string render() const;
};

// alpha/alpha_gt: {T, 1, h, w}. fg/fg_gt: {T, 3, h, w} or empty tensors to
// skip the foreground score. Values expected in [0, 1].
MetricsReport evaluate(const TensorT<float>& alpha,
                       const TensorT<float>& alpha_gt,
                       const TensorT<float>& fg, const TensorT<float>& fg_gt);

}  // namespace bivm
