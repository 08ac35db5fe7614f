#pragma once
// Cost model: walks a ModelConfig's shapes and tallies ops and storage per
// operation. Kept independent of the runtime layers so it can cross-check
// them. Conventions (also printed in the report header):
//   - fused float multiply-add = 1 op
//   - 64-lane xnor word + popcount-accumulate = 2 ops, so one binarized
//     multiply-accumulate costs 2/64
//   - sparse binarized convs scale by the expected mask density
//   - elementwise work is counted per element (folded bn 1, sign 1, scaled
//     add 1, bilinear 4/out, 2x2 avg pool 4/out, sigmoid 4, clamp/mul/add 1)
//   - storage: 1-bit weights at 1 bit, every float (weights, scales,
//     thresholds, gains, biases, bn stats) at 4 bytes; MB is decimal

#include <map>
#include <string>
#include <vector>

#include "bivm/model.hpp"

namespace bivm {

struct OpCost {
  std::string part;  // stem | backbone | aspp | decoder | heads
  std::string name;
  double flops = 0;
  double bits = 0;    // binarized weight bits
  double floats = 0;  // 32-bit parameter count
};

struct ProfileReport {
  std::vector<OpCost> items;
  int in_h = 0, in_w = 0;
  std::string preset;

  double total_flops() const;
  double params_bytes() const;
  double flops_g() const { return total_flops() / 1e9; }
  double params_mb() const { return params_bytes() / 1e6; }
  std::map<std::string, double> part_flops() const;
  double part_share(const std::string& part) const;
  std::string render() const;
};

ProfileReport profile_model(const ModelConfig& cfg, int h, int w);

}  // namespace bivm
