#pragma once
// Binarization semantics shared by every 1-bit layer:
//   weights     b_w = sign(w),            scale s = mean(|w|)
//   activations b_a = sign(x - tau)
// sign(0) = +1 throughout. The straight-through estimator passes a gradient
// only where the shifted pre-activation lies strictly inside (-1, 1); the
// threshold tau accumulates the negated sum of the masked upstream gradient.
// s is a detached statistic: recomputed from the latent weights at every
// forward, never trained directly.

#include <vector>

#include "bivm/tensor.hpp"

namespace bivm {

struct BnParams {
  std::vector<float> gamma, beta, running_mean, running_var;
  void init(int channels) {
    gamma.assign(channels, 1.0f);
    beta.assign(channels, 0.0f);
    running_mean.assign(channels, 0.0f);
    running_var.assign(channels, 1.0f);
  }
};

// Kernel-level view of one binarized layer's state. The weight scale is not a
// stored field: it is derived from the latent weights on demand, so it can
// never go stale after an optimizer step.
struct LayerParams {
  DenseTensor latent_weight;   // full-precision master copy, (oc, ic, kh, kw)
  float act_threshold = 0.0f;  // tau, initialised to 0
  BnParams bn;

  float weight_scale() const;
};

struct BinWeights {
  BitTensor bits;
  float scale = 0.0f;
};

// sign(w) packed + s = mean(|w|). All-zero weights binarize to all +1 with
// s = 0 (the layer output is then exactly zero). Empty weights are an error.
BinWeights binarize_weights(const DenseTensor& w);

// sign(x - tau) packed.
BitTensor binarize_acts(const DenseTensor& x, float tau);

// grad_in[k] = grad_out[k] iff (pre_act[k] - tau) in (-1, 1), else 0.
DenseTensor ste_backward(const DenseTensor& grad_out, const DenseTensor& pre_act,
                         float tau);

// d loss / d tau = -sum of the STE-masked upstream gradient.
float ste_backward_tau(const DenseTensor& grad_out, const DenseTensor& pre_act,
                       float tau);

}  // namespace bivm
