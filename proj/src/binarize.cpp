#include "bivm/binarize.hpp"

#include <cmath>

namespace bivm {

float LayerParams::weight_scale() const {
  BIVM_CHECK(latent_weight.size() > 0, "empty weight tensor");
  double acc = 0.0;
  for (float v : latent_weight.vec()) acc += std::fabs(v);
  return static_cast<float>(acc / latent_weight.size());
}

BinWeights binarize_weights(const DenseTensor& w) {
  BIVM_CHECK(w.size() > 0, "empty weight tensor");
  BinWeights out;
  out.bits = pack(w, 0.0f);
  double acc = 0.0;
  for (float v : w.vec()) acc += std::fabs(v);
  out.scale = static_cast<float>(acc / w.size());
  return out;
}

BitTensor binarize_acts(const DenseTensor& x, float tau) { return pack(x, tau); }

DenseTensor ste_backward(const DenseTensor& grad_out, const DenseTensor& pre_act,
                         float tau) {
  BIVM_CHECK(grad_out.shape() == pre_act.shape(), "shape mismatch");
  DenseTensor out(grad_out.shape());
  const auto& g = grad_out.vec();
  const auto& x = pre_act.vec();
  for (size_t i = 0; i < g.size(); ++i) {
    float d = x[i] - tau;
    out.vec()[i] = (d > -1.0f && d < 1.0f) ? g[i] : 0.0f;
  }
  return out;
}

float ste_backward_tau(const DenseTensor& grad_out, const DenseTensor& pre_act,
                       float tau) {
  BIVM_CHECK(grad_out.shape() == pre_act.shape(), "shape mismatch");
  const auto& g = grad_out.vec();
  const auto& x = pre_act.vec();
  double acc = 0.0;
  for (size_t i = 0; i < g.size(); ++i) {
    float d = x[i] - tau;
    if (d > -1.0f && d < 1.0f) acc += g[i];
  }
  return static_cast<float>(-acc);
}

}  // namespace bivm
