#pragma once
// Network layers over the autograd graph.
//
// Every layer runs in one of three numeric modes:
//   kFull   : binarization replaced by identity; the full-precision
//             counterpart and gradient-check path.
//   kQat    : quantization-aware training; sign with straight-through
//             gradients, float convs over the +/-1 values. Exact integers in
//             float arithmetic, so eval-mode QAT agrees bit-for-bit with the
//             packed path.
//   kPacked : XNOR+popcount kernels on packed bits; inference only, float
//             scalar type, no gradients.
//
// Layers expose collect() so optimizers and checkpoints can walk named
// parameters and state tensors without knowing the architecture.

#include <string>
#include <type_traits>
#include <vector>

#include "bivm/autograd.hpp"
#include "bivm/binarize.hpp"
#include "bivm/conv.hpp"

namespace bivm {

enum class NumericMode { kFull, kQat, kPacked };

template <class T>
struct ParamRefT {
  std::string name;
  ag::VarT<T>* var;
};

template <class T>
struct StateRefT {
  std::string name;
  TensorT<T>* tensor;
};

template <class T>
struct Ctx {
  NumericMode mode = NumericMode::kQat;
  bool training = false;
  OpCounter* ops = nullptr;  // packed path cost accounting
};

// He-normal latent weight init.
template <class T>
TensorT<T> he_init(Shape s, Rng& rng) {
  TensorT<T> w(s);
  double fan_in = static_cast<double>(s.c) * s.h * s.w;
  double sigma = std::sqrt(2.0 / fan_in);
  for (auto& v : w.vec()) v = static_cast<T>(rng.normal(0.0, sigma));
  return w;
}

// ---------------------------------------------------------------------------
// Full-precision convolution, optional bias.
template <class T>
struct Conv2dT {
  ag::VarT<T> w;
  ag::VarT<T> bias;
  ConvSpec spec;
  bool has_bias = false;

  void init(int ic, int oc, int k, ConvSpec sp, bool with_bias, Rng& rng) {
    BIVM_CHECK(ic % sp.groups == 0, "channels must divide groups");
    spec = sp;
    has_bias = with_bias;
    w = ag::VarT<T>(he_init<T>(Shape{oc, ic / sp.groups, k, k}, rng), true);
    if (with_bias) bias = ag::VarT<T>(TensorT<T>(Shape{1, oc, 1, 1}), true);
  }

  ag::VarT<T> forward(const ag::VarT<T>& x) const {
    auto y = ag::conv2d(x, w, spec);
    if (has_bias) y = ag::add_channel_bias(y, bias);
    return y;
  }

  void collect(const std::string& p, std::vector<ParamRefT<T>>& out) {
    out.push_back({p + ".w", &w});
    if (has_bias) out.push_back({p + ".b", &bias});
  }
};

// ---------------------------------------------------------------------------
// Batch normalization wrapper owning affine params and running stats.
template <class T>
struct BatchNorm2dT {
  ag::VarT<T> gamma, beta;
  ag::BnStateT<T> state;

  void init(int c) {
    gamma = ag::VarT<T>(TensorT<T>(Shape{1, c, 1, 1}, T(1)), true);
    beta = ag::VarT<T>(TensorT<T>(Shape{1, c, 1, 1}), true);
    state.init(c);
  }

  ag::VarT<T> forward(const ag::VarT<T>& x, bool training) {
    return ag::batch_norm(x, gamma, beta, &state, training);
  }

  void collect(const std::string& p, std::vector<ParamRefT<T>>& params,
               std::vector<StateRefT<T>>& state_out) {
    params.push_back({p + ".gamma", &gamma});
    params.push_back({p + ".beta", &beta});
    state_out.push_back({p + ".running_mean", &state.running_mean});
    state_out.push_back({p + ".running_var", &state.running_var});
  }
};

// ---------------------------------------------------------------------------
// Binarized convolution: latent weights, learnable activation threshold.
//
// All modes share one padding contract: the pre-activation is zero-padded
// first and the pad values binarize like any other value, so the packed
// kernel's pad bit is (0 - tau >= 0).
template <class T>
struct BinConv2dT {
  ag::VarT<T> w;
  ag::VarT<T> tau;
  ConvSpec spec;

  void init(int ic, int oc, int k, ConvSpec sp, Rng& rng) {
    BIVM_CHECK(ic % sp.groups == 0, "channels must divide groups");
    spec = sp;
    w = ag::VarT<T>(he_init<T>(Shape{oc, ic / sp.groups, k, k}, rng), true);
    tau = ag::VarT<T>(TensorT<T>(Shape{1, 1, 1, 1}), true);
  }

  ag::VarT<T> forward(const ag::VarT<T>& x, const Ctx<T>& ctx) const {
    ConvSpec inner = spec;
    inner.padding = 0;
    auto xp = ag::pad_spatial(x, spec.padding);
    switch (ctx.mode) {
      case NumericMode::kFull:
        return ag::conv2d(xp, w, inner);
      case NumericMode::kQat:
        return ag::conv2d(ag::sign_ste(xp, tau), ag::sign_ste_weights(w), inner);
      case NumericMode::kPacked:
        return forward_packed(xp, ctx, nullptr);
    }
    throw Error("unreachable");
  }

  // Packed path; optional mask makes the conv sparse.
  ag::VarT<T> forward_packed(const ag::VarT<T>& x_padded, const Ctx<T>& ctx,
                             const Mask* mask) const {
    if constexpr (std::is_same_v<T, float>) {
      BIVM_CHECK(!ag::grad_enabled() || !x_padded.needs_grad(),
                 "packed mode cannot carry gradients");
      ConvSpec inner = spec;
      inner.padding = 0;
      float tv = tau.val().vec()[0];
      BitTensor xb = pack(x_padded.val(), tv);
      BinWeights bw = binarize_weights(w.val());
      DenseTensor y = mask ? sparse_bconv2d(xb, bw.bits, bw.scale, inner,
                                            0.0f - tv >= 0.0f, *mask, ctx.ops)
                           : bconv2d(xb, bw.bits, bw.scale, inner,
                                     0.0f - tv >= 0.0f, ctx.ops);
      return ag::constant(std::move(y));
    } else {
      throw Error("packed mode requires float tensors");
    }
  }

  void collect(const std::string& p, std::vector<ParamRefT<T>>& out) {
    out.push_back({p + ".w", &w});
    out.push_back({p + ".tau", &tau});
  }
};

// ---------------------------------------------------------------------------
// Parameter-free channel mapping shortcut. Reduction sums the c_in/c_out
// contiguous chunks of size c_out scaled by c_out/c_in (a chunk mean);
// expansion concatenates c_out/c_in copies; equal widths pass through.
// spatial_factor 2 applies a 2x2 average pool first.
template <class T>
ag::VarT<T> map_channels(const ag::VarT<T>& x, int c_out, int spatial_factor = 1) {
  BIVM_CHECK(spatial_factor == 1 || spatial_factor == 2, "bad spatial factor");
  ag::VarT<T> v = spatial_factor == 2 ? ag::avg_pool2(x) : x;
  int c_in = v.shape().c;
  if (c_in == c_out) return v;
  if (c_in > c_out) {
    BIVM_CHECK(c_in % c_out == 0, "channel reduction must divide evenly");
    int chunks = c_in / c_out;
    ag::VarT<T> acc = ag::slice_ch(v, 0, c_out);
    for (int i = 1; i < chunks; ++i)
      acc = ag::add(acc, ag::slice_ch(v, i * c_out, (i + 1) * c_out));
    return ag::scale_const(acc, T(1) / static_cast<T>(chunks));
  }
  BIVM_CHECK(c_out % c_in == 0, "channel expansion must divide evenly");
  int copies = c_out / c_in;
  std::vector<ag::VarT<T>> parts(static_cast<size_t>(copies), v);
  return ag::concat_ch(parts);
}

// ---------------------------------------------------------------------------
// Recurrent 1x1 gate (optional decoder temporal state): a minimal ConvGRU
// with full-precision pointwise convs. h' = (1-z) h + z tanh(Wc [x, r h]).
template <class T>
struct RecurrentGateT {
  Conv2dT<T> wz, wr, wc;
  int channels = 0;

  void init(int c, Rng& rng) {
    channels = c;
    wz.init(2 * c, c, 1, ConvSpec{}, true, rng);
    wr.init(2 * c, c, 1, ConvSpec{}, true, rng);
    wc.init(2 * c, c, 1, ConvSpec{}, true, rng);
  }

  ag::VarT<T> forward(const ag::VarT<T>& x, const ag::VarT<T>& h) const {
    auto xh = ag::concat_ch<T>({x, h});
    auto z = ag::sigmoid(wz.forward(xh));
    auto r = ag::sigmoid(wr.forward(xh));
    auto cand = ag::tanh_op(wc.forward(ag::concat_ch<T>({x, ag::mul(r, h)})));
    // h' = h + z * (cand - h)
    auto one = ag::VarT<T>(TensorT<T>(h.shape(), T(1)), false);
    return ag::add(ag::mul(ag::sub(one, z), h), ag::mul(z, cand));
  }

  void collect(const std::string& p, std::vector<ParamRefT<T>>& out) {
    wz.collect(p + ".wz", out);
    wr.collect(p + ".wr", out);
    wc.collect(p + ".wc", out);
  }
};

}  // namespace bivm
