#pragma once
// Sparse heterogeneous binarization: a spatial incoherence mask gates the
// expensive 3x3 branch of a decoder block while a dense 1x1 branch keeps
// full coverage.
//
// Mask construction at 1/16 scale:
//   residual = mean over channels of |f - up2(down2(f))|
//   m[y,x]   = 1 iff residual - tau >= 0
// tau* maximizes the entropy of the sign distribution of f at mask-active
// positions, searched over a fixed candidate grid (quantiles of the
// residual). Coarser masks for higher-resolution blocks come from bilinear
// upsampling re-binarized at 0.5.

#include <algorithm>
#include <cmath>
#include <vector>

#include "bivm/layers.hpp"
#include "bivm/ops.hpp"

namespace bivm {

// Channel-collapsed incoherence residual, shape {n,1,h,w}. Spatial dims must
// be even (2x2 pool then bilinear back).
template <class T>
TensorT<T> incoherence_residual(const TensorT<T>& f) {
  TensorT<T> low = avg_pool2_t(f);
  TensorT<T> up = bilinear_resize_t(low, f.shape().h, f.shape().w);
  TensorT<T> diff(f.shape());
  for (size_t i = 0; i < diff.vec().size(); ++i)
    diff.vec()[i] = std::abs(f.vec()[i] - up.vec()[i]);
  return mean_ch_t(diff);
}

template <class T>
Mask mask_from_residual(const TensorT<T>& r, T tau) {
  Shape s = r.shape();
  BIVM_CHECK(s.c == 1, "residual must be single-channel");
  Mask m(s.n, s.h, s.w);
  for (size_t i = 0; i < m.on.size(); ++i)
    m.on[i] = r.vec()[i] - tau >= T(0) ? 1 : 0;
  return m;
}

template <class T>
Mask compute_mask(const TensorT<T>& f, T tau) {
  return mask_from_residual(incoherence_residual(f), tau);
}

// Evenly spaced quantiles of the residual values, ascending.
template <class T>
std::vector<T> quantile_grid(const TensorT<T>& r, int n = 33) {
  BIVM_CHECK(n >= 2, "grid needs at least two candidates");
  std::vector<T> sorted(r.vec());
  std::sort(sorted.begin(), sorted.end());
  std::vector<T> grid(static_cast<size_t>(n));
  auto last = static_cast<double>(sorted.size() - 1);
  for (int i = 0; i < n; ++i) {
    auto idx = static_cast<size_t>(std::llround(last * i / (n - 1)));
    grid[static_cast<size_t>(i)] = sorted[idx];
  }
  return grid;
}

// Entropy (nats) of the sign distribution of f at mask-active positions,
// taken across all channels. Returns -1 for an empty mask.
template <class T>
T masked_sign_entropy(const TensorT<T>& f, const Mask& m) {
  Shape s = f.shape();
  BIVM_CHECK(m.n == s.n && m.h == s.h && m.w == s.w, "mask shape mismatch");
  size_t plane = static_cast<size_t>(s.h) * s.w;
  size_t pos = 0, total = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* fp = f.data() + (static_cast<size_t>(n) * s.c + c) * plane;
      const uint8_t* mp = m.on.data() + static_cast<size_t>(n) * plane;
      for (size_t i = 0; i < plane; ++i)
        if (mp[i]) {
          ++total;
          if (fp[i] >= T(0)) ++pos;
        }
    }
  if (total == 0) return T(-1);
  double p = static_cast<double>(pos) / static_cast<double>(total);
  if (p <= 0.0 || p >= 1.0) return T(0);
  return static_cast<T>(-p * std::log(p) - (1.0 - p) * std::log(1.0 - p));
}

// Argmax of masked-sign entropy over the candidate grid; ties break toward
// the larger tau (sparser mask). Falls back to 0 with a warning when every
// candidate empties the mask.
template <class T>
T optimize_threshold(const TensorT<T>& f, const std::vector<T>& grid) {
  BIVM_CHECK(!grid.empty(), "threshold grid is empty");
  std::vector<T> cands(grid);
  std::sort(cands.begin(), cands.end());
  TensorT<T> r = incoherence_residual(f);
  T best_tau = T(0);
  T best_h = T(-1);
  for (T tau : cands) {
    T h = masked_sign_entropy(f, mask_from_residual(r, tau));
    if (h < T(0)) continue;
    if (h >= best_h) {
      best_h = h;
      best_tau = tau;
    }
  }
  if (best_h < T(0)) {
    warn("incoherence mask empty at every candidate threshold; using tau=0");
    return T(0);
  }
  return best_tau;
}

// Bilinear-upsample a binary map by factor k, re-binarized at strict > 0.5.
inline Mask upsample_mask(const Mask& base, int k) {
  BIVM_CHECK(k >= 1 && k <= 16 && (k & (k - 1)) == 0, "factor must be a power of two <= 16");
  if (k == 1) return base;
  DenseTensor m(Shape{base.n, 1, base.h, base.w});
  for (size_t i = 0; i < base.on.size(); ++i)
    m.vec()[i] = base.on[i] ? 1.0f : 0.0f;
  DenseTensor up = bilinear_resize_t(m, base.h * k, base.w * k);
  Mask out(base.n, base.h * k, base.w * k);
  for (size_t i = 0; i < out.on.size(); ++i)
    out.on[i] = up.vec()[i] > 0.5f ? 1 : 0;
  return out;
}

// Decoder block: sparse 3x3 branch gated by the mask plus a dense 1x1
// branch. The mask multiplies after batch norm, so an all-zeros mask leaves
// exactly the 1x1 branch and an all-ones mask reproduces the dense block.
template <class T>
struct ShbBlockT {
  BinConv2dT<T> conv3;
  BatchNorm2dT<T> bn3;
  BinConv2dT<T> conv1;
  BatchNorm2dT<T> bn1;
  int c_in = 0, c_out = 0;

  void init(int ci, int co, Rng& rng) {
    c_in = ci;
    c_out = co;
    ConvSpec s3;
    s3.padding = 1;
    conv3.init(ci, co, 3, s3, rng);
    bn3.init(co);
    conv1.init(ci, co, 1, ConvSpec{}, rng);
    bn1.init(co);
  }

  ag::VarT<T> forward(const ag::VarT<T>& x, const Mask& m, const Ctx<T>& ctx) {
    BIVM_CHECK(ctx.mode != NumericMode::kPacked || !ctx.training,
               "packed mode is inference-only");
    ag::VarT<T> y3;
    if (ctx.mode == NumericMode::kPacked) {
      y3 = conv3.forward_packed(ag::pad_spatial(x, 1), ctx, &m);
    } else {
      y3 = conv3.forward(x, ctx);
    }
    auto o3 = ag::mask_mul(bn3.forward(y3, ctx.training), m);
    auto o1 = bn1.forward(conv1.forward(x, ctx), ctx.training);
    return ag::add(o3, o1);
  }

  void collect(const std::string& p, std::vector<ParamRefT<T>>& params,
               std::vector<StateRefT<T>>& state) {
    conv3.collect(p + ".conv3", params);
    bn3.collect(p + ".bn3", params, state);
    conv1.collect(p + ".conv1", params);
    bn1.collect(p + ".bn1", params, state);
  }
};

}  // namespace bivm
