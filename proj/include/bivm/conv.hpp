#pragma once
// Convolution kernels.
//
// Three independent routes serve different roles:
//   float_conv_oracle : textbook 7-loop direct convolution, zero padding.
//                       Test reference; deliberately unoptimized.
//   conv_forward/...  : loop-reordered direct convolution plus its adjoints,
//                       the training-path workhorse.
//   bconv2d / sparse_bconv2d : packed XNOR+popcount kernels for inference.
//
// The packed kernels compute the exact integer dot of sign vectors; the only
// float operation is the final multiply by the layer scale, so they agree
// bit-for-bit with s * float_conv_oracle on unpacked +/-1 tensors.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "bivm/tensor.hpp"

namespace bivm {

struct ConvSpec {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

inline int conv_out_dim(int in, int k, int stride, int pad, int dil) {
  int span = dil * (k - 1) + 1;
  BIVM_CHECK(in + 2 * pad >= span, "kernel does not fit input");
  return (in + 2 * pad - span) / stride + 1;
}

// Spatial occupancy mask, one plane per batch item.
struct Mask {
  int n = 0, h = 0, w = 0;
  std::vector<uint8_t> on;

  Mask() = default;
  Mask(int n_, int h_, int w_, uint8_t fill = 0)
      : n(n_), h(h_), w(w_), on(static_cast<size_t>(n_) * h_ * w_, fill) {}
  uint8_t& at(int ni, int y, int x) {
    return on[(static_cast<size_t>(ni) * h + y) * w + x];
  }
  uint8_t at(int ni, int y, int x) const {
    return on[(static_cast<size_t>(ni) * h + y) * w + x];
  }
  int64_t count() const {
    int64_t c = 0;
    for (uint8_t v : on) c += v ? 1 : 0;
    return c;
  }
  double density() const {
    return on.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(on.size());
  }
};

struct OpCounter {
  int64_t macs = 0;
};

// -------------------------------------------------------------------------
// Reference oracle: naive direct convolution over (n, oc, oy, ox, ic, ky, kx),
// zero padding, no algorithmic shortcuts. Kept dumb on purpose.
template <class T>
TensorT<T> float_conv_oracle(const TensorT<T>& x, const TensorT<T>& w,
                             const ConvSpec& spec) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  BIVM_CHECK(spec.groups >= 1 && xs.c % spec.groups == 0 && ws.n % spec.groups == 0,
             "bad group count");
  BIVM_CHECK(ws.c == xs.c / spec.groups, "weight channels do not match input");
  int oh = conv_out_dim(xs.h, ws.h, spec.stride, spec.padding, spec.dilation);
  int ow = conv_out_dim(xs.w, ws.w, spec.stride, spec.padding, spec.dilation);
  int icg = xs.c / spec.groups;
  int ocg = ws.n / spec.groups;
  TensorT<T> out(Shape{xs.n, ws.n, oh, ow});
  for (int n = 0; n < xs.n; ++n)
    for (int oc = 0; oc < ws.n; ++oc) {
      int g = oc / ocg;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T acc = T(0);
          for (int ic = 0; ic < icg; ++ic)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
                int ix = ox * spec.stride - spec.padding + kx * spec.dilation;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += x.at(n, g * icg + ic, iy, ix) * w.at(oc, ic, ky, kx);
              }
          out.at(n, oc, oy, ox) = acc;
        }
    }
  return out;
}

// -------------------------------------------------------------------------
// Training-path direct convolution, weight-major loops with contiguous inner
// spans over the output row. Semantics identical to the oracle.
namespace detail {
// ox range such that ox*stride + off lands in [0, limit).
inline void ox_range(int off, int stride, int limit, int out_limit, int& lo, int& hi) {
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  int top = limit - 1 - off;
  hi = top < 0 ? 0 : top / stride + 1;
  if (hi > out_limit) hi = out_limit;
  if (lo > hi) lo = hi;
}
}  // namespace detail

template <class T>
TensorT<T> conv_forward(const TensorT<T>& x, const TensorT<T>& w, const ConvSpec& spec) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  BIVM_CHECK(spec.groups >= 1 && xs.c % spec.groups == 0 && ws.n % spec.groups == 0,
             "bad group count");
  BIVM_CHECK(ws.c == xs.c / spec.groups, "weight channels do not match input");
  int oh = conv_out_dim(xs.h, ws.h, spec.stride, spec.padding, spec.dilation);
  int ow = conv_out_dim(xs.w, ws.w, spec.stride, spec.padding, spec.dilation);
  int icg = xs.c / spec.groups;
  int ocg = ws.n / spec.groups;
  TensorT<T> out(Shape{xs.n, ws.n, oh, ow});
  // Double accumulation keeps sums of +/-scale terms exact, so rounding
  // happens once at the store and the result matches the packed kernels'
  // scale-times-integer bit-for-bit.
  std::vector<double> acc(static_cast<size_t>(oh) * ow);
  for (int n = 0; n < xs.n; ++n)
    for (int oc = 0; oc < ws.n; ++oc) {
      int g = oc / ocg;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int ic = 0; ic < icg; ++ic)
        for (int ky = 0; ky < ws.h; ++ky)
          for (int kx = 0; kx < ws.w; ++kx) {
            T wv = w.at(oc, ic, ky, kx);
            if (wv == T(0)) continue;
            int off_y = ky * spec.dilation - spec.padding;
            int off_x = kx * spec.dilation - spec.padding;
            int lo, hi;
            detail::ox_range(off_x, spec.stride, xs.w, ow, lo, hi);
            for (int oy = 0; oy < oh; ++oy) {
              int iy = oy * spec.stride + off_y;
              if (iy < 0 || iy >= xs.h) continue;
              const T* xrow = x.data() + x.index(n, g * icg + ic, iy, 0);
              double* arow = acc.data() + static_cast<size_t>(oy) * ow;
              for (int ox = lo; ox < hi; ++ox)
                arow[ox] += static_cast<double>(wv) * xrow[ox * spec.stride + off_x];
            }
          }
      T* orow = out.data() + out.index(n, oc, 0, 0);
      for (size_t i = 0; i < acc.size(); ++i) orow[i] = static_cast<T>(acc[i]);
    }
  return out;
}

template <class T>
TensorT<T> conv_backward_input(const TensorT<T>& grad_out, const TensorT<T>& w,
                               const Shape& x_shape, const ConvSpec& spec) {
  const Shape& gs = grad_out.shape();
  const Shape& ws = w.shape();
  int icg = x_shape.c / spec.groups;
  int ocg = ws.n / spec.groups;
  TensorT<T> dx(x_shape);
  for (int n = 0; n < x_shape.n; ++n)
    for (int oc = 0; oc < ws.n; ++oc) {
      int g = oc / ocg;
      for (int ic = 0; ic < icg; ++ic)
        for (int ky = 0; ky < ws.h; ++ky)
          for (int kx = 0; kx < ws.w; ++kx) {
            T wv = w.at(oc, ic, ky, kx);
            if (wv == T(0)) continue;
            int off_y = ky * spec.dilation - spec.padding;
            int off_x = kx * spec.dilation - spec.padding;
            int lo, hi;
            detail::ox_range(off_x, spec.stride, x_shape.w, gs.w, lo, hi);
            for (int oy = 0; oy < gs.h; ++oy) {
              int iy = oy * spec.stride + off_y;
              if (iy < 0 || iy >= x_shape.h) continue;
              T* dxrow = dx.data() + dx.index(n, g * icg + ic, iy, 0);
              const T* grow = grad_out.data() + grad_out.index(n, oc, oy, 0);
              for (int ox = lo; ox < hi; ++ox)
                dxrow[ox * spec.stride + off_x] += wv * grow[ox];
            }
          }
    }
  return dx;
}

template <class T>
TensorT<T> conv_backward_weight(const TensorT<T>& grad_out, const TensorT<T>& x,
                                const Shape& w_shape, const ConvSpec& spec) {
  const Shape& gs = grad_out.shape();
  const Shape& xs = x.shape();
  int icg = xs.c / spec.groups;
  int ocg = w_shape.n / spec.groups;
  TensorT<T> dw(w_shape);
  for (int n = 0; n < xs.n; ++n)
    for (int oc = 0; oc < w_shape.n; ++oc) {
      int g = oc / ocg;
      for (int ic = 0; ic < icg; ++ic)
        for (int ky = 0; ky < w_shape.h; ++ky)
          for (int kx = 0; kx < w_shape.w; ++kx) {
            int off_y = ky * spec.dilation - spec.padding;
            int off_x = kx * spec.dilation - spec.padding;
            int lo, hi;
            detail::ox_range(off_x, spec.stride, xs.w, gs.w, lo, hi);
            T acc = T(0);
            for (int oy = 0; oy < gs.h; ++oy) {
              int iy = oy * spec.stride + off_y;
              if (iy < 0 || iy >= xs.h) continue;
              const T* xrow = x.data() + x.index(n, g * icg + ic, iy, 0);
              const T* grow = grad_out.data() + grad_out.index(n, oc, oy, 0);
              for (int ox = lo; ox < hi; ++ox)
                acc += grow[ox] * xrow[ox * spec.stride + off_x];
            }
            dw.at(oc, ic, ky, kx) += acc;
          }
    }
  return dw;
}

// -------------------------------------------------------------------------
// Packed kernels. Spatial padding contributes the caller's pad bit: a layer
// that zero-pads its pre-activation and then binarizes against tau passes
// pad_bit_one = (0 - tau >= 0). Output = scale * integer dot.
DenseTensor bconv2d(const BitTensor& x, const BitTensor& w, float scale,
                    const ConvSpec& spec, bool pad_bit_one,
                    OpCounter* ops = nullptr);

// Same contract, but only output sites with mask == 1 are computed; the rest
// stay exactly 0 and cost nothing. The counter accrues
// (#active sites) * out_c * (in_c/groups) * kh * kw multiply-accumulates.
DenseTensor sparse_bconv2d(const BitTensor& x, const BitTensor& w, float scale,
                           const ConvSpec& spec, bool pad_bit_one, const Mask& mask,
                           OpCounter* ops = nullptr);

}  // namespace bivm
