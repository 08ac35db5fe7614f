#pragma once
// Plain tensor kernels shared by the autograd graph (forward values) and the
// packed inference path. Every kernel is deterministic and allocation-exact;
// backward companions live next to their forwards so the adjoint pairing is
// auditable in one place.

#include <cmath>
#include <vector>

#include "bivm/tensor.hpp"

namespace bivm {

template <class T>
TensorT<T> pad_spatial_t(const TensorT<T>& x, int p) {
  BIVM_CHECK(p >= 0, "negative padding");
  const Shape& s = x.shape();
  TensorT<T> out(Shape{s.n, s.c, s.h + 2 * p, s.w + 2 * p});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y) {
        const T* src = x.data() + x.index(n, c, y, 0);
        T* dst = out.data() + out.index(n, c, y + p, p);
        for (int xx = 0; xx < s.w; ++xx) dst[xx] = src[xx];
      }
  return out;
}

// Adjoint of pad_spatial_t: crop the interior back out.
template <class T>
TensorT<T> crop_spatial_t(const TensorT<T>& g, int p, const Shape& inner) {
  TensorT<T> out(inner);
  for (int n = 0; n < inner.n; ++n)
    for (int c = 0; c < inner.c; ++c)
      for (int y = 0; y < inner.h; ++y) {
        const T* src = g.data() + g.index(n, c, y + p, p);
        T* dst = out.data() + out.index(n, c, y, 0);
        for (int xx = 0; xx < inner.w; ++xx) dst[xx] = src[xx];
      }
  return out;
}

// 2x2 average pooling, stride 2. Spatial dims must be even so that pooling
// and its adjoint tile the plane exactly.
template <class T>
TensorT<T> avg_pool2_t(const TensorT<T>& x) {
  const Shape& s = x.shape();
  BIVM_CHECK(s.h % 2 == 0 && s.w % 2 == 0, "avg_pool2 needs even spatial dims");
  TensorT<T> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h / 2; ++y)
        for (int xx = 0; xx < s.w / 2; ++xx)
          out.at(n, c, y, xx) =
              (x.at(n, c, 2 * y, 2 * xx) + x.at(n, c, 2 * y, 2 * xx + 1) +
               x.at(n, c, 2 * y + 1, 2 * xx) + x.at(n, c, 2 * y + 1, 2 * xx + 1)) /
              T(4);
  return out;
}

template <class T>
TensorT<T> avg_pool2_backward_t(const TensorT<T>& g, const Shape& in_shape) {
  TensorT<T> out(in_shape);
  for (int n = 0; n < in_shape.n; ++n)
    for (int c = 0; c < in_shape.c; ++c)
      for (int y = 0; y < in_shape.h; ++y)
        for (int xx = 0; xx < in_shape.w; ++xx)
          out.at(n, c, y, xx) = g.at(n, c, y / 2, xx / 2) / T(4);
  return out;
}

template <class T>
TensorT<T> global_avg_pool_t(const TensorT<T>& x) {
  const Shape& s = x.shape();
  int64_t plane = static_cast<int64_t>(s.h) * s.w;
  TensorT<T> out(Shape{s.n, s.c, 1, 1});
  T inv = T(1) / static_cast<T>(plane);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      T acc = T(0);
      const T* row = x.data() + x.index(n, c, 0, 0);
      for (int64_t i = 0; i < plane; ++i) acc += row[i];
      out.at(n, c, 0, 0) = acc * inv;
    }
  return out;
}

// Bilinear resize with half-pixel centers; edges clamp. The sample position
// for output index d is (d + 0.5) * in/out - 0.5.
template <class T>
struct BilinearTap {
  int lo;
  T frac;
};

template <class T>
std::vector<BilinearTap<T>> bilinear_taps(int in, int out) {
  std::vector<BilinearTap<T>> taps(static_cast<size_t>(out));
  T scale = static_cast<T>(in) / static_cast<T>(out);
  for (int d = 0; d < out; ++d) {
    T src = (static_cast<T>(d) + T(0.5)) * scale - T(0.5);
    if (src < T(0)) src = T(0);
    T top = static_cast<T>(in - 1);
    if (src > top) src = top;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 2) lo = in > 1 ? in - 2 : 0;
    T frac = in > 1 ? src - static_cast<T>(lo) : T(0);
    taps[static_cast<size_t>(d)] = {lo, frac};
  }
  return taps;
}

template <class T>
TensorT<T> bilinear_resize_t(const TensorT<T>& x, int oh, int ow) {
  const Shape& s = x.shape();
  BIVM_CHECK(oh >= 1 && ow >= 1, "bad resize target");
  if (oh == s.h && ow == s.w) return x;
  auto ty = bilinear_taps<T>(s.h, oh);
  auto tx = bilinear_taps<T>(s.w, ow);
  TensorT<T> out(Shape{s.n, s.c, oh, ow});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < oh; ++y) {
        const T* r0 = x.data() + x.index(n, c, ty[y].lo, 0);
        const T* r1 = x.data() + x.index(n, c, s.h > 1 ? ty[y].lo + 1 : 0, 0);
        T fy = ty[y].frac;
        T* dst = out.data() + out.index(n, c, y, 0);
        for (int xx = 0; xx < ow; ++xx) {
          int lo = tx[xx].lo;
          int hi = s.w > 1 ? lo + 1 : 0;
          T fx = tx[xx].frac;
          T a = r0[lo] + (r0[hi] - r0[lo]) * fx;
          T b = r1[lo] + (r1[hi] - r1[lo]) * fx;
          dst[xx] = a + (b - a) * fy;
        }
      }
  return out;
}

template <class T>
TensorT<T> bilinear_resize_backward_t(const TensorT<T>& g, const Shape& in_shape) {
  const Shape& gs = g.shape();
  TensorT<T> out(in_shape);
  if (gs.h == in_shape.h && gs.w == in_shape.w) {
    for (size_t i = 0; i < g.vec().size(); ++i) out.vec()[i] = g.vec()[i];
    return out;
  }
  auto ty = bilinear_taps<T>(in_shape.h, gs.h);
  auto tx = bilinear_taps<T>(in_shape.w, gs.w);
  for (int n = 0; n < in_shape.n; ++n)
    for (int c = 0; c < in_shape.c; ++c)
      for (int y = 0; y < gs.h; ++y) {
        int y0 = ty[y].lo;
        int y1 = in_shape.h > 1 ? y0 + 1 : 0;
        T fy = ty[y].frac;
        T* r0 = out.data() + out.index(n, c, y0, 0);
        T* r1 = out.data() + out.index(n, c, y1, 0);
        const T* grow = g.data() + g.index(n, c, y, 0);
        for (int xx = 0; xx < gs.w; ++xx) {
          int x0 = tx[xx].lo;
          int x1 = in_shape.w > 1 ? x0 + 1 : 0;
          T fx = tx[xx].frac;
          T gv = grow[xx];
          r0[x0] += gv * (T(1) - fy) * (T(1) - fx);
          r0[x1] += gv * (T(1) - fy) * fx;
          r1[x0] += gv * fy * (T(1) - fx);
          r1[x1] += gv * fy * fx;
        }
      }
  return out;
}

// Channel mean, keeps a singleton channel axis.
template <class T>
TensorT<T> mean_ch_t(const TensorT<T>& x) {
  const Shape& s = x.shape();
  int64_t plane = static_cast<int64_t>(s.h) * s.w;
  TensorT<T> out(Shape{s.n, 1, s.h, s.w});
  T inv = T(1) / static_cast<T>(s.c);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.data() + x.index(n, c, 0, 0);
      T* dst = out.data() + out.index(n, 0, 0, 0);
      for (int64_t i = 0; i < plane; ++i) dst[i] += src[i] * inv;
    }
  return out;
}

template <class T>
TensorT<T> concat_ch_t(const std::vector<const TensorT<T>*>& parts) {
  BIVM_CHECK(!parts.empty(), "empty concat");
  const Shape& s0 = parts[0]->shape();
  int ctot = 0;
  for (const auto* p : parts) {
    const Shape& s = p->shape();
    BIVM_CHECK(s.n == s0.n && s.h == s0.h && s.w == s0.w, "concat shape mismatch");
    ctot += s.c;
  }
  TensorT<T> out(Shape{s0.n, ctot, s0.h, s0.w});
  int64_t plane = static_cast<int64_t>(s0.h) * s0.w;
  for (int n = 0; n < s0.n; ++n) {
    int coff = 0;
    for (const auto* p : parts) {
      const Shape& s = p->shape();
      for (int c = 0; c < s.c; ++c) {
        const T* src = p->data() + p->index(n, c, 0, 0);
        T* dst = out.data() + out.index(n, coff + c, 0, 0);
        for (int64_t i = 0; i < plane; ++i) dst[i] = src[i];
      }
      coff += s.c;
    }
  }
  return out;
}

template <class T>
TensorT<T> slice_ch_t(const TensorT<T>& x, int c0, int c1) {
  const Shape& s = x.shape();
  BIVM_CHECK(0 <= c0 && c0 < c1 && c1 <= s.c, "bad channel slice");
  TensorT<T> out(Shape{s.n, c1 - c0, s.h, s.w});
  int64_t plane = static_cast<int64_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n)
    for (int c = c0; c < c1; ++c) {
      const T* src = x.data() + x.index(n, c, 0, 0);
      T* dst = out.data() + out.index(n, c - c0, 0, 0);
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i];
    }
  return out;
}

template <class T>
TensorT<T> slice_n_t(const TensorT<T>& x, int n0, int n1) {
  const Shape& s = x.shape();
  BIVM_CHECK(0 <= n0 && n0 < n1 && n1 <= s.n, "bad batch slice");
  TensorT<T> out(Shape{n1 - n0, s.c, s.h, s.w});
  int64_t per = static_cast<int64_t>(s.c) * s.h * s.w;
  for (int n = n0; n < n1; ++n) {
    const T* src = x.data() + x.index(n, 0, 0, 0);
    T* dst = out.data() + out.index(n - n0, 0, 0, 0);
    for (int64_t i = 0; i < per; ++i) dst[i] = src[i];
  }
  return out;
}

}  // namespace bivm
