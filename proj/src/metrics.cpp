#include "bivm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <queue>
#include <vector>

#include "bivm/util.hpp"

namespace bivm {
namespace {

constexpr double kSigma = 1.4;
constexpr double kConnStep = 0.15;
constexpr double kConnGate = 0.15;

struct GaussKernels {
  std::vector<double> smooth, deriv;  // index 0 is tap -radius
  int radius;
};

GaussKernels gauss_kernels() {
  GaussKernels k;
  k.radius = static_cast<int>(std::ceil(3.0 * kSigma));
  double sum = 0.0;
  for (int i = -k.radius; i <= k.radius; ++i) {
    double g = std::exp(-(i * i) / (2.0 * kSigma * kSigma));
    k.smooth.push_back(g);
    sum += g;
  }
  for (auto& g : k.smooth) g /= sum;
  for (int i = -k.radius; i <= k.radius; ++i)
    k.deriv.push_back(-(i / (kSigma * kSigma)) *
                      k.smooth[static_cast<size_t>(i + k.radius)]);
  return k;
}

// Separable correlation with replicate borders; kx along x, ky along y.
std::vector<double> correlate2(const std::vector<double>& img, int h, int w,
                               const std::vector<double>& kx,
                               const std::vector<double>& ky, int radius) {
  std::vector<double> mid(img.size()), out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        int xi = std::min(std::max(x + i, 0), w - 1);
        acc += kx[static_cast<size_t>(i + radius)] *
               img[static_cast<size_t>(y) * w + xi];
      }
      mid[static_cast<size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        int yi = std::min(std::max(y + i, 0), h - 1);
        acc += ky[static_cast<size_t>(i + radius)] *
               mid[static_cast<size_t>(yi) * w + x];
      }
      out[static_cast<size_t>(y) * w + x] = acc;
    }
  return out;
}

std::vector<double> gradient_magnitude(const std::vector<double>& img, int h,
                                       int w, const GaussKernels& k) {
  auto gx = correlate2(img, h, w, k.deriv, k.smooth, k.radius);
  auto gy = correlate2(img, h, w, k.smooth, k.deriv, k.radius);
  std::vector<double> mag(img.size());
  for (size_t i = 0; i < img.size(); ++i)
    mag[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
  return mag;
}

// Marks the largest 4-connected true component of mask; ties resolved by
// scan order so the result is deterministic.
std::vector<uint8_t> largest_component(const std::vector<uint8_t>& mask,
                                       int h, int w) {
  std::vector<int> label(mask.size(), -1);
  int best_label = -1;
  int64_t best_size = 0;
  int next = 0;
  std::vector<int> stack;
  for (int start = 0; start < h * w; ++start) {
    if (!mask[static_cast<size_t>(start)] || label[static_cast<size_t>(start)] >= 0)
      continue;
    int64_t size = 0;
    stack.push_back(start);
    label[static_cast<size_t>(start)] = next;
    while (!stack.empty()) {
      int p = stack.back();
      stack.pop_back();
      ++size;
      int y = p / w, x = p % w;
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int d = 0; d < 4; ++d) {
        if (ny[d] < 0 || ny[d] >= h || nx[d] < 0 || nx[d] >= w) continue;
        int q = ny[d] * w + nx[d];
        if (mask[static_cast<size_t>(q)] && label[static_cast<size_t>(q)] < 0) {
          label[static_cast<size_t>(q)] = next;
          stack.push_back(q);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
    ++next;
  }
  std::vector<uint8_t> out(mask.size(), 0);
  if (best_label >= 0)
    for (size_t i = 0; i < mask.size(); ++i)
      out[i] = label[i] == best_label ? 1 : 0;
  return out;
}

double conn_frame(const std::vector<double>& a, const std::vector<double>& g,
                  int h, int w) {
  size_t px = static_cast<size_t>(h) * w;
  std::vector<double> level(px, -1.0);
  for (double th = kConnStep; th <= 1.0 + 1e-9; th += kConnStep) {
    std::vector<uint8_t> inter(px);
    for (size_t i = 0; i < px; ++i)
      inter[i] = (a[i] >= th && g[i] >= th) ? 1 : 0;
    auto omega = largest_component(inter, h, w);
    for (size_t i = 0; i < px; ++i)
      if (level[i] < 0.0 && !omega[i]) level[i] = th - kConnStep;
  }
  double acc = 0.0;
  for (size_t i = 0; i < px; ++i) {
    double l = level[i] < 0.0 ? 1.0 : level[i];
    double da = a[i] - l, dg = g[i] - l;
    double pa = 1.0 - (da >= kConnGate ? da : 0.0);
    double pg = 1.0 - (dg >= kConnGate ? dg : 0.0);
    acc += std::fabs(pa - pg);
  }
  return acc;
}

}  // namespace

MetricsReport evaluate(const TensorT<float>& alpha,
                       const TensorT<float>& alpha_gt,
                       const TensorT<float>& fg, const TensorT<float>& fg_gt) {
  const Shape& s = alpha.shape();
  BIVM_CHECK(s == alpha_gt.shape() && s.c == 1, "alpha clips must be (T,1,h,w)");
  int T = s.n, h = s.h, w = s.w;
  size_t px = static_cast<size_t>(h) * w;
  double n_all = static_cast<double>(T) * static_cast<double>(px);

  MetricsReport rep;
  GaussKernels kern = gauss_kernels();
  double mad = 0, mse = 0, grad = 0, conn = 0;
  for (int t = 0; t < T; ++t) {
    std::vector<double> a(px), g(px);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        a[static_cast<size_t>(y) * w + x] = alpha.at(t, 0, y, x);
        g[static_cast<size_t>(y) * w + x] = alpha_gt.at(t, 0, y, x);
      }
    for (size_t i = 0; i < px; ++i) {
      double d = a[i] - g[i];
      mad += std::fabs(d);
      mse += d * d;
    }
    auto ma = gradient_magnitude(a, h, w, kern);
    auto mg = gradient_magnitude(g, h, w, kern);
    for (size_t i = 0; i < px; ++i) {
      double d = ma[i] - mg[i];
      grad += d * d;
    }
    conn += conn_frame(a, g, h, w);
  }
  rep.mad = 1e3 * mad / n_all;
  rep.mse = 1e3 * mse / n_all;
  rep.grad = 1e3 * grad / n_all;
  rep.conn = 1e3 * conn / n_all;

  if (T >= 2) {
    double acc = 0.0;
    for (int t = 0; t + 1 < T; ++t)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double da = double(alpha.at(t + 1, 0, y, x)) - alpha.at(t, 0, y, x);
          double dg = double(alpha_gt.at(t + 1, 0, y, x)) - alpha_gt.at(t, 0, y, x);
          acc += (da - dg) * (da - dg);
        }
    rep.dtssd = 1e2 * std::sqrt(acc / (static_cast<double>(T - 1) * px));
  }

  if (fg.size() > 0) {
    BIVM_CHECK(fg.shape() == fg_gt.shape() && fg.shape().n == T &&
                   fg.shape().h == h && fg.shape().w == w,
               "foreground clips must match the alpha clip");
    double acc = 0.0;
    int64_t cnt = 0;
    for (int t = 0; t < T; ++t)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (!(alpha_gt.at(t, 0, y, x) > 0.0f)) continue;
          for (int c = 0; c < fg.shape().c; ++c) {
            double d = double(fg.at(t, c, y, x)) - fg_gt.at(t, c, y, x);
            acc += d * d;
            ++cnt;
          }
        }
    rep.mse_fg = cnt > 0 ? 1e3 * acc / static_cast<double>(cnt) : 0.0;
  }
  return rep;
}

std::string MetricsReport::render() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "scaling: MAD/MSE/Grad/Conn/MSE_fg x1e3, dtSSD x1e2\n"
                "MAD %.4f  MSE %.4f  Grad %.4f  Conn %.4f  dtSSD %.4f  "
                "MSE_fg %.4f\n",
                mad, mse, grad, conn, dtssd, mse_fg);
  return buf;
}

}  // namespace bivm
