#include "bivm/info.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "bivm/util.hpp"

namespace bivm {
namespace {

struct Binner {
  double lo, width;
  int bins;
  int index(double v) const {
    if (width <= 0.0) return 0;
    int i = static_cast<int>((v - lo) / width);
    return std::min(std::max(i, 0), bins - 1);
  }
};

Binner make_binner(const std::vector<double>& v, int bins) {
  auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  return Binner{*mn, (*mx - *mn) / bins, bins};
}

}  // namespace

double binned_entropy(const std::vector<double>& x, int bins) {
  BIVM_CHECK(!x.empty(), "no samples");
  BIVM_CHECK(bins >= 2, "need at least two bins");
  Binner b = make_binner(x, bins);
  std::vector<int64_t> counts(static_cast<size_t>(bins), 0);
  for (double v : x) ++counts[static_cast<size_t>(b.index(v))];
  double h = 0.0, n = static_cast<double>(x.size());
  for (int64_t c : counts)
    if (c > 0) {
      double p = c / n;
      h -= p * std::log(p);
    }
  return h;
}

double binned_mi(const std::vector<double>& x, const std::vector<double>& t,
                 int bins) {
  BIVM_CHECK(x.size() == t.size() && !x.empty(), "sample vectors must align");
  BIVM_CHECK(bins >= 2, "need at least two bins");
  Binner bx = make_binner(x, bins), bt = make_binner(t, bins);
  std::vector<int64_t> joint(static_cast<size_t>(bins) * bins, 0);
  std::vector<int64_t> mx(static_cast<size_t>(bins), 0), mt(static_cast<size_t>(bins), 0);
  for (size_t i = 0; i < x.size(); ++i) {
    int ix = bx.index(x[i]), it = bt.index(t[i]);
    ++joint[static_cast<size_t>(ix) * bins + it];
    ++mx[static_cast<size_t>(ix)];
    ++mt[static_cast<size_t>(it)];
  }
  double n = static_cast<double>(x.size());
  double mi = 0.0;
  for (int ix = 0; ix < bins; ++ix)
    for (int it = 0; it < bins; ++it) {
      int64_t c = joint[static_cast<size_t>(ix) * bins + it];
      if (c == 0) continue;
      double pj = c / n;
      double px = mx[static_cast<size_t>(ix)] / n;
      double pt = mt[static_cast<size_t>(it)] / n;
      mi += pj * std::log(pj / (px * pt));
    }
  return mi;
}

Theorem1Report theorem1_check(int64_t samples, double a, double b, int bins,
                              uint64_t seed) {
  BIVM_CHECK(a != 0.0, "the affine map needs a != 0");
  BIVM_CHECK(samples >= 100, "too few samples for a histogram estimate");
  Rng rng(seed);
  std::vector<double> x(static_cast<size_t>(samples));
  std::vector<double> t(x.size()), tb(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.normal();
    t[i] = a * x[i] + b;
    tb[i] = a * (x[i] >= 0.0 ? 1.0 : -1.0) + b;
  }
  Theorem1Report rep;
  rep.mi_full = binned_mi(x, t, bins);
  rep.mi_binary = binned_mi(x, tb, bins);
  rep.bound = 2.0 * std::log(2.0);
  return rep;
}

Stage identity_stage() {
  return [](double v) { return v; };
}

Stage sign_stage() {
  return [](double v) { return v >= 0.0 ? 1.0 : -1.0; };
}

Stage quantizer_stage(int levels) {
  BIVM_CHECK(levels >= 2, "quantizer needs at least two levels");
  return [levels](double v) {
    double width = 6.0 / levels;
    int idx = static_cast<int>((std::min(std::max(v, -3.0), 3.0) + 3.0) / width);
    idx = std::min(std::max(idx, 0), levels - 1);
    return -3.0 + (idx + 0.5) * width;
  };
}

std::vector<double> chain_mi(const std::vector<Stage>& stages, int64_t samples,
                             int bins, uint64_t seed) {
  BIVM_CHECK(!stages.empty(), "empty chain");
  BIVM_CHECK(samples >= 100, "too few samples for a histogram estimate");
  Rng rng(seed);
  std::vector<double> x(static_cast<size_t>(samples));
  for (auto& v : x) v = rng.normal();

  std::vector<double> cur = x, out;
  for (const auto& stage : stages) {
    for (auto& v : cur) v = stage(v);
    out.push_back(binned_mi(x, cur, bins));
  }
  return out;
}

bool non_increasing(const std::vector<double>& v, double tol) {
  for (size_t i = 0; i + 1 < v.size(); ++i)
    if (v[i + 1] > v[i] + tol) return false;
  return true;
}

bool theorem2_check(const std::vector<Stage>& stages, int64_t samples,
                    double tol, int bins, uint64_t seed) {
  return non_increasing(chain_mi(stages, samples, bins, seed), tol);
}

InfoPlanePoint info_plane_point(BivmModelT<float>& model,
                                const SynthClip& clip, int bins) {
  BIVM_CHECK(clip.alpha.size() > 0, "clip needs ground-truth alpha");
  Ctx<float> ctx;
  ctx.training = false;
  model.reset_state();
  ModelOutT<float> out = model.forward(ag::constant(clip.frames), ctx, true);

  const Shape& fs = out.feats[3].shape();
  const Shape& in = clip.frames.shape();

  // Channel means pooled onto the 1/16 grid give one (x, t, y) triple per
  // position per frame.
  TensorT<float> xin(Shape{in.n, 1, in.h, in.w});
  for (int n = 0; n < in.n; ++n)
    for (int y = 0; y < in.h; ++y)
      for (int x = 0; x < in.w; ++x) {
        float s = 0.0f;
        for (int c = 0; c < in.c; ++c) s += clip.frames.at(n, c, y, x);
        xin.at(n, 0, y, x) = s / in.c;
      }
  TensorT<float> xg = bilinear_resize_t(xin, fs.h, fs.w);
  TensorT<float> yg = bilinear_resize_t(clip.alpha, fs.h, fs.w);

  std::vector<double> xs, ts, ys;
  for (int n = 0; n < fs.n; ++n)
    for (int y = 0; y < fs.h; ++y)
      for (int x = 0; x < fs.w; ++x) {
        double tval = 0.0;
        for (int c = 0; c < fs.c; ++c) tval += out.feats[3].val().at(n, c, y, x);
        xs.push_back(xg.at(n, 0, y, x));
        ts.push_back(tval / fs.c);
        ys.push_back(yg.at(n, 0, y, x));
      }
  InfoPlanePoint p;
  p.mi_xt = binned_mi(xs, ts, bins);
  p.mi_ty = binned_mi(ts, ys, bins);
  return p;
}

void info_plane_log(const std::string& csv_path, int epochs,
                    const std::function<InfoPlanePoint(int)>& probe) {
  BIVM_CHECK(epochs >= 1, "need at least one epoch");
  std::ofstream out(csv_path, std::ios::trunc);
  BIVM_CHECK(out.good(), "cannot write " + csv_path);
  out << "epoch,mi_xt,mi_ty\n";
  for (int e = 0; e < epochs; ++e) {
    InfoPlanePoint p = probe(e);
    char row[96];
    std::snprintf(row, sizeof(row), "%d,%.6f,%.6f\n", e, p.mi_xt, p.mi_ty);
    out << row;
  }
  BIVM_CHECK(out.good(), "short write to " + csv_path);
}

}  // namespace bivm
