#pragma once
// Training objectives. The matting stack treats the frame axis as the batch
// axis, so temporal terms difference consecutive batch entries. Foreground
// terms only score pixels the ground truth marks as part-foreground.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "bivm/autograd.hpp"
#include "bivm/ebb.hpp"

namespace bivm {

constexpr double kLambdaEbb = 1e-4;
constexpr double kLambdaLbm = 1e-4;

template <class T>
struct LossReportT {
  ag::VarT<T> l1_alpha = ag::scalar(T(0));
  ag::VarT<T> lap_alpha = ag::scalar(T(0));
  ag::VarT<T> tc_alpha = ag::scalar(T(0));
  ag::VarT<T> l1_fg = ag::scalar(T(0));
  ag::VarT<T> tc_fg = ag::scalar(T(0));
  ag::VarT<T> seg_bce = ag::scalar(T(0));
  ag::VarT<T> lbm = ag::scalar(T(0));
  ag::VarT<T> ebb_reg = ag::scalar(T(0));
  ag::VarT<T> total = ag::scalar(T(0));
};

using LossReport = LossReportT<float>;

namespace detail_loss {

template <class T>
ag::VarT<T> mean_abs(const ag::VarT<T>& a, const ag::VarT<T>& b) {
  return ag::mean_all(ag::abs_op(ag::sub(a, b)));
}

// Sum of |a-b| over elements where w==1, divided by the active count.
// Returns zero when nothing is active.
template <class T>
ag::VarT<T> masked_l1(const ag::VarT<T>& a, const ag::VarT<T>& b,
                      const TensorT<T>& w) {
  T active = T(0);
  for (T v : w.vec()) active += v;
  if (active == T(0)) return ag::scalar(T(0));
  auto diff = ag::mul(ag::abs_op(ag::sub(a, b)), ag::constant(w));
  return ag::scale_const(ag::sum_all(diff), T(1) / active);
}

template <class T>
TensorT<T> binomial5_kernel(int c) {
  static const T row[5] = {T(1), T(4), T(6), T(4), T(1)};
  TensorT<T> k(Shape{c, 1, 5, 5});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x)
        k.at(ci, 0, y, x) = row[y] * row[x] / T(256);
  return k;
}

template <class T>
ag::VarT<T> t_diff(const ag::VarT<T>& x) {
  int n = x.shape().n;
  return ag::sub(ag::slice_n(x, 1, n), ag::slice_n(x, 0, n - 1));
}

}  // namespace detail_loss

// Five-level Laplacian pyramid L1. Each level is the gap between a gaussian
// level and the bilinear re-expansion of the next; the coarsest level is the
// residual itself. Level l carries weight 2^l.
template <class T>
ag::VarT<T> laplacian_pyramid_l1(const ag::VarT<T>& pred,
                                 const ag::VarT<T>& truth, int levels = 5) {
  int c = pred.shape().c;
  ConvSpec blur;
  blur.stride = 2;
  blur.padding = 2;
  blur.groups = c;
  auto kern = ag::constant(detail_loss::binomial5_kernel<T>(c));

  ag::VarT<T> ga = pred, gb = truth;
  ag::VarT<T> acc = ag::scalar(T(0));
  for (int l = 0; l < levels; ++l) {
    ag::VarT<T> la = ga, lb = gb;
    if (l + 1 < levels) {
      auto na = ag::conv2d(ga, kern, blur);
      auto nb = ag::conv2d(gb, kern, blur);
      la = ag::sub(ga, ag::bilinear_resize(na, ga.shape().h, ga.shape().w));
      lb = ag::sub(gb, ag::bilinear_resize(nb, gb.shape().h, gb.shape().w));
      ga = na;
      gb = nb;
    }
    T weight = static_cast<T>(1 << l);
    acc = ag::add(acc, ag::scale_const(detail_loss::mean_abs(la, lb), weight));
  }
  return acc;
}

// Alpha + foreground matting objective over T frames stacked on the batch
// axis. Foreground terms are restricted to ground-truth alpha > 0; the
// temporal foreground term uses the intersection of the two frames' gates.
template <class T>
LossReportT<T> matting_loss(const ag::VarT<T>& alpha, const ag::VarT<T>& fg,
                            const TensorT<T>& alpha_gt,
                            const TensorT<T>& fg_gt) {
  BIVM_CHECK(alpha.shape() == alpha_gt.shape(), "alpha shape mismatch");
  BIVM_CHECK(fg.shape() == fg_gt.shape(), "foreground shape mismatch");
  const Shape& as = alpha_gt.shape();
  LossReportT<T> rep;

  auto agt = ag::constant(alpha_gt);
  auto fgt = ag::constant(fg_gt);
  rep.l1_alpha = detail_loss::mean_abs(alpha, agt);
  rep.lap_alpha = laplacian_pyramid_l1(alpha, agt);

  // Foreground gate: pixels where the true alpha has any foreground.
  TensorT<T> gate(fg_gt.shape());
  for (int n = 0; n < as.n; ++n)
    for (int ci = 0; ci < fg_gt.shape().c; ++ci)
      for (int y = 0; y < as.h; ++y)
        for (int x = 0; x < as.w; ++x)
          gate.at(n, ci, y, x) = alpha_gt.at(n, 0, y, x) > T(0) ? T(1) : T(0);
  rep.l1_fg = detail_loss::masked_l1(fg, fgt, gate);

  if (as.n >= 2) {
    rep.tc_alpha = detail_loss::mean_abs(detail_loss::t_diff(alpha),
                                         detail_loss::t_diff(agt));
    TensorT<T> gate2(Shape{as.n - 1, fg_gt.shape().c, as.h, as.w});
    for (int n = 0; n + 1 < as.n; ++n)
      for (int ci = 0; ci < fg_gt.shape().c; ++ci)
        for (int y = 0; y < as.h; ++y)
          for (int x = 0; x < as.w; ++x)
            gate2.at(n, ci, y, x) = (alpha_gt.at(n, 0, y, x) > T(0) &&
                                     alpha_gt.at(n + 1, 0, y, x) > T(0))
                                        ? T(1)
                                        : T(0);
    rep.tc_fg = detail_loss::masked_l1(detail_loss::t_diff(fg),
                                       detail_loss::t_diff(fgt), gate2);
  } else {
    warn("matting loss: single frame, temporal terms set to zero");
  }

  rep.total = ag::add(
      ag::add(rep.l1_alpha, rep.lap_alpha),
      ag::add(ag::add(ag::scale_const(rep.tc_alpha, T(5)), rep.l1_fg),
              ag::scale_const(rep.tc_fg, T(5))));
  return rep;
}

inline Mask mask_resize_nearest(const Mask& m, int h, int w) {
  Mask out(m.n, h, w);
  for (int n = 0; n < m.n; ++n)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(n, y, x) = m.at(n, static_cast<int>(static_cast<int64_t>(y) * m.h / h),
                               static_cast<int>(static_cast<int64_t>(x) * m.w / w));
  return out;
}

// Masked normalized-square feature mimicking against a frozen full-precision
// counterpart. Each scale contributes the l2 norm of the masked difference
// of f^2 / ||f^2||_2; zero-energy features are skipped with a warning.
template <class T>
ag::VarT<T> lbm_loss(const std::array<ag::VarT<T>, 4>& feats,
                     const std::array<ag::VarT<T>, 4>& feats_fp,
                     const Mask& base) {
  ag::VarT<T> acc = ag::scalar(T(0));
  for (size_t i = 0; i < feats.size(); ++i) {
    const Shape& fs = feats[i].shape();
    BIVM_CHECK(fs == feats_fp[i].shape(), "mimicking features must align");
    auto g = ag::square(feats[i]);
    auto gfp = ag::square(ag::detach(feats_fp[i]));
    auto ng = ag::l2_norm(g);
    auto ngfp = ag::l2_norm(gfp);
    if (ng.item() == T(0) || ngfp.item() == T(0)) {
      warn("mimicking scale " + std::to_string(i) + " has zero-energy features, skipped");
      continue;
    }
    auto d = ag::sub(ag::div_by_scalar(g, ng), ag::div_by_scalar(gfp, ngfp));
    Mask m = mask_resize_nearest(base, fs.h, fs.w);
    acc = ag::add(acc, ag::l2_norm(ag::mask_mul(d, m)));
  }
  return acc;
}

// Classification pretext objective: cross entropy plus the gain regularizer.
template <class T>
ag::VarT<T> pretraining_loss(const ag::VarT<T>& logits,
                             const std::vector<int>& labels,
                             const std::vector<ag::VarT<T>*>& gains) {
  auto ce = ag::softmax_ce(logits, labels);
  if (gains.empty()) return ce;
  return ag::add(ce, ag::scale_const(ebb_regularizer(gains), static_cast<T>(kLambdaEbb)));
}

template <class T>
ag::VarT<T> seg_bce_loss(const ag::VarT<T>& logits, const TensorT<T>& target) {
  return ag::bce_logits(logits, target);
}

// Grand matting total: L^M plus the mimicking term (first stage only) plus
// the gain regularizer. Fills rep.total and returns it.
template <class T>
ag::VarT<T> total_matting_loss(LossReportT<T>& rep, int stage) {
  auto t = rep.total;
  if (stage == 1)
    t = ag::add(t, ag::scale_const(rep.lbm, static_cast<T>(kLambdaLbm)));
  t = ag::add(t, ag::scale_const(rep.ebb_reg, static_cast<T>(kLambdaEbb)));
  rep.total = t;
  return t;
}

}  // namespace bivm
