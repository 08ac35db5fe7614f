#pragma once
// Elastic binarized blocks: binarized convs wrapped in parameter-free
// channel-mapping shortcuts, each weighted by a learnable scalar gain.
//
// Sub-block theta (3x3 at input width, then 1x1 to the output width):
//   x' = BN(bconv3(x))  + g_l2 * f(x  -> c_in,  spatial=stride)
//   o  = BN(bconv1(x')) + g_l1 * f(x' -> c_out)
//
// Full block (head / mid / tail sub-blocks, mid expands, tail reduces):
//   x' = head(x)
//   o  = tail(mid(x') + g_c2 * f(x -> c_mid)) + g_c1 * f(x' -> c_out)
//        + g_b * f(x -> c_out)
//
// Layer gains start at 1; cross and block gains start near zero (r * 1e-3)
// and carry a signed-sum regularizer so training can silence a shortcut.

#include <string>
#include <vector>

#include "bivm/layers.hpp"

namespace bivm {

template <class T>
struct SubEbbT {
  BinConv2dT<T> conv3;
  BatchNorm2dT<T> bn3;
  BinConv2dT<T> conv1;
  BatchNorm2dT<T> bn1;
  ag::VarT<T> gl1, gl2;
  int c_in = 0, c_out = 0, stride = 1;

  void init(int ci, int co, int s, int dilation, Rng& rng) {
    c_in = ci;
    c_out = co;
    stride = s;
    ConvSpec s3;
    s3.stride = s;
    s3.padding = dilation;
    s3.dilation = dilation;
    conv3.init(ci, ci, 3, s3, rng);
    bn3.init(ci);
    conv1.init(ci, co, 1, ConvSpec{}, rng);
    bn1.init(co);
    gl1 = ag::VarT<T>(TensorT<T>(Shape{1, 1, 1, 1}, T(1)), true);
    gl2 = ag::VarT<T>(TensorT<T>(Shape{1, 1, 1, 1}, T(1)), true);
  }

  ag::VarT<T> forward(const ag::VarT<T>& x, const Ctx<T>& ctx) {
    auto xp = ag::add_scaled(bn3.forward(conv3.forward(x, ctx), ctx.training),
                             map_channels(x, c_in, stride), gl2);
    return ag::add_scaled(bn1.forward(conv1.forward(xp, ctx), ctx.training),
                          map_channels(xp, c_out), gl1);
  }

  void collect(const std::string& p, std::vector<ParamRefT<T>>& params,
               std::vector<StateRefT<T>>& state) {
    conv3.collect(p + ".conv3", params);
    bn3.collect(p + ".bn3", params, state);
    conv1.collect(p + ".conv1", params);
    bn1.collect(p + ".bn1", params, state);
    params.push_back({p + ".gl1", &gl1});
    params.push_back({p + ".gl2", &gl2});
  }
};

template <class T>
struct EbbT {
  SubEbbT<T> head, mid, tail;
  ag::VarT<T> gc1, gc2, gb;

  // Widths follow (head_in, head_out, mid_out); the tail maps mid_out back
  // to head_out. Stride sits on the head only; dilation applies throughout.
  void init(int c_in, int c_head, int c_mid, int stride, int dilation, Rng& rng) {
    head.init(c_in, c_head, stride, dilation, rng);
    mid.init(c_head, c_mid, 1, dilation, rng);
    tail.init(c_mid, c_head, 1, dilation, rng);
    auto small = [&rng] {
      return ag::VarT<T>(
          TensorT<T>(Shape{1, 1, 1, 1}, static_cast<T>(rng.uniform(0.0, 1.0) * 1e-3)),
          true);
    };
    gc1 = small();
    gc2 = small();
    gb = small();
  }

  ag::VarT<T> forward(const ag::VarT<T>& x, const Ctx<T>& ctx) {
    auto xp = head.forward(x, ctx);
    auto t = ag::add_scaled(mid.forward(xp, ctx),
                            map_channels(x, mid.c_out, head.stride), gc2);
    auto o = ag::add_scaled(tail.forward(t, ctx),
                            map_channels(xp, tail.c_out), gc1);
    return ag::add_scaled(o, map_channels(x, tail.c_out, head.stride), gb);
  }

  int out_channels() const { return tail.c_out; }

  void collect(const std::string& p, std::vector<ParamRefT<T>>& params,
               std::vector<StateRefT<T>>& state) {
    head.collect(p + ".head", params, state);
    mid.collect(p + ".mid", params, state);
    tail.collect(p + ".tail", params, state);
    params.push_back({p + ".gc1", &gc1});
    params.push_back({p + ".gc2", &gc2});
    params.push_back({p + ".gb", &gb});
  }

  void collect_reg_gains(std::vector<ag::VarT<T>*>& out) {
    out.push_back(&gc1);
    out.push_back(&gc2);
    out.push_back(&gb);
  }
};

// Signed sum of cross/block gains. Regularizing the raw sum (not magnitudes)
// pushes redundant shortcuts toward zero without penalizing layer gains.
template <class T>
ag::VarT<T> ebb_regularizer(const std::vector<ag::VarT<T>*>& gains) {
  BIVM_CHECK(!gains.empty(), "no gains to regularize");
  ag::VarT<T> acc = ag::sum_all(*gains[0]);
  for (size_t i = 1; i < gains.size(); ++i)
    acc = ag::add(acc, ag::sum_all(*gains[i]));
  return acc;
}

}  // namespace bivm
