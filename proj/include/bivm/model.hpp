#pragma once
// Model assembly: elastic-block encoder with a lite gated ASPP head, sparse
// binarized decoder with an incoherence mask, and the baseline MobileNetV3
// style block used by the reference configurations.
//
// Feature pyramid contract: an input {n,3,h,w} with h,w divisible by 16
// yields features at scales 1/2, 1/4, 1/8 and 1/16 with channel widths
// (stem_out, block1_out, block3_out, aspp_out). The sparse decoder
// additionally needs h,w divisible by 32 so the 1/16 feature can be pooled
// once more for the incoherence residual.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bivm/ebb.hpp"
#include "bivm/shb.hpp"

namespace bivm {

// Encoder block row: head may change stride, mid expands, tail reduces back.
struct EbbSpec {
  int c_in = 0, c_head = 0, c_mid = 0, stride = 1, dilation = 1;
};

// Standalone trailing sub-block row.
struct SubSpec {
  int c_in = 0, c_out = 0, dilation = 1;
};

struct ModelConfig {
  std::string preset = "bivm";
  std::string backbone = "ebb";  // ebb | mbv3 (mbv3 is profile-only)
  bool full_precision = false;
  bool sparse_decoder = true;
  bool recurrence = false;
  double input_scale = 1.0;    // kept for config compatibility; native-res inference
  double assumed_density = 0.3;  // profiler expectation for sparse convs
  int stem_out = 16;
  std::vector<EbbSpec> blocks;
  std::vector<SubSpec> trailing;
  int aspp_out = 128;
  std::vector<int> ladder{128, 80, 40, 32, 16};

  void validate() const;
  std::string canonical() const;  // digest input, one key per line
  uint64_t digest() const;
  static ModelConfig preset_config(const std::string& name);
  static ModelConfig parse(const std::string& text);
  static ModelConfig from_file(const std::string& path);
};

// ---------------------------------------------------------------------------
// Baseline MobileNetV3-style inverted residual, binarized convs throughout:
// pointwise expand, grouped spatial conv, pointwise project, identity
// shortcut only when widths and resolution are preserved.
template <class T>
struct Mbv3BlockT {
  BinConv2dT<T> expand;
  BatchNorm2dT<T> bn_e;
  BinConv2dT<T> depth;
  BatchNorm2dT<T> bn_d;
  BinConv2dT<T> project;
  BatchNorm2dT<T> bn_p;
  bool shortcut = false;
  bool use_bn = true;
  int c_in = 0, c_out = 0;

  void init(int ci, int c_exp, int co, int k, int stride, Rng& rng) {
    c_in = ci;
    c_out = co;
    shortcut = ci == co && stride == 1;
    expand.init(ci, c_exp, 1, ConvSpec{}, rng);
    bn_e.init(c_exp);
    ConvSpec sd;
    sd.stride = stride;
    sd.padding = k / 2;
    sd.groups = c_exp;
    depth.init(c_exp, c_exp, k, sd, rng);
    bn_d.init(c_exp);
    project.init(c_exp, co, 1, ConvSpec{}, rng);
    bn_p.init(co);
  }

  ag::VarT<T> forward(const ag::VarT<T>& x, const Ctx<T>& ctx) {
    auto norm = [&](BatchNorm2dT<T>& bn, const ag::VarT<T>& v) {
      return use_bn ? bn.forward(v, ctx.training) : v;
    };
    auto y = norm(bn_e, expand.forward(x, ctx));
    y = norm(bn_d, depth.forward(y, ctx));
    y = norm(bn_p, project.forward(y, ctx));
    return shortcut ? ag::add(y, x) : y;
  }

  void collect(const std::string& p, std::vector<ParamRefT<T>>& params,
               std::vector<StateRefT<T>>& state) {
    expand.collect(p + ".expand", params);
    bn_e.collect(p + ".bn_e", params, state);
    depth.collect(p + ".depth", params);
    bn_d.collect(p + ".bn_d", params, state);
    project.collect(p + ".project", params);
    bn_p.collect(p + ".bn_p", params, state);
  }
};

// ---------------------------------------------------------------------------
template <class T>
struct ModelOutT {
  ag::VarT<T> alpha;  // {n,1,h,w}, clamped to [0,1]
  ag::VarT<T> fg;     // {n,3,h,w}, frame + predicted residual, clamped
  ag::VarT<T> seg;    // {n,1,h,w}, raw segmentation logits
  std::array<ag::VarT<T>, 4> feats;  // pyramid at 1/2, 1/4, 1/8, 1/16
  Mask mask_base;     // incoherence mask at 1/16
  double mask_density = 1.0;
  T tau_star = T(0);
};

template <class T>
struct BivmModelT {
  ModelConfig cfg;
  Conv2dT<T> stem;
  BatchNorm2dT<T> stem_bn;
  std::vector<EbbT<T>> blocks;
  std::vector<SubEbbT<T>> trailing;
  BinConv2dT<T> aspp_main;
  BatchNorm2dT<T> aspp_bn;
  BinConv2dT<T> aspp_gate;
  BinConv2dT<T> bottleneck;
  BatchNorm2dT<T> bottleneck_bn;
  std::vector<ShbBlockT<T>> shb;
  Conv2dT<T> proj;
  std::vector<RecurrentGateT<T>> gates;
  std::vector<TensorT<T>> hidden;  // recurrent state, detached across calls
  T tau_star = T(0);

  void init(const ModelConfig& c, uint64_t seed) {
    cfg = c;
    cfg.validate();
    BIVM_CHECK(cfg.backbone == "ebb",
               "only the elastic backbone is runnable; mbv3 configs are profile-only");
    Rng rng(seed);
    ConvSpec stem_spec;
    stem_spec.stride = 2;
    stem_spec.padding = 1;
    stem.init(3, cfg.stem_out, 3, stem_spec, false, rng);
    stem_bn.init(cfg.stem_out);
    blocks.resize(cfg.blocks.size());
    for (size_t i = 0; i < cfg.blocks.size(); ++i) {
      const EbbSpec& b = cfg.blocks[i];
      blocks[i].init(b.c_in, b.c_head, b.c_mid, b.stride, b.dilation, rng);
    }
    trailing.resize(cfg.trailing.size());
    for (size_t i = 0; i < cfg.trailing.size(); ++i) {
      const SubSpec& t = cfg.trailing[i];
      trailing[i].init(t.c_in, t.c_out, 1, t.dilation, rng);
    }
    int c_raw = cfg.trailing.empty() ? blocks.back().out_channels()
                                     : cfg.trailing.back().c_out;
    aspp_main.init(c_raw, cfg.aspp_out, 1, ConvSpec{}, rng);
    aspp_bn.init(cfg.aspp_out);
    aspp_gate.init(c_raw, cfg.aspp_out, 1, ConvSpec{}, rng);

    ConvSpec b3;
    b3.padding = 1;
    bottleneck.init(cfg.aspp_out, cfg.ladder[0], 3, b3, rng);
    bottleneck_bn.init(cfg.ladder[0]);

    int skip2 = cfg.stem_out;
    int skip4 = blocks.empty() ? 0 : blocks[0].out_channels();
    int skip8 = blocks.size() > 2 ? blocks[2].out_channels() : 0;
    shb.resize(4);
    shb[0].init(cfg.ladder[0] + skip8 + 3, cfg.ladder[1], rng);
    shb[1].init(cfg.ladder[1] + skip4 + 3, cfg.ladder[2], rng);
    shb[2].init(cfg.ladder[2] + skip2 + 3, cfg.ladder[3], rng);
    shb[3].init(cfg.ladder[3] + 3, cfg.ladder[4], rng);
    proj.init(cfg.ladder[4], 5, 1, ConvSpec{}, true, rng);
    // Small-head start: damp the projection and bias alpha into the open
    // interval, so the clamped outputs keep live gradients from step one.
    for (auto& v : proj.w.mutable_val().vec()) v *= T(0.2);
    proj.bias.mutable_val().at(0, 0, 0, 0) = T(0.5);

    if (cfg.recurrence) {
      gates.resize(4);
      for (int i = 0; i < 4; ++i) gates[static_cast<size_t>(i)].init(cfg.ladder[static_cast<size_t>(i) + 1], rng);
      hidden.clear();
    }
  }

  void reset_state() { hidden.clear(); }

  // refresh_tau re-optimizes monomask threshold from the current batch; leave
  // false at inference so the checkpointed tau* stays frozen.
  ModelOutT<T> forward(const ag::VarT<T>& frames, const Ctx<T>& ctx,
                       bool refresh_tau = false) {
    // Eval forwards never need the graph; this also admits the packed path.
    std::optional<ag::NoGradScope> ng;
    if (!ctx.training) ng.emplace();
    Shape s = frames.shape();
    BIVM_CHECK(s.c == 3, "expected 3-channel frames");
    BIVM_CHECK(s.h % 16 == 0 && s.w % 16 == 0, "frame dims must be multiples of 16");
    if (cfg.sparse_decoder)
      BIVM_CHECK(s.h % 32 == 0 && s.w % 32 == 0,
                 "sparse decoder needs frame dims divisible by 32");

    // Encoder pyramid. Raw frames go in unshifted: the entropy refresh of
    // each conv's input threshold recenters sign bits on the data itself.
    auto f2 = stem_bn.forward(stem.forward(frames), ctx.training);
    ag::VarT<T> x = f2, f4, f8;
    for (size_t i = 0; i < blocks.size(); ++i) {
      x = blocks[i].forward(x, ctx);
      if (i == 0) f4 = x;
      if (i == 2) f8 = x;
    }
    for (auto& t : trailing) x = t.forward(x, ctx);
    auto aspp_feat = aspp_bn.forward(aspp_main.forward(x, ctx), ctx.training);
    auto gate = ag::sigmoid(aspp_gate.forward(ag::global_avg_pool(x), ctx));
    auto f16 = ag::channel_gate_mul(aspp_feat, gate);

    // Bottleneck block and the incoherence mask derived from its output.
    auto d16 = ag::add(bottleneck_bn.forward(bottleneck.forward(f16, ctx), ctx.training), f16);
    ModelOutT<T> out;
    Shape ds = d16.shape();
    if (cfg.sparse_decoder) {
      if (refresh_tau) {
        TensorT<T> r = incoherence_residual(d16.val());
        tau_star = optimize_threshold(d16.val(), quantile_grid(r));
      }
      out.mask_base = compute_mask(d16.val(), tau_star);
    } else {
      out.mask_base = Mask(ds.n, ds.h, ds.w, 1);
    }
    out.tau_star = tau_star;
    out.mask_density = out.mask_base.density();

    // Source pyramid for decoder skip inputs.
    auto src2 = ag::avg_pool2(frames);
    auto src4 = ag::avg_pool2(src2);
    auto src8 = ag::avg_pool2(src4);

    auto up2 = [](const ag::VarT<T>& v) {
      return ag::bilinear_resize(v, v.shape().h * 2, v.shape().w * 2);
    };
    auto d8 = shb[0].forward(ag::concat_ch<T>({up2(d16), f8, src8}),
                             upsample_mask(out.mask_base, 2), ctx);
    d8 = recur(0, d8);
    auto d4 = shb[1].forward(ag::concat_ch<T>({up2(d8), f4, src4}),
                             upsample_mask(out.mask_base, 4), ctx);
    d4 = recur(1, d4);
    auto d2 = shb[2].forward(ag::concat_ch<T>({up2(d4), f2, src2}),
                             upsample_mask(out.mask_base, 8), ctx);
    d2 = recur(2, d2);
    auto d1 = shb[3].forward(ag::concat_ch<T>({up2(d2), frames}),
                             upsample_mask(out.mask_base, 16), ctx);
    d1 = recur(3, d1);

    auto heads = proj.forward(d1);
    out.alpha = ag::clamp01(ag::slice_ch(heads, 0, 1));
    out.fg = ag::clamp01(ag::add(ag::slice_ch(heads, 1, 4), frames));
    out.seg = ag::slice_ch(heads, 4, 5);
    out.feats = {f2, f4, f8, f16};
    return out;
  }

  void collect(std::vector<ParamRefT<T>>& params, std::vector<StateRefT<T>>& state) {
    stem.collect("stem.conv", params);
    stem_bn.collect("stem.bn", params, state);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect("backbone.ebb" + std::to_string(i + 1), params, state);
    for (size_t i = 0; i < trailing.size(); ++i)
      trailing[i].collect("backbone.trail" + std::to_string(i + 1), params, state);
    aspp_main.collect("aspp.main", params);
    aspp_bn.collect("aspp.bn", params, state);
    aspp_gate.collect("aspp.gate", params);
    bottleneck.collect("decoder.bottleneck.conv", params);
    bottleneck_bn.collect("decoder.bottleneck.bn", params, state);
    for (size_t i = 0; i < shb.size(); ++i)
      shb[i].collect("decoder.shb" + std::to_string(i + 1), params, state);
    proj.collect("heads.proj", params);
    for (size_t i = 0; i < gates.size(); ++i)
      gates[i].collect("decoder.gate" + std::to_string(i + 1), params);
  }

  std::vector<ag::VarT<T>*> reg_gains() {
    std::vector<ag::VarT<T>*> out;
    for (auto& b : blocks) b.collect_reg_gains(out);
    return out;
  }

 private:
  // Optional gated recurrence; hidden state is carried across calls as plain
  // values, so gradients stay within the current step.
  ag::VarT<T> recur(size_t i, const ag::VarT<T>& x) {
    if (!cfg.recurrence) return x;
    if (hidden.size() != 4) hidden.assign(4, TensorT<T>());
    if (hidden[i].shape() != x.shape()) hidden[i] = TensorT<T>(x.shape());
    auto h = gates[i].forward(x, ag::VarT<T>(hidden[i]));
    hidden[i] = h.val();
    return h;
  }
};

using BivmModel = BivmModelT<float>;

int64_t param_count(const std::vector<ParamRefT<float>>& params);

}  // namespace bivm
