#include "bivm/profile.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "bivm/util.hpp"

namespace bivm {

namespace {

// Instruction-style accounting: a fused float multiply-add is one op, and a
// 64-lane xnor word plus its popcount-accumulate are two ops, so one
// binarized MAC costs 2/64.
constexpr double kFpMacFlops = 1.0;
constexpr double kBinMacFlops = 2.0 / 64.0;

// Elementwise ops per output element (folded bn and scaled adds are FMAs).
constexpr double kBnElem = 1.0;
constexpr double kSignElem = 1.0;
constexpr double kScaledAddElem = 1.0;
constexpr double kBilinearElem = 4.0;
constexpr double kPool2Elem = 4.0;
constexpr double kSigmoidElem = 4.0;

// Accumulates costs while walking a config's shapes. Mirrors the runtime
// graph but shares no code with it.
struct Walker {
  const ModelConfig& cfg;
  ProfileReport rep;

  void add(const std::string& part, const std::string& name, double flops,
           double bits = 0, double floats = 0) {
    rep.items.push_back({part, name, flops, bits, floats});
  }

  // Convolution that the model binarizes unless running full precision.
  void conv_bin(const std::string& part, const std::string& name, double ic,
                double oc, double k, double px, double groups = 1.0,
                double density = 1.0) {
    double weights = oc * (ic / groups) * k * k;
    double macs = weights * px * density;
    if (cfg.full_precision) {
      add(part, name, macs * kFpMacFlops, 0, weights);
    } else {
      // Scale and threshold ride along as floats.
      add(part, name, macs * kBinMacFlops, weights, 2);
      add(part, name + ".sign", kSignElem * ic * px);
    }
  }

  // Always full precision (stem, projection head, recurrent gates).
  void conv_fp(const std::string& part, const std::string& name, double ic,
               double oc, double k, double px, double bias_floats = 0) {
    double weights = oc * ic * k * k;
    add(part, name, weights * px * kFpMacFlops + bias_floats * px, 0,
        weights + bias_floats);
  }

  void bn(const std::string& part, const std::string& name, double c,
          double px) {
    add(part, name, kBnElem * c * px, 0, 4 * c);
  }

  void elem(const std::string& part, const std::string& name, double flops) {
    add(part, name, flops);
  }

  // Channel map cost: reducing c_in rows into c_out spends one op per input
  // element; expansion is a copy and costs nothing. A factor-2 spatial
  // reduce pools first.
  void map_cost(const std::string& part, const std::string& name, double ci,
                double co, double px_out, int spatial_factor) {
    double f = 0;
    if (spatial_factor == 2) f += kPool2Elem * ci * px_out;
    if (ci > co) f += ci * px_out;
    if (f > 0) elem(part, name, f);
  }

  void sub_block(const std::string& part, const std::string& name, double ci,
                 double co, int stride, double px_out) {
    conv_bin(part, name + ".conv3", ci, ci, 3, px_out);
    bn(part, name + ".bn3", ci, px_out);
    map_cost(part, name + ".short3", ci, ci, px_out, stride);
    elem(part, name + ".add3", kScaledAddElem * ci * px_out);
    conv_bin(part, name + ".conv1", ci, co, 1, px_out);
    bn(part, name + ".bn1", co, px_out);
    map_cost(part, name + ".short1", ci, co, px_out, 1);
    elem(part, name + ".add1", kScaledAddElem * co * px_out);
    // The two layer gains.
    add(part, name + ".gains", 0, 0, 2);
  }

  void ebb_block(const std::string& name, const EbbSpec& b, double px_out) {
    sub_block("backbone", name + ".head", b.c_in, b.c_head, b.stride, px_out);
    sub_block("backbone", name + ".mid", b.c_head, b.c_mid, 1, px_out);
    map_cost("backbone", name + ".cross2", b.c_in, b.c_mid, px_out, b.stride);
    elem("backbone", name + ".addc2", kScaledAddElem * b.c_mid * px_out);
    sub_block("backbone", name + ".tail", b.c_mid, b.c_head, 1, px_out);
    elem("backbone", name + ".addc1", kScaledAddElem * b.c_head * px_out);
    map_cost("backbone", name + ".crossb", b.c_in, b.c_head, px_out, b.stride);
    elem("backbone", name + ".addb", kScaledAddElem * b.c_head * px_out);
    // The three cross and block gains; layer gains live in the sub blocks.
    add("backbone", name + ".gains", 0, 0, 3);
  }

  void recurrent_gate(const std::string& name, double c, double px) {
    double w = 3 * (2 * c * c + c);
    add("decoder", name, 3 * 2 * c * c * px * kFpMacFlops + 12 * c * px, 0, w);
  }

  void walk_ebb(int h, int w) {
    double px2 = double(h / 2) * (w / 2);
    double px4 = double(h / 4) * (w / 4);
    double px8 = double(h / 8) * (w / 8);
    double px16 = double(h / 16) * (w / 16);
    double px1 = double(h) * w;

    conv_fp("stem", "stem.conv", 3, cfg.stem_out, 3, px2);
    bn("stem", "stem.bn", cfg.stem_out, px2);

    // Stride ladder after the stem: 2, 1, 2, then one more 2.
    double px = px2;
    int skip4_c = 0, skip8_c = 0;
    for (size_t i = 0; i < cfg.blocks.size(); ++i) {
      const EbbSpec& b = cfg.blocks[i];
      if (b.stride == 2) px /= 4;
      ebb_block("ebb" + std::to_string(i), b, px);
      if (i == 0) skip4_c = b.c_head;
      if (i == 2) skip8_c = b.c_head;
    }
    for (size_t i = 0; i < cfg.trailing.size(); ++i) {
      const SubSpec& s = cfg.trailing[i];
      sub_block("backbone", "trail" + std::to_string(i), s.c_in, s.c_out, 1,
                px16);
    }
    double c16 = cfg.trailing.empty() ? cfg.blocks.back().c_head
                                      : cfg.trailing.back().c_out;

    conv_bin("aspp", "aspp.main", c16, cfg.aspp_out, 1, px16);
    bn("aspp", "aspp.bn", cfg.aspp_out, px16);
    conv_bin("aspp", "aspp.gate", c16, cfg.aspp_out, 1, 1);
    elem("aspp", "aspp.gap", c16 * px16);
    elem("aspp", "aspp.sigmoid", kSigmoidElem * cfg.aspp_out);
    elem("aspp", "aspp.mul", cfg.aspp_out * px16);

    // Decoder bottleneck plus the mask computed from it.
    double ca = cfg.aspp_out;
    conv_bin("decoder", "bottleneck.conv", ca, ca, 3, px16);
    bn("decoder", "bottleneck.bn", ca, px16);
    elem("decoder", "bottleneck.add", ca * px16);
    if (cfg.sparse_decoder) {
      elem("decoder", "mask.residual",
           kPool2Elem * ca * px16 / 4 + kBilinearElem * ca * px16 +
               3 * ca * px16 + px16);
      elem("decoder", "mask.upsample",
           (kBilinearElem + 1) * (px8 + px4 + px2 + px1));
    }

    double dens = cfg.sparse_decoder ? cfg.assumed_density : 1.0;
    const std::vector<int>& lad = cfg.ladder;
    int skip_c[4] = {skip8_c, skip4_c, cfg.stem_out, 0};
    double px_at[4] = {px8, px4, px2, px1};
    double px_prev = px16;
    for (int i = 0; i < 4; ++i) {
      std::string nm = "shb" + std::to_string(i);
      double ci = lad[i] + skip_c[i] + 3;
      double co = lad[i + 1];
      elem("decoder", nm + ".up", kBilinearElem * lad[i] * px_at[i]);
      if (i < 3)
        elem("decoder", nm + ".srcpool", kPool2Elem * 3 * px_at[i]);
      conv_bin("decoder", nm + ".conv3", ci, co, 3, px_at[i], 1, dens);
      bn("decoder", nm + ".bn3", co, px_at[i]);
      elem("decoder", nm + ".maskmul", co * px_at[i]);
      conv_bin("decoder", nm + ".conv1", ci, co, 1, px_at[i]);
      bn("decoder", nm + ".bn1", co, px_at[i]);
      elem("decoder", nm + ".add", co * px_at[i]);
      if (cfg.recurrence)
        recurrent_gate("gate" + std::to_string(i), co, px_at[i]);
      px_prev = px_at[i];
    }
    (void)px_prev;
    add("decoder", "mask.tau", 0, 0, 1);

    conv_fp("heads", "proj", lad[4], 5, 1, px1, 5);
    elem("heads", "alpha.clamp", px1);
    elem("heads", "fg.residual", 3 * px1 + 3 * px1);
  }

  // MobileNetV3-Large shaped backbone with an RVM-shaped decoder. Used for
  // the baseline splits; the runtime only profiles this graph.
  void walk_mbv3(int h, int w) {
    double px2 = double(h / 2) * (w / 2);
    double px4 = double(h / 4) * (w / 4);
    double px8 = double(h / 8) * (w / 8);
    double px16 = double(h / 16) * (w / 16);
    double px1 = double(h) * w;

    conv_fp("stem", "stem.conv", 3, 16, 3, px2);
    bn("stem", "stem.bn", 16, px2);

    struct Row {
      int k, e, o, ci;
      double px_in, px_out;
    };
    // (kernel, expanded, out, in) with input and output pixel counts; the
    // last stage is dilated so it stays at 1/16.
    std::vector<Row> rows = {
        {3, 16, 16, 16, px2, px2},      {3, 64, 24, 16, px2, px4},
        {3, 72, 24, 24, px4, px4},      {5, 72, 40, 24, px4, px8},
        {5, 120, 40, 40, px8, px8},     {5, 120, 40, 40, px8, px8},
        {3, 240, 80, 40, px8, px16},    {3, 200, 80, 80, px16, px16},
        {3, 184, 80, 80, px16, px16},   {3, 184, 80, 80, px16, px16},
        {3, 480, 112, 80, px16, px16},  {3, 672, 112, 112, px16, px16},
        {5, 672, 160, 112, px16, px16}, {5, 960, 160, 160, px16, px16},
        {5, 960, 160, 160, px16, px16}};
    for (size_t i = 0; i < rows.size(); ++i) {
      const Row& r = rows[i];
      std::string nm = "mb" + std::to_string(i);
      if (r.e != r.ci) {
        conv_bin("backbone", nm + ".expand", r.ci, r.e, 1, r.px_in);
        bn("backbone", nm + ".bn_e", r.e, r.px_in);
      }
      conv_bin("backbone", nm + ".depth", r.e, r.e, r.k, r.px_out, r.e);
      bn("backbone", nm + ".bn_d", r.e, r.px_out);
      conv_bin("backbone", nm + ".project", r.e, r.o, 1, r.px_out);
      bn("backbone", nm + ".bn_p", r.o, r.px_out);
      if (r.ci == r.o && r.px_in == r.px_out)
        elem("backbone", nm + ".add", r.o * r.px_out);
    }
    conv_bin("backbone", "conv_last", 160, 960, 1, px16);
    bn("backbone", "bn_last", 960, px16);

    conv_bin("aspp", "aspp.main", 960, 128, 1, px16);
    bn("aspp", "aspp.bn", 128, px16);
    conv_bin("aspp", "aspp.gate", 960, 128, 1, 1);
    elem("aspp", "aspp.gap", 960 * px16);
    elem("aspp", "aspp.sigmoid", kSigmoidElem * 128);
    elem("aspp", "aspp.mul", 128 * px16);

    // RVM-shaped decoder: ConvGRU on half the channels at each scale, one
    // 3x3 fuse conv per upsample, two-conv output block.
    const std::vector<int>& lad = cfg.ladder;
    int skip_c[3] = {40, 24, 16};
    double px_at[3] = {px8, px4, px2};
    auto gru = [&](const std::string& nm, double c, double px) {
      double hc = c / 2;
      conv_bin("decoder", nm, 2 * hc, hc, 3, px);
      elem("decoder", nm + ".elem", 12 * hc * px);
      conv_bin("decoder", nm + ".b", 2 * hc, hc, 3, px);
      conv_bin("decoder", nm + ".c", 2 * hc, hc, 3, px);
    };
    gru("gru16", lad[0], px16);
    double prev_c = lad[0];
    for (int i = 0; i < 3; ++i) {
      std::string nm = "up" + std::to_string(i);
      elem("decoder", nm + ".up", kBilinearElem * prev_c * px_at[i]);
      elem("decoder", nm + ".srcpool", kPool2Elem * 3 * px_at[i]);
      double ci = prev_c + skip_c[i] + 3;
      conv_bin("decoder", nm + ".conv", ci, lad[i + 1], 3, px_at[i]);
      bn("decoder", nm + ".bn", lad[i + 1], px_at[i]);
      elem("decoder", nm + ".relu", lad[i + 1] * px_at[i]);
      gru("gru" + std::to_string(i), lad[i + 1], px_at[i]);
      prev_c = lad[i + 1];
    }
    elem("decoder", "out.up", kBilinearElem * prev_c * px1);
    conv_bin("decoder", "out.conv0", prev_c + 3, lad[4], 3, px1);
    bn("decoder", "out.bn0", lad[4], px1);
    elem("decoder", "out.relu0", lad[4] * px1);
    conv_bin("decoder", "out.conv1", lad[4], lad[4], 3, px1);
    bn("decoder", "out.bn1", lad[4], px1);

    conv_fp("heads", "proj", lad[4], 5, 1, px1, 5);
    elem("heads", "alpha.clamp", px1);
    elem("heads", "fg.residual", 6 * px1);
  }
};

}  // namespace

double ProfileReport::total_flops() const {
  double t = 0;
  for (const OpCost& it : items) t += it.flops;
  return t;
}

double ProfileReport::params_bytes() const {
  double t = 0;
  for (const OpCost& it : items) t += it.bits / 8.0 + it.floats * 4.0;
  return t;
}

std::map<std::string, double> ProfileReport::part_flops() const {
  std::map<std::string, double> m;
  for (const OpCost& it : items) m[it.part] += it.flops;
  return m;
}

double ProfileReport::part_share(const std::string& part) const {
  double t = total_flops();
  if (t <= 0) return 0;
  double p = 0;
  for (const OpCost& it : items)
    if (it.part == part) p += it.flops;
  return p / t;
}

std::string ProfileReport::render() const {
  std::ostringstream os;
  char buf[160];
  os << "profile: preset=" << preset << " input=" << in_w << "x" << in_h
     << "\n";
  os << "conventions: fused float multiply-add = 1 op; 64-lane xnor word + "
        "popcount-accumulate = 2 ops (binarized MAC = 2/64); sparse convs "
        "scaled by expected density; elementwise ops counted (folded bn and "
        "scaled adds 1/elem, bilinear 4/out, 2x2 pool 4/out, sigmoid 4); "
        "1-bit weights stored as bits, every float parameter as 4 bytes; "
        "MB and GFLOPs are decimal (1e6, 1e9)\n";
  std::map<std::string, double> fl = part_flops();
  std::map<std::string, double> pb;
  for (const OpCost& it : items)
    pb[it.part] += it.bits / 8.0 + it.floats * 4.0;
  const char* order[] = {"stem", "backbone", "aspp", "decoder", "heads"};
  os << "---------------------------------------------------------\n";
  std::snprintf(buf, sizeof(buf), "%-10s %14s %8s %14s\n", "part", "MFLOPs",
                "share", "params(KB)");
  os << buf;
  for (const char* p : order) {
    if (!fl.count(p) && !pb.count(p)) continue;
    std::snprintf(buf, sizeof(buf), "%-10s %14.3f %7.1f%% %14.2f\n", p,
                  fl[p] / 1e6, 100.0 * part_share(p), pb[p] / 1024.0);
    os << buf;
  }
  os << "---------------------------------------------------------\n";
  std::snprintf(buf, sizeof(buf), "%-10s %14.3f %8s %14.2f\n", "total",
                total_flops() / 1e6, "", params_bytes() / 1024.0);
  os << buf;
  std::snprintf(buf, sizeof(buf), "totals: %.4f GFLOPs, %.4f MB\n", flops_g(),
                params_mb());
  os << buf;
  return os.str();
}

ProfileReport profile_model(const ModelConfig& cfg, int h, int w) {
  cfg.validate();
  BIVM_CHECK(h % 16 == 0 && w % 16 == 0,
             "profile input dims must be multiples of 16");
  Walker wk{cfg, {}};
  wk.rep.in_h = h;
  wk.rep.in_w = w;
  wk.rep.preset = cfg.preset.empty() ? cfg.backbone : cfg.preset;
  if (cfg.backbone == "ebb")
    wk.walk_ebb(h, w);
  else
    wk.walk_mbv3(h, w);
  return wk.rep;
}

}  // namespace bivm
