#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "bivm/checkpoint.hpp"
#include "bivm/model.hpp"
#include "doctest.h"

using namespace bivm;

namespace {

// Small legal config so full forwards stay cheap in tests.
ModelConfig tiny_config() {
  ModelConfig c;
  c.preset = "";
  c.backbone = "ebb";
  c.stem_out = 4;
  c.blocks = {{4, 8, 16, 2, 1}, {8, 16, 32, 1, 1}, {16, 16, 32, 2, 1}, {16, 32, 64, 2, 1}};
  c.trailing = {{32, 64, 2}, {64, 128, 2}};
  c.aspp_out = 16;
  c.ladder = {16, 12, 8, 8, 8};
  c.sparse_decoder = true;
  return c;
}

ag::VarT<float> rand_frames(int n, int h, int w, uint64_t seed) {
  TensorT<float> t(Shape{n, 3, h, w});
  Rng rng(seed);
  for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return ag::constant(t);
}

}  // namespace

TEST_CASE("preset config validates and digests are stable across round trips") {
  ModelConfig c = ModelConfig::preset_config("bivm");
  c.validate();
  uint64_t d1 = c.digest();
  ModelConfig c2 = ModelConfig::parse(c.canonical());
  CHECK(c2.digest() == d1);
  ModelConfig c3 = ModelConfig::parse("preset=bivm");
  CHECK(c3.digest() == d1);

  ModelConfig fp = ModelConfig::preset_config("bivm-fp");
  CHECK(fp.full_precision);
  CHECK(!fp.sparse_decoder);
  CHECK(fp.digest() != d1);

  ModelConfig base = ModelConfig::preset_config("baseline-1bit");
  CHECK(base.backbone == "mbv3");
  base.validate();
}

TEST_CASE("config parser handles comments, sections, appends and bad keys") {
  ModelConfig c = ModelConfig::parse(
      "# comment\n"
      "[model]\n"
      "preset=bivm\n"
      "input_scale = 0.5\n"
      "assumed_density=0.25\n");
  CHECK(c.input_scale == doctest::Approx(0.5));
  CHECK(c.assumed_density == doctest::Approx(0.25));
  CHECK(c.blocks.size() == 5);

  // First block or trailing line after a preset clears the preset's list.
  ModelConfig c2 = ModelConfig::parse(
      "preset=bivm\n"
      "stem_out=4\n"
      "block=4,8,16,2,1\n"
      "block=8,16,32,1,1\n"
      "block=16,16,32,2,1\n"
      "block=16,32,64,2,1\n"
      "trailing=32,64,2\n"
      "aspp_out=16\n"
      "ladder=16,12,8,8,8\n");
  CHECK(c2.blocks.size() == 4);
  CHECK(c2.blocks[1].c_mid == 32);
  CHECK(c2.trailing.size() == 1);
  CHECK(c2.aspp_out == 16);

  // Parsing validates, so an incomplete encoder is rejected outright.
  CHECK_THROWS_AS(ModelConfig::parse("preset=bivm\nblock=4,8,16,2,1\n"), Error);
  CHECK_THROWS_AS(ModelConfig::parse("preset=bivm\nnot_a_key=3\n"), Error);
  CHECK_THROWS_AS(ModelConfig::parse("preset=nope\n"), Error);
}

TEST_CASE("stride ladder and width chaining are enforced") {
  ModelConfig c = tiny_config();
  c.validate();

  ModelConfig wrong = tiny_config();
  wrong.blocks[1].stride = 2;  // total stride 16
  CHECK_THROWS_AS(wrong.validate(), Error);

  ModelConfig chain = tiny_config();
  chain.blocks[1].c_in = 6;
  CHECK_THROWS_AS(chain.validate(), Error);

  ModelConfig lad = tiny_config();
  lad.aspp_out = 12;  // ladder[0] stays 16
  CHECK_THROWS_AS(lad.validate(), Error);
}

TEST_CASE("bivm preset parameter count matches independent arithmetic") {
  BivmModel m;
  m.init(ModelConfig::preset_config("bivm"), 7);
  std::vector<ParamRefT<float>> params;
  std::vector<StateRefT<float>> state;
  m.collect(params, state);

  // Binarized weight counts, block by block.
  int64_t ebb1 = 16 * 16 * 9 + 16 * 32 + 32 * 32 * 9 + 32 * 64 + 64 * 64 * 9 + 64 * 32;
  int64_t ebb2 = 32 * 32 * 9 + 32 * 64 + 64 * 64 * 9 + 64 * 128 + 128 * 128 * 9 + 128 * 64;
  int64_t ebb3 = 64 * 64 * 9 + 64 * 64 + 64 * 64 * 9 + 64 * 128 + 128 * 128 * 9 + 128 * 64;
  int64_t ebb4 = 64 * 64 * 9 + 64 * 128 + 128 * 128 * 9 + 128 * 256 + 256 * 256 * 9 + 256 * 128;
  int64_t ebb5 = 128 * 128 * 9 + 128 * 128 + 128 * 128 * 9 + 128 * 256 + 256 * 256 * 9 + 256 * 128;
  int64_t trail = 128 * 128 * 9 + 128 * 256 + 256 * 256 * 9 + 256 * 1024;
  int64_t aspp = 1024 * 128 + 1024 * 128;
  int64_t dec = 128 * 128 * 9 + (195 * 80 * 9 + 195 * 80) + (115 * 40 * 9 + 115 * 40) +
                (59 * 32 * 9 + 59 * 32) + (35 * 16 * 9 + 35 * 16);
  int64_t bin_w = ebb1 + ebb2 + ebb3 + ebb4 + ebb5 + trail + aspp + dec;
  CHECK(bin_w == 3989424);

  int64_t taus = 5 * 6 + 2 * 2 + 2 + 1 + 8;
  int64_t bn_ch = 16 + 240 + 480 + 512 + 960 + 1024 + 384 + 1280 + 128 + 128 + 336;
  int64_t gains = 5 * 9 + 2 * 2;
  int64_t fp_w = 3 * 16 * 9 + 16 * 5 + 5;
  int64_t expect = bin_w + taus + 2 * bn_ch + gains + fp_w;
  CHECK(param_count(params) == expect);
  CHECK(expect == 4001011);
}

TEST_CASE("encoder pyramid shapes at 512x288 match the published ladder") {
  BivmModel m;
  m.init(ModelConfig::preset_config("bivm"), 11);
  Ctx<float> ctx;
  ctx.mode = NumericMode::kPacked;
  ctx.training = false;
  auto frames = rand_frames(1, 288, 512, 3);
  auto out = m.forward(frames, ctx, true);

  CHECK(out.feats[0].shape() == Shape{1, 16, 144, 256});
  CHECK(out.feats[1].shape() == Shape{1, 32, 72, 128});
  CHECK(out.feats[2].shape() == Shape{1, 64, 36, 64});
  CHECK(out.feats[3].shape() == Shape{1, 128, 18, 32});
  CHECK(out.alpha.shape() == Shape{1, 1, 288, 512});
  CHECK(out.fg.shape() == Shape{1, 3, 288, 512});
  CHECK(out.seg.shape() == Shape{1, 1, 288, 512});
  CHECK(out.mask_base.h == 18);
  CHECK(out.mask_base.w == 32);
  CHECK(out.mask_density >= 0.0);
  CHECK(out.mask_density <= 1.0);
  for (float v : out.alpha.val().vec()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("zero frames produce finite heads in float mode") {
  BivmModel m;
  m.init(tiny_config(), 5);
  Ctx<float> ctx;
  ctx.mode = NumericMode::kFull;
  ctx.training = false;
  TensorT<float> z(Shape{1, 3, 64, 64});
  auto out = m.forward(ag::constant(z), ctx, true);
  for (float v : out.alpha.val().vec()) CHECK(std::isfinite(v));
  for (float v : out.fg.val().vec()) CHECK(std::isfinite(v));
  for (float v : out.seg.val().vec()) CHECK(std::isfinite(v));
}

TEST_CASE("threshold forced below every residual reproduces the dense decoder") {
  ModelConfig sparse_cfg = tiny_config();
  ModelConfig dense_cfg = tiny_config();
  dense_cfg.sparse_decoder = false;

  BivmModel a, b;
  a.init(sparse_cfg, 21);
  b.init(dense_cfg, 21);
  a.tau_star = -1e9f;  // mask never prunes

  Ctx<float> ctx;
  ctx.mode = NumericMode::kQat;
  ctx.training = false;
  auto frames = rand_frames(2, 64, 96, 9);
  auto oa = a.forward(frames, ctx, false);
  auto ob = b.forward(frames, ctx, false);
  CHECK(oa.mask_base.density() == doctest::Approx(1.0));
  CHECK(oa.alpha.val().vec() == ob.alpha.val().vec());
  CHECK(oa.fg.val().vec() == ob.fg.val().vec());
  CHECK(oa.seg.val().vec() == ob.seg.val().vec());
}

TEST_CASE("qat eval and packed inference agree bit for bit on the full model") {
  BivmModel m;
  m.init(tiny_config(), 33);
  Ctx<float> qat;
  qat.mode = NumericMode::kQat;
  qat.training = false;
  Ctx<float> packed;
  packed.mode = NumericMode::kPacked;
  packed.training = false;

  auto frames = rand_frames(1, 64, 64, 17);
  auto oq = m.forward(frames, qat, true);
  float tau_q = m.tau_star;
  auto op = m.forward(frames, packed, true);
  CHECK(m.tau_star == tau_q);
  CHECK(oq.mask_base.count() == op.mask_base.count());
  CHECK(oq.alpha.val().vec() == op.alpha.val().vec());
  CHECK(oq.fg.val().vec() == op.fg.val().vec());
  CHECK(oq.seg.val().vec() == op.seg.val().vec());
}

TEST_CASE("checkpoint round trip restores a bit-identical forward") {
  ModelConfig cfg = tiny_config();
  BivmModel m;
  m.init(cfg, 41);
  Ctx<float> ctx;
  ctx.mode = NumericMode::kQat;
  ctx.training = false;
  auto frames = rand_frames(1, 64, 64, 23);
  auto before = m.forward(frames, ctx, true);

  std::string path = (std::filesystem::temp_directory_path() / "bivm_ckpt_test.bin").string();
  save_checkpoint(path, m);

  // Scramble everything, then restore.
  std::vector<ParamRefT<float>> params;
  std::vector<StateRefT<float>> state;
  m.collect(params, state);
  for (auto& p : params)
    for (auto& v : p.var->mutable_val().vec()) v += 1.0f;
  for (auto& s : state)
    for (auto& v : s.tensor->vec()) v += 0.5f;
  m.tau_star = 123.0f;

  load_checkpoint(path, m);
  auto after = m.forward(frames, ctx, false);
  CHECK(m.tau_star == before.tau_star);
  CHECK(after.alpha.val().vec() == before.alpha.val().vec());
  CHECK(after.fg.val().vec() == before.fg.val().vec());
  CHECK(after.seg.val().vec() == before.seg.val().vec());

  // A model built from a different config must refuse the file.
  ModelConfig other = tiny_config();
  other.assumed_density = 0.7;
  BivmModel m2;
  m2.init(other, 41);
  CHECK_THROWS_AS(load_checkpoint(path, m2), Error);
  std::remove(path.c_str());
}

TEST_CASE("recurrent gates stream state across calls and reset cleanly") {
  ModelConfig cfg = tiny_config();
  cfg.recurrence = true;
  BivmModel m;
  m.init(cfg, 51);
  Ctx<float> ctx;
  ctx.mode = NumericMode::kQat;
  ctx.training = false;
  auto frames = rand_frames(1, 64, 64, 29);

  auto o1 = m.forward(frames, ctx, true);
  auto o2 = m.forward(frames, ctx, false);
  // Same input, but carried state shifts the second output.
  bool differs = false;
  for (size_t i = 0; i < o1.alpha.val().vec().size(); ++i)
    if (o1.alpha.val().vec()[i] != o2.alpha.val().vec()[i]) differs = true;
  CHECK(differs);

  m.reset_state();
  auto o3 = m.forward(frames, ctx, false);
  CHECK(o3.alpha.val().vec() == o1.alpha.val().vec());
}

TEST_CASE("mbv3 configs are rejected by the runtime model") {
  BivmModel m;
  CHECK_THROWS_WITH_AS(m.init(ModelConfig::preset_config("baseline-1bit"), 1),
                       doctest::Contains("profile-only"), Error);
}
