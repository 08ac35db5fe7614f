#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <string>
#include <vector>

#include "bivm/train.hpp"
#include "doctest.h"

using namespace bivm;

namespace {

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

TensorT<double> to_double(const TensorT<float>& t) {
  TensorT<double> out(t.shape());
  for (int64_t i = 0; i < t.size(); ++i)
    out.vec()[static_cast<size_t>(i)] =
        static_cast<double>(t.vec()[static_cast<size_t>(i)]);
  return out;
}

TensorT<double> random_tensor(Shape s, Rng& rng, double lo, double hi) {
  TensorT<double> t(s);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

double mean_over(const std::vector<TrainLogRow>& rows, size_t lo, size_t hi,
                 double TrainLogRow::*field) {
  double acc = 0;
  for (size_t i = lo; i < hi; ++i) acc += rows[i].*field;
  return acc / static_cast<double>(hi - lo);
}

}  // namespace

TEST_CASE("first adaptive step moves parameters by their learning rates") {
  ag::VarT<float> a(TensorT<float>(Shape{1, 1, 1, 1}, 1.0f), true);
  ag::VarT<float> b(TensorT<float>(Shape{1, 1, 1, 1}, 1.0f), true);
  std::vector<ParamRefT<float>> params{{"backbone.w", &a}, {"decoder.w", &b}};
  Adam opt;
  opt.install(params, [](const std::string& n) {
    return n.rfind("backbone.", 0) == 0 ? 1e-2 : 2e-2;
  });

  // loss = 3a + 3b, constant gradients of 3 each.
  auto loss = ag::scale_const(ag::add(ag::sum_all(a), ag::sum_all(b)), 3.0f);
  opt.zero_grad();
  ag::backward(loss);
  opt.step();

  // Bias-corrected first step is lr * g / (|g| + eps), essentially lr.
  CHECK(1.0f - a.val().vec()[0] == doctest::Approx(1e-2).epsilon(1e-4));
  CHECK(1.0f - b.val().vec()[0] == doctest::Approx(2e-2).epsilon(1e-4));
}

TEST_CASE("gradient audit passes on a single conv layer") {
  Rng rng(31);
  BinConv2dT<double> conv;
  ConvSpec sp;
  sp.padding = 1;
  conv.init(3, 4, 3, sp, rng);
  ag::VarT<double> x(random_tensor(Shape{2, 3, 6, 6}, rng, -1.0, 1.0), true);

  Ctx<double> ctx{NumericMode::kFull, true};
  auto rebuild = [&] { return ag::mean_all(ag::square(conv.forward(x, ctx))); };
  CHECK(grad_check({&conv.w, &x}, rebuild) < 1e-4);
}

TEST_CASE("gradient audit passes on an elastic block") {
  Rng rng(32);
  EbbT<double> block;
  block.init(4, 4, 8, 1, 1, rng);
  ag::VarT<double> x(random_tensor(Shape{2, 4, 8, 8}, rng, -1.0, 1.0), true);

  Ctx<double> ctx{NumericMode::kFull, true};
  auto rebuild = [&] { return ag::mean_all(ag::square(block.forward(x, ctx))); };
  double err = grad_check({&block.head.conv3.w, &block.head.bn3.gamma,
                           &block.head.bn3.beta, &block.gc1, &block.gc2,
                           &block.gb, &x},
                          rebuild);
  CHECK(err < 1e-4);
}

TEST_CASE("gradient audit passes on the mimicking term alone") {
  Rng rng(33);
  std::array<Shape, 4> shapes{Shape{1, 2, 8, 8}, Shape{1, 3, 4, 4},
                              Shape{1, 2, 4, 4}, Shape{1, 4, 2, 2}};
  std::array<ag::VarT<double>, 4> student, teacher;
  std::vector<ag::VarT<double>*> leaves;
  for (size_t i = 0; i < 4; ++i) {
    // Positive, bounded away from zero: no zero-energy skips, smooth norms.
    student[i] = ag::VarT<double>(random_tensor(shapes[i], rng, 0.3, 1.1), true);
    teacher[i] = ag::VarT<double>(random_tensor(shapes[i], rng, 0.3, 1.1), false);
    leaves.push_back(&student[i]);
  }
  Mask base(1, 2, 2);
  base.at(0, 0, 0) = 1;
  base.at(0, 1, 1) = 1;

  auto rebuild = [&] { return lbm_loss(student, teacher, base); };
  CHECK(grad_check(leaves, rebuild) < 1e-4);
}

TEST_CASE("whole-model audit in identity mode stays within tolerance") {
  ModelConfig cfg = tiny_config();
  cfg.sparse_decoder = false;
  BivmModelT<double> model;
  model.init(cfg, 23);

  SynthClip clip = make_clip(2, 16, 16, 501);
  double err = grad_check(model, to_double(clip.frames), to_double(clip.alpha),
                          to_double(clip.fg));
  CHECK(err < 1e-4);

  BivmModelT<double> sparse;
  sparse.init(tiny_config(), 23);
  CHECK_THROWS_WITH_AS(
      grad_check(sparse, to_double(clip.frames), to_double(clip.alpha),
                 to_double(clip.fg)),
      doctest::Contains("dense decoder"), Error);
}

TEST_CASE("stage one training learns and logs the mimicking term") {
  BivmModel model;
  model.init(tiny_config(), 7);

  TrainConfig cfg;
  cfg.seed = 7;
  TrainLog log = run_stage(model, 1, cfg);

  REQUIRE(log.rows.size() == 200);
  CHECK(log.eval_lm_after <= 0.5 * log.eval_lm_before);
  CHECK(log.eval_mad_after < log.eval_mad_before);

  for (const auto& r : log.rows) CHECK(r.lbm > 0.0);
  double lbm_head = mean_over(log.rows, 0, 25, &TrainLogRow::lbm);
  double lbm_tail = mean_over(log.rows, 175, 200, &TrainLogRow::lbm);
  CHECK(lbm_tail < lbm_head);
  double reg_head = mean_over(log.rows, 0, 25, &TrainLogRow::ebb_reg);
  double reg_tail = mean_over(log.rows, 175, 200, &TrainLogRow::ebb_reg);
  CHECK(reg_tail < reg_head);

  CHECK(log.rows.back().gain_cross_mean <= 10.0 * log.rows.front().gain_cross_mean);
  CHECK(log.rows.back().gain_block_mean <= 10.0 * log.rows.front().gain_block_mean);

  std::string csv = log.csv();
  CHECK(csv.find("# desk scale") != std::string::npos);
  CHECK(csv.find("step,stage,l1_alpha") != std::string::npos);
}

TEST_CASE("later stages skip the mimicking term") {
  BivmModel model;
  model.init(tiny_config(), 8);

  TrainConfig cfg;
  cfg.seed = 8;
  cfg.steps = 3;
  cfg.clips = 2;
  cfg.frames = 4;

  for (int stage = 2; stage <= 4; ++stage) {
    TrainLog log = run_stage(model, stage, cfg);
    REQUIRE(log.rows.size() == 3);
    CHECK(log.stage == stage);
    for (const auto& r : log.rows) CHECK(r.lbm == 0.0);
    if (stage == 3) {
      bool noted = false;
      for (const auto& n : log.notes) noted = noted || n.find("resolution") != std::string::npos;
      CHECK(noted);
    }
    if (stage == 4) {
      bool noted = false;
      for (const auto& n : log.notes) noted = noted || n.find("family") != std::string::npos;
      CHECK(noted);
    }
  }
}

TEST_CASE("a non-finite loss aborts with a stage diagnostic") {
  BivmModel model;
  model.init(tiny_config(), 9);
  model.proj.w.mutable_val().vec()[0] = std::nanf("");

  TrainConfig cfg;
  cfg.seed = 9;
  cfg.steps = 2;
  cfg.clips = 1;
  cfg.frames = 3;
  CHECK_THROWS_WITH_AS(run_stage(model, 2, cfg), doctest::Contains("diverged"),
                       Error);
}

TEST_CASE("seed-pinned stages are bit-reproducible") {
  TrainConfig cfg;
  cfg.seed = 11;
  cfg.steps = 3;
  cfg.clips = 2;
  cfg.frames = 4;

  auto run_once = [&](std::string* csv) {
    BivmModel m;
    m.init(tiny_config(), 11);
    TrainLog log = run_stage(m, 2, cfg);
    *csv = log.csv();
    std::vector<ParamRefT<float>> params;
    std::vector<StateRefT<float>> state;
    m.collect(params, state);
    std::vector<float> flat;
    for (auto& p : params)
      flat.insert(flat.end(), p.var->val().vec().begin(), p.var->val().vec().end());
    return flat;
  };

  std::string csv_a, csv_b;
  auto pa = run_once(&csv_a);
  auto pb = run_once(&csv_b);
  CHECK(csv_a == csv_b);
  CHECK(pa == pb);
}
