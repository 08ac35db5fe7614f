#pragma once
// Desk-scale four-stage training driver. Stages follow a fixed schedule with
// clip length, learning rates and data family chosen per stage; durations are
// scaled down to fixed step counts so a full run finishes in minutes, and the
// scale-down is recorded in every log.
//
// Binarized weight scales need no explicit refresh after an optimizer step:
// every forward derives them from the current latent weights, nothing is
// cached across steps.

#include <functional>
#include <string>
#include <vector>

#include "bivm/losses.hpp"
#include "bivm/model.hpp"
#include "bivm/synth.hpp"

namespace bivm {

// Adaptive-moment optimizer, (0.9, 0.999) with eps 1e-8. Learning rates are
// resolved per parameter name when the parameter set is installed.
struct Adam {
  struct Entry {
    ag::VarT<float>* p = nullptr;
    double lr = 0;
    std::vector<float> m, v;
  };
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<Entry> entries;

  void install(const std::vector<ParamRefT<float>>& params,
               const std::function<double(const std::string&)>& lr_for);
  void zero_grad();
  void step();
};

struct TrainConfig {
  std::string data_dir;  // empty: clips are synthesized in memory
  int clips = 4;         // in-memory clip count
  int height = 32, width = 32;
  int steps = 0;   // 0: stage default (200, 50, 50, 50)
  int frames = 0;  // 0: stage default (15, 20, 15, 15)
  uint64_t seed = 7;
  std::string log_path;  // when set, the CSV is also written here
};

struct TrainLogRow {
  int step = 0, stage = 0;
  double l1_alpha = 0, lap_alpha = 0, tc_alpha = 0, l1_fg = 0, tc_fg = 0;
  double lbm = 0, ebb_reg = 0, lm = 0, total = 0;
  double gain_cross_mean = 0, gain_block_mean = 0;
};

struct TrainLog {
  int stage = 0;
  std::vector<std::string> notes;
  std::vector<TrainLogRow> rows;
  // Fixed-batch measurements before the first and after the last step.
  double eval_lm_before = 0, eval_lm_after = 0;
  double eval_mad_before = 0, eval_mad_after = 0;
  std::string csv() const;  // '#' note lines, a header row, one row per step
};

// Runs one stage in place on the given model. Schedule:
//   1: 200 steps, 15-frame clips, feature mimicking against an identity-mode
//      teacher (30 seeded steps, then frozen), backbone 1e-4 / others 2e-4
//   2: 50 steps, 20-frame clips, halved rates
//   3: 50 steps, alternating 1x / 2x resolution, all rates 1e-5
//   4: 50 steps, decoder raised to 5e-5 / others 1e-5, swapped clip family
// The incoherence threshold is re-optimized on every batch, and gradients
// flow through the straight-through surrogate. A non-finite loss aborts with
// a diagnostic naming the stage and step.
TrainLog run_stage(BivmModel& model, int stage, const TrainConfig& cfg);

// Central finite differences against analytic gradients, double precision.
// rebuild() must reconstruct the scalar loss from the leaves' current values.
// Returns max |fd - grad| / max(1, |fd|, |grad|) over every leaf entry.
double grad_check(const std::vector<ag::VarT<double>*>& leaves,
                  const std::function<ag::VarT<double>()>& rebuild,
                  double eps = 1e-5);

// Whole-model audit: identity numeric mode, matting objective on one toy
// batch, probing a seeded sample of entries from every named parameter.
// Needs the dense decoder (the incoherence mask is not differentiable).
double grad_check(BivmModelT<double>& model, const TensorT<double>& frames,
                  const TensorT<double>& alpha_gt, const TensorT<double>& fg_gt,
                  int probes_per_param = 2, uint64_t seed = 1717);

}  // namespace bivm
