#pragma once
// Binned mutual-information estimation and the empirical information checks:
// a one-bit map of a Gaussian carries at most 2 ln 2 nats about it, and a
// chain of per-sample transforms can only lose information about the input
// (data-processing monotonicity). Estimates are plug-in values from
// equal-width joint histograms, in nats.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bivm/model.hpp"
#include "bivm/synth.hpp"

namespace bivm {

// Entropy of x after equal-width binning over its observed range.
double binned_entropy(const std::vector<double>& x, int bins = 16);

// Plug-in mutual information between the binned samples. Always >= 0 and
// <= min of the marginal binned entropies.
double binned_mi(const std::vector<double>& x, const std::vector<double>& t,
                 int bins = 16);

struct Theorem1Report {
  double mi_full;    // I(X; aX + b)
  double mi_binary;  // I(X; a sign(X) + b)
  double bound;      // 2 ln 2, the one-bit ceiling
};

// Samples X ~ N(0,1) and estimates both channels. Requires a != 0 (the
// affine map must be invertible for the contrast to mean anything).
Theorem1Report theorem1_check(int64_t samples, double a, double b,
                              int bins = 64, uint64_t seed = 9001);

// Per-sample transform applied at one chain stage.
using Stage = std::function<double(double)>;

Stage identity_stage();
Stage sign_stage();
// Clips to [-3, 3] and snaps to the midpoints of `levels` equal cells, so
// successive coarser quantizers compose into genuinely lossier channels.
Stage quantizer_stage(int levels);

// I(X; T_i) where T_i is the composition of stages[0..i] applied to X.
std::vector<double> chain_mi(const std::vector<Stage>& stages,
                             int64_t samples, int bins = 16,
                             uint64_t seed = 9002);

bool non_increasing(const std::vector<double>& v, double tol);

// True when the estimated MI never rises along the chain by more than tol.
bool theorem2_check(const std::vector<Stage>& stages, int64_t samples,
                    double tol = 0.05, int bins = 16, uint64_t seed = 9002);

struct InfoPlanePoint {
  double mi_xt;  // input vs bottleneck features
  double mi_ty;  // bottleneck features vs ground-truth alpha
};

// One information-plane measurement: forwards the clip, pools input,
// deepest pyramid features, and alpha onto the 1/16 grid, and estimates
// both MIs over the pooled per-position samples.
InfoPlanePoint info_plane_point(BivmModelT<float>& model,
                                const SynthClip& clip, int bins = 16);

// CSV trace `epoch,mi_xt,mi_ty`; probe(e) supplies the row for epoch e.
void info_plane_log(const std::string& csv_path, int epochs,
                    const std::function<InfoPlanePoint(int)>& probe);

}  // namespace bivm
