#pragma once
// Seed-pinned synthetic matting clips: anti-aliased shapes moving affinely
// over procedural backgrounds. The composite is built per pixel from the
// stored alpha/foreground/background values, so I = aF + (1-a)B holds
// exactly on the in-memory tensors; the on-disk PNGs are 8-bit quantized.

#include <cstdint>
#include <string>
#include <vector>

#include "bivm/tensor.hpp"

namespace bivm {

struct SynthClip {
  TensorT<float> frames;  // {T, 3, h, w} composite
  TensorT<float> alpha;   // {T, 1, h, w}
  TensorT<float> fg;      // {T, 3, h, w}
  TensorT<float> bg;      // {T, 3, h, w}
};

// family 0: drifting disks over sinusoid-sum textures.
// family 1: drifting ellipses over sinusoid-product textures (the
// fine-tune distribution swap).
SynthClip make_clip(int frames, int h, int w, uint64_t seed, int family = 0);

// Writes clip_%03d/{frame,alpha,fgr}_%03d.png under dir. Deterministic:
// the same arguments always produce byte-identical files.
void synth_dataset(const std::string& dir, int clips, int frames, int h,
                   int w, uint64_t seed, int family = 0);

// Clip directories under dir, sorted by name.
std::vector<std::string> list_clips(const std::string& dir);

// Reads one clip directory back; bg is left empty (not serialized).
SynthClip load_clip(const std::string& clip_dir);

}  // namespace bivm
