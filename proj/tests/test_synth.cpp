#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <vector>

#include "bivm/synth.hpp"
#include "bivm/util.hpp"
#include "doctest.h"

using namespace bivm;
namespace fs = std::filesystem;

namespace {

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

// All regular files under dir as (relative path, bytes), sorted.
std::vector<std::pair<std::string, std::vector<uint8_t>>> snapshot(
    const fs::path& dir) {
  std::vector<std::pair<std::string, std::vector<uint8_t>>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file())
      out.emplace_back(fs::relative(e.path(), dir).string(), slurp(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("seed-pinned datasets are byte-identical across runs") {
  auto a = fresh_dir("synth_a"), b = fresh_dir("synth_b"), c = fresh_dir("synth_c");
  synth_dataset(a.string(), 2, 3, 16, 16, 77);
  synth_dataset(b.string(), 2, 3, 16, 16, 77);
  synth_dataset(c.string(), 2, 3, 16, 16, 78);

  auto sa = snapshot(a), sb = snapshot(b), sc = snapshot(c);
  REQUIRE(sa.size() == 2 * 3 * 3);
  CHECK(sa == sb);

  REQUIRE(sc.size() == sa.size());
  bool any_diff = false;
  for (size_t i = 0; i < sa.size(); ++i)
    if (sa[i].second != sc[i].second) any_diff = true;
  CHECK(any_diff);
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(c);
}

TEST_CASE("alpha stays in range with fractional boundary pixels") {
  SynthClip clip = make_clip(4, 32, 32, 9);
  int fractional = 0, zero = 0, solid = 0;
  for (float v : clip.alpha.vec()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
    if (v == 0.0f) ++zero;
    else if (v > 0.0f && v < 1.0f) ++fractional;
    if (v > 0.99f) ++solid;
  }
  CHECK(fractional > 0);
  CHECK(zero > 0);
  CHECK(solid > 0);
}

TEST_CASE("composites satisfy the blend identity exactly") {
  SynthClip clip = make_clip(3, 24, 24, 123);
  const Shape& s = clip.frames.shape();
  int mismatches = 0;
  for (int t = 0; t < s.n; ++t)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          double a = clip.alpha.at(t, 0, y, x);
          double f = clip.fg.at(t, c, y, x);
          double b = clip.bg.at(t, c, y, x);
          float expect = static_cast<float>(a * f + (1.0 - a) * b);
          if (clip.frames.at(t, c, y, x) != expect) ++mismatches;
        }
  CHECK(mismatches == 0);
}

TEST_CASE("generation is deterministic and families differ") {
  SynthClip a = make_clip(2, 16, 16, 5, 0);
  SynthClip b = make_clip(2, 16, 16, 5, 0);
  CHECK(a.frames.vec() == b.frames.vec());
  CHECK(a.alpha.vec() == b.alpha.vec());

  SynthClip c = make_clip(2, 16, 16, 5, 1);
  CHECK(a.frames.vec() != c.frames.vec());
  CHECK_THROWS_AS(make_clip(2, 16, 16, 5, 7), Error);
}

TEST_CASE("shapes move between frames") {
  SynthClip clip = make_clip(6, 32, 32, 21);
  double moved = 0.0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      moved += std::fabs(double(clip.alpha.at(5, 0, y, x)) -
                         clip.alpha.at(0, 0, y, x));
  CHECK(moved > 1.0);
}

TEST_CASE("clips round trip through the directory format within quantization") {
  auto dir = fresh_dir("synth_rt");
  synth_dataset(dir.string(), 1, 2, 16, 16, 42);
  auto clips = list_clips(dir.string());
  REQUIRE(clips.size() == 1);

  SynthClip mem = make_clip(2, 16, 16, 42);
  SynthClip disk = load_clip(clips[0]);
  REQUIRE(disk.frames.shape() == mem.frames.shape());
  REQUIRE(disk.alpha.shape() == mem.alpha.shape());
  REQUIRE(disk.fg.shape() == mem.fg.shape());
  CHECK(disk.bg.size() == 0);

  float tol = 0.5f / 255.0f + 1e-6f;
  auto close = [&](const TensorT<float>& a, const TensorT<float>& b) {
    float worst = 0.0f;
    for (size_t i = 0; i < a.vec().size(); ++i)
      worst = std::max(worst, std::fabs(a.vec()[i] - b.vec()[i]));
    return worst;
  };
  CHECK(close(disk.frames, mem.frames) <= tol);
  CHECK(close(disk.alpha, mem.alpha) <= tol);
  CHECK(close(disk.fg, mem.fg) <= tol);
  fs::remove_all(dir);
}
