#include "bivm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "bivm/image.hpp"
#include "bivm/util.hpp"

namespace fs = std::filesystem;

namespace bivm {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kAntiAliasPx = 1.5;

struct Wave {
  double amp, kx, ky, phase;
};

struct TextureChannel {
  double base;
  std::vector<Wave> waves;
  bool product;  // family 1 multiplies the waves instead of summing
};

struct ShapeDef {
  double cx, cy, rx, ry;    // center and radii at frame 0
  double vx, vy, grow;      // per-frame translation and radial growth
  double col[3], grad[3];   // base color and gradient along (gx, gy)
  double gx, gy;
};

double tex_value(const TextureChannel& t, double x, double y) {
  double v = t.base;
  if (t.product) {
    double p = 1.0;
    for (const auto& w : t.waves)
      p *= 0.5 * (1.0 + std::sin(w.kx * x + w.ky * y + w.phase));
    v += 0.8 * (p - 0.5);
  } else {
    for (const auto& w : t.waves)
      v += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
  }
  return std::min(std::max(v, 0.02), 0.98);
}

// Signed distance to the shape boundary, negative inside. Ellipses use the
// normalized-radius approximation, exact for circles.
double shape_dist(const ShapeDef& s, int t, double x, double y) {
  double cx = s.cx + t * s.vx, cy = s.cy + t * s.vy;
  double scale = std::max(1.0 + t * s.grow, 0.2);
  double rx = s.rx * scale, ry = s.ry * scale;
  double nx = (x - cx) / rx, ny = (y - cy) / ry;
  return (std::sqrt(nx * nx + ny * ny) - 1.0) * std::min(rx, ry);
}

double shape_color(const ShapeDef& s, int c, double x, double y) {
  double along = ((x - s.cx) * s.gx + (y - s.cy) * s.gy) /
                 std::max(s.rx, s.ry);
  return std::min(std::max(s.col[c] + s.grad[c] * along, 0.0), 1.0);
}

}  // namespace

SynthClip make_clip(int frames, int h, int w, uint64_t seed, int family) {
  BIVM_CHECK(frames >= 1 && h >= 8 && w >= 8, "clip too small");
  BIVM_CHECK(family == 0 || family == 1, "unknown clip family");
  Rng rng(seed * 2654435761u + static_cast<uint64_t>(family) + 1);

  TextureChannel tex[3];
  for (auto& t : tex) {
    t.base = rng.uniform(0.3, 0.7);
    t.product = family == 1;
    int waves = 2 + static_cast<int>(rng.randint(0, 1));
    for (int i = 0; i < waves; ++i)
      t.waves.push_back({rng.uniform(0.04, 0.12),
                         rng.uniform(0.5, 3.0) * 2.0 * kPi / w,
                         rng.uniform(0.5, 3.0) * 2.0 * kPi / h,
                         rng.uniform(0.0, 2.0 * kPi)});
  }
  double bg_vx = rng.uniform(-0.5, 0.5), bg_vy = rng.uniform(-0.5, 0.5);

  int nshapes = 2 + static_cast<int>(rng.randint(0, 1));
  std::vector<ShapeDef> shapes;
  for (int i = 0; i < nshapes; ++i) {
    ShapeDef s;
    s.cx = rng.uniform(0.25, 0.75) * w;
    s.cy = rng.uniform(0.25, 0.75) * h;
    double base_r = rng.uniform(0.12, 0.24) * std::min(h, w);
    s.rx = base_r;
    s.ry = family == 1 ? base_r * rng.uniform(0.5, 1.0) : base_r;
    s.vx = rng.uniform(-1.2, 1.2);
    s.vy = rng.uniform(-1.2, 1.2);
    s.grow = rng.uniform(-0.008, 0.008);
    double ang = rng.uniform(0.0, 2.0 * kPi);
    s.gx = std::cos(ang);
    s.gy = std::sin(ang);
    for (int c = 0; c < 3; ++c) {
      s.col[c] = rng.uniform(0.15, 0.85);
      s.grad[c] = rng.uniform(-0.25, 0.25);
    }
    shapes.push_back(s);
  }

  SynthClip clip;
  clip.frames = TensorT<float>(Shape{frames, 3, h, w});
  clip.alpha = TensorT<float>(Shape{frames, 1, h, w});
  clip.fg = TensorT<float>(Shape{frames, 3, h, w});
  clip.bg = TensorT<float>(Shape{frames, 3, h, w});

  for (int t = 0; t < frames; ++t)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double a = 0.0;
        double cover[8];
        int live = 0;
        double keep = 1.0;
        for (const auto& s : shapes) {
          double d = shape_dist(s, t, x + 0.5, y + 0.5);
          double c = std::min(std::max(0.5 - d / kAntiAliasPx, 0.0), 1.0);
          cover[live++] = c;
          keep *= 1.0 - c;
        }
        a = 1.0 - keep;
        clip.alpha.at(t, 0, y, x) = static_cast<float>(a);

        double wsum = 0.0;
        for (int i = 0; i < live; ++i) wsum += cover[i];
        for (int c = 0; c < 3; ++c) {
          double f;
          if (wsum > 0.0) {
            f = 0.0;
            for (int i = 0; i < live; ++i)
              f += cover[i] * shape_color(shapes[static_cast<size_t>(i)], c,
                                          x + 0.5, y + 0.5);
            f /= wsum;
          } else {
            f = shape_color(shapes[0], c, x + 0.5, y + 0.5);
          }
          double b = tex_value(tex[c], x + 0.5 + t * bg_vx, y + 0.5 + t * bg_vy);
          clip.fg.at(t, c, y, x) = static_cast<float>(f);
          clip.bg.at(t, c, y, x) = static_cast<float>(b);
          // Composite from the stored values so the identity is exact.
          double av = clip.alpha.at(t, 0, y, x);
          double fv = clip.fg.at(t, c, y, x);
          double bv = clip.bg.at(t, c, y, x);
          clip.frames.at(t, c, y, x) = static_cast<float>(av * fv + (1.0 - av) * bv);
        }
      }
  return clip;
}

void synth_dataset(const std::string& dir, int clips, int frames, int h,
                   int w, uint64_t seed, int family) {
  fs::create_directories(dir);
  char name[64];
  for (int ci = 0; ci < clips; ++ci) {
    std::snprintf(name, sizeof(name), "clip_%03d", ci);
    fs::path cdir = fs::path(dir) / name;
    fs::create_directories(cdir);
    SynthClip clip = make_clip(frames, h, w, seed + static_cast<uint64_t>(ci) * 1000003ull,
                               family);
    for (int t = 0; t < frames; ++t) {
      std::snprintf(name, sizeof(name), "frame_%03d.png", t);
      write_png((cdir / name).string(), tensor_to_image(clip.frames, t));
      std::snprintf(name, sizeof(name), "alpha_%03d.png", t);
      write_png((cdir / name).string(), tensor_to_image(clip.alpha, t));
      std::snprintf(name, sizeof(name), "fgr_%03d.png", t);
      write_png((cdir / name).string(), tensor_to_image(clip.fg, t));
    }
  }
}

std::vector<std::string> list_clips(const std::string& dir) {
  std::vector<std::string> out;
  BIVM_CHECK(fs::is_directory(dir), "not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

SynthClip load_clip(const std::string& clip_dir) {
  char name[64];
  std::vector<Image> frames, alphas, fgs;
  for (int t = 0;; ++t) {
    std::snprintf(name, sizeof(name), "frame_%03d.png", t);
    fs::path fp = fs::path(clip_dir) / name;
    if (!fs::exists(fp)) break;
    frames.push_back(read_image(fp.string()));
    std::snprintf(name, sizeof(name), "alpha_%03d.png", t);
    fs::path ap = fs::path(clip_dir) / name;
    alphas.push_back(fs::exists(ap) ? read_image(ap.string()) : Image());
    std::snprintf(name, sizeof(name), "fgr_%03d.png", t);
    fs::path gp = fs::path(clip_dir) / name;
    fgs.push_back(fs::exists(gp) ? read_image(gp.string()) : Image());
  }
  BIVM_CHECK(!frames.empty(), "no frames in " + clip_dir);

  int h = frames[0].h, w = frames[0].w;
  int T = static_cast<int>(frames.size());
  SynthClip clip;
  clip.frames = TensorT<float>(Shape{T, 3, h, w});
  bool has_alpha = alphas[0].w > 0, has_fg = fgs[0].w > 0;
  if (has_alpha) clip.alpha = TensorT<float>(Shape{T, 1, h, w});
  if (has_fg) clip.fg = TensorT<float>(Shape{T, 3, h, w});

  for (int t = 0; t < T; ++t) {
    const Image& f = frames[static_cast<size_t>(t)];
    BIVM_CHECK(f.h == h && f.w == w && f.channels >= 3,
               "inconsistent frame shapes in " + clip_dir);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          clip.frames.at(t, c, y, x) = f.at(y, x, c) / 255.0f;
    if (has_alpha) {
      const Image& a = alphas[static_cast<size_t>(t)];
      BIVM_CHECK(a.h == h && a.w == w, "alpha shape mismatch in " + clip_dir);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          clip.alpha.at(t, 0, y, x) = a.at(y, x, 0) / 255.0f;
    }
    if (has_fg) {
      const Image& g = fgs[static_cast<size_t>(t)];
      BIVM_CHECK(g.h == h && g.w == w && g.channels >= 3,
                 "foreground shape mismatch in " + clip_dir);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            clip.fg.at(t, c, y, x) = g.at(y, x, c) / 255.0f;
    }
  }
  return clip;
}

}  // namespace bivm
