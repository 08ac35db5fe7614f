#pragma once
// 8-bit frame I/O. PNG (gray / RGB / RGBA, non-interlaced) and binary PPM.
// Decoding handles scanline filters 0-4; encoding always emits filter 0, so
// a write/read round trip is lossless byte-for-byte in the pixel data.

#include <cstdint>
#include <string>
#include <vector>

#include "bivm/tensor.hpp"

namespace bivm {

struct Image {
  int w = 0, h = 0, channels = 0;
  std::vector<uint8_t> pixels;  // row-major, interleaved channels

  Image() = default;
  Image(int h_, int w_, int c_)
      : w(w_), h(h_), channels(c_),
        pixels(static_cast<size_t>(h_) * w_ * c_, 0) {}

  uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<size_t>(y) * w + x) * channels + c];
  }
  uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * w + x) * channels + c];
  }
};

Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

// Dispatches on the file's magic bytes (PNG signature or "P6").
Image read_image(const std::string& path);

// {1, c, h, w} in [0,1]; bytes divided by 255.
TensorT<float> image_to_tensor(const Image& img);

// Batch entry n of a {n, c, h, w} tensor, clamped to [0,1] and rounded.
Image tensor_to_image(const TensorT<float>& t, int n);

}  // namespace bivm
