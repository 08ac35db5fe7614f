#include "bivm/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "bivm/util.hpp"

namespace bivm {
namespace {

const uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  BIVM_CHECK(in.good(), "cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                              std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  BIVM_CHECK(out.good(), "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  BIVM_CHECK(out.good(), "short write to " + path);
}

uint32_t be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4],
               const std::vector<uint8_t>& data) {
  put_be32(out, static_cast<uint32_t>(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(4 + data.size()));
  put_be32(out, crc);
}

uint8_t paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return uint8_t(a);
  if (pb <= pc) return uint8_t(b);
  return uint8_t(c);
}

// In-place defilter of one scanline; prev is the reconstructed row above
// (null for the first row).
void defilter_row(uint8_t filter, uint8_t* row, const uint8_t* prev,
                  size_t len, int bpp) {
  switch (filter) {
    case 0:
      break;
    case 1:
      for (size_t i = size_t(bpp); i < len; ++i) row[i] += row[i - bpp];
      break;
    case 2:
      if (prev)
        for (size_t i = 0; i < len; ++i) row[i] += prev[i];
      break;
    case 3:
      for (size_t i = 0; i < len; ++i) {
        int a = i >= size_t(bpp) ? row[i - bpp] : 0;
        int b = prev ? prev[i] : 0;
        row[i] = uint8_t(row[i] + (a + b) / 2);
      }
      break;
    case 4:
      for (size_t i = 0; i < len; ++i) {
        int a = i >= size_t(bpp) ? row[i - bpp] : 0;
        int b = prev ? prev[i] : 0;
        int c = (prev && i >= size_t(bpp)) ? prev[i - bpp] : 0;
        row[i] = uint8_t(row[i] + paeth(a, b, c));
      }
      break;
    default:
      throw Error("png: unknown scanline filter " + std::to_string(filter));
  }
}

}  // namespace

Image read_png(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  BIVM_CHECK(bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0,
             "png: bad signature in " + path);

  Image img;
  std::vector<uint8_t> idat;
  bool saw_ihdr = false, saw_iend = false;
  size_t pos = 8;
  while (pos + 12 <= bytes.size() && !saw_iend) {
    uint32_t len = be32(&bytes[pos]);
    BIVM_CHECK(pos + 12 + len <= bytes.size(), "png: truncated chunk");
    const uint8_t* type = &bytes[pos + 4];
    const uint8_t* data = &bytes[pos + 8];
    uint32_t want = be32(&bytes[pos + 8 + len]);
    uint32_t have = crc32(0, type, 4 + len);
    BIVM_CHECK(want == have, "png: chunk crc mismatch");

    if (std::memcmp(type, "IHDR", 4) == 0) {
      BIVM_CHECK(!saw_ihdr && len == 13, "png: malformed IHDR");
      saw_ihdr = true;
      img.w = static_cast<int>(be32(data));
      img.h = static_cast<int>(be32(data + 4));
      BIVM_CHECK(img.w > 0 && img.h > 0, "png: bad dimensions");
      BIVM_CHECK(data[8] == 8, "png: only 8-bit depth supported");
      switch (data[9]) {
        case 0: img.channels = 1; break;
        case 2: img.channels = 3; break;
        case 6: img.channels = 4; break;
        default: throw Error("png: unsupported color type");
      }
      BIVM_CHECK(data[10] == 0 && data[11] == 0, "png: bad compression/filter method");
      BIVM_CHECK(data[12] == 0, "png: interlacing not supported");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      BIVM_CHECK(saw_ihdr, "png: IDAT before IHDR");
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  BIVM_CHECK(saw_ihdr && saw_iend, "png: missing IHDR or IEND");
  BIVM_CHECK(!idat.empty(), "png: no image data");

  size_t stride = static_cast<size_t>(img.w) * img.channels;
  std::vector<uint8_t> raw(static_cast<size_t>(img.h) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  int rc = uncompress(raw.data(), &raw_len, idat.data(),
                      static_cast<uLong>(idat.size()));
  BIVM_CHECK(rc == Z_OK && raw_len == raw.size(), "png: inflate failed");

  img.pixels.resize(static_cast<size_t>(img.h) * stride);
  std::vector<uint8_t> prev;
  for (int y = 0; y < img.h; ++y) {
    uint8_t* src = &raw[static_cast<size_t>(y) * (stride + 1)];
    defilter_row(src[0], src + 1, y > 0 ? prev.data() : nullptr, stride,
                 img.channels);
    std::memcpy(&img.pixels[static_cast<size_t>(y) * stride], src + 1, stride);
    prev.assign(src + 1, src + 1 + stride);
  }
  return img;
}

void write_png(const std::string& path, const Image& img) {
  BIVM_CHECK(img.w > 0 && img.h > 0, "png: empty image");
  BIVM_CHECK(img.channels == 1 || img.channels == 3 || img.channels == 4,
             "png: unsupported channel count");
  size_t stride = static_cast<size_t>(img.w) * img.channels;
  BIVM_CHECK(img.pixels.size() == static_cast<size_t>(img.h) * stride,
             "png: pixel buffer size mismatch");

  std::vector<uint8_t> ihdr;
  put_be32(ihdr, static_cast<uint32_t>(img.w));
  put_be32(ihdr, static_cast<uint32_t>(img.h));
  ihdr.push_back(8);
  ihdr.push_back(img.channels == 1 ? 0 : img.channels == 3 ? 2 : 6);
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);

  std::vector<uint8_t> raw(static_cast<size_t>(img.h) * (stride + 1));
  for (int y = 0; y < img.h; ++y) {
    uint8_t* dst = &raw[static_cast<size_t>(y) * (stride + 1)];
    dst[0] = 0;
    std::memcpy(dst + 1, &img.pixels[static_cast<size_t>(y) * stride], stride);
  }
  uLongf cap = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> idat(cap);
  int rc = compress2(idat.data(), &cap, raw.data(),
                     static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION);
  BIVM_CHECK(rc == Z_OK, "png: deflate failed");
  idat.resize(cap);

  std::vector<uint8_t> out(kPngSig, kPngSig + 8);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", idat);
  put_chunk(out, "IEND", {});
  write_file(path, out);
}

Image read_ppm(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    BIVM_CHECK(pos > start, "ppm: truncated header in " + path);
    return std::string(bytes.begin() + static_cast<long>(start),
                       bytes.begin() + static_cast<long>(pos));
  };

  BIVM_CHECK(token() == "P6", "ppm: not a binary P6 file: " + path);
  int w = std::stoi(token());
  int h = std::stoi(token());
  int maxval = std::stoi(token());
  BIVM_CHECK(w > 0 && h > 0, "ppm: bad dimensions");
  BIVM_CHECK(maxval == 255, "ppm: only maxval 255 supported");
  ++pos;  // single whitespace after maxval
  size_t need = static_cast<size_t>(w) * h * 3;
  BIVM_CHECK(bytes.size() - pos >= need, "ppm: truncated pixel data");

  Image img(h, w, 3);
  std::memcpy(img.pixels.data(), &bytes[pos], need);
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  BIVM_CHECK(img.channels == 3, "ppm: P6 requires 3 channels");
  std::string header = "P6\n" + std::to_string(img.w) + " " +
                       std::to_string(img.h) + "\n255\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  write_file(path, out);
}

Image read_image(const std::string& path) {
  std::vector<uint8_t> head = read_file(path);
  if (head.size() >= 8 && std::memcmp(head.data(), kPngSig, 8) == 0)
    return read_png(path);
  if (head.size() >= 2 && head[0] == 'P' && head[1] == '6')
    return read_ppm(path);
  throw Error("unrecognized image format: " + path);
}

TensorT<float> image_to_tensor(const Image& img) {
  TensorT<float> t(Shape{1, img.channels, img.h, img.w});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        t.at(0, c, y, x) = img.at(y, x, c) / 255.0f;
  return t;
}

Image tensor_to_image(const TensorT<float>& t, int n) {
  const Shape& s = t.shape();
  BIVM_CHECK(n >= 0 && n < s.n, "batch index out of range");
  Image img(s.h, s.w, s.c);
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        float v = t.at(n, c, y, x);
        v = std::min(std::max(v, 0.0f), 1.0f);
        img.at(y, x, c) = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
  return img;
}

}  // namespace bivm
