#pragma once
// Dense NCHW tensors and bit-packed sign tensors.
//
// BitTensor packs the channel axis innermost: each spatial site (n, y, x) owns
// `words_per_pixel` consecutive 64-bit words, and bit b of word wi holds
// channel 64*wi + b. A convolution tap over the channel axis then reduces to
// word-wise XNOR + popcount. Bits past the channel count (padding bits) are
// kept at 0 and masked out of every dot product.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bivm/util.hpp"

namespace bivm {

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  int64_t numel() const {
    return static_cast<int64_t>(n) * c * h * w;
  }
  int64_t pixels() const { return static_cast<int64_t>(n) * h * w; }
  bool operator==(const Shape& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

// Value container; an optional same-shape grad buffer is allocated lazily in
// training mode. Copies duplicate the grad buffer when present.
template <class T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(Shape s, T fill = T(0))
      : shape_(s), data_(static_cast<size_t>(s.numel()), fill) {
    BIVM_CHECK(s.n >= 0 && s.c >= 0 && s.h >= 0 && s.w >= 0,
               "negative tensor dimension");
  }
  TensorT(const TensorT& o) : shape_(o.shape_), data_(o.data_) {
    if (o.grad_) grad_ = std::make_unique<std::vector<T>>(*o.grad_);
  }
  TensorT& operator=(const TensorT& o) {
    if (this == &o) return *this;
    shape_ = o.shape_;
    data_ = o.data_;
    grad_ = o.grad_ ? std::make_unique<std::vector<T>>(*o.grad_) : nullptr;
    return *this;
  }
  TensorT(TensorT&&) noexcept = default;
  TensorT& operator=(TensorT&&) noexcept = default;

  const Shape& shape() const { return shape_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  int64_t index(int n, int c, int y, int x) const {
    return ((static_cast<int64_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& at(int n, int c, int y, int x) { return data_[static_cast<size_t>(index(n, c, y, x))]; }
  T at(int n, int c, int y, int x) const { return data_[static_cast<size_t>(index(n, c, y, x))]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  bool has_grad() const { return grad_ != nullptr; }
  std::vector<T>& ensure_grad() {
    if (!grad_) grad_ = std::make_unique<std::vector<T>>(data_.size(), T(0));
    return *grad_;
  }
  std::vector<T>& grad() {
    BIVM_CHECK(grad_ != nullptr, "tensor has no grad buffer");
    return *grad_;
  }
  const std::vector<T>& grad() const {
    BIVM_CHECK(grad_ != nullptr, "tensor has no grad buffer");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }
  void drop_grad() { grad_.reset(); }

 private:
  Shape shape_;
  std::vector<T> data_;
  std::unique_ptr<std::vector<T>> grad_;
};

using DenseTensor = TensorT<float>;
using DenseTensorD = TensorT<double>;

// Sign planes packed 64 channels per word.
class BitTensor {
 public:
  BitTensor() = default;
  explicit BitTensor(Shape s)
      : shape_(s),
        words_per_pixel_((s.c + 63) / 64),
        words_(static_cast<size_t>(s.pixels()) * words_per_pixel_, 0) {}

  const Shape& shape() const { return shape_; }
  int words_per_pixel() const { return words_per_pixel_; }
  int64_t word_count() const { return static_cast<int64_t>(words_.size()); }

  int64_t pixel_offset(int n, int y, int x) const {
    return ((static_cast<int64_t>(n) * shape_.h + y) * shape_.w + x) * words_per_pixel_;
  }
  std::span<const uint64_t> pixel_words(int n, int y, int x) const {
    return {words_.data() + pixel_offset(n, y, x), static_cast<size_t>(words_per_pixel_)};
  }

  bool get_bit(int n, int c, int y, int x) const {
    int64_t off = pixel_offset(n, y, x) + c / 64;
    return (words_[static_cast<size_t>(off)] >> (c % 64)) & 1u;
  }
  // Keeps padding bits zero by construction: only valid channels are writable.
  void set_bit(int n, int c, int y, int x, bool v) {
    BIVM_CHECK(c >= 0 && c < shape_.c, "channel out of range");
    int64_t off = pixel_offset(n, y, x) + c / 64;
    uint64_t m = 1ull << (c % 64);
    if (v)
      words_[static_cast<size_t>(off)] |= m;
    else
      words_[static_cast<size_t>(off)] &= ~m;
  }
  // All valid channels set to 1, padding bits left at 0.
  void set_pixel_all_ones(int n, int y, int x) {
    int64_t off = pixel_offset(n, y, x);
    for (int wi = 0; wi < words_per_pixel_; ++wi) {
      int bits = std::min(64, shape_.c - wi * 64);
      uint64_t m = bits >= 64 ? ~0ull : ((1ull << bits) - 1);
      words_[static_cast<size_t>(off + wi)] = m;
    }
  }
  void copy_pixel(const BitTensor& src, int sn, int sy, int sx, int dn, int dy, int dx) {
    std::memcpy(words_.data() + pixel_offset(dn, dy, dx),
                src.words_.data() + src.pixel_offset(sn, sy, sx),
                static_cast<size_t>(words_per_pixel_) * sizeof(uint64_t));
  }

 private:
  Shape shape_;
  int words_per_pixel_ = 0;
  std::vector<uint64_t> words_;
};

// bit = 1 iff value - threshold >= 0 (ties binarize to +1). Rejects NaN/inf.
BitTensor pack(const DenseTensor& x, float threshold);

// Unpacks to {-1, +1} values.
DenseTensor unpack(const BitTensor& b);

// Dot product of two sign vectors given as packed spans. The first n_valid
// bits participate; both spans must hold exactly ceil(n_valid / 64) words with
// zeroed padding. Returns sum of elementwise products, an exact integer:
// matches = popcount(XNOR) over valid bits, dot = 2 * matches - n_valid.
inline int64_t xnor_popcount_dot(std::span<const uint64_t> a,
                                 std::span<const uint64_t> b, int n_valid) {
  BIVM_CHECK(a.size() == b.size(), "mismatched packed lengths");
  BIVM_CHECK(n_valid >= 0 && (n_valid + 63) / 64 == static_cast<int>(a.size()),
             "n_valid does not match packed length");
  int full = n_valid / 64;
  int rem = n_valid % 64;
  int64_t matches = 0;
  for (int i = 0; i < full; ++i) matches += std::popcount(~(a[i] ^ b[i]));
  if (rem) {
    uint64_t tail = (1ull << rem) - 1;
    matches += std::popcount(~(a[full] ^ b[full]) & tail);
  }
  return 2 * matches - n_valid;
}

}  // namespace bivm
