#include "bivm/tensor.hpp"

namespace bivm {

BitTensor pack(const DenseTensor& x, float threshold) {
  BIVM_CHECK(x.size() > 0, "cannot pack empty tensor");
  BIVM_CHECK(std::isfinite(threshold), "non-finite input");
  const Shape& s = x.shape();
  BitTensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int xw = 0; xw < s.w; ++xw) {
        for (int c = 0; c < s.c; ++c) {
          float v = x.at(n, c, y, xw);
          BIVM_CHECK(std::isfinite(v), "non-finite input");
          if (v - threshold >= 0.0f) out.set_bit(n, c, y, xw, true);
        }
      }
  return out;
}

DenseTensor unpack(const BitTensor& b) {
  const Shape& s = b.shape();
  DenseTensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
          out.at(n, c, y, x) = b.get_bit(n, c, y, x) ? 1.0f : -1.0f;
  return out;
}

}  // namespace bivm
