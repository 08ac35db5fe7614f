#include "bivm/conv.hpp"

#include <bit>

namespace bivm {

namespace {

BitTensor repack_channel_range(const BitTensor& x, int c0, int c1) {
  const Shape& s = x.shape();
  BitTensor out(Shape{s.n, c1 - c0, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int xx = 0; xx < s.w; ++xx)
        for (int c = c0; c < c1; ++c)
          if (x.get_bit(n, c, y, xx)) out.set_bit(n, c - c0, y, xx, true);
  return out;
}

// Core over one group: input slice xg (cg channels), weights w rows
// [oc0, oc1), results written into out rows [oc0, oc1).
void bconv_group(const BitTensor& xg, const BitTensor& w, int oc0, int oc1,
                 float scale, const ConvSpec& spec, bool pad_bit_one,
                 const Mask* mask, DenseTensor& out) {
  const Shape& xs = xg.shape();
  const Shape& ws = w.shape();
  const Shape& os = out.shape();
  int cg = xs.c;
  int kh = ws.h, kw = ws.w;

  // Padding taps see a constant sign plane; their dot only needs the weight
  // popcounts. matches = wpop for +1 padding, cg - wpop for -1 padding.
  std::vector<int> pad_dot(static_cast<size_t>(oc1 - oc0) * kh * kw);
  for (int oc = oc0; oc < oc1; ++oc)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        auto span = w.pixel_words(oc, ky, kx);
        int wpop = 0;
        for (uint64_t word : span) wpop += std::popcount(word);
        int dot = pad_bit_one ? 2 * wpop - cg : cg - 2 * wpop;
        pad_dot[(static_cast<size_t>(oc - oc0) * kh + ky) * kw + kx] = dot;
      }

  parallel_for(static_cast<int64_t>(xs.n) * os.h, [&](int64_t lo, int64_t hi) {
    for (int64_t row = lo; row < hi; ++row) {
      int n = static_cast<int>(row / os.h);
      int oy = static_cast<int>(row % os.h);
      for (int ox = 0; ox < os.w; ++ox) {
        if (mask && !mask->at(n, oy, ox)) continue;
        for (int oc = oc0; oc < oc1; ++oc) {
          int64_t acc = 0;
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
            bool y_in = iy >= 0 && iy < xs.h;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * spec.stride - spec.padding + kx * spec.dilation;
              if (y_in && ix >= 0 && ix < xs.w)
                acc += xnor_popcount_dot(xg.pixel_words(n, iy, ix),
                                         w.pixel_words(oc, ky, kx), cg);
              else
                acc += pad_dot[(static_cast<size_t>(oc - oc0) * kh + ky) * kw + kx];
            }
          }
          out.at(n, oc, oy, ox) = scale * static_cast<float>(acc);
        }
      }
    }
  });
}

DenseTensor bconv_impl(const BitTensor& x, const BitTensor& w, float scale,
                       const ConvSpec& spec, bool pad_bit_one, const Mask* mask,
                       OpCounter* ops) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  BIVM_CHECK(spec.groups >= 1 && xs.c % spec.groups == 0 && ws.n % spec.groups == 0,
             "bad group count");
  BIVM_CHECK(ws.c == xs.c / spec.groups, "weight channels do not match input");
  int oh = conv_out_dim(xs.h, ws.h, spec.stride, spec.padding, spec.dilation);
  int ow = conv_out_dim(xs.w, ws.w, spec.stride, spec.padding, spec.dilation);
  if (mask)
    BIVM_CHECK(mask->n == xs.n && mask->h == oh && mask->w == ow,
               "mask does not match output extent");
  DenseTensor out(Shape{xs.n, ws.n, oh, ow});
  int icg = xs.c / spec.groups;
  int ocg = ws.n / spec.groups;
  if (spec.groups == 1) {
    bconv_group(x, w, 0, ws.n, scale, spec, pad_bit_one, mask, out);
  } else {
    for (int g = 0; g < spec.groups; ++g) {
      BitTensor xg = repack_channel_range(x, g * icg, (g + 1) * icg);
      bconv_group(xg, w, g * ocg, (g + 1) * ocg, scale, spec, pad_bit_one, mask, out);
    }
  }
  if (ops) {
    int64_t sites = mask ? mask->count() : static_cast<int64_t>(xs.n) * oh * ow;
    ops->macs += sites * ws.n * icg * ws.h * ws.w;
  }
  return out;
}

}  // namespace

DenseTensor bconv2d(const BitTensor& x, const BitTensor& w, float scale,
                    const ConvSpec& spec, bool pad_bit_one, OpCounter* ops) {
  return bconv_impl(x, w, scale, spec, pad_bit_one, nullptr, ops);
}

DenseTensor sparse_bconv2d(const BitTensor& x, const BitTensor& w, float scale,
                           const ConvSpec& spec, bool pad_bit_one, const Mask& mask,
                           OpCounter* ops) {
  return bconv_impl(x, w, scale, spec, pad_bit_one, &mask, ops);
}

}  // namespace bivm
