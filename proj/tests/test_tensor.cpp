#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <limits>

#include "bivm/tensor.hpp"
#include "bivm/util.hpp"
#include "doctest.h"

using namespace bivm;

namespace {

DenseTensor random_tensor(Shape s, Rng& rng, float lo = -2.0f, float hi = 2.0f) {
  DenseTensor t(s);
  for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Scalar reference for the packing rule: +1 iff x - thr >= 0.
float sign_shifted(float x, float thr) { return x - thr >= 0.0f ? 1.0f : -1.0f; }

}  // namespace

TEST_CASE("pack threshold semantics, zero ties to +1") {
  DenseTensor x(Shape{1, 4, 1, 1});
  x.at(0, 0, 0, 0) = 0.0f;
  x.at(0, 1, 0, 0) = -0.25f;
  x.at(0, 2, 0, 0) = 0.25f;
  x.at(0, 3, 0, 0) = -0.0f;
  BitTensor b = pack(x, 0.0f);
  CHECK(b.get_bit(0, 0, 0, 0));
  CHECK(!b.get_bit(0, 1, 0, 0));
  CHECK(b.get_bit(0, 2, 0, 0));
  CHECK(b.get_bit(0, 3, 0, 0));  // -0.0 - 0.0 == 0 -> +1

  BitTensor shifted = pack(x, 0.25f);
  CHECK(!shifted.get_bit(0, 0, 0, 0));
  CHECK(shifted.get_bit(0, 2, 0, 0));  // 0.25 - 0.25 == 0 -> +1
}

TEST_CASE("pack rejects non-finite input") {
  DenseTensor x(Shape{1, 2, 1, 1});
  x.at(0, 0, 0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(pack(x, 0.0f), "non-finite input", Error);
  x.at(0, 0, 0, 0) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_WITH_AS(pack(x, 0.0f), "non-finite input", Error);
}

TEST_CASE("unpack(pack(x)) equals elementwise shifted sign") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    int c = static_cast<int>(rng.randint(1, 130));
    Shape s{2, c, 3, 4};
    DenseTensor x = random_tensor(s, rng);
    float thr = static_cast<float>(rng.uniform(-0.5, 0.5));
    DenseTensor u = unpack(pack(x, thr));
    for (int n = 0; n < s.n; ++n)
      for (int ci = 0; ci < s.c; ++ci)
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx)
            REQUIRE(u.at(n, ci, y, xx) == sign_shifted(x.at(n, ci, y, xx), thr));
  }
}

TEST_CASE("pack(unpack(b)) round-trips packed data") {
  Rng rng(11);
  Shape s{1, 100, 2, 2};
  DenseTensor x = random_tensor(s, rng);
  BitTensor b = pack(x, 0.1f);
  BitTensor again = pack(unpack(b), 0.0f);
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int xx = 0; xx < s.w; ++xx)
        REQUIRE(again.get_bit(0, c, y, xx) == b.get_bit(0, c, y, xx));
}

TEST_CASE("padding bits stay zero for non-multiple-of-64 channels") {
  Rng rng(13);
  for (int c : {1, 3, 63, 65, 70, 127, 129}) {
    Shape s{1, c, 2, 2};
    DenseTensor x = random_tensor(s, rng, 0.5f, 1.5f);  // all-positive -> all bits 1
    BitTensor b = pack(x, 0.0f);
    int wpp = b.words_per_pixel();
    REQUIRE(wpp == (c + 63) / 64);
    for (int y = 0; y < s.h; ++y)
      for (int xx = 0; xx < s.w; ++xx) {
        auto span = b.pixel_words(0, y, xx);
        int pop = 0;
        for (uint64_t word : span) pop += std::popcount(word);
        REQUIRE(pop == c);  // exactly the valid channels, nothing in the pad
      }
  }
}

TEST_CASE("xnor dot: identical vectors give n_valid") {
  // 70 valid bits spread over two words.
  Shape s{1, 70, 1, 1};
  Rng rng(3);
  DenseTensor x = random_tensor(s, rng);
  BitTensor a = pack(x, 0.0f);
  CHECK(xnor_popcount_dot(a.pixel_words(0, 0, 0), a.pixel_words(0, 0, 0), 70) == 70);
}

TEST_CASE("xnor dot: complementary vectors give -n_valid") {
  Shape s{1, 70, 1, 1};
  Rng rng(5);
  DenseTensor x = random_tensor(s, rng);
  DenseTensor nx(s);
  for (int c = 0; c < 70; ++c) nx.at(0, c, 0, 0) = -x.at(0, c, 0, 0) - 1e-3f;
  BitTensor a = pack(x, 0.0f);
  BitTensor b = pack(nx, 0.0f);
  CHECK(xnor_popcount_dot(a.pixel_words(0, 0, 0), b.pixel_words(0, 0, 0), 70) == -70);
}

TEST_CASE("xnor dot matches float dot of unpacked signs") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    int c = static_cast<int>(rng.randint(1, 257));
    Shape s{1, c, 1, 1};
    DenseTensor xa = random_tensor(s, rng);
    DenseTensor xb = random_tensor(s, rng);
    BitTensor a = pack(xa, 0.0f);
    BitTensor b = pack(xb, 0.0f);
    DenseTensor ua = unpack(a), ub = unpack(b);
    int64_t expect = 0;
    for (int ci = 0; ci < c; ++ci)
      expect += static_cast<int64_t>(ua.at(0, ci, 0, 0) * ub.at(0, ci, 0, 0));
    REQUIRE(xnor_popcount_dot(a.pixel_words(0, 0, 0), b.pixel_words(0, 0, 0), c) ==
            expect);
  }
}

TEST_CASE("xnor dot rejects mismatched lengths") {
  BitTensor a(Shape{1, 64, 1, 1});
  BitTensor b(Shape{1, 128, 1, 1});
  CHECK_THROWS_AS(
      xnor_popcount_dot(a.pixel_words(0, 0, 0), b.pixel_words(0, 0, 0), 64), Error);
  CHECK_THROWS_AS(
      xnor_popcount_dot(a.pixel_words(0, 0, 0), a.pixel_words(0, 0, 0), 100), Error);
}

TEST_CASE("dot is invariant to padding-bit corruption attempts") {
  // The API offers no way to set a pad bit; set_bit on an out-of-range channel
  // throws, and pack always leaves the pad zeroed.
  BitTensor b(Shape{1, 70, 1, 1});
  CHECK_THROWS_AS(b.set_bit(0, 70, 0, 0, true), Error);
  CHECK_THROWS_AS(b.set_bit(0, 127, 0, 0, true), Error);
}
