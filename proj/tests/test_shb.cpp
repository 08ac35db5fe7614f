#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdlib>
#include <vector>

#include "bivm/shb.hpp"
#include "doctest.h"
#include "fd_check.hpp"

using namespace bivm;

namespace {

DenseTensor random_tensor(Shape s, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  DenseTensor t(s);
  for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Independent brute-force threshold search: same tie rule, own entropy count.
float oracle_threshold(const DenseTensor& f, std::vector<float> grid) {
  std::sort(grid.begin(), grid.end());
  double best_h = -1.0;
  float best_tau = 0.0f;
  bool any = false;
  for (float tau : grid) {
    Mask m = compute_mask(f, tau);
    Shape s = f.shape();
    size_t plane = static_cast<size_t>(s.h) * s.w;
    long long pos = 0, total = 0;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (size_t i = 0; i < plane; ++i)
          if (m.on[static_cast<size_t>(n) * plane + i]) {
            ++total;
            if (f.vec()[(static_cast<size_t>(n) * s.c + c) * plane + i] >= 0.0f) ++pos;
          }
    if (total == 0) continue;
    double p = static_cast<double>(pos) / static_cast<double>(total);
    double h = (p <= 0.0 || p >= 1.0) ? 0.0 : -p * std::log(p) - (1 - p) * std::log(1 - p);
    if (h >= best_h) {
      best_h = h;
      best_tau = tau;
      any = true;
    }
  }
  return any ? best_tau : 0.0f;
}

}  // namespace

TEST_CASE("constant features give all-ones mask at tau zero, empty above") {
  DenseTensor f(Shape{1, 3, 4, 4}, 2.5f);
  Mask m0 = compute_mask(f, 0.0f);
  CHECK(m0.count() == 16);
  Mask m1 = compute_mask(f, 0.01f);
  CHECK(m1.count() == 0);
}

TEST_CASE("an impulse concentrates the mask around itself") {
  DenseTensor f(Shape{1, 1, 8, 8});
  f.vec()[3 * 8 + 3] = 1.0f;
  DenseTensor r = incoherence_residual(f);
  float rmax = 0.0f;
  for (float v : r.vec()) rmax = std::max(rmax, v);
  REQUIRE(rmax > 0.0f);
  Mask m = compute_mask(f, rmax * 0.5f);
  CHECK(m.count() >= 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      if (m.at(0, y, x)) {
        CHECK(std::abs(y - 3) <= 2);
        CHECK(std::abs(x - 3) <= 2);
      }
}

TEST_CASE("mask density is non-increasing in the threshold") {
  Rng rng(11);
  DenseTensor f = random_tensor(Shape{2, 4, 8, 8}, rng);
  DenseTensor r = incoherence_residual(f);
  auto grid = quantile_grid(r, 17);
  double prev = 1.1;
  for (float tau : grid) {
    double d = compute_mask(f, tau).density();
    CHECK(d <= prev + 1e-12);
    prev = d;
  }
}

TEST_CASE("quantile grid spans the sorted values evenly") {
  DenseTensor r(Shape{1, 1, 1, 33});
  for (int i = 0; i < 33; ++i) r.vec()[static_cast<size_t>(i)] = static_cast<float>(i);
  auto grid = quantile_grid(r, 33);
  REQUIRE(grid.size() == 33);
  for (int i = 0; i < 33; ++i) CHECK(grid[static_cast<size_t>(i)] == static_cast<float>(i));

  DenseTensor lin(Shape{1, 1, 1, 101});
  for (int i = 0; i <= 100; ++i) lin.vec()[static_cast<size_t>(i)] = static_cast<float>(i) * 0.5f;
  auto g2 = quantile_grid(lin, 5);
  CHECK(g2.front() == 0.0f);
  CHECK(g2[2] == doctest::Approx(25.0));
  CHECK(g2.back() == 50.0f);
}

TEST_CASE("masked sign entropy on hand-built cases") {
  DenseTensor f(Shape{1, 1, 2, 2});
  f.vec() = {1.0f, -1.0f, 2.0f, -3.0f};
  Mask all(1, 2, 2, 1);
  CHECK(masked_sign_entropy(f, all) == doctest::Approx(std::log(2.0)));

  Mask only_pos(1, 2, 2, 0);
  only_pos.at(0, 0, 0) = 1;
  only_pos.at(0, 1, 0) = 1;
  CHECK(masked_sign_entropy(f, only_pos) == doctest::Approx(0.0));

  Mask empty(1, 2, 2, 0);
  CHECK(masked_sign_entropy(f, empty) == doctest::Approx(-1.0));
}

TEST_CASE("threshold search equals the exhaustive oracle and stays near-balanced") {
  Rng rng(13);
  for (int trial = 0; trial < 12; ++trial) {
    DenseTensor f(Shape{1, 4, 16, 16});
    float bias = static_cast<float>(rng.uniform(-0.4, 0.4));
    for (auto& v : f.vec()) v = static_cast<float>(rng.normal(bias, 1.0));
    auto grid = quantile_grid(incoherence_residual(f), 33);
    float got = optimize_threshold(f, grid);
    float want = oracle_threshold(f, grid);
    CHECK(got == want);
    float h = masked_sign_entropy(f, compute_mask(f, got));
    CHECK(h >= 0.95f * std::log(2.0f));
  }
}

TEST_CASE("equal-entropy candidates resolve to the larger threshold") {
  Rng rng(17);
  DenseTensor f = random_tensor(Shape{1, 2, 8, 8}, rng);
  DenseTensor r = incoherence_residual(f);
  float rmin = r.vec()[0];
  for (float v : r.vec()) rmin = std::min(rmin, v);
  // All three candidates keep the full mask, so entropy ties and the largest
  // tau must win.
  std::vector<float> grid{rmin - 1.0f, rmin - 0.5f, rmin};
  CHECK(optimize_threshold(f, grid) == rmin);
}

TEST_CASE("empty masks at every candidate fall back to zero with a warning") {
  DenseTensor f(Shape{1, 1, 4, 4}, 1.0f);  // constant: residual is zero
  drain_warnings();
  CHECK(optimize_threshold(f, std::vector<float>{0.5f, 1.0f}) == 0.0f);
  auto warnings = drain_warnings();
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("empty") != std::string::npos);
}

TEST_CASE("mask upsampling follows bilinear majority votes") {
  Mask ones(1, 4, 4, 1);
  for (int k : {2, 4}) {
    Mask up = upsample_mask(ones, k);
    CHECK(static_cast<int>(up.count()) == 16 * k * k);
  }

  Mask impulse(1, 4, 4, 0);
  impulse.at(0, 1, 1) = 1;
  Mask up2 = upsample_mask(impulse, 2);
  REQUIRE(up2.h == 8);
  // Bilinear weights exceed 0.5 only on the 2x2 block straddling the source
  // cell center.
  CHECK(up2.count() == 4);
  for (int y : {2, 3})
    for (int x : {2, 3}) CHECK(up2.at(0, y, x) == 1);

  Mask checker(1, 4, 4, 0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) checker.at(0, y, x) = static_cast<uint8_t>((x + y) % 2);
  double d = upsample_mask(checker, 2).density();
  CHECK(d >= 0.25);
  CHECK(d <= 0.75);

  CHECK(upsample_mask(ones, 1).count() == 16);
  CHECK_THROWS_AS(upsample_mask(ones, 3), Error);
  CHECK_THROWS_AS(upsample_mask(ones, 32), Error);
}

TEST_CASE("all-zeros mask leaves exactly the pointwise branch") {
  Rng rng(19);
  ShbBlockT<float> blk;
  blk.init(6, 5, rng);
  ag::Var x(random_tensor(Shape{1, 6, 8, 8}, rng));
  Ctx<float> ctx{NumericMode::kQat, false, nullptr};
  Mask zeros(1, 8, 8, 0);
  auto y = blk.forward(x, zeros, ctx);
  auto want = blk.bn1.forward(blk.conv1.forward(x, ctx), false);
  CHECK(y.val().vec() == want.val().vec());
}

TEST_CASE("all-ones mask reproduces the dense two-branch block") {
  Rng rng(23);
  ShbBlockT<float> blk;
  blk.init(4, 7, rng);
  ag::Var x(random_tensor(Shape{2, 4, 6, 6}, rng));
  Ctx<float> ctx{NumericMode::kQat, false, nullptr};
  Mask ones(2, 6, 6, 1);
  auto y = blk.forward(x, ones, ctx);
  auto dense = ag::add(blk.bn3.forward(blk.conv3.forward(x, ctx), false),
                       blk.bn1.forward(blk.conv1.forward(x, ctx), false));
  CHECK(y.val().vec() == dense.val().vec());
}

TEST_CASE("packed sparse block matches qat eval bit-exactly and counts its work") {
  Rng rng(29);
  ag::NoGradScope ng;
  ShbBlockT<float> blk;
  blk.init(8, 6, rng);
  blk.conv3.tau.mutable_val().vec()[0] = 0.2f;
  ag::Var x(random_tensor(Shape{1, 8, 8, 8}, rng));
  Mask m(1, 8, 8, 0);
  for (int y = 0; y < 8; ++y)
    for (int xx = 0; xx < 8; ++xx) m.at(0, y, xx) = static_cast<uint8_t>(rng.randint(0, 1));

  Ctx<float> qat{NumericMode::kQat, false, nullptr};
  OpCounter ops;
  Ctx<float> packed{NumericMode::kPacked, false, &ops};
  auto yq = blk.forward(x, m, qat);
  auto yp = blk.forward(x, m, packed);
  CHECK(yq.val().vec() == yp.val().vec());

  // Sparse 3x3 work scales with active sites; the 1x1 branch stays dense.
  int64_t want = static_cast<int64_t>(m.count()) * 6 * 8 * 9 +
                 static_cast<int64_t>(8) * 8 * 6 * 8;
  CHECK(ops.macs == want);
}

TEST_CASE("dense-mode block gradients match finite differences") {
  Rng rng(31);
  ShbBlockT<double> blk;
  blk.init(3, 4, rng);
  ag::VarT<double> x(testing::random_tensor_d(Shape{1, 3, 4, 4}, rng), true);
  Mask ones(1, 4, 4, 1);
  Ctx<double> ctx{NumericMode::kFull, true, nullptr};

  std::vector<ParamRefT<double>> params;
  std::vector<StateRefT<double>> state;
  blk.collect("shb", params, state);
  std::vector<ag::VarT<double>*> leaves{&x};
  for (auto& p : params) leaves.push_back(p.var);
  auto rep = testing::fd_check(
      leaves, [&] { return ag::mean_all(ag::square(blk.forward(x, ones, ctx))); });
  CHECK(rep.max_err < 1e-4);
  CHECK(rep.checked > 150);
}
