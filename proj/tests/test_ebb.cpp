#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "bivm/ebb.hpp"
#include "doctest.h"
#include "fd_check.hpp"

using namespace bivm;

namespace {

DenseTensor random_tensor(Shape s, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  DenseTensor t(s);
  for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

template <class T>
void zero_weights(SubEbbT<T>& sub) {
  for (auto& v : sub.conv3.w.mutable_val().vec()) v = T(0);
  for (auto& v : sub.conv1.w.mutable_val().vec()) v = T(0);
}

}  // namespace

TEST_CASE("sub-block keeps widths and strides as configured") {
  Rng rng(3);
  Ctx<float> ctx{NumericMode::kQat, false, nullptr};

  SubEbbT<float> a;
  a.init(16, 32, 2, 1, rng);
  auto ya = a.forward(ag::Var(random_tensor(Shape{2, 16, 8, 8}, rng)), ctx);
  CHECK(ya.shape() == (Shape{2, 32, 4, 4}));

  SubEbbT<float> b;
  b.init(8, 4, 1, 2, rng);  // dilation 2 keeps spatial size
  auto yb = b.forward(ag::Var(random_tensor(Shape{1, 8, 6, 6}, rng)), ctx);
  CHECK(yb.shape() == (Shape{1, 4, 6, 6}));
}

TEST_CASE("zero weights reduce a width-preserving sub-block to its shortcuts") {
  Rng rng(5);
  SubEbbT<float> sub;
  sub.init(8, 8, 1, 1, rng);
  zero_weights(sub);
  Ctx<float> ctx{NumericMode::kQat, false, nullptr};
  ag::Var x(random_tensor(Shape{2, 8, 6, 6}, rng));
  auto y = sub.forward(x, ctx);
  // Zero weights give zero conv output, fresh running stats keep BN at zero,
  // and unit layer gains leave the identity shortcut: y == x.
  REQUIRE(y.shape() == x.shape());
  for (size_t i = 0; i < y.val().vec().size(); ++i)
    CHECK(y.val().vec()[i] == doctest::Approx(x.val().vec()[i]).epsilon(1e-6));
}

TEST_CASE("block composition follows the three-level shortcut algebra") {
  Rng rng(7);
  EbbT<float> blk;
  blk.init(8, 8, 16, 1, 1, rng);
  zero_weights(blk.head);
  zero_weights(blk.mid);
  zero_weights(blk.tail);
  float gc1 = blk.gc1.val().vec()[0];
  float gc2 = blk.gc2.val().vec()[0];
  float gb = blk.gb.val().vec()[0];
  Ctx<float> ctx{NumericMode::kQat, false, nullptr};
  ag::Var x(random_tensor(Shape{1, 8, 4, 4}, rng));
  auto y = blk.forward(x, ctx);
  // With zero convs every sub-block passes its shortcut through, so the
  // output collapses to (1 + gc2 + gc1 + gb) * x.
  float want_scale = 1.0f + gc2 + gc1 + gb;
  for (size_t i = 0; i < y.val().vec().size(); ++i)
    CHECK(y.val().vec()[i] ==
          doctest::Approx(want_scale * x.val().vec()[i]).epsilon(1e-5));
}

TEST_CASE("block chain reproduces the encoder shape ladder") {
  Rng rng(9);
  Ctx<float> ctx{NumericMode::kQat, false, nullptr};
  EbbT<float> b1;
  b1.init(16, 32, 64, 2, 1, rng);
  EbbT<float> b2;
  b2.init(32, 64, 128, 1, 1, rng);
  EbbT<float> b5;
  b5.init(64, 64, 128, 1, 2, rng);  // dilated, stride-free

  auto f = b1.forward(ag::Var(random_tensor(Shape{1, 16, 16, 16}, rng)), ctx);
  CHECK(f.shape() == (Shape{1, 32, 8, 8}));
  auto g = b2.forward(f, ctx);
  CHECK(g.shape() == (Shape{1, 64, 8, 8}));
  auto h = b5.forward(g, ctx);
  CHECK(h.shape() == (Shape{1, 64, 8, 8}));
}

TEST_CASE("full-mode gradients match finite differences") {
  Rng rng(13);
  EbbT<double> blk;
  blk.init(4, 4, 8, 1, 1, rng);
  ag::VarT<double> x(testing::random_tensor_d(Shape{1, 4, 4, 4}, rng), true);
  Ctx<double> ctx{NumericMode::kFull, true, nullptr};

  std::vector<ParamRefT<double>> params;
  std::vector<StateRefT<double>> state;
  blk.collect("ebb", params, state);
  std::vector<ag::VarT<double>*> leaves{&x};
  for (auto& p : params) leaves.push_back(p.var);

  auto rep = testing::fd_check(
      leaves, [&] { return ag::mean_all(ag::square(blk.forward(x, ctx))); });
  CHECK(rep.max_err < 1e-4);
  CHECK(rep.checked > 1000);
}

TEST_CASE("qat eval equals packed for a full block") {
  Rng rng(17);
  ag::NoGradScope ng;
  EbbT<float> blk;
  blk.init(8, 8, 16, 2, 1, rng);
  // Nudge taus off zero so the packed pad bit is exercised in both states.
  blk.head.conv3.tau.mutable_val().vec()[0] = 0.15f;
  blk.mid.conv3.tau.mutable_val().vec()[0] = -0.1f;
  ag::Var x(random_tensor(Shape{1, 8, 8, 8}, rng));
  Ctx<float> qat{NumericMode::kQat, false, nullptr};
  Ctx<float> packed{NumericMode::kPacked, false, nullptr};
  auto yq = blk.forward(x, qat);
  auto yp = blk.forward(x, packed);
  REQUIRE(yq.shape() == yp.shape());
  CHECK(yq.val().vec() == yp.val().vec());
}

TEST_CASE("gain regularizer sums raw values and feeds unit gradients") {
  ag::VarT<float> a(DenseTensor(Shape{1, 1, 1, 1}, 0.3f), true);
  ag::VarT<float> b(DenseTensor(Shape{1, 1, 1, 1}, -0.2f), true);
  ag::VarT<float> c(DenseTensor(Shape{1, 1, 1, 1}, 0.5f), true);
  auto reg = ebb_regularizer<float>({&a, &b, &c});
  CHECK(reg.item() == doctest::Approx(0.6));
  ag::backward(reg);
  CHECK(a.grad()[0] == doctest::Approx(1.0));
  CHECK(b.grad()[0] == doctest::Approx(1.0));
  CHECK(c.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("qat training reaches every parameter") {
  Rng rng(19);
  EbbT<float> blk;
  blk.init(4, 4, 8, 1, 1, rng);
  ag::Var x(random_tensor(Shape{2, 4, 4, 4}, rng), true);
  Ctx<float> ctx{NumericMode::kQat, true, nullptr};
  auto loss = ag::mean_all(ag::square(blk.forward(x, ctx)));
  ag::backward(loss);

  std::vector<ParamRefT<float>> params;
  std::vector<StateRefT<float>> state;
  blk.collect("ebb", params, state);
  for (auto& p : params) CHECK(p.var->has_grad());
  // Cross and block gains multiply full feature maps; their gradients are
  // generically nonzero.
  CHECK(std::fabs(blk.gc1.grad()[0]) > 0.0f);
  CHECK(std::fabs(blk.gc2.grad()[0]) > 0.0f);
  CHECK(std::fabs(blk.gb.grad()[0]) > 0.0f);
  CHECK(state.size() == 12);  // three subs x two BN layers x (mean, var)
}
