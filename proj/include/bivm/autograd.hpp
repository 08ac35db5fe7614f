#pragma once
// Reverse-mode autodiff over TensorT<T>.
//
// Ops are free functions that return a VarT handle to a graph node. Each node
// stores its value, the parent handles that keep the subgraph alive, and a
// closure that routes the node's gradient into the parents. backward() seeds a
// scalar root with 1 and walks the graph in reverse topological order.
//
// Gradients accumulate into TensorT's lazy grad buffer, so leaf parameters
// keep their gradients after the graph itself is freed. A thread-local guard
// (NoGradScope) suppresses closure creation entirely for inference paths.
//
// The scalar type is a template parameter: float for production, double for
// finite-difference verification of every backward rule.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bivm/conv.hpp"
#include "bivm/ops.hpp"
#include "bivm/tensor.hpp"

namespace bivm::ag {

inline thread_local int g_no_grad_depth = 0;

inline bool grad_enabled() { return g_no_grad_depth == 0; }

struct NoGradScope {
  NoGradScope() { ++g_no_grad_depth; }
  ~NoGradScope() { --g_no_grad_depth; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
};

template <class T>
struct NodeT;
template <class T>
using NodePtr = std::shared_ptr<NodeT<T>>;

template <class T>
struct NodeT {
  TensorT<T> val;
  bool needs_grad = false;
  std::vector<NodePtr<T>> parents;
  std::function<void(NodeT<T>&)> backprop;

  explicit NodeT(TensorT<T> v) : val(std::move(v)) {}
};

template <class T>
class VarT {
 public:
  VarT() = default;
  explicit VarT(TensorT<T> v, bool needs = false)
      : n_(std::make_shared<NodeT<T>>(std::move(v))) {
    n_->needs_grad = needs;
  }
  explicit VarT(NodePtr<T> n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  const NodePtr<T>& node() const { return n_; }
  const TensorT<T>& val() const { return n_->val; }
  TensorT<T>& mutable_val() { return n_->val; }
  const Shape& shape() const { return n_->val.shape(); }
  bool needs_grad() const { return n_ && n_->needs_grad; }

  std::vector<T>& grad() { return n_->val.grad(); }
  const std::vector<T>& grad() const { return n_->val.grad(); }
  bool has_grad() const { return n_ && n_->val.has_grad(); }
  void zero_grad() {
    if (n_) n_->val.zero_grad();
  }
  // Scalar convenience for {1,1,1,1} vars.
  T item() const {
    BIVM_CHECK(n_ && n_->val.size() == 1, "item() needs a scalar var");
    return n_->val.vec()[0];
  }

 private:
  NodePtr<T> n_;
};

using Var = VarT<float>;

template <class T>
VarT<T> constant(TensorT<T> v) {
  return VarT<T>(std::move(v), false);
}

template <class T>
VarT<T> scalar(T v) {
  TensorT<T> t(Shape{1, 1, 1, 1});
  t.vec()[0] = v;
  return VarT<T>(std::move(t), false);
}

namespace detail {

template <class T>
void accum(const NodePtr<T>& p, const TensorT<T>& g) {
  if (!p->needs_grad) return;
  BIVM_CHECK(g.shape() == p->val.shape(), "grad shape mismatch");
  auto& dst = p->val.ensure_grad();
  const auto& src = g.vec();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
TensorT<T> grad_tensor(NodeT<T>& self) {
  TensorT<T> g(self.val.shape());
  g.vec() = self.val.grad();
  return g;
}

// Builds the result node; drops parents and the closure when no input needs a
// gradient or a NoGradScope is active.
template <class T>
VarT<T> make_node(TensorT<T> val, std::vector<NodePtr<T>> parents,
                  std::function<void(NodeT<T>&)> bp) {
  auto node = std::make_shared<NodeT<T>>(std::move(val));
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->needs_grad;
    if (needs) {
      node->needs_grad = true;
      node->parents = std::move(parents);
      node->backprop = std::move(bp);
    }
  }
  return VarT<T>(node);
}

}  // namespace detail

template <class T>
void backward(const VarT<T>& loss) {
  NodePtr<T> root = loss.node();
  BIVM_CHECK(root != nullptr, "backward on empty var");
  BIVM_CHECK(root->val.size() == 1, "backward needs a scalar loss");
  BIVM_CHECK(root->needs_grad, "loss does not depend on any parameter");

  // Post-order DFS over the needs_grad subgraph; reversed it yields a valid
  // schedule (every consumer runs before its producers).
  struct Frame {
    NodeT<T>* n;
    size_t next;
  };
  std::vector<NodeT<T>*> order;
  std::unordered_set<NodeT<T>*> seen;
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      NodeT<T>* p = f.n->parents[f.next++].get();
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  root->val.ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<T>* n = *it;
    if (n->backprop && n->val.has_grad()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops.

template <class T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
  BIVM_CHECK(a.shape() == b.shape(), "add shape mismatch");
  TensorT<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.vec()[i] = a.val().vec()[i] + b.val().vec()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_node<T>(std::move(out), {pa, pb}, [pa, pb](NodeT<T>& self) {
    TensorT<T> g = detail::grad_tensor(self);
    detail::accum(pa, g);
    detail::accum(pb, g);
  });
}

template <class T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
  BIVM_CHECK(a.shape() == b.shape(), "sub shape mismatch");
  TensorT<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.vec()[i] = a.val().vec()[i] - b.val().vec()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_node<T>(std::move(out), {pa, pb}, [pa, pb](NodeT<T>& self) {
    TensorT<T> g = detail::grad_tensor(self);
    detail::accum(pa, g);
    for (auto& v : g.vec()) v = -v;
    detail::accum(pb, g);
  });
}

template <class T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
  BIVM_CHECK(a.shape() == b.shape(), "mul shape mismatch");
  TensorT<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.vec()[i] = a.val().vec()[i] * b.val().vec()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_node<T>(std::move(out), {pa, pb}, [pa, pb](NodeT<T>& self) {
    const auto& g = self.val.grad();
    TensorT<T> da(pa->val.shape()), db(pb->val.shape());
    for (size_t i = 0; i < g.size(); ++i) {
      da.vec()[i] = g[i] * pb->val.vec()[i];
      db.vec()[i] = g[i] * pa->val.vec()[i];
    }
    detail::accum(pa, da);
    detail::accum(pb, db);
  });
}

template <class T>
VarT<T> scale_const(const VarT<T>& a, T k) {
  TensorT<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.vec()[i] = a.val().vec()[i] * k;
  auto pa = a.node();
  return detail::make_node<T>(std::move(out), {pa}, [pa, k](NodeT<T>& self) {
    TensorT<T> g = detail::grad_tensor(self);
    for (auto& v : g.vec()) v *= k;
    detail::accum(pa, g);
  });
}

template <class T>
VarT<T> add_const(const VarT<T>& a, T k) {
  TensorT<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.vec()[i] = a.val().vec()[i] + k;
  auto pa = a.node();
  return detail::make_node<T>(std::move(out), {pa}, [pa](NodeT<T>& self) {
    detail::accum(pa, detail::grad_tensor(self));
  });
}

// a + g * b with a scalar gain g.
template <class T>
VarT<T> add_scaled(const VarT<T>& a, const VarT<T>& b, const VarT<T>& g) {
  BIVM_CHECK(a.shape() == b.shape(), "add_scaled shape mismatch");
  BIVM_CHECK(g.val().size() == 1, "gain must be scalar");
  T gv = g.val().vec()[0];
  TensorT<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i)
    out.vec()[i] = a.val().vec()[i] + gv * b.val().vec()[i];
  auto pa = a.node(), pb = b.node(), pg = g.node();
  return detail::make_node<T>(std::move(out), {pa, pb, pg}, [pa, pb, pg](NodeT<T>& self) {
    const auto& go = self.val.grad();
    detail::accum(pa, detail::grad_tensor(self));
    T gv = pg->val.vec()[0];
    TensorT<T> db(pb->val.shape());
    T dg = T(0);
    for (size_t i = 0; i < go.size(); ++i) {
      db.vec()[i] = go[i] * gv;
      dg += go[i] * pb->val.vec()[i];
    }
    detail::accum(pb, db);
    TensorT<T> dgt(Shape{1, 1, 1, 1});
    dgt.vec()[0] = dg;
    detail::accum(pg, dgt);
  });
}

// a / s with a nonzero scalar s.
template <class T>
VarT<T> div_by_scalar(const VarT<T>& a, const VarT<T>& s) {
  BIVM_CHECK(s.val().size() == 1, "divisor must be scalar");
  T sv = s.val().vec()[0];
  BIVM_CHECK(sv != T(0), "division by zero scalar");
  TensorT<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.vec()[i] = a.val().vec()[i] / sv;
  auto pa = a.node(), ps = s.node();
  return detail::make_node<T>(std::move(out), {pa, ps}, [pa, ps](NodeT<T>& self) {
    const auto& go = self.val.grad();
    T sv = ps->val.vec()[0];
    TensorT<T> da(pa->val.shape());
    T ds = T(0);
    for (size_t i = 0; i < go.size(); ++i) {
      da.vec()[i] = go[i] / sv;
      ds -= go[i] * pa->val.vec()[i] / (sv * sv);
    }
    detail::accum(pa, da);
    TensorT<T> dst(Shape{1, 1, 1, 1});
    dst.vec()[0] = ds;
    detail::accum(ps, dst);
  });
}

namespace detail {
template <class T, class F, class DF>
VarT<T> unary_op(const VarT<T>& a, F fwd, DF dfwd) {
  TensorT<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.vec()[i] = fwd(a.val().vec()[i]);
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa, dfwd](NodeT<T>& self) {
    const auto& go = self.val.grad();
    TensorT<T> da(pa->val.shape());
    for (size_t i = 0; i < go.size(); ++i)
      da.vec()[i] = go[i] * dfwd(pa->val.vec()[i], self.val.vec()[i]);
    accum(pa, da);
  });
}
}  // namespace detail

template <class T>
VarT<T> relu(const VarT<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
VarT<T> sigmoid(const VarT<T>& a) {
  return detail::unary_op(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
VarT<T> tanh_op(const VarT<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
VarT<T> clamp01(const VarT<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x < T(0) ? T(0) : (x > T(1) ? T(1) : x); },
      [](T x, T) { return (x > T(0) && x < T(1)) ? T(1) : T(0); });
}

template <class T>
VarT<T> abs_op(const VarT<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::fabs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
VarT<T> square(const VarT<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---------------------------------------------------------------------------
// Reductions.

template <class T>
VarT<T> sum_all(const VarT<T>& a) {
  TensorT<T> out(Shape{1, 1, 1, 1});
  T acc = T(0);
  for (T v : a.val().vec()) acc += v;
  out.vec()[0] = acc;
  auto pa = a.node();
  return detail::make_node<T>(std::move(out), {pa}, [pa](NodeT<T>& self) {
    T g = self.val.grad()[0];
    TensorT<T> da(pa->val.shape(), g);
    detail::accum(pa, da);
  });
}

template <class T>
VarT<T> mean_all(const VarT<T>& a) {
  BIVM_CHECK(a.val().size() > 0, "mean of empty tensor");
  return scale_const(sum_all(a), T(1) / static_cast<T>(a.val().size()));
}

// sqrt(sum of squares); gradient is defined as 0 at the origin.
template <class T>
VarT<T> l2_norm(const VarT<T>& a) {
  T acc = T(0);
  for (T v : a.val().vec()) acc += v * v;
  TensorT<T> out(Shape{1, 1, 1, 1});
  out.vec()[0] = std::sqrt(acc);
  auto pa = a.node();
  return detail::make_node<T>(std::move(out), {pa}, [pa](NodeT<T>& self) {
    T y = self.val.vec()[0];
    if (y == T(0)) return;
    T g = self.val.grad()[0] / y;
    TensorT<T> da(pa->val.shape());
    for (size_t i = 0; i < da.vec().size(); ++i) da.vec()[i] = g * pa->val.vec()[i];
    detail::accum(pa, da);
  });
}

// ---------------------------------------------------------------------------
// Shape and sampling ops (forward kernels live in ops.hpp).

template <class T>
VarT<T> pad_spatial(const VarT<T>& a, int p) {
  if (p == 0) return a;
  auto pa = a.node();
  return detail::make_node<T>(pad_spatial_t(a.val(), p), {pa}, [pa, p](NodeT<T>& self) {
    detail::accum(pa, crop_spatial_t(detail::grad_tensor(self), p, pa->val.shape()));
  });
}

template <class T>
VarT<T> avg_pool2(const VarT<T>& a) {
  auto pa = a.node();
  return detail::make_node<T>(avg_pool2_t(a.val()), {pa}, [pa](NodeT<T>& self) {
    detail::accum(pa, avg_pool2_backward_t(detail::grad_tensor(self), pa->val.shape()));
  });
}

template <class T>
VarT<T> global_avg_pool(const VarT<T>& a) {
  auto pa = a.node();
  return detail::make_node<T>(global_avg_pool_t(a.val()), {pa}, [pa](NodeT<T>& self) {
    const Shape& s = pa->val.shape();
    const auto& go = self.val.grad();
    int64_t plane = static_cast<int64_t>(s.h) * s.w;
    T inv = T(1) / static_cast<T>(plane);
    TensorT<T> da(s);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        T g = go[static_cast<size_t>(n) * s.c + c] * inv;
        T* row = da.data() + da.index(n, c, 0, 0);
        for (int64_t i = 0; i < plane; ++i) row[i] = g;
      }
    detail::accum(pa, da);
  });
}

template <class T>
VarT<T> bilinear_resize(const VarT<T>& a, int oh, int ow) {
  const Shape in = a.shape();
  if (oh == in.h && ow == in.w) return a;
  auto pa = a.node();
  return detail::make_node<T>(bilinear_resize_t(a.val(), oh, ow), {pa},
                              [pa](NodeT<T>& self) {
                                detail::accum(pa, bilinear_resize_backward_t(
                                                      detail::grad_tensor(self),
                                                      pa->val.shape()));
                              });
}

template <class T>
VarT<T> mean_ch(const VarT<T>& a) {
  auto pa = a.node();
  return detail::make_node<T>(mean_ch_t(a.val()), {pa}, [pa](NodeT<T>& self) {
    const Shape& s = pa->val.shape();
    const auto& go = self.val.grad();
    T inv = T(1) / static_cast<T>(s.c);
    TensorT<T> da(s);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        T* dst = da.data() + da.index(n, c, 0, 0);
        const T* src = go.data() + static_cast<size_t>(n) * s.h * s.w;
        for (int64_t i = 0; i < static_cast<int64_t>(s.h) * s.w; ++i)
          dst[i] = src[i] * inv;
      }
    detail::accum(pa, da);
  });
}

template <class T>
VarT<T> concat_ch(const std::vector<VarT<T>>& parts) {
  BIVM_CHECK(!parts.empty(), "empty concat");
  std::vector<const TensorT<T>*> vals;
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) {
    vals.push_back(&p.val());
    parents.push_back(p.node());
  }
  TensorT<T> out = concat_ch_t<T>(vals);
  auto ps = parents;
  return detail::make_node<T>(std::move(out), std::move(parents), [ps](NodeT<T>& self) {
    TensorT<T> g = detail::grad_tensor(self);
    int c0 = 0;
    for (const auto& p : ps) {
      int c1 = c0 + p->val.shape().c;
      detail::accum(p, slice_ch_t(g, c0, c1));
      c0 = c1;
    }
  });
}

template <class T>
VarT<T> slice_ch(const VarT<T>& a, int c0, int c1) {
  auto pa = a.node();
  return detail::make_node<T>(slice_ch_t(a.val(), c0, c1), {pa},
                              [pa, c0, c1](NodeT<T>& self) {
                                const Shape& s = pa->val.shape();
                                const auto& go = self.val.grad();
                                TensorT<T> da(s);
                                const Shape& gs = self.val.shape();
                                for (int n = 0; n < s.n; ++n)
                                  for (int c = c0; c < c1; ++c) {
                                    T* dst = da.data() + da.index(n, c, 0, 0);
                                    const T* src =
                                        go.data() +
                                        (static_cast<size_t>(n) * gs.c + (c - c0)) *
                                            gs.h * gs.w;
                                    for (int64_t i = 0;
                                         i < static_cast<int64_t>(gs.h) * gs.w; ++i)
                                      dst[i] = src[i];
                                  }
                                detail::accum(pa, da);
                              });
}

template <class T>
VarT<T> slice_n(const VarT<T>& a, int n0, int n1) {
  auto pa = a.node();
  return detail::make_node<T>(slice_n_t(a.val(), n0, n1), {pa},
                              [pa, n0, n1](NodeT<T>& self) {
                                const Shape& s = pa->val.shape();
                                const auto& go = self.val.grad();
                                TensorT<T> da(s);
                                int64_t per = static_cast<int64_t>(s.c) * s.h * s.w;
                                for (int n = n0; n < n1; ++n) {
                                  T* dst = da.data() + da.index(n, 0, 0, 0);
                                  const T* src =
                                      go.data() + static_cast<size_t>(n - n0) * per;
                                  for (int64_t i = 0; i < per; ++i) dst[i] = src[i];
                                }
                                detail::accum(pa, da);
                              });
}

// ---------------------------------------------------------------------------
// Broadcast multiplies.

// x * g where g is {n, c, 1, 1}: per-sample channel gate.
template <class T>
VarT<T> channel_gate_mul(const VarT<T>& x, const VarT<T>& g) {
  const Shape& xs = x.shape();
  const Shape& gs = g.shape();
  BIVM_CHECK(gs.n == xs.n && gs.c == xs.c && gs.h == 1 && gs.w == 1,
             "gate must be (n,c,1,1)");
  TensorT<T> out(xs);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      T gv = g.val().at(n, c, 0, 0);
      const T* src = x.val().data() + x.val().index(n, c, 0, 0);
      T* dst = out.data() + out.index(n, c, 0, 0);
      for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i) dst[i] = src[i] * gv;
    }
  auto px = x.node(), pg = g.node();
  return detail::make_node<T>(std::move(out), {px, pg}, [px, pg](NodeT<T>& self) {
    const Shape& xs = px->val.shape();
    const auto& go = self.val.grad();
    TensorT<T> dx(xs), dg(pg->val.shape());
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        T gv = pg->val.at(n, c, 0, 0);
        int64_t base = px->val.index(n, c, 0, 0);
        T acc = T(0);
        for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i) {
          T gi = go[static_cast<size_t>(base + i)];
          dx.vec()[static_cast<size_t>(base + i)] = gi * gv;
          acc += gi * px->val.vec()[static_cast<size_t>(base + i)];
        }
        dg.at(n, c, 0, 0) = acc;
      }
    detail::accum(px, dx);
    detail::accum(pg, dg);
  });
}

// x + b where b is {1, c, 1, 1}: per-channel bias.
template <class T>
VarT<T> add_channel_bias(const VarT<T>& x, const VarT<T>& b) {
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  BIVM_CHECK(bs.n == 1 && bs.c == xs.c && bs.h == 1 && bs.w == 1,
             "bias must be (1,c,1,1)");
  TensorT<T> out(xs);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      T bv = b.val().vec()[static_cast<size_t>(c)];
      const T* src = x.val().data() + x.val().index(n, c, 0, 0);
      T* dst = out.data() + out.index(n, c, 0, 0);
      for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i) dst[i] = src[i] + bv;
    }
  auto px = x.node(), pb = b.node();
  return detail::make_node<T>(std::move(out), {px, pb}, [px, pb](NodeT<T>& self) {
    detail::accum(px, detail::grad_tensor(self));
    const Shape& xs = px->val.shape();
    const auto& go = self.val.grad();
    TensorT<T> db(pb->val.shape());
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        int64_t base = px->val.index(n, c, 0, 0);
        T acc = T(0);
        for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i)
          acc += go[static_cast<size_t>(base + i)];
        db.vec()[static_cast<size_t>(c)] += acc;
      }
    detail::accum(pb, db);
  });
}

// x * m with a {0,1} spatial mask broadcast over channels. The mask is data,
// not a differentiable input.
template <class T>
VarT<T> mask_mul(const VarT<T>& x, const Mask& m) {
  const Shape& xs = x.shape();
  BIVM_CHECK(m.n == xs.n && m.h == xs.h && m.w == xs.w, "mask extent mismatch");
  TensorT<T> out(xs);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int y = 0; y < xs.h; ++y)
        for (int xx = 0; xx < xs.w; ++xx)
          out.at(n, c, y, xx) = m.at(n, y, xx) ? x.val().at(n, c, y, xx) : T(0);
  auto px = x.node();
  Mask mc = m;
  return detail::make_node<T>(std::move(out), {px}, [px, mc](NodeT<T>& self) {
    const Shape& xs = px->val.shape();
    const auto& go = self.val.grad();
    TensorT<T> dx(xs);
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c)
        for (int y = 0; y < xs.h; ++y)
          for (int xx = 0; xx < xs.w; ++xx)
            if (mc.at(n, y, xx))
              dx.at(n, c, y, xx) = go[static_cast<size_t>(dx.index(n, c, y, xx))];
    detail::accum(px, dx);
  });
}

// ---------------------------------------------------------------------------
// Convolution.

template <class T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const ConvSpec& spec) {
  auto px = x.node(), pw = w.node();
  return detail::make_node<T>(conv_forward(x.val(), w.val(), spec), {px, pw},
                              [px, pw, spec](NodeT<T>& self) {
                                TensorT<T> go = detail::grad_tensor(self);
                                if (px->needs_grad)
                                  detail::accum(px, conv_backward_input(
                                                        go, pw->val, px->val.shape(), spec));
                                if (pw->needs_grad)
                                  detail::accum(pw, conv_backward_weight(
                                                        go, px->val, pw->val.shape(), spec));
                              });
}

// ---------------------------------------------------------------------------
// Batch normalization. Running stats live outside the graph and are updated
// in place during training (biased variance, matching the normalizer).

template <class T>
struct BnStateT {
  TensorT<T> running_mean, running_var;

  void init(int c) {
    running_mean = TensorT<T>(Shape{1, c, 1, 1});
    running_var = TensorT<T>(Shape{1, c, 1, 1}, T(1));
  }
  int channels() const { return running_mean.shape().c; }
};

template <class T>
VarT<T> batch_norm(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta,
                   BnStateT<T>* state, bool training, T momentum = T(0.1),
                   T eps = T(1e-5)) {
  const Shape& xs = x.shape();
  BIVM_CHECK(state && state->channels() == xs.c, "bn state channel mismatch");
  BIVM_CHECK((gamma.shape() == Shape{1, xs.c, 1, 1}) &&
                 (beta.shape() == Shape{1, xs.c, 1, 1}),
             "bn affine shape mismatch");
  int64_t per_ch = static_cast<int64_t>(xs.n) * xs.h * xs.w;
  BIVM_CHECK(per_ch > 0, "bn over empty batch");

  std::vector<T> mean(static_cast<size_t>(xs.c)), var(static_cast<size_t>(xs.c));
  if (training) {
    for (int c = 0; c < xs.c; ++c) {
      T m = T(0);
      for (int n = 0; n < xs.n; ++n) {
        const T* row = x.val().data() + x.val().index(n, c, 0, 0);
        for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i) m += row[i];
      }
      m /= static_cast<T>(per_ch);
      T v = T(0);
      for (int n = 0; n < xs.n; ++n) {
        const T* row = x.val().data() + x.val().index(n, c, 0, 0);
        for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i) {
          T d = row[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<T>(per_ch);
      mean[static_cast<size_t>(c)] = m;
      var[static_cast<size_t>(c)] = v;
      auto& rm = state->running_mean.vec()[static_cast<size_t>(c)];
      auto& rv = state->running_var.vec()[static_cast<size_t>(c)];
      rm = (T(1) - momentum) * rm + momentum * m;
      rv = (T(1) - momentum) * rv + momentum * v;
    }
  } else {
    for (int c = 0; c < xs.c; ++c) {
      mean[static_cast<size_t>(c)] = state->running_mean.vec()[static_cast<size_t>(c)];
      var[static_cast<size_t>(c)] = state->running_var.vec()[static_cast<size_t>(c)];
    }
  }

  std::vector<T> inv_std(static_cast<size_t>(xs.c));
  for (int c = 0; c < xs.c; ++c)
    inv_std[static_cast<size_t>(c)] = T(1) / std::sqrt(var[static_cast<size_t>(c)] + eps);

  // xhat is shared by forward and backward; keep one copy in the closure.
  auto xhat = std::make_shared<TensorT<T>>(xs);
  TensorT<T> out(xs);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      T m = mean[static_cast<size_t>(c)];
      T is = inv_std[static_cast<size_t>(c)];
      T gm = gamma.val().vec()[static_cast<size_t>(c)];
      T bt = beta.val().vec()[static_cast<size_t>(c)];
      const T* src = x.val().data() + x.val().index(n, c, 0, 0);
      T* xh = xhat->data() + xhat->index(n, c, 0, 0);
      T* dst = out.data() + out.index(n, c, 0, 0);
      for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i) {
        xh[i] = (src[i] - m) * is;
        dst[i] = gm * xh[i] + bt;
      }
    }

  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::make_node<T>(
      std::move(out), {px, pg, pb},
      [px, pg, pb, xhat, inv_std, training, per_ch](NodeT<T>& self) {
        const Shape& xs = px->val.shape();
        const auto& go = self.val.grad();
        TensorT<T> dgamma(Shape{1, xs.c, 1, 1}), dbeta(Shape{1, xs.c, 1, 1});
        TensorT<T> dx(xs);
        for (int c = 0; c < xs.c; ++c) {
          T sum_g = T(0), sum_gx = T(0);
          for (int n = 0; n < xs.n; ++n) {
            int64_t base = px->val.index(n, c, 0, 0);
            const T* xh = xhat->data() + base;
            for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i) {
              T g = go[static_cast<size_t>(base + i)];
              sum_g += g;
              sum_gx += g * xh[i];
            }
          }
          dbeta.vec()[static_cast<size_t>(c)] = sum_g;
          dgamma.vec()[static_cast<size_t>(c)] = sum_gx;
          T gm = pg->val.vec()[static_cast<size_t>(c)];
          T is = inv_std[static_cast<size_t>(c)];
          if (training) {
            T inv_n = T(1) / static_cast<T>(per_ch);
            for (int n = 0; n < xs.n; ++n) {
              int64_t base = px->val.index(n, c, 0, 0);
              const T* xh = xhat->data() + base;
              for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i) {
                T g = go[static_cast<size_t>(base + i)];
                dx.vec()[static_cast<size_t>(base + i)] =
                    gm * is * (g - inv_n * sum_g - xh[i] * inv_n * sum_gx);
              }
            }
          } else {
            for (int n = 0; n < xs.n; ++n) {
              int64_t base = px->val.index(n, c, 0, 0);
              for (int64_t i = 0; i < static_cast<int64_t>(xs.h) * xs.w; ++i)
                dx.vec()[static_cast<size_t>(base + i)] =
                    go[static_cast<size_t>(base + i)] * gm * is;
            }
          }
        }
        detail::accum(px, dx);
        detail::accum(pg, dgamma);
        detail::accum(pb, dbeta);
      });
}

// ---------------------------------------------------------------------------
// Binarization with straight-through gradients.

// Sign against a learned scalar threshold. Forward emits +/-1 with ties to +1;
// the gradient passes where the centered input lies strictly inside (-1, 1),
// and the threshold collects the negated sum of the passed gradient.
template <class T>
VarT<T> sign_ste(const VarT<T>& x, const VarT<T>& tau) {
  BIVM_CHECK(tau.val().size() == 1, "threshold must be scalar");
  T tv = tau.val().vec()[0];
  TensorT<T> out(x.shape());
  for (int64_t i = 0; i < out.size(); ++i)
    out.vec()[i] = (x.val().vec()[i] - tv >= T(0)) ? T(1) : T(-1);
  auto px = x.node(), pt = tau.node();
  return detail::make_node<T>(std::move(out), {px, pt}, [px, pt](NodeT<T>& self) {
    const auto& go = self.val.grad();
    T tv = pt->val.vec()[0];
    TensorT<T> dx(px->val.shape());
    T dtau = T(0);
    for (size_t i = 0; i < go.size(); ++i) {
      T d = px->val.vec()[i] - tv;
      if (d > T(-1) && d < T(1)) {
        dx.vec()[i] = go[i];
        dtau -= go[i];
      }
    }
    detail::accum(px, dx);
    TensorT<T> dt(Shape{1, 1, 1, 1});
    dt.vec()[0] = dtau;
    detail::accum(pt, dt);
  });
}

// Weight binarization: s * sign(w) with s = mean|w| treated as a constant of
// the forward pass. The straight-through window is |w| < 1.
template <class T>
VarT<T> sign_ste_weights(const VarT<T>& w) {
  BIVM_CHECK(w.val().size() > 0, "empty weight tensor");
  // Scale in double so the value matches the packed-path weight binarizer.
  double acc = 0.0;
  for (T v : w.val().vec()) acc += std::fabs(static_cast<double>(v));
  T s = static_cast<T>(acc / static_cast<double>(w.val().size()));
  TensorT<T> out(w.shape());
  for (int64_t i = 0; i < out.size(); ++i)
    out.vec()[i] = (w.val().vec()[i] >= T(0)) ? s : -s;
  auto pw = w.node();
  return detail::make_node<T>(std::move(out), {pw}, [pw, s](NodeT<T>& self) {
    const auto& go = self.val.grad();
    TensorT<T> dw(pw->val.shape());
    for (size_t i = 0; i < go.size(); ++i) {
      T v = pw->val.vec()[i];
      if (v > T(-1) && v < T(1)) dw.vec()[i] = go[i] * s;
    }
    detail::accum(pw, dw);
  });
}

// ---------------------------------------------------------------------------
// Classification losses.

// Mean cross-entropy over the batch; logits are (n, k, 1, 1).
template <class T>
VarT<T> softmax_ce(const VarT<T>& logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  BIVM_CHECK(s.h == 1 && s.w == 1, "logits must be (n,k,1,1)");
  BIVM_CHECK(static_cast<int>(labels.size()) == s.n, "label count mismatch");
  auto probs = std::make_shared<TensorT<T>>(s);
  T loss = T(0);
  for (int n = 0; n < s.n; ++n) {
    const T* row = logits.val().data() + logits.val().index(n, 0, 0, 0);
    T mx = row[0];
    for (int k = 1; k < s.c; ++k) mx = std::max(mx, row[k]);
    T z = T(0);
    for (int k = 0; k < s.c; ++k) z += std::exp(row[k] - mx);
    T logz = std::log(z) + mx;
    for (int k = 0; k < s.c; ++k)
      probs->at(n, k, 0, 0) = std::exp(row[k] - logz);
    int y = labels[static_cast<size_t>(n)];
    BIVM_CHECK(y >= 0 && y < s.c, "label out of range");
    loss -= row[y] - logz;
  }
  TensorT<T> out(Shape{1, 1, 1, 1});
  out.vec()[0] = loss / static_cast<T>(s.n);
  auto pl = logits.node();
  std::vector<int> lab = labels;
  return detail::make_node<T>(std::move(out), {pl}, [pl, probs, lab](NodeT<T>& self) {
    const Shape& s = pl->val.shape();
    T g = self.val.grad()[0] / static_cast<T>(s.n);
    TensorT<T> dl(s);
    for (int n = 0; n < s.n; ++n)
      for (int k = 0; k < s.c; ++k) {
        T p = probs->at(n, k, 0, 0);
        dl.at(n, k, 0, 0) = g * (p - (k == lab[static_cast<size_t>(n)] ? T(1) : T(0)));
      }
    detail::accum(pl, dl);
  });
}

// Mean binary cross-entropy on logits against a constant target in [0, 1].
template <class T>
VarT<T> bce_logits(const VarT<T>& x, const TensorT<T>& target) {
  BIVM_CHECK(x.shape() == target.shape(), "bce target shape mismatch");
  T loss = T(0);
  for (int64_t i = 0; i < x.val().size(); ++i) {
    T v = x.val().vec()[i];
    T t = target.vec()[static_cast<size_t>(i)];
    // max(v,0) - v*t + log(1 + exp(-|v|)), the stable form.
    loss += std::max(v, T(0)) - v * t + std::log1p(std::exp(-std::fabs(v)));
  }
  TensorT<T> out(Shape{1, 1, 1, 1});
  out.vec()[0] = loss / static_cast<T>(x.val().size());
  auto px = x.node();
  auto tgt = std::make_shared<TensorT<T>>(target);
  return detail::make_node<T>(std::move(out), {px}, [px, tgt](NodeT<T>& self) {
    T g = self.val.grad()[0] / static_cast<T>(px->val.size());
    TensorT<T> dx(px->val.shape());
    for (size_t i = 0; i < dx.vec().size(); ++i) {
      T v = px->val.vec()[i];
      T sig = T(1) / (T(1) + std::exp(-v));
      dx.vec()[i] = g * (sig - tgt->vec()[i]);
    }
    detail::accum(px, dx);
  });
}

// Value passthrough that severs the graph.
template <class T>
VarT<T> detach(const VarT<T>& a) {
  TensorT<T> v = a.val();
  v.drop_grad();
  return VarT<T>(std::move(v), false);
}

}  // namespace bivm::ag
