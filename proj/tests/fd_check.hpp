#pragma once
// Finite-difference gradient verification harness, double precision.
//
// rebuild() must construct the scalar loss graph from the leaf vars it closed
// over; it is invoked once per probe with perturbed leaf values. The reported
// error is |fd - analytic| / max(1, |fd|, |analytic|) so it stays meaningful
// near zero.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "bivm/autograd.hpp"

namespace bivm::testing {

struct FdReport {
  double max_err = 0.0;
  int64_t checked = 0;
};

inline FdReport fd_check(std::vector<ag::VarT<double>*> leaves,
                         const std::function<ag::VarT<double>()>& rebuild,
                         double eps = 1e-5) {
  for (auto* p : leaves) p->zero_grad();
  ag::VarT<double> loss = rebuild();
  ag::backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto* p : leaves)
    analytic.push_back(p->has_grad() ? p->grad()
                                     : std::vector<double>(p->val().vec().size(), 0.0));

  FdReport rep;
  for (size_t pi = 0; pi < leaves.size(); ++pi) {
    auto& vals = leaves[pi]->mutable_val().vec();
    for (size_t i = 0; i < vals.size(); ++i) {
      double keep = vals[i];
      vals[i] = keep + eps;
      double up = rebuild().item();
      vals[i] = keep - eps;
      double dn = rebuild().item();
      vals[i] = keep;
      double fd = (up - dn) / (2.0 * eps);
      double an = analytic[pi][i];
      double err = std::fabs(fd - an) / std::max({1.0, std::fabs(fd), std::fabs(an)});
      rep.max_err = std::max(rep.max_err, err);
      ++rep.checked;
    }
  }
  return rep;
}

inline TensorT<double> random_tensor_d(Shape s, Rng& rng, double lo = -1.0,
                                       double hi = 1.0) {
  TensorT<double> t(s);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace bivm::testing
