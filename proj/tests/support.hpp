// Shared helpers for the test suite: finite-difference gradient checking and
// small numeric utilities. Oracles here are deliberately naive.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "reframe/param_store.hpp"
#include "reframe/tensor.hpp"

namespace test_support {

using reframe::ParamStore;
using reframe::Tensor;

inline double rel_err(double a, double b) {
  double denom = std::max({1e-8, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) / denom;
}

// Naive triple-loop matmul, the oracle for the tuned kernel.
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  Tensor c({a.shape[0], b.shape[1]});
  for (std::int64_t i = 0; i < a.shape[0]; ++i)
    for (std::int64_t j = 0; j < b.shape[1]; ++j) {
      double s = 0.0;
      for (std::int64_t k = 0; k < a.shape[1]; ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  std::int64_t checked = 0;
};

// Central finite differences over every element of every parameter in
// `store`, against the analytic gradients `loss_fn` leaves in the store.
// loss_fn must zero nothing itself; the harness resets gradients per call.
inline FdReport fd_check(ParamStore& store,
                         const std::function<double(ParamStore&, bool)>& loss_fn,
                         double eps = 1e-5) {
  store.zero_grads();
  double base = loss_fn(store, true);
  (void)base;
  FdReport rep;
  for (const std::string& name : store.names()) {
    Tensor analytic = store.grad(name);
    Tensor& theta = store.value(name);
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
      double keep = theta.data[i];
      theta.data[i] = keep + eps;
      double up = loss_fn(store, false);
      theta.data[i] = keep - eps;
      double down = loss_fn(store, false);
      theta.data[i] = keep;
      double numeric = (up - down) / (2.0 * eps);
      double err = rel_err(analytic.data[i], numeric);
      ++rep.checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = name;
        rep.worst_index = static_cast<std::int64_t>(i);
        rep.analytic = analytic.data[i];
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace test_support
