#pragma once

// Central finite-difference oracle used to check tape gradients. It only
// evaluates the function; it never touches the backward rules.

#include <algorithm>
#include <cmath>
#include <functional>

#include "cotlab/tensor.hpp"
#include "cotlab/transformer.hpp"

namespace cotlab::testing {

inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, Tensor x,
                               double h = 1e-5) {
  Tensor g(x.shape(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace cotlab::testing
