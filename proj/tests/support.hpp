#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "come/autodiff.hpp"
#include "come/random.hpp"

namespace come::testing {

// Largest |analytic - central FD| / max(1, |FD|) over every input coordinate.
template <typename F>
double fd_error(F&& f, const Tensor& at, double h = 1e-5) {
  Tape tape;
  const Tensor x = tape.variable(at);
  const Tensor g = tape.backward(f(x)).wrt(x);
  std::vector<double> v(at.values().begin(), at.values().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = f(Tensor(at.shape(), v)).item();
    v[i] = keep - h;
    const double down = f(Tensor(at.shape(), v)).item();
    v[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

inline Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0, double avoid = 0.0) {
  std::vector<double> v(r * c);
  for (double& x : v) {
    do x = rng.normal(0.0, sd);
    while (std::abs(x) < avoid);
  }
  return Tensor::matrix(r, c, std::move(v));
}

}  // namespace come::testing
