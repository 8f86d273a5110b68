#pragma once

// Finite-difference gradient checking used across the test suites. The
// numerical side only ever calls the forward path, so it stays independent of
// the backward rules it is checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vitquant/rng.hpp"
#include "vitquant/tensor.hpp"

namespace testsupport {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Central finite difference of a scalar function at every coordinate of
// `input` (or a random subset when `sample` > 0), compared against the
// reverse-mode gradient.
//
// rel error per coordinate: |analytic - numeric| / max(denom_floor, |analytic| + |numeric|)
inline GradCheckResult gradcheck(
    const std::function<vitquant::Tensor(const vitquant::Tensor&)>& fn, vitquant::Tensor input,
    double h = 1e-5, int sample = 0, vitquant::Rng* rng = nullptr,
    double denom_floor = 1e-6) {
  using vitquant::Tensor;
  input.set_requires_grad(true);
  input.zero_grad();
  Tensor loss = fn(input);
  loss.backward();
  std::vector<double> analytic(input.grad().begin(), input.grad().end());

  std::vector<std::size_t> coords;
  if (sample > 0 && static_cast<std::size_t>(sample) < input.size()) {
    for (int i = 0; i < sample; ++i) {
      coords.push_back(static_cast<std::size_t>(
          rng->uniform_int(0, static_cast<int>(input.size()) - 1)));
    }
  } else {
    coords.resize(input.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  }

  GradCheckResult result;
  auto values = input.mutable_data();
  for (std::size_t c : coords) {
    const double saved = values[c];
    values[c] = saved + h;
    const double f_plus = fn(input).item();
    values[c] = saved - h;
    const double f_minus = fn(input).item();
    values[c] = saved;
    const double numeric = (f_plus - f_minus) / (2.0 * h);
    const double abs_err = std::fabs(analytic[c] - numeric);
    const double denom = std::max(denom_floor, std::fabs(analytic[c]) + std::fabs(numeric));
    result.max_abs_error = std::max(result.max_abs_error, abs_err);
    result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
    ++result.checked;
  }
  return result;
}

inline vitquant::Tensor random_tensor(std::vector<int> shape, vitquant::Rng& rng, double lo = -2.0,
                                      double hi = 2.0) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.uniform(lo, hi);
  return vitquant::Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace testsupport
