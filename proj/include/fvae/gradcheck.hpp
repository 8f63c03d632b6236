#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace fvae {

using ScalarFunction = std::function<double(std::span<const double>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
};

// Compares an analytic gradient with central differences of f at point.
// Error per coordinate is |analytic - numeric| / max(1, |analytic|). When
// coordinates is empty every coordinate is checked. eps must lie in
// [1e-6, 1e-2]; a non-finite f anywhere on the stencil throws.
GradCheckResult finite_diff_check(const ScalarFunction& f, std::span<const double> point,
                                  std::span<const double> analytic, double eps,
                                  std::span<const std::size_t> coordinates = {});

}  // namespace fvae
