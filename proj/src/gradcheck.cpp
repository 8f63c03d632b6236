#include "fvae/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fvae {

GradCheckResult finite_diff_check(const ScalarFunction& f, std::span<const double> point,
                                  std::span<const double> analytic, double eps,
                                  std::span<const std::size_t> coordinates) {
  if (!(eps >= 1e-6 && eps <= 1e-2)) {
    throw std::invalid_argument("finite_diff_check: eps must lie in [1e-6, 1e-2]");
  }
  if (analytic.size() != point.size()) {
    throw std::invalid_argument("finite_diff_check: gradient has " +
                                std::to_string(analytic.size()) + " entries for a point of " +
                                std::to_string(point.size()));
  }
  std::vector<std::size_t> all;
  if (coordinates.empty()) {
    all.resize(point.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coordinates = all;
  }

  auto eval = [&](std::span<const double> x) {
    const double v = f(x);
    if (!std::isfinite(v)) {
      throw std::runtime_error("finite_diff_check: function is not finite near the point");
    }
    return v;
  };
  eval(point);

  std::vector<double> x(point.begin(), point.end());
  GradCheckResult result;
  for (std::size_t i : coordinates) {
    if (i >= x.size()) throw std::out_of_range("finite_diff_check: coordinate out of range");
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = eval(x);
    x[i] = saved - eps;
    const double down = eval(x);
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_coordinate = i;
    }
  }
  return result;
}

}  // namespace fvae
