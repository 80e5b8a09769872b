#include "serann/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "serann/error.hpp"

namespace serann {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double central_difference(const std::function<double()>& loss, double& x, double epsilon) {
  const double saved = x;
  x = saved + epsilon;
  const double up = loss();
  x = saved - epsilon;
  const double down = loss();
  x = saved;
  return (up - down) / (2.0 * epsilon);
}

}  // namespace

GradCheckResult finite_diff_grad_check(const std::function<double()>& loss, std::span<double> point,
                                       std::span<const double> analytic, double epsilon) {
  if (point.size() != analytic.size()) {
    throw DimensionError("finite_diff_grad_check: point and gradient sizes differ");
  }
  GradCheckResult result;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double numeric = central_difference(loss, point[i], epsilon);
    const double err = relative_error(analytic[i], numeric);
    if (err > result.max_rel_error || result.checked == 0) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
    ++result.checked;
  }
  return result;
}

GradCheckResult check_parameter_gradients(const std::function<double()>& loss,
                                          const ParameterList& params, double epsilon,
                                          std::size_t max_per_tensor) {
  GradCheckResult result;
  for (const auto& p : params) {
    auto values = p.tensor->values();
    // Copy: the loss closure may overwrite gradient buffers.
    const std::vector<double> analytic(p.tensor->grad().begin(), p.tensor->grad().end());
    const std::size_t n = values.size();
    const std::size_t stride =
        (max_per_tensor == 0 || n <= max_per_tensor) ? 1 : (n + max_per_tensor - 1) / max_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const double numeric = central_difference(loss, values[i], epsilon);
      const double err = relative_error(analytic[i], numeric);
      if (err > result.max_rel_error || result.checked == 0) {
        result.max_rel_error = err;
        result.worst_index = i;
        result.worst_name = p.name;
      }
      ++result.checked;
    }
  }
  return result;
}

}  // namespace serann
