#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "serann/tensor.hpp"

namespace serann {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::string worst_name;  // parameter holding worst_index, when known
};

/// Relative error used throughout: |a - n| / max(|a|, |n|, floor). The floor
/// keeps coordinates whose true gradient is zero from dividing round-off by
/// round-off.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares `analytic` against central differences of `loss` taken by
/// perturbing each coordinate of `point` in place (restored afterwards).
GradCheckResult finite_diff_grad_check(const std::function<double()>& loss, std::span<double> point,
                                       std::span<const double> analytic, double epsilon = 1e-4);

/// Same check over every parameter's gradient buffer. `max_per_tensor`
/// limits the number of probed coordinates per tensor (evenly strided);
/// 0 probes all of them.
GradCheckResult check_parameter_gradients(const std::function<double()>& loss,
                                          const ParameterList& params, double epsilon = 1e-4,
                                          std::size_t max_per_tensor = 0);

}  // namespace serann
