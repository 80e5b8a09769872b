#pragma once

#include <cstdint>
#include <vector>

#include "serann/tensor.hpp"

namespace serann {

/// Bias-corrected Adam with the conventional defaults.
struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One update of every parameter from its gradient buffer. Moment buffers
/// are allocated on first use. Throws NumericError, naming the parameter,
/// if any gradient is non-finite; parameters are left untouched in that case.
void adam_step(const ParameterList& params, AdamState& state);

}  // namespace serann
