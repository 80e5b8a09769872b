#pragma once

#include <cstddef>

#include "serann/rng.hpp"
#include "serann/tensor.hpp"

namespace serann {

/// U(-b, b) with b = sqrt(6 / fan_in); suited to ReLU layers.
void he_uniform(Tensor& t, std::size_t fan_in, Rng& rng);

/// U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
void xavier_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng);

void uniform_fill(Tensor& t, double lo, double hi, Rng& rng);

}  // namespace serann
