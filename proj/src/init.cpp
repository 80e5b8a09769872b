#include "serann/init.hpp"

#include <cmath>

#include "serann/error.hpp"

namespace serann {

void uniform_fill(Tensor& t, double lo, double hi, Rng& rng) {
  for (double& v : t.values()) v = rng.uniform(lo, hi);
}

void he_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw PreconditionError("he_uniform: fan_in must be positive");
  const double b = std::sqrt(6.0 / static_cast<double>(fan_in));
  uniform_fill(t, -b, b, rng);
}

void xavier_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in + fan_out == 0) throw PreconditionError("xavier_uniform: fans must be positive");
  const double b = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  uniform_fill(t, -b, b, rng);
}

}  // namespace serann
