#pragma once

#include <cstddef>
#include <numeric>

#include "serann/rng.hpp"
#include "serann/tensor.hpp"

namespace serann::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  return std::inner_product(a.values().begin(), a.values().end(), b.values().begin(), 0.0);
}

}  // namespace serann::test
