#include "serann/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "serann/error.hpp"

namespace serann {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_size(shape_) != values_.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape_) + " holds " +
                         std::to_string(shape_size(shape_)) + " values, got " +
                         std::to_string(values_.size()));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), values_);
}

void Tensor::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

void Tensor::enable_grad() {
  if (!grad_) grad_.emplace(values_.size(), 0.0);
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

std::span<double> Tensor::grad() {
  if (!grad_) throw PreconditionError("tensor has no gradient buffer");
  return *grad_;
}

std::span<const double> Tensor::grad() const {
  if (!grad_) throw PreconditionError("tensor has no gradient buffer");
  return *grad_;
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void ensure_finite(const Tensor& t, std::string_view what) {
  const auto vals = t.values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (!std::isfinite(vals[i])) {
      std::ostringstream os;
      os << "non-finite value " << vals[i] << " at flat index " << i << " of " << what << ' '
         << shape_to_string(t.shape());
      throw NumericError(os.str());
    }
  }
}

void expect_shape(const Tensor& t, const Shape& expected, std::string_view what) {
  if (t.shape() != expected) {
    throw DimensionError(std::string(what) + ": expected shape " + shape_to_string(expected) +
                         ", got " + shape_to_string(t.shape()));
  }
}

void zero_grads(const ParameterList& params) {
  for (const auto& p : params) {
    p.tensor->enable_grad();
    p.tensor->zero_grad();
  }
}

ParameterSnapshot snapshot(const ParameterList& params) {
  ParameterSnapshot snap;
  snap.reserve(params.size());
  for (const auto& p : params) {
    const auto v = p.tensor->values();
    snap.emplace_back(v.begin(), v.end());
  }
  return snap;
}

void restore(const ParameterList& params, const ParameterSnapshot& snap) {
  if (snap.size() != params.size()) throw DimensionError("snapshot parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor->values();
    if (dst.size() != snap[i].size()) {
      throw DimensionError("snapshot size mismatch for parameter " + params[i].name);
    }
    std::copy(snap[i].begin(), snap[i].end(), dst.begin());
  }
}

}  // namespace serann
