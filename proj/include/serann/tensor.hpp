#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace serann {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// The gradient buffer, when enabled, always has the same shape as the
/// values. Learnable parameters are tensors with the gradient enabled.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double& at(std::size_t i, std::size_t j) { return values_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return values_[i * shape_[1] + j]; }

  /// Same values, new shape with identical element count.
  Tensor reshaped(Shape shape) const;

  void fill(double value);

  bool has_grad() const { return grad_.has_value(); }
  /// Allocates a zeroed gradient buffer if absent.
  void enable_grad();
  void zero_grad();
  std::span<double> grad();
  std::span<const double> grad() const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> values_;
  std::optional<std::vector<double>> grad_;
};

/// Throws NumericError naming `what` if any value is NaN or infinite.
void ensure_finite(const Tensor& t, std::string_view what);

/// Throws DimensionError unless `t` has exactly the expected shape.
void expect_shape(const Tensor& t, const Shape& expected, std::string_view what);

/// A parameter tensor and the name it is stored under in checkpoints.
struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

using ParameterList = std::vector<NamedTensor>;

void zero_grads(const ParameterList& params);

/// Deep copy of parameter values, for best-checkpoint tracking.
using ParameterSnapshot = std::vector<std::vector<double>>;
ParameterSnapshot snapshot(const ParameterList& params);
void restore(const ParameterList& params, const ParameterSnapshot& snap);

}  // namespace serann
