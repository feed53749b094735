#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace pie {

/// Raised when a caller violates an operation's precondition.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by numerical procedures that cannot produce a result for the
/// given input (empty statistics, degenerate fits, missing fixed points).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vector = Eigen::VectorXd;

/// Row/column layout of a state. Latent states are 1 x dim.
struct Shape {
  std::size_t rows = 1;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

/// A point in data space: a flat latent vector or a row-major image grid.
class State {
 public:
  State() = default;

  explicit State(Vector values) : values_(std::move(values)), shape_{1, static_cast<std::size_t>(values_.size())} {}

  State(Vector values, Shape shape) : values_(std::move(values)), shape_(shape) {
    if (shape_.size() != static_cast<std::size_t>(values_.size())) {
      throw InvalidArgument("state: shape " + std::to_string(shape_.rows) + "x" + std::to_string(shape_.cols) +
                            " does not match " + std::to_string(values_.size()) + " values");
    }
  }

  static State zeros(Shape shape) { return State(Vector::Zero(static_cast<Eigen::Index>(shape.size())), shape); }

  static State latent(std::initializer_list<double> values) {
    Vector v(static_cast<Eigen::Index>(values.size()));
    Eigen::Index i = 0;
    for (double x : values) v[i++] = x;
    return State(std::move(v));
  }

  const Vector& values() const { return values_; }
  Vector& values() { return values_; }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }

  double operator[](std::size_t i) const { return values_[static_cast<Eigen::Index>(i)]; }
  double& operator[](std::size_t i) { return values_[static_cast<Eigen::Index>(i)]; }

  double at(std::size_t row, std::size_t col) const { return (*this)[row * shape_.cols + col]; }

  std::span<const double> data() const { return {values_.data(), size()}; }

  double norm() const { return values_.norm(); }

  bool all_finite() const { return values_.allFinite(); }

  /// Same shape, new values.
  State with_values(Vector values) const { return State(std::move(values), shape_); }

  bool operator==(const State& other) const {
    return shape_ == other.shape_ && values_.size() == other.values_.size() &&
           (values_.array() == other.values_.array()).all();
  }

 private:
  Vector values_;
  Shape shape_;
};

/// Discrete conditioning label (class index into a world or a denoiser's embedding).
struct Condition {
  int label = 0;
  bool operator==(const Condition&) const = default;
};

inline void require_same_shape(const State& a, const State& b, const char* where) {
  if (!(a.shape() == b.shape())) {
    throw InvalidArgument(std::string(where) + ": shape mismatch (" + std::to_string(a.shape().rows) + "x" +
                          std::to_string(a.shape().cols) + " vs " + std::to_string(b.shape().rows) + "x" +
                          std::to_string(b.shape().cols) + ")");
  }
}

/// Per-cell region weights in [0,1].
class RoiMask {
 public:
  RoiMask() = default;

  RoiMask(Vector weights, Shape shape) : weights_(std::move(weights)), shape_(shape) {
    if (shape_.size() != static_cast<std::size_t>(weights_.size())) throw InvalidArgument("roi mask: shape mismatch");
    if (weights_.size() > 0 && (weights_.minCoeff() < 0.0 || weights_.maxCoeff() > 1.0 || !weights_.allFinite())) {
      throw InvalidArgument("roi mask: weights must lie in [0,1]");
    }
  }

  static RoiMask ones(Shape shape) { return {Vector::Ones(static_cast<Eigen::Index>(shape.size())), shape}; }
  static RoiMask zeros(Shape shape) { return {Vector::Zero(static_cast<Eigen::Index>(shape.size())), shape}; }

  const Vector& weights() const { return weights_; }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return static_cast<std::size_t>(weights_.size()); }
  double operator[](std::size_t i) const { return weights_[static_cast<Eigen::Index>(i)]; }

  /// Fraction of the grid covered, weighted.
  double area_fraction() const { return size() == 0 ? 0.0 : weights_.mean(); }

 private:
  Vector weights_;
  Shape shape_;
};

}  // namespace pie
