#pragma once

#include <functional>

#include "pie/state.hpp"

namespace pie {

/// Conditional noise predictor eps(x_t, t, y). Implementations must be
/// deterministic and safe to call concurrently.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual State epsilon(const State& x, int t, Condition y) const = 0;
};

/// Adapts any callable to the Denoiser interface (test doubles, constant predictors).
class FunctionDenoiser final : public Denoiser {
 public:
  using Fn = std::function<State(const State&, int, Condition)>;
  explicit FunctionDenoiser(Fn fn) : fn_(std::move(fn)) {}
  State epsilon(const State& x, int t, Condition y) const override { return fn_(x, t, y); }

 private:
  Fn fn_;
};

/// Predicts a constant value in every cell.
inline FunctionDenoiser constant_denoiser(double value) {
  return FunctionDenoiser([value](const State& x, int, Condition) {
    return x.with_values(Vector::Constant(static_cast<Eigen::Index>(x.size()), value));
  });
}

}  // namespace pie
