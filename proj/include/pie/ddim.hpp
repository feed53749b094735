#pragma once

#include <cmath>
#include <cstdint>

#include "pie/denoiser.hpp"
#include "pie/oracle.hpp"
#include "pie/rng.hpp"
#include "pie/schedule.hpp"

namespace pie::ddim {

inline void check_step(const NoiseSchedule& s, int t, int lo, const char* where) {
  if (t < lo || t > s.T()) {
    throw InvalidArgument(std::string(where) + ": step " + std::to_string(t) + " outside [" + std::to_string(lo) +
                          ", " + std::to_string(s.T()) + "]");
  }
}

/// sqrt(abar) x0 + sqrt(1 - abar) eps.
inline State forward_noise_at(const State& x0, double abar, const State& eps) {
  require_same_shape(x0, eps, "forward_noise");
  return x0.with_values(std::sqrt(abar) * x0.values() + std::sqrt(1.0 - abar) * eps.values());
}

inline State forward_noise(const State& x0, int t, const State& eps, const NoiseSchedule& s) {
  check_step(s, t, 0, "forward_noise");
  return forward_noise_at(x0, s.alphabar(t), eps);
}

/// Deterministic DDIM update from signal level abar_t to abar_prev.
inline State reverse_step_at(const State& x_t, double abar_t, double abar_prev, const State& eps_hat) {
  require_same_shape(x_t, eps_hat, "reverse_step");
  const Vector x0_hat = (x_t.values() - std::sqrt(1.0 - abar_t) * eps_hat.values()) / std::sqrt(abar_t);
  return x_t.with_values(std::sqrt(abar_prev) * x0_hat + std::sqrt(1.0 - abar_prev) * eps_hat.values());
}

inline State reverse_step(const State& x_t, int t, const State& eps_hat, const NoiseSchedule& s) {
  check_step(s, t, 1, "reverse_step");
  return reverse_step_at(x_t, s.alphabar(t), s.alphabar(t - 1), eps_hat);
}

/// Runs the reverse recurrence t = k..1. k = 0 returns the input.
inline State denoise_from(const State& x_k, int k, const Denoiser& d, Condition y, const NoiseSchedule& s) {
  check_step(s, k, 0, "denoise_from");
  State x = x_k;
  for (int t = k; t >= 1; --t) x = reverse_step(x, t, d.epsilon(x, t, y), s);
  return x;
}

struct InversionOptions {
  bool refine = false;
  int max_iterations = 10;
  double tolerance = 1e-10;
};

/// Solves the reverse step for x_t given x_{t-1} and an epsilon guess.
inline State invert_step_at(const State& x_prev, double abar_t, double abar_prev, const State& eps) {
  const Vector x0_hat = (x_prev.values() - std::sqrt(1.0 - abar_prev) * eps.values()) / std::sqrt(abar_prev);
  return x_prev.with_values(std::sqrt(abar_t) * x0_hat + std::sqrt(1.0 - abar_t) * eps.values());
}

/// DDIM inversion: x_0 -> x_k, evaluating epsilon at the previous state. With
/// `refine`, the evaluation point is iterated toward the solution of
/// reverse_step(x_t, t, eps(x_t)) = x_{t-1}.
inline State invert(const State& x0, int k, const Denoiser& d, Condition y, const NoiseSchedule& s,
                    const InversionOptions& opts = {}) {
  check_step(s, k, 0, "invert");
  State x = x0;
  for (int t = 1; t <= k; ++t) {
    const double abar_t = s.alphabar(t);
    const double abar_prev = s.alphabar(t - 1);
    if (!(abar_prev > abar_t) || !(abar_t > 0.0)) throw InvalidArgument("invert: degenerate alphabar at step " + std::to_string(t));
    State next = invert_step_at(x, abar_t, abar_prev, d.epsilon(x, t, y));
    if (opts.refine) {
      for (int it = 0; it < opts.max_iterations; ++it) {
        State refined = invert_step_at(x, abar_t, abar_prev, d.epsilon(next, t, y));
        const double change = (refined.values() - next.values()).norm();
        const double scale = std::max(1.0, refined.norm());
        next = std::move(refined);
        if (change <= opts.tolerance * scale) break;
      }
    }
    x = std::move(next);
  }
  return x;
}

/// Pure generation from x_T ~ N(0, I).
inline State sample(const Denoiser& d, Condition y, const NoiseSchedule& s, Shape shape, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x5a3d1e);
  return denoise_from(standard_normal(shape, rng), s.T(), d, y, s);
}

}  // namespace pie::ddim
