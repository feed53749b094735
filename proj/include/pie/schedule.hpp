#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "pie/state.hpp"

namespace pie {

/// Cumulative signal-retention sequence abar[0..T] of a deterministic
/// (eta = 0) DDIM sampler. abar[0] is the near-1 end.
class NoiseSchedule {
 public:
  /// Wraps `alphabar` verbatim after validating it.
  static NoiseSchedule from_alphabars(std::vector<double> alphabar) {
    if (alphabar.size() < 3) throw InvalidArgument("schedule: need at least 3 alphabar values (T >= 2)");
    for (std::size_t t = 0; t < alphabar.size(); ++t) {
      const double a = alphabar[t];
      if (!std::isfinite(a) || a <= 0.0 || a > 1.0) {
        throw InvalidArgument("schedule: alphabar[" + std::to_string(t) + "] = " + std::to_string(a) +
                              " outside (0,1]");
      }
      if (t > 0 && !(a < alphabar[t - 1])) {
        throw InvalidArgument("schedule: alphabar not strictly decreasing at index " + std::to_string(t));
      }
    }
    return NoiseSchedule(std::move(alphabar));
  }

  /// Skips validation. Only for probing closed forms at degenerate values.
  static NoiseSchedule unchecked(std::vector<double> alphabar) { return NoiseSchedule(std::move(alphabar)); }

  int T() const { return static_cast<int>(alphabar_.size()) - 1; }
  double alphabar(int t) const { return alphabar_.at(static_cast<std::size_t>(t)); }
  const std::vector<double>& alphabars() const { return alphabar_; }
  double eta() const { return 0.0; }

  bool operator==(const NoiseSchedule&) const = default;

 private:
  explicit NoiseSchedule(std::vector<double> a) : alphabar_(std::move(a)) {}
  std::vector<double> alphabar_;
};

/// Geometric interpolation between abar_start (t = 0) and abar_end (t = T).
inline NoiseSchedule linear_schedule(int T, double ab_start, double ab_end) {
  if (T < 2) throw InvalidArgument("linear_schedule: T must be >= 2");
  if (!(ab_start < 1.0 && ab_start > ab_end && ab_end > 0.0)) {
    throw InvalidArgument("linear_schedule: need 1 > ab_start > ab_end > 0");
  }
  std::vector<double> a(static_cast<std::size_t>(T) + 1);
  const double l0 = std::log(ab_start);
  const double l1 = std::log(ab_end);
  for (int t = 0; t <= T; ++t) a[static_cast<std::size_t>(t)] = std::exp(l0 + (l1 - l0) * t / T);
  a.front() = ab_start;
  a.back() = ab_end;
  return NoiseSchedule::from_alphabars(std::move(a));
}

/// Stable-Diffusion style schedule: scaled-linear betas over `train_steps`,
/// subsampled at T evenly spaced training timesteps (the last one is
/// train_steps - 1). abar[0] and abar[1] are pinned to ab0 and ab1.
inline NoiseSchedule stable_diffusion_schedule(int T = 50, double ab0 = 0.9999, double ab1 = 0.9995,
                                               int train_steps = 1000, double beta_start = 0.00085,
                                               double beta_end = 0.012) {
  if (T < 2 || train_steps < T) throw InvalidArgument("stable_diffusion_schedule: need 2 <= T <= train_steps");
  std::vector<double> cumulative(static_cast<std::size_t>(train_steps));
  const double s0 = std::sqrt(beta_start);
  const double s1 = std::sqrt(beta_end);
  double prod = 1.0;
  for (int i = 0; i < train_steps; ++i) {
    const double s = s0 + (s1 - s0) * i / (train_steps - 1);
    prod *= 1.0 - s * s;
    cumulative[static_cast<std::size_t>(i)] = prod;
  }
  std::vector<double> a(static_cast<std::size_t>(T) + 1);
  a[0] = ab0;
  for (int j = 1; j <= T; ++j) {
    const double pos = static_cast<double>(j - 1) * (train_steps - 1) / (T - 1);
    a[static_cast<std::size_t>(j)] = cumulative[static_cast<std::size_t>(std::lround(pos))];
  }
  a[1] = ab1;
  return NoiseSchedule::from_alphabars(std::move(a));
}

inline double lambda_coefficient(double ab0, double ab1) {
  const double value = (std::sqrt(ab0 - ab0 * ab1) - std::sqrt(ab1 - ab0 * ab1)) / std::sqrt(ab1);
  return std::abs(value);
}

/// Step-size coefficient of the k = 1 editing recursion, |lambda|.
inline double lambda_coefficient(const NoiseSchedule& s) { return lambda_coefficient(s.alphabar(0), s.alphabar(1)); }

/// (1/sqrt(abar0) - 1) C1 + lambda C2: the step-difference envelope before decay.
inline double envelope_scale(const NoiseSchedule& s, double C1, double C2) {
  return (1.0 / std::sqrt(s.alphabar(0)) - 1.0) * C1 + lambda_coefficient(s) * C2;
}

/// Smallest n with n > (2 / log abar0) (log delta - C). Returns 1 when the
/// bound is non-positive.
inline std::int64_t convergence_steps(const NoiseSchedule& s, double C1, double C2, double delta) {
  if (!(C1 >= 0.0 && C2 >= 0.0 && delta > 0.0)) throw InvalidArgument("convergence_steps: need C1, C2 >= 0, delta > 0");
  const double scale = envelope_scale(s, C1, C2);
  if (!(scale > 0.0)) return 1;
  const double C = std::log(scale);
  const double bound = 2.0 / std::log(s.alphabar(0)) * (std::log(delta) - C);
  if (bound <= 0.0) return 1;
  return static_cast<std::int64_t>(std::floor(bound)) + 1;
}

/// Limit drift bound kappa = envelope_scale / (1 - sqrt(abar0)).
inline double drift_bound(const NoiseSchedule& s, double C1, double C2) {
  if (!(C1 >= 0.0 && C2 >= 0.0)) throw InvalidArgument("drift_bound: need C1, C2 >= 0");
  return envelope_scale(s, C1, C2) / (1.0 - std::sqrt(s.alphabar(0)));
}

inline nlohmann::json to_json(const NoiseSchedule& s) { return nlohmann::json{{"alphabar", s.alphabars()}}; }

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("alphabar") || !j["alphabar"].is_array()) {
    throw InvalidArgument("schedule json: expected object with array \"alphabar\"");
  }
  return NoiseSchedule::from_alphabars(j["alphabar"].get<std::vector<double>>());
}

}  // namespace pie
