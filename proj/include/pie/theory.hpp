#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "pie/oracle.hpp"
#include "pie/pie.hpp"

namespace pie::theory {

/// Signed coefficient on eps_theta in the k = 1 recursion:
/// sqrt(1 - abar0) - sqrt(abar0 (1 - abar1) / abar1). Its magnitude is lambda.
inline double eps_coefficient(const NoiseSchedule& s) {
  const double a0 = s.alphabar(0);
  const double a1 = s.alphabar(1);
  return std::sqrt(1.0 - a0) - std::sqrt(a0 * (1.0 - a1) / a1);
}

/// The k = 1 editing iteration (no mask, no blend):
///   x <- sqrt(a0) x + sqrt(a0 (1 - a1) / a1) (eps - eps_theta) + sqrt(1 - a0) eps_theta,
/// with eps_theta evaluated at x_1 = forward_noise(x, 1, eps).
inline Trajectory theory_iterate(const State& x0, Condition y, const Denoiser& d, const NoiseSchedule& s, int N,
                                 NoiseMode noise_mode, std::uint64_t seed = 0, const MetricHooks& hooks = {}) {
  if (N < 0) throw InvalidArgument("theory_iterate: N must be >= 0");
  const double a0 = s.alphabar(0);
  const double a1 = s.alphabar(1);
  const double decay = std::sqrt(a0);
  const double noise_gain = std::sqrt(a0 * (1.0 - a1) / a1);
  const double eps_gain = std::sqrt(1.0 - a0);

  Trajectory traj;
  traj.seed = seed;
  traj.config.gamma = 1.0 / s.T();
  traj.config.N = N;
  traj.config.beta1 = 1.0;
  traj.config.beta2 = 1.0;
  traj.config.noise_mode = noise_mode;
  traj.states.reserve(static_cast<std::size_t>(N) + 1);
  traj.states.push_back(x0);
  traj.records.push_back(describe(0, x0, x0, nullptr, hooks));
  traj.eps_norms.reserve(static_cast<std::size_t>(N));

  Rng rng = make_rng(seed, 0x7e0);
  State fixed_noise;
  if (noise_mode == NoiseMode::FixedSeed) fixed_noise = standard_normal(x0.shape(), rng);

  for (int n = 1; n <= N; ++n) {
    const State eps = noise_mode == NoiseMode::FixedSeed ? fixed_noise : draw_noise(noise_mode, x0.shape(), rng);
    const State& prev = traj.states.back();
    const State x1 = ddim::forward_noise_at(prev, a1, eps);
    const State eps_theta = d.epsilon(x1, 1, y);
    traj.eps_norms.push_back(eps_theta.norm());
    State next = prev.with_values(decay * prev.values() + noise_gain * (eps.values() - eps_theta.values()) +
                                  eps_gain * eps_theta.values());
    traj.records.push_back(describe(n, next, x0, &prev, hooks));
    traj.states.push_back(std::move(next));
  }
  return traj;
}

/// Euclidean norms of consecutive differences.
inline std::vector<double> step_differences(const Trajectory& traj) {
  std::vector<double> out;
  for (std::size_t n = 1; n < traj.states.size(); ++n) {
    out.push_back((traj.states[n].values() - traj.states[n - 1].values()).norm());
  }
  return out;
}

struct Constants {
  double C1 = 0.0;
  double C2 = 0.0;
};

/// C1 = |x0^(0)|, C2 = largest recorded |eps_theta| with a 5% margin.
inline Constants measure_constants(const Trajectory& traj, double margin = 0.05) {
  Constants c;
  c.C1 = traj.initial().norm();
  for (double e : traj.eps_norms) c.C2 = std::max(c.C2, e);
  c.C2 *= 1.0 + margin;
  return c;
}

struct BoundReport {
  std::vector<double> observed;
  std::vector<double> envelope;
  std::vector<int> violations;  // step numbers n (1-based)
  double C1 = 0.0;
  double C2 = 0.0;
  double lambda = 0.0;
  double total_drift = 0.0;
  double kappa = 0.0;
  double drift_slack = 0.0;

  bool envelope_holds() const { return violations.empty(); }
  bool drift_holds() const { return total_drift <= kappa; }
};

/// Flags steps where |x^(n) - x^(n-1)| exceeds sqrt(a0)^n [(1/sqrt(a0) - 1) C1 + lambda C2].
inline BoundReport check_prop2(const Trajectory& traj, double C1, double C2, const NoiseSchedule& s) {
  BoundReport r;
  r.C1 = C1;
  r.C2 = C2;
  r.lambda = lambda_coefficient(s);
  r.observed = step_differences(traj);
  const double base = envelope_scale(s, C1, C2);
  const double log_decay = 0.5 * std::log(s.alphabar(0));
  for (std::size_t i = 0; i < r.observed.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    const double env = std::exp(n * log_decay) * base;
    r.envelope.push_back(env);
    if (r.observed[i] > env) r.violations.push_back(n);
  }
  r.total_drift = (traj.final().values() - traj.initial().values()).norm();
  r.kappa = drift_bound(s, C1, C2);
  r.drift_slack = r.kappa - r.total_drift;
  return r;
}

/// Total drift |x^(N) - x^(0)| against kappa; carries the per-step envelope too.
inline BoundReport check_prop3(const Trajectory& traj, double C1, double C2, const NoiseSchedule& s) {
  return check_prop2(traj, C1, C2, s);
}

inline nlohmann::json to_json(const BoundReport& r) {
  return {{"observed", r.observed},
          {"envelope", r.envelope},
          {"violations", r.violations},
          {"C1", r.C1},
          {"C2", r.C2},
          {"lambda", r.lambda},
          {"total_drift", r.total_drift},
          {"kappa", r.kappa},
          {"drift_slack", r.drift_slack},
          {"prop2_violations", r.violations.size()},
          {"prop3_holds", r.drift_holds()}};
}

/// Least-squares ratio of a geometric sequence: exp of the slope of log
/// entries against their index. Zero entries are skipped.
inline double geometric_ratio_fit(const std::vector<double>& diffs) {
  std::vector<double> xs;
  std::vector<double> ys;
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    if (diffs[i] > 0.0 && std::isfinite(diffs[i])) {
      xs.push_back(static_cast<double>(i));
      ys.push_back(std::log(diffs[i]));
    }
  }
  if (xs.empty()) throw NumericalError("geometric_ratio_fit: undefined ratio for all-zero differences");
  if (xs.size() < 3) throw InvalidArgument("geometric_ratio_fit: need at least 3 nonzero differences");
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(xs.size());
  my /= static_cast<double>(xs.size());
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return std::exp(sxy / sxx);
}

/// x -> A x + b for the zero-noise k = 1 iteration with the Gaussian oracle.
/// A is a multiple of the identity because the world is isotropic.
struct AffineMap {
  double A = 0.0;
  Vector b;
};

inline AffineMap affine_theory_map(const GaussianWorldOracle& o, Condition y, const NoiseSchedule& s) {
  const double a0 = s.alphabar(0);
  const double a1 = s.alphabar(1);
  const double c = eps_coefficient(s);
  const double slope = o.slope(a1);
  AffineMap m;
  m.A = std::sqrt(a0) + c * slope * std::sqrt(a1);
  m.b = -c * slope * std::sqrt(a1) * o.world().mean(y);
  return m;
}

/// Closed-form fixed point x* = b / (1 - A) of the zero-noise k = 1 iteration.
inline State fixed_point_gaussian(const GaussianWorldOracle& o, Condition y, const NoiseSchedule& s) {
  const AffineMap m = affine_theory_map(o, y, s);
  if (!(std::abs(m.A) < 1.0)) {
    throw NumericalError("fixed_point_gaussian: spectral radius " + std::to_string(std::abs(m.A)) + " >= 1");
  }
  return State(m.b / (1.0 - m.A), o.world().shape());
}

}  // namespace pie::theory
