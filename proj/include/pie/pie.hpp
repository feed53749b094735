#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "pie/ddim.hpp"
#include "pie/measures.hpp"

namespace pie {

enum class NoiseMode { Fresh, FixedSeed, Zero };

inline std::string to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::Fresh: return "fresh";
    case NoiseMode::FixedSeed: return "fixed-seed";
    case NoiseMode::Zero: return "zero";
  }
  return "fresh";
}

inline NoiseMode noise_mode_from_string(const std::string& s) {
  if (s == "fresh") return NoiseMode::Fresh;
  if (s == "fixed-seed") return NoiseMode::FixedSeed;
  if (s == "zero") return NoiseMode::Zero;
  throw InvalidArgument("unknown noise mode \"" + s + "\" (expected fresh, fixed-seed or zero)");
}

struct PieConfig {
  double gamma = 0.5;
  int N = 10;
  double beta1 = 0.1;  // outside the ROI
  double beta2 = 0.75;  // inside the ROI
  NoiseMode noise_mode = NoiseMode::Fresh;

  void validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(gamma)) throw InvalidArgument("pie config: gamma must lie in [0,1]");
    if (!unit(beta1) || !unit(beta2)) throw InvalidArgument("pie config: beta1, beta2 must lie in [0,1]");
    if (N < 0) throw InvalidArgument("pie config: N must be >= 0");
  }

  /// Noise level k = round(gamma T), halves rounded up, clamped to [0, T].
  int noise_step(int T) const {
    const auto k = static_cast<int>(std::floor(gamma * T + 0.5));
    return std::clamp(k, 0, T);
  }
};

struct StepRecord {
  int step = 0;
  double conf = std::numeric_limits<double>::quiet_NaN();
  double similarity = std::numeric_limits<double>::quiet_NaN();
  double step_diff_norm = 0.0;
};

/// x0^(0) .. x0^(N) with per-step records. records[0] describes the input.
struct Trajectory {
  std::vector<State> states;
  std::vector<StepRecord> records;
  /// Largest denoiser output norm seen while producing step n (index n-1).
  std::vector<double> eps_norms;
  PieConfig config;
  std::uint64_t seed = 0;

  int N() const { return static_cast<int>(states.size()) - 1; }
  const State& initial() const { return states.front(); }
  const State& final() const { return states.back(); }
};

/// Optional per-state probes recorded into a trajectory.
struct MetricHooks {
  std::function<double(const State&)> confidence;
};

/// Forwards to another denoiser and remembers the largest output norm.
class RecordingDenoiser final : public Denoiser {
 public:
  explicit RecordingDenoiser(const Denoiser& inner) : inner_(inner) {}

  State epsilon(const State& x, int t, Condition y) const override {
    State e = inner_.epsilon(x, t, y);
    max_norm_ = std::max(max_norm_, e.norm());
    return e;
  }

  double take_max_norm() const {
    const double m = max_norm_;
    max_norm_ = 0.0;
    return m;
  }

 private:
  const Denoiser& inner_;
  mutable double max_norm_ = 0.0;
};

/// ROI blend anchored at x_base:
/// (b1 (e - x) + x)(1 - m) + (b2 (e - x) + x) m.
inline State blend(const State& x_edit, const State& x_base, const RoiMask& m, double beta1, double beta2) {
  require_same_shape(x_edit, x_base, "blend");
  if (!(m.shape() == x_base.shape())) throw InvalidArgument("blend: mask shape mismatch");
  // Per-cell edit fraction; written so beta = 0 and beta = 1 reproduce the
  // base and the edit bit for bit.
  const Eigen::ArrayXd frac = beta1 + (beta2 - beta1) * m.weights().array();
  Vector out = ((1.0 - frac) * x_base.values().array() + frac * x_edit.values().array()).matrix();
  return x_base.with_values(std::move(out));
}

/// One editing step with the noise draw supplied by the caller.
inline State pie_step_with_noise(const State& x_prev, const State& x_base, Condition y, const RoiMask& m,
                                 const PieConfig& c, const Denoiser& d, const NoiseSchedule& s, const State& eps) {
  c.validate();
  require_same_shape(x_prev, x_base, "pie_step");
  const int k = c.noise_step(s.T());
  if (k == 0) return blend(x_prev, x_base, m, c.beta1, c.beta2);
  State x = ddim::forward_noise(x_prev, k, eps, s);
  x = ddim::denoise_from(x, k, d, y, s);
  return blend(x, x_base, m, c.beta1, c.beta2);
}

inline State draw_noise(NoiseMode mode, Shape shape, Rng& rng) {
  if (mode == NoiseMode::Zero) return State::zeros(shape);
  return standard_normal(shape, rng);
}

/// Noise the previous state to k = round(gamma T), denoise under y, blend
/// against the original x_base.
inline State pie_step(const State& x_prev, const State& x_base, Condition y, const RoiMask& m, const PieConfig& c,
                      const Denoiser& d, const NoiseSchedule& s, Rng& rng) {
  c.validate();
  return pie_step_with_noise(x_prev, x_base, y, m, c, d, s, draw_noise(c.noise_mode, x_prev.shape(), rng));
}

inline StepRecord describe(int step, const State& x, const State& x0, const State* prev, const MetricHooks& hooks) {
  StepRecord r;
  r.step = step;
  if (hooks.confidence) r.conf = hooks.confidence(x);
  if (auto sim = try_similarity(x, x0)) r.similarity = *sim;
  if (prev) r.step_diff_norm = (x.values() - prev->values()).norm();
  return r;
}

/// Applies pie_step N times, always blending against x0.
inline Trajectory run_progression(const State& x0, Condition y, const RoiMask& m, const PieConfig& c,
                                  const Denoiser& d, const NoiseSchedule& s, std::uint64_t seed,
                                  const MetricHooks& hooks = {}, std::uint64_t run_id = 0) {
  c.validate();
  Trajectory traj;
  traj.config = c;
  traj.seed = seed;
  traj.states.reserve(static_cast<std::size_t>(c.N) + 1);
  traj.states.push_back(x0);
  traj.records.push_back(describe(0, x0, x0, nullptr, hooks));

  Rng rng = make_rng(seed, run_id);
  RecordingDenoiser recorder(d);
  State fixed_noise;
  if (c.noise_mode == NoiseMode::FixedSeed) fixed_noise = standard_normal(x0.shape(), rng);

  for (int n = 1; n <= c.N; ++n) {
    const State eps = c.noise_mode == NoiseMode::FixedSeed ? fixed_noise : draw_noise(c.noise_mode, x0.shape(), rng);
    State next = pie_step_with_noise(traj.states.back(), x0, y, m, c, recorder, s, eps);
    traj.eps_norms.push_back(recorder.take_max_norm());
    traj.records.push_back(describe(n, next, x0, &traj.states.back(), hooks));
    traj.states.push_back(std::move(next));
  }
  return traj;
}

/// |x0^(n) - x0^(0)| per cell.
inline State diff_heatmap(const Trajectory& traj, int n) {
  if (n < 0 || n > traj.N()) throw InvalidArgument("diff_heatmap: step " + std::to_string(n) + " out of range");
  const State& x = traj.states[static_cast<std::size_t>(n)];
  return x.with_values((x.values() - traj.initial().values()).cwiseAbs());
}

/// Share of heatmap mass on cells with positive mask weight.
inline double roi_mass_fraction(const State& heatmap, const RoiMask& m) {
  double inside = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < heatmap.size(); ++i) {
    total += heatmap[i];
    if (m[i] > 0.0) inside += heatmap[i];
  }
  if (total == 0.0) return 1.0;
  return inside / total;
}

}  // namespace pie
