#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "pie/ddim.hpp"
#include "pie/measures.hpp"
#include "pie/pie.hpp"
#include "pie/synthdata.hpp"
#include "pie/world.hpp"

namespace pie {

// ---------------------------------------------------------------------------
// Confidence

/// Posterior probability of `target` under the data-time class densities.
inline double bayes_confidence(const LatentWorld& w, const State& x, Condition target) {
  w.check_class(target);
  if (x.size() != w.dim) throw InvalidArgument("bayes_confidence: state dimension does not match world");
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> logits(w.num_classes());
  for (std::size_t c = 0; c < w.num_classes(); ++c) {
    const double prior = w.priors[c];
    logits[c] = (prior > 0.0 ? std::log(prior) : -std::numeric_limits<double>::infinity()) +
                w.log_density_unnormalized(x, {static_cast<int>(c)});
    best = std::max(best, logits[c]);
  }
  double total = 0.0;
  for (double l : logits) total += std::exp(l - best);
  return std::exp(logits[static_cast<std::size_t>(target.label)] - best) / total;
}

/// Logistic-regression probe over flattened states.
struct LinearClassifier {
  Vector weights;
  double bias = 0.0;

  double logit(const State& x) const {
    if (x.size() != static_cast<std::size_t>(weights.size())) throw InvalidArgument("classifier: dimension mismatch");
    return weights.dot(x.values()) + bias;
  }

  /// Probability of the positive (disease) class.
  double confidence(const State& x) const {
    const double z = logit(x);
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
};

struct ClassifierOptions {
  int iterations = 400;
  double learning_rate = 0.5;
  double l2 = 1e-4;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 7;
};

struct ClassifierFit {
  LinearClassifier classifier;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
};

inline double accuracy(const LinearClassifier& c, const std::vector<State>& xs, const std::vector<int>& ys) {
  if (xs.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) correct += ((c.confidence(xs[i]) >= 0.5 ? 1 : 0) == ys[i]);
  return static_cast<double>(correct) / static_cast<double>(xs.size());
}

/// Full-batch gradient descent on the mean logistic loss. Labels are 0/1.
inline ClassifierFit train_classifier(const std::vector<State>& xs, const std::vector<int>& ys,
                                      const ClassifierOptions& opts = {}) {
  if (xs.size() != ys.size() || xs.empty()) throw InvalidArgument("train_classifier: need matching, non-empty data");
  const bool has_pos = std::find(ys.begin(), ys.end(), 1) != ys.end();
  const bool has_neg = std::find(ys.begin(), ys.end(), 0) != ys.end();
  if (!has_pos || !has_neg) throw InvalidArgument("train_classifier: dataset must contain both classes");

  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(opts.seed, 0xc1a55);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_hold = static_cast<std::size_t>(std::floor(opts.holdout_fraction * static_cast<double>(xs.size())));
  if (n_hold >= xs.size()) n_hold = 0;

  std::vector<State> train_x, hold_x;
  std::vector<int> train_y, hold_y;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst_x = i < n_hold ? hold_x : train_x;
    auto& dst_y = i < n_hold ? hold_y : train_y;
    dst_x.push_back(xs[order[i]]);
    dst_y.push_back(ys[order[i]]);
  }

  const auto n = static_cast<Eigen::Index>(train_x.size());
  const Eigen::Index dim = train_x.front().values().size();
  Eigen::MatrixXd X(dim, n);
  Vector target(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X.col(i) = train_x[static_cast<std::size_t>(i)].values();
    target[i] = train_y[static_cast<std::size_t>(i)];
  }
  // Center features for conditioning; folded back into the bias at the end.
  const Vector mean = X.rowwise().mean();
  X.colwise() -= mean;

  Vector w = Vector::Zero(dim);
  double b = 0.0;
  Vector vw = Vector::Zero(dim);
  double vb = 0.0;
  constexpr double momentum = 0.9;
  for (int it = 0; it < opts.iterations; ++it) {
    const Vector z = (X.transpose() * w).array() + b;
    const Vector p = (1.0 / (1.0 + (-z.array()).exp())).matrix();
    const Vector r = (p - target) / static_cast<double>(n);
    const Vector gw = X * r + opts.l2 * w;
    const double gb = r.sum();
    vw = momentum * vw - opts.learning_rate * gw;
    vb = momentum * vb - opts.learning_rate * gb;
    w += vw;
    b += vb;
  }

  ClassifierFit fit;
  fit.classifier.weights = w;
  fit.classifier.bias = b - w.dot(mean);
  fit.train_accuracy = accuracy(fit.classifier, train_x, train_y);
  fit.heldout_accuracy = hold_x.empty() ? fit.train_accuracy : accuracy(fit.classifier, hold_x, hold_y);
  return fit;
}

inline ClassifierFit train_classifier(const Dataset& data, const ClassifierOptions& opts = {}) {
  std::vector<State> xs;
  std::vector<int> ys;
  for (const auto& item : data) {
    xs.push_back(item.image);
    ys.push_back(item.label);
  }
  return train_classifier(xs, ys, opts);
}

// ---------------------------------------------------------------------------
// Distribution distance

/// Unbiased squared MMD with the cubic polynomial kernel (x.y / d + 1)^3.
inline double mmd_poly(const std::vector<State>& A, const std::vector<State>& B) {
  if (A.size() < 2 || B.size() < 2) throw InvalidArgument("mmd_poly: each set needs at least 2 states");
  const double d = static_cast<double>(A.front().size());
  auto kernel = [d](const State& x, const State& y) {
    const double v = x.values().dot(y.values()) / d + 1.0;
    return v * v * v;
  };
  const double m = static_cast<double>(A.size());
  const double n = static_cast<double>(B.size());
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) {
    for (std::size_t j = i + 1; j < A.size(); ++j) kxx += 2.0 * kernel(A[i], A[j]);
  }
  for (std::size_t i = 0; i < B.size(); ++i) {
    for (std::size_t j = i + 1; j < B.size(); ++j) kyy += 2.0 * kernel(B[i], B[j]);
  }
  for (const auto& a : A) {
    for (const auto& b : B) kxy += kernel(a, b);
  }
  return kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n);
}

// ---------------------------------------------------------------------------
// Baselines

struct DirectionPair {
  State from;
  State to;
};

/// Random (source, target) sample pairs whose differences define the
/// extrapolation direction.
inline std::vector<DirectionPair> sample_direction_pairs(const LatentWorld& w, Condition source, Condition target,
                                                         std::size_t m, Rng& rng) {
  std::vector<DirectionPair> pairs;
  for (std::size_t i = 0; i < m; ++i) {
    State a = sample_latent(w, source, rng);
    State b = sample_latent(w, target, rng);
    pairs.push_back({std::move(a), std::move(b)});
  }
  return pairs;
}

/// Optional ROI blend applied after an extrapolation update.
struct BlendSpec {
  State base;
  RoiMask mask;
  double beta1 = 1.0;
  double beta2 = 1.0;
};

/// x + (1/m) sum_i w_i (to_i - from_i); the latent map is the identity.
inline State extrapolation_step(const State& x, const std::vector<DirectionPair>& pairs,
                                const std::vector<double>& weights, const std::optional<BlendSpec>& blend_with = {}) {
  if (pairs.empty()) throw InvalidArgument("extrapolation_step: need at least one direction pair");
  if (weights.size() != pairs.size()) throw InvalidArgument("extrapolation_step: one weight per pair");
  Vector delta = Vector::Zero(x.values().size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!(weights[i] > 0.0)) throw InvalidArgument("extrapolation_step: weights must be positive");
    require_same_shape(pairs[i].from, x, "extrapolation_step");
    require_same_shape(pairs[i].to, x, "extrapolation_step");
    delta += weights[i] * (pairs[i].to.values() - pairs[i].from.values());
  }
  delta /= static_cast<double>(pairs.size());
  State moved = x.with_values(x.values() + delta);
  if (!blend_with) return moved;
  return blend(moved, blend_with->base, blend_with->mask, blend_with->beta1, blend_with->beta2);
}

/// N extrapolation steps from x0, each blended against x0 like a PIE step.
inline Trajectory run_extrapolation(const State& x0, const std::vector<DirectionPair>& pairs,
                                    const std::vector<double>& weights, const RoiMask& m, const PieConfig& c,
                                    const MetricHooks& hooks = {}) {
  Trajectory traj;
  traj.config = c;
  traj.states.push_back(x0);
  traj.records.push_back(describe(0, x0, x0, nullptr, hooks));
  const BlendSpec spec{x0, m, c.beta1, c.beta2};
  for (int n = 1; n <= c.N; ++n) {
    State next = extrapolation_step(traj.states.back(), pairs, weights, spec);
    traj.records.push_back(describe(n, next, x0, &traj.states.back(), hooks));
    traj.states.push_back(std::move(next));
  }
  return traj;
}

inline Vector slerp(const Vector& a, const Vector& b, double s) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return (1.0 - s) * a + s * b;
  const double cos_omega = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  const double omega = std::acos(cos_omega);
  if (std::sin(omega) < 1e-12) return (1.0 - s) * a + s * b;
  return (std::sin((1.0 - s) * omega) * a + std::sin(s * omega) * b) / std::sin(omega);
}

struct InterpolationConfig {
  int steps = 10;
  /// Slerp fraction reached at the last waypoint.
  double mix = 1.0;
  ddim::InversionOptions inversion{};
};

/// Inverts x_start to x_T once, then walks on the great circle toward a
/// fresh noise draw, denoising each waypoint under y.
inline Trajectory interpolation_walk(const State& x_start, Condition y, const Denoiser& d, const NoiseSchedule& s,
                                     const InterpolationConfig& cfg, std::uint64_t seed,
                                     const MetricHooks& hooks = {}) {
  if (cfg.steps < 1) throw InvalidArgument("interpolation_walk: steps must be >= 1");
  if (!(cfg.mix >= 0.0 && cfg.mix <= 1.0)) throw InvalidArgument("interpolation_walk: mix must lie in [0,1]");
  const State z0 = ddim::invert(x_start, s.T(), d, y, s, cfg.inversion);
  Rng rng = make_rng(seed, 0x511e);
  const Vector z1 = standard_normal(z0.values().size(), rng);

  Trajectory traj;
  traj.seed = seed;
  traj.config.N = cfg.steps;
  traj.states.push_back(x_start);
  traj.records.push_back(describe(0, x_start, x_start, nullptr, hooks));
  for (int j = 1; j <= cfg.steps; ++j) {
    const double frac = cfg.mix * static_cast<double>(j) / cfg.steps;
    State waypoint = ddim::denoise_from(z0.with_values(slerp(z0.values(), z1, frac)), s.T(), d, y, s);
    traj.records.push_back(describe(j, waypoint, x_start, &traj.states.back(), hooks));
    traj.states.push_back(std::move(waypoint));
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Trend statistics

inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation (Pearson on average ranks).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw InvalidArgument("spearman: need two equal-length series of >= 2");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2).
inline double sign_test_p(int wins, int n) {
  double p = 0.0;
  for (int k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

}  // namespace pie
