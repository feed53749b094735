#pragma once

#include <cmath>
#include <limits>
#include <optional>

#include "pie/denoiser.hpp"
#include "pie/schedule.hpp"
#include "pie/world.hpp"

namespace pie {

/// Bayes-optimal epsilon predictor for a LatentWorld under a schedule.
///
/// For class y the time-t marginal is N(sqrt(abar) mu_y, (abar var + 1 - abar) I),
/// so the optimal conditional prediction is affine in x:
///   eps*(x) = sqrt(1 - abar) (x - sqrt(abar) mu_y) / (abar var + 1 - abar).
class GaussianWorldOracle final : public Denoiser {
 public:
  GaussianWorldOracle(LatentWorld world, NoiseSchedule schedule)
      : world_(std::move(world)), schedule_(std::move(schedule)) {
    world_.validate();
  }

  const LatentWorld& world() const { return world_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  /// Slope of the affine map x -> eps*(x) at signal level abar.
  double slope(double abar) const { return std::sqrt(1.0 - abar) / (abar * world_.var + 1.0 - abar); }

  State epsilon_gaussian_at(const State& x, double abar, Condition y) const {
    check_dim(x);
    const Vector& mu = world_.mean(y);
    return x.with_values(slope(abar) * (x.values() - std::sqrt(abar) * mu));
  }

  State epsilon_gaussian(const State& x, int t, Condition y) const {
    return epsilon_gaussian_at(x, schedule_.alphabar(t), y);
  }

  /// Class responsibilities under the time-t marginals.
  Vector posterior_responsibilities_at(const State& x, double abar) const {
    check_dim(x);
    const double marginal_var = abar * world_.var + 1.0 - abar;
    const std::size_t K = world_.num_classes();
    Vector logits(static_cast<Eigen::Index>(K));
    for (std::size_t c = 0; c < K; ++c) {
      const double prior = world_.priors[c];
      const double log_prior = prior > 0.0 ? std::log(prior) : -std::numeric_limits<double>::infinity();
      logits[static_cast<Eigen::Index>(c)] =
          log_prior - (x.values() - std::sqrt(abar) * world_.means[c]).squaredNorm() / (2.0 * marginal_var);
    }
    return softmax(logits);
  }

  Vector posterior_responsibilities(const State& x, int t) const {
    return posterior_responsibilities_at(x, schedule_.alphabar(t));
  }

  /// Mixture-optimal prediction when y is absent; the conditional one otherwise.
  State epsilon_gmm_at(const State& x, double abar, std::optional<Condition> y) const {
    if (y) return epsilon_gaussian_at(x, abar, *y);
    const Vector r = posterior_responsibilities_at(x, abar);
    Vector out = Vector::Zero(x.values().size());
    for (Eigen::Index c = 0; c < r.size(); ++c) {
      if (r[c] == 0.0) continue;
      out += r[c] * epsilon_gaussian_at(x, abar, {static_cast<int>(c)}).values();
    }
    return x.with_values(std::move(out));
  }

  State epsilon_gmm(const State& x, int t, std::optional<Condition> y) const {
    return epsilon_gmm_at(x, schedule_.alphabar(t), y);
  }

  State epsilon(const State& x, int t, Condition y) const override { return epsilon_gaussian(x, t, y); }

  static Vector softmax(const Vector& logits) {
    const double top = logits.maxCoeff();
    Vector p = (logits.array() - top).exp().matrix();
    return p / p.sum();
  }

 private:
  void check_dim(const State& x) const {
    if (x.size() != world_.dim) throw InvalidArgument("oracle: state dimension does not match world");
  }

  LatentWorld world_;
  NoiseSchedule schedule_;
};

/// x0 estimate implied by an epsilon prediction.
inline State predict_x0(const State& x_t, double abar, const State& eps_hat) {
  require_same_shape(x_t, eps_hat, "predict_x0");
  return x_t.with_values((x_t.values() - std::sqrt(1.0 - abar) * eps_hat.values()) / std::sqrt(abar));
}

inline State predict_x0(const State& x_t, int t, const State& eps_hat, const NoiseSchedule& s) {
  return predict_x0(x_t, s.alphabar(t), eps_hat);
}

}  // namespace pie
