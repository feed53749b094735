#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "pie/state.hpp"

namespace pie {

/// Labeled isotropic Gaussian data world: class c ~ N(mean_c, var I).
struct LatentWorld {
  std::size_t dim = 0;
  double var = 1.0;
  std::vector<std::string> names;
  std::vector<Vector> means;
  std::vector<double> priors;

  std::size_t num_classes() const { return means.size(); }

  void validate() const {
    if (dim == 0) throw InvalidArgument("world: dim must be positive");
    if (!(var > 0.0) || !std::isfinite(var)) throw InvalidArgument("world: var must be positive");
    if (means.empty()) throw InvalidArgument("world: need at least one class");
    if (priors.size() != means.size() || names.size() != means.size()) {
      throw InvalidArgument("world: names, means and priors must have equal length");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < means.size(); ++c) {
      if (static_cast<std::size_t>(means[c].size()) != dim) throw InvalidArgument("world: mean dimension mismatch");
      if (!means[c].allFinite()) throw InvalidArgument("world: non-finite mean");
      if (priors[c] < 0.0) throw InvalidArgument("world: negative prior");
      total += priors[c];
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("world: priors must sum to 1");
  }

  void check_class(Condition y) const {
    if (y.label < 0 || static_cast<std::size_t>(y.label) >= means.size()) {
      throw InvalidArgument("world: unknown class " + std::to_string(y.label));
    }
  }

  const Vector& mean(Condition y) const {
    check_class(y);
    return means[static_cast<std::size_t>(y.label)];
  }

  Shape shape() const { return {1, dim}; }

  Condition class_named(const std::string& name) const {
    for (std::size_t c = 0; c < names.size(); ++c) {
      if (names[c] == name) return {static_cast<int>(c)};
    }
    throw InvalidArgument("world: unknown class name \"" + name + "\"");
  }

  /// Log density of x under class c, up to the class-independent constant.
  double log_density_unnormalized(const State& x, Condition y) const {
    return -(x.values() - mean(y)).squaredNorm() / (2.0 * var);
  }

  /// Full log N(x; mean_y, var I).
  double log_density(const State& x, Condition y) const {
    return log_density_unnormalized(x, y) - 0.5 * static_cast<double>(dim) * std::log(2.0 * M_PI * var);
  }
};

/// Two-class world with mean_healthy = 0 and mean_disease an alternating
/// +-a pattern, scaled so the class means are `separation` standard
/// deviations apart. The pattern has zero mean, which keeps centered
/// cosine similarity informative.
inline LatentWorld two_class_world(std::size_t dim, double var, double separation, double disease_prior = 0.5) {
  LatentWorld w;
  w.dim = dim;
  w.var = var;
  w.names = {"healthy", "disease"};
  Vector disease(static_cast<Eigen::Index>(dim));
  const double a = separation * std::sqrt(var) / std::sqrt(static_cast<double>(dim));
  for (std::size_t i = 0; i < dim; ++i) disease[static_cast<Eigen::Index>(i)] = (i % 2 == 0) ? a : -a;
  w.means = {Vector::Zero(static_cast<Eigen::Index>(dim)), disease};
  w.priors = {1.0 - disease_prior, disease_prior};
  w.validate();
  return w;
}

/// Worlds used by the experiment presets.
inline LatentWorld reference_world() { return two_class_world(16, 4.0, 4.0); }
inline LatentWorld progression_world() { return two_class_world(16, 2.0, 6.0); }

inline nlohmann::json to_json(const LatentWorld& w) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < w.num_classes(); ++c) {
    std::vector<double> m(w.means[c].data(), w.means[c].data() + w.means[c].size());
    classes.push_back({{"name", w.names[c]}, {"mean", m}, {"prior", w.priors[c]}});
  }
  return {{"dim", w.dim}, {"var", w.var}, {"classes", classes}};
}

/// Parses {"dim", "var", "classes": [{"name", "mean": [...], "prior"}]}.
inline LatentWorld world_from_json(const nlohmann::json& j) {
  LatentWorld w;
  try {
    w.dim = j.at("dim").get<std::size_t>();
    w.var = j.at("var").get<double>();
    for (const auto& c : j.at("classes")) {
      w.names.push_back(c.at("name").get<std::string>());
      const auto m = c.at("mean").get<std::vector<double>>();
      w.means.push_back(Eigen::Map<const Vector>(m.data(), static_cast<Eigen::Index>(m.size())));
      w.priors.push_back(c.at("prior").get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("world json: ") + e.what());
  }
  w.validate();
  return w;
}

}  // namespace pie
