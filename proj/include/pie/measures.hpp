#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "pie/state.hpp"

namespace pie {

/// Cosine similarity of the mean-centered, flattened states.
inline std::optional<double> try_similarity(const State& a, const State& b) {
  if (a.size() != b.size()) throw InvalidArgument("similarity: size mismatch");
  const Vector ca = a.values().array() - a.values().mean();
  const Vector cb = b.values().array() - b.values().mean();
  const double na = ca.norm();
  const double nb = cb.norm();
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(ca.dot(cb) / (na * nb), -1.0, 1.0);
}

inline double similarity(const State& a, const State& b) {
  auto s = try_similarity(a, b);
  if (!s) throw NumericalError("similarity: undefined for a constant (zero after centering) state");
  return *s;
}

}  // namespace pie
