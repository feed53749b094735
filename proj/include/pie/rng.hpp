#pragma once

#include <cstdint>
#include <random>

#include "pie/state.hpp"

namespace pie {

using Rng = std::mt19937_64;

/// Independent stream for (seed, run id).
inline Rng make_rng(std::uint64_t seed, std::uint64_t run_id = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(run_id), static_cast<std::uint32_t>(run_id >> 32), 0x9e3779b9u};
  return Rng(seq);
}

inline Vector standard_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

inline State standard_normal(Shape shape, Rng& rng) {
  return State(standard_normal(static_cast<Eigen::Index>(shape.size()), rng), shape);
}

}  // namespace pie
