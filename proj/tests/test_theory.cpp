#include <gtest/gtest.h>

#include <cmath>

#include "pie/theory.hpp"

using namespace pie;
using namespace pie::theory;

namespace {

Trajectory zero_noise_run(const GaussianWorldOracle& o, const NoiseSchedule& s, int N, const State& x0) {
  return theory_iterate(x0, {1}, o, s, N, NoiseMode::Zero);
}

}  // namespace

TEST(TheoryIterate, ZeroDenoiserIsPureDecay) {
  const auto s = stable_diffusion_schedule();
  const auto d = constant_denoiser(0.0);
  const State x0 = State::latent({1.0, -2.0});
  const auto t = theory_iterate(x0, {0}, d, s, 5, NoiseMode::Zero);
  for (int n = 0; n <= 5; ++n) {
    const double f = std::pow(std::sqrt(s.alphabar(0)), n);
    EXPECT_NEAR(t.states[static_cast<std::size_t>(n)][0], f, 1e-14);
    EXPECT_NEAR(t.states[static_cast<std::size_t>(n)][1], -2.0 * f, 1e-14);
  }
}

TEST(TheoryIterate, HandExample) {
  const auto s = stable_diffusion_schedule();
  const auto d = constant_denoiser(1.0);
  const auto t = theory_iterate(State::latent({1.0}), {0}, d, s, 1, NoiseMode::Zero);
  const double a0 = 0.9999;
  const double a1 = 0.9995;
  const double expect = std::sqrt(a0) - std::sqrt(a0 * (1.0 - a1) / a1) + std::sqrt(1.0 - a0);
  EXPECT_NEAR(t.final()[0], expect, 1e-12);
  EXPECT_NEAR(t.final()[0], 0.98758484504936962, 1e-12);
}

TEST(TheoryIterate, MatchesAffineRecursion) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(progression_world(), s);
  const AffineMap m = affine_theory_map(o, {1}, s);
  const State x0(Vector::Constant(16, 0.7), {1, 16});
  const auto t = zero_noise_run(o, s, 50, x0);
  Vector x = x0.values();
  for (int n = 1; n <= 50; ++n) {
    x = m.A * x + m.b;
    EXPECT_LT((t.states[static_cast<std::size_t>(n)].values() - x).norm(), 1e-10);
  }
}

TEST(TheoryIterate, RejectsNegativeN) {
  const auto s = stable_diffusion_schedule();
  EXPECT_THROW(theory_iterate(State::latent({1.0}), {0}, constant_denoiser(0), s, -1, NoiseMode::Zero),
               InvalidArgument);
}

TEST(StepDifferences, Values) {
  Trajectory t;
  t.states = {State::latent({0.0, 0.0}), State::latent({3.0, 4.0}), State::latent({3.0, 4.0})};
  const auto d = step_differences(t);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_DOUBLE_EQ(d[0], 5.0);
  EXPECT_DOUBLE_EQ(d[1], 0.0);
}

TEST(MeasureConstants, UsesInitialNormAndMargin) {
  Trajectory t;
  t.states = {State::latent({3.0, 4.0})};
  t.eps_norms = {1.0, 2.0, 1.5};
  const auto c = measure_constants(t);
  EXPECT_DOUBLE_EQ(c.C1, 5.0);
  EXPECT_DOUBLE_EQ(c.C2, 2.1);
}

TEST(Prop2, ZeroNoiseRunHasNoViolations) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(progression_world(), s);
  const State x0(o.world().mean({0}), o.world().shape());
  const auto t = zero_noise_run(o, s, 200, x0);
  const auto c = measure_constants(t);
  const auto r = check_prop2(t, c.C1, c.C2, s);
  EXPECT_EQ(r.observed.size(), 200u);
  EXPECT_TRUE(r.envelope_holds());
  EXPECT_TRUE(r.drift_holds());
  for (std::size_t i = 1; i < r.envelope.size(); ++i) EXPECT_LT(r.envelope[i], r.envelope[i - 1]);
}

TEST(Prop2, InflatedConstantsStillHold) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(progression_world(), s);
  const State x0(Vector::Constant(16, 1.0), o.world().shape());
  const auto t = zero_noise_run(o, s, 100, x0);
  const auto c = measure_constants(t);
  EXPECT_TRUE(check_prop2(t, 10.0 * c.C1, 10.0 * c.C2, s).envelope_holds());
}

TEST(Prop2, InjectedJumpIsFlaggedOnce) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(progression_world(), s);
  const State x0(o.world().mean({0}), o.world().shape());
  auto t = zero_noise_run(o, s, 20, x0);
  const auto c = measure_constants(t);
  // Shift every state from n = 5 on, so only the step into n = 5 grows.
  for (std::size_t n = 5; n < t.states.size(); ++n) {
    t.states[n] = t.states[n].with_values(t.states[n].values() + Vector::Constant(16, 100.0));
  }
  const auto r = check_prop2(t, c.C1, c.C2, s);
  ASSERT_EQ(r.violations.size(), 1u);
  EXPECT_EQ(r.violations[0], 5);
}

TEST(Prop3, DriftWithinKappa) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(progression_world(), s);
  const State x0(o.world().mean({0}), o.world().shape());
  const auto t = zero_noise_run(o, s, 200, x0);
  const auto c = measure_constants(t);
  const auto r = check_prop3(t, c.C1, c.C2, s);
  EXPECT_LE(r.total_drift, r.kappa);
  EXPECT_NEAR(r.kappa, drift_bound(s, c.C1, c.C2), 1e-12);
  EXPECT_NEAR(r.drift_slack, r.kappa - r.total_drift, 1e-12);
  const auto j = to_json(r);
  EXPECT_EQ(j["prop2_violations"], 0);
  EXPECT_EQ(j["prop3_holds"], true);
}

TEST(Prop3, ShrunkConstantsCanFail) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(progression_world(), s);
  const State x0(o.world().mean({0}), o.world().shape());
  const auto t = zero_noise_run(o, s, 200, x0);
  EXPECT_FALSE(check_prop3(t, 0.0, 1e-6, s).drift_holds());
}

TEST(GeometricRatioFit, ExactSequences) {
  std::vector<double> halves;
  for (int i = 0; i < 20; ++i) halves.push_back(std::pow(0.5, i) * 3.0);
  EXPECT_NEAR(geometric_ratio_fit(halves), 0.5, 1e-12);
  halves[3] = 0.0;
  EXPECT_NEAR(geometric_ratio_fit(halves), 0.5, 1e-12);
}

TEST(GeometricRatioFit, PureDecayGivesSqrtAbar0) {
  const auto s = stable_diffusion_schedule();
  const auto t = theory_iterate(State::latent({1.0, 1.0}), {0}, constant_denoiser(0.0), s, 40, NoiseMode::Zero);
  EXPECT_NEAR(geometric_ratio_fit(step_differences(t)), std::sqrt(s.alphabar(0)), 1e-12);
}

TEST(GeometricRatioFit, MatchesAffineContraction) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(progression_world(), s);
  const State x0(o.world().mean({0}), o.world().shape());
  const auto t = zero_noise_run(o, s, 200, x0);
  EXPECT_NEAR(geometric_ratio_fit(step_differences(t)), std::abs(affine_theory_map(o, {1}, s).A), 1e-6);
}

TEST(GeometricRatioFit, Errors) {
  EXPECT_THROW(geometric_ratio_fit({0.0, 0.0, 0.0}), NumericalError);
  EXPECT_THROW(geometric_ratio_fit({1.0, 0.5}), InvalidArgument);
}

TEST(FixedPoint, ZeroTargetMeanFixesOrigin) {
  const auto s = stable_diffusion_schedule();
  const LatentWorld w = two_class_world(4, 1.0, 3.0);
  const GaussianWorldOracle o(w, s);
  EXPECT_EQ(fixed_point_gaussian(o, {0}, s).norm(), 0.0);
}

TEST(FixedPoint, IsInvariantUnderTheMap) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(progression_world(), s);
  const State star = fixed_point_gaussian(o, {1}, s);
  const auto t = zero_noise_run(o, s, 1, star);
  EXPECT_LT((t.final().values() - star.values()).norm(), 1e-12);
}

TEST(FixedPoint, LongRunConverges) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(reference_world(), s);
  const State star = fixed_point_gaussian(o, {1}, s);
  const AffineMap m = affine_theory_map(o, {1}, s);
  ASSERT_LT(std::abs(m.A), 1.0);
  const State x0(o.world().mean({0}), o.world().shape());
  const double gap = (x0.values() - star.values()).norm();
  const int N = static_cast<int>(std::ceil(std::log(1e-10 / gap) / std::log(std::abs(m.A))));
  const auto t = zero_noise_run(o, s, N, x0);
  EXPECT_LT((t.final().values() - star.values()).norm(), 1e-8);
}

TEST(FixedPoint, LogDensityIsMonotone) {
  const auto s = stable_diffusion_schedule();
  const GaussianWorldOracle o(progression_world(), s);
  const State x0(o.world().mean({0}), o.world().shape());
  const auto t = zero_noise_run(o, s, 200, x0);
  for (std::size_t n = 1; n < t.states.size(); ++n) {
    EXPECT_GE(o.world().log_density(t.states[n], {1}), o.world().log_density(t.states[n - 1], {1}));
  }
}
