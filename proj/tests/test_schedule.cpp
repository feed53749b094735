#include <gtest/gtest.h>

#include <cmath>

#include "pie/schedule.hpp"

using namespace pie;

namespace {

NoiseSchedule sd_pair() { return NoiseSchedule::from_alphabars({0.9999, 0.9995, 0.5}); }

}  // namespace

TEST(LinearSchedule, EndpointsAndLogMidpoint) {
  const auto s = linear_schedule(2, 0.9, 0.1);
  ASSERT_EQ(s.T(), 2);
  EXPECT_DOUBLE_EQ(s.alphabar(0), 0.9);
  EXPECT_NEAR(s.alphabar(1), 0.3, 1e-15);
  EXPECT_DOUBLE_EQ(s.alphabar(2), 0.1);
}

TEST(LinearSchedule, FiftyStepDefault) {
  const auto s = linear_schedule(50, 0.9999, 0.0047);
  EXPECT_EQ(s.T(), 50);
  EXPECT_DOUBLE_EQ(s.alphabar(0), 0.9999);
  EXPECT_DOUBLE_EQ(s.alphabar(50), 0.0047);
  for (int t = 1; t <= 50; ++t) EXPECT_LT(s.alphabar(t), s.alphabar(t - 1));
  const double ratio = s.alphabar(1) / s.alphabar(0);
  for (int t = 1; t <= 50; ++t) EXPECT_NEAR(s.alphabar(t) / s.alphabar(t - 1), ratio, 1e-12);
}

TEST(LinearSchedule, RejectsBadEndpoints) {
  EXPECT_THROW(linear_schedule(2, 0.1, 0.9), InvalidArgument);
  EXPECT_THROW(linear_schedule(1, 0.9, 0.1), InvalidArgument);
  EXPECT_THROW(linear_schedule(5, 1.0, 0.1), InvalidArgument);
  EXPECT_THROW(linear_schedule(5, 0.9, 0.0), InvalidArgument);
}

TEST(FromAlphabars, WrapsVerbatim) {
  const auto s = sd_pair();
  EXPECT_EQ(s.T(), 2);
  EXPECT_EQ(s.alphabar(1), 0.9995);
  EXPECT_EQ(s.eta(), 0.0);
}

TEST(FromAlphabars, Errors) {
  EXPECT_THROW(NoiseSchedule::from_alphabars({1.0, 0.5}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule::from_alphabars({0.9, 0.9, 0.5}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule::from_alphabars({0.9, 0.5, 0.0}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule::from_alphabars({1.5, 0.5, 0.1}), InvalidArgument);
}

TEST(StableDiffusionSchedule, PinsPaperValues) {
  const auto s = stable_diffusion_schedule();
  EXPECT_EQ(s.T(), 50);
  EXPECT_EQ(s.alphabar(0), 0.9999);
  EXPECT_EQ(s.alphabar(1), 0.9995);
  EXPECT_NEAR(s.alphabar(50), 0.0047, 1e-4);
  for (int t = 1; t <= 50; ++t) EXPECT_LT(s.alphabar(t), s.alphabar(t - 1));
}

TEST(Lambda, PaperPair) {
  const double l = lambda_coefficient(sd_pair());
  EXPECT_NEAR(l, 1.2366e-2, 1e-5);
  EXPECT_NEAR(l, 0.0123651537005678772, 1e-15);
}

TEST(Lambda, EqualValuesGiveZero) {
  const auto s = NoiseSchedule::unchecked({0.9, 0.9, 0.5});
  EXPECT_NEAR(lambda_coefficient(s), 0.0, 1e-16);
}

TEST(Lambda, HandArithmetic) {
  const auto s = NoiseSchedule::from_alphabars({0.9, 0.5, 0.1});
  EXPECT_NEAR(lambda_coefficient(s), (std::sqrt(0.45) - std::sqrt(0.05)) / std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(lambda_coefficient(s), 0.6325, 1e-4);
}

TEST(Lambda, IgnoresTail) {
  const auto a = NoiseSchedule::from_alphabars({0.9999, 0.9995, 0.5, 0.1});
  const auto b = NoiseSchedule::from_alphabars({0.9999, 0.9995, 0.01});
  EXPECT_EQ(lambda_coefficient(a), lambda_coefficient(b));
}

TEST(ConvergenceSteps, PaperPair) {
  const auto n = convergence_steps(sd_pair(), 1.0, 1.0, 1e-6);
  EXPECT_EQ(n, 188525);
  EXPECT_NEAR(static_cast<double>(n), 188528.0, 188528.0 * 1e-4);
  const double C = std::log(envelope_scale(sd_pair(), 1.0, 1.0));
  EXPECT_NEAR(C, -4.389, 1e-3);
}

TEST(ConvergenceSteps, LargeDeltaGivesOne) {
  const auto s = sd_pair();
  const double eC = envelope_scale(s, 1.0, 1.0);
  EXPECT_EQ(convergence_steps(s, 1.0, 1.0, eC), 1);
  EXPECT_EQ(convergence_steps(s, 1.0, 1.0, 10.0 * eC), 1);
}

TEST(ConvergenceSteps, HandArithmetic) {
  const auto s = NoiseSchedule::from_alphabars({0.25, 0.2, 0.1});
  EXPECT_EQ(convergence_steps(s, 1.0, 0.0, 0.5), 2);
}

TEST(ConvergenceSteps, Monotone) {
  const auto s = sd_pair();
  std::int64_t prev = convergence_steps(s, 1.0, 1.0, 1e-12);
  for (double delta : {1e-10, 1e-8, 1e-6, 1e-4, 1e-2}) {
    const auto n = convergence_steps(s, 1.0, 1.0, delta);
    EXPECT_LE(n, prev);
    prev = n;
  }
  EXPECT_LE(convergence_steps(s, 1.0, 1.0, 1e-6), convergence_steps(s, 2.0, 1.0, 1e-6));
  EXPECT_LE(convergence_steps(s, 1.0, 1.0, 1e-6), convergence_steps(s, 1.0, 3.0, 1e-6));
}

TEST(DriftBound, Examples) {
  EXPECT_NEAR(drift_bound(sd_pair(), 1.0, 1.0), 248.3, 0.05);
  EXPECT_NEAR(drift_bound(sd_pair(), 1.0, 1.0), 248.29694128368542, 1e-9);
  EXPECT_EQ(drift_bound(sd_pair(), 0.0, 0.0), 0.0);
  const auto s = NoiseSchedule::from_alphabars({0.25, 0.2, 0.1});
  EXPECT_NEAR(drift_bound(s, 1.0, 0.0), 2.0, 1e-15);
}

TEST(DriftBound, DominatesFirstEnvelope) {
  for (double c1 : {0.0, 0.5, 3.0}) {
    for (double c2 : {0.0, 1.0, 7.0}) {
      EXPECT_GE(drift_bound(sd_pair(), c1, c2), envelope_scale(sd_pair(), c1, c2));
    }
  }
}

TEST(ScheduleJson, Roundtrip) {
  const auto s = stable_diffusion_schedule(20);
  const auto j = to_json(s);
  ASSERT_TRUE(j.contains("alphabar"));
  EXPECT_EQ(schedule_from_json(j).alphabars(), s.alphabars());
  EXPECT_THROW(schedule_from_json(nlohmann::json{{"values", {0.9, 0.5, 0.1}}}), InvalidArgument);
}
