#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "edgeped/camera.hpp"

using namespace edgeped;

TEST(Camera, ReferenceSite) {
  const auto plan = plan_camera({6.0, 3.0, 6.2, 6.2});
  EXPECT_NEAR(plan.near_distance, 6.7, 0.05);
  EXPECT_NEAR(plan.far_distance, 8.63, 0.05);
  EXPECT_NEAR(plan.near_distance, std::sqrt(45.0), 1e-12);
}

TEST(Camera, PythagoreanTriple) {
  EXPECT_DOUBLE_EQ(plan_camera({3.0, 4.0, 1.0, 1.0}).near_distance, 5.0);
}

TEST(Camera, MatchesArithmeticOnRandomSites) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.1, 50.0);
  for (int i = 0; i < 1000; ++i) {
    const CameraSite s{u(rng), u(rng), u(rng), u(rng)};
    const auto p = plan_camera(s);
    EXPECT_NEAR(p.near_distance, std::sqrt(s.pole_height * s.pole_height + s.pole_arm_width * s.pole_arm_width), 1e-9);
    EXPECT_NEAR(p.far_distance, std::sqrt(s.pole_height * s.pole_height + s.far_lane_offset * s.far_lane_offset), 1e-9);
  }
}

TEST(Camera, RejectsNonPositiveOrNonFinite) {
  EXPECT_THROW(plan_camera({0.0, 3.0, 4.0, 4.0}), ValidationError);
  EXPECT_THROW(plan_camera({6.0, -1.0, 6.2, 6.2}), ValidationError);
  EXPECT_THROW(plan_camera({6.0, 3.0, 6.2, std::numeric_limits<double>::infinity()}), ValidationError);
  EXPECT_THROW(plan_camera({std::nan(""), 3.0, 6.2, 6.2}), ValidationError);
}
