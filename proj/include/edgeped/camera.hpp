#pragma once

// Camera placement on a traffic-light pole: straight-line distance from the
// camera to the near and far edges of the crossing.

#include <cmath>
#include <string>

#include "edgeped/error.hpp"

namespace edgeped {

struct CameraSite {
  double pole_height = 0;      // AB
  double pole_arm_width = 0;   // BC
  double crossing_length = 0;  // AE
  double far_lane_offset = 0;  // camera to opposite lane, along the ground
};

struct CameraPlan {
  double near_distance = 0;
  double far_distance = 0;
};

inline void validate(const CameraSite& s) {
  auto check = [](double v, const char* name) {
    if (!(v > 0) || !std::isfinite(v))
      throw ValidationError(std::string(name) + " must be a positive finite length, got " + std::to_string(v));
  };
  check(s.pole_height, "pole_height");
  check(s.pole_arm_width, "pole_arm_width");
  check(s.crossing_length, "crossing_length");
  check(s.far_lane_offset, "far_lane_offset");
}

inline CameraPlan plan_camera(const CameraSite& site) {
  validate(site);
  return {std::hypot(site.pole_height, site.pole_arm_width), std::hypot(site.pole_height, site.far_lane_offset)};
}

}  // namespace edgeped
