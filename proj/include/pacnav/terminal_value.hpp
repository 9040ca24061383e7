#pragma once

#include <cmath>
#include <span>

#include "pacnav/td3.hpp"
#include "pacnav/world.hpp"

namespace pacnav {

/// Estimated future scan at a candidate terminal pose.
struct ProjectedScan {
  std::array<double, kNumBeams> ranges{};

  LidarScan as_scan() const { return LidarScan{ranges}; }
};

/// Re-expresses observed obstacle points as a scan from the terminal pose.
/// Each point maps to its nearest-bearing beam (circular, half-spacing
/// accuracy); the minimum range wins when beams collide; unassigned beams
/// read max range. Ranges are clamped into the sensor interval.
inline ProjectedScan project_scan(std::span<const ObstaclePoint> points,
                                  const Pose& terminal,
                                  const LidarConfig& cfg = {}) {
  ProjectedScan out;
  out.ranges.fill(cfg.max_range);
  const double spacing = 2.0 * M_PI / kNumBeams;
  for (const ObstaclePoint& p : points) {
    double dx = p.ox - terminal.x, dy = p.oy - terminal.y;
    double range = std::hypot(dx, dy);
    double bearing = wrap_angle(std::atan2(dy, dx) - terminal.theta);
    int k = static_cast<int>(std::lround((bearing + M_PI) / spacing)) %
            kNumBeams;
    double r = std::clamp(range, cfg.min_range, cfg.max_range);
    if (r < out.ranges[k]) out.ranges[k] = r;
  }
  return out;
}

/// Terminal cost: the negative learned value at the terminal state under
/// the projected scan (approximate cost-to-go).
inline double terminal_cost(const ValueFunction& vf,
                            const VehicleState& terminal,
                            const ProjectedScan& projected,
                            const VehicleState& goal, const MdpParams& mp,
                            const MaskPair* masks = nullptr) {
  return -evaluate_value(vf, terminal, projected.as_scan(), goal, mp, masks);
}

/// True iff the learned value fails to improve over the trajectory:
/// V(terminal, projected) < V(current, scan). Equal values pass. The same
/// dropout masks must be used for both evaluations so one network
/// hypothesis judges both ends.
inline bool value_improvement_violated(const ValueFunction& vf,
                                       const VehicleState& current,
                                       const LidarScan& scan,
                                       const VehicleState& terminal,
                                       const ProjectedScan& projected,
                                       const VehicleState& goal,
                                       const MdpParams& mp,
                                       const MaskPair* masks = nullptr) {
  double v0 = evaluate_value(vf, current, scan, goal, mp, masks);
  double vf_term =
      evaluate_value(vf, terminal, projected.as_scan(), goal, mp, masks);
  return vf_term < v0;
}

}  // namespace pacnav
