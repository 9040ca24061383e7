#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "pacnav/dynamics.hpp"
#include "pacnav/rng.hpp"

namespace pacnav {

inline constexpr int kNumBeams = 64;

/// Fixed beam bearings: beta_k = -pi + 2 pi k / 64, symmetric 360 coverage.
inline double beam_bearing(int k) {
  return -M_PI + 2.0 * M_PI * static_cast<double>(k) / kNumBeams;
}

inline double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a < 0) a += 2.0 * M_PI;
  return a - M_PI;
}

struct Pose {
  double x = 0.0, y = 0.0, theta = 0.0;
};

struct Obstacle {
  double cx = 0.0, cy = 0.0, radius = 0.0;
};

struct Workspace {
  Vec2 pmin{0.0, 0.0};
  Vec2 pmax{25.0, 25.0};

  double diagonal() const { return (pmax - pmin).norm(); }
};

struct Environment {
  std::vector<Obstacle> obstacles;
  VehicleState start;
  VehicleState goal;
  Workspace workspace;
  std::uint64_t seed = 0;
};

struct LidarConfig {
  double min_range = 0.1;
  double max_range = 10.0;
};

/// 64-beam range scan; non-detections carry max_range.
struct LidarScan {
  std::array<double, kNumBeams> ranges{};
};

/// A lidar return projected into the world frame.
struct ObstaclePoint {
  double ox = 0.0, oy = 0.0;
};

struct EnvSampleConfig {
  Workspace workspace;
  int min_obstacles = 0;
  int max_obstacles = 50;
  double min_radius = 0.25;
  double max_radius = 1.5;
  double robot_radius = 0.2;
  double steer_limit = 0.4;
  bool no_overlap = false;  ///< mirror of the hardware protocol
  int max_attempts = 1000;
};

inline bool check_true_collision(const VehicleState& s, const Environment& env,
                                 double robot_radius) {
  for (const Obstacle& o : env.obstacles) {
    double dx = s.x - o.cx, dy = s.y - o.cy;
    double r = robot_radius + o.radius;
    if (dx * dx + dy * dy <= r * r) return true;
  }
  return false;
}

/// Random obstacle field plus collision-free start and goal. Environments
/// whose endpoints collide are discarded and resampled whole.
inline Environment sample_environment(RngStream& rng,
                                      const EnvSampleConfig& cfg) {
  const Workspace& ws = cfg.workspace;
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    Environment env;
    env.workspace = ws;
    int count = rng.uniform_int(cfg.min_obstacles, cfg.max_obstacles);
    env.obstacles.reserve(count);
    bool overlap = false;
    for (int i = 0; i < count; ++i) {
      Obstacle o;
      o.radius = rng.uniform(cfg.min_radius, cfg.max_radius);
      o.cx = rng.uniform(ws.pmin.x(), ws.pmax.x());
      o.cy = rng.uniform(ws.pmin.y(), ws.pmax.y());
      if (cfg.no_overlap) {
        for (const Obstacle& p : env.obstacles) {
          double d = std::hypot(o.cx - p.cx, o.cy - p.cy);
          if (d <= o.radius + p.radius) {
            overlap = true;
            break;
          }
        }
      }
      env.obstacles.push_back(o);
    }
    if (overlap) continue;
    auto sample_endpoint = [&] {
      VehicleState s;
      s.x = rng.uniform(ws.pmin.x(), ws.pmax.x());
      s.y = rng.uniform(ws.pmin.y(), ws.pmax.y());
      s.theta = rng.uniform(-M_PI, M_PI);
      s.v = 0.0;
      s.steer = rng.uniform(-cfg.steer_limit, cfg.steer_limit);
      return s;
    };
    env.start = sample_endpoint();
    env.goal = sample_endpoint();
    if (check_true_collision(env.start, env, cfg.robot_radius)) continue;
    if (check_true_collision(env.goal, env, cfg.robot_radius)) continue;
    return env;
  }
  throw std::runtime_error("sample_environment: resample budget exhausted");
}

/// True iff the straight start-goal segment intersects any obstacle
/// inflated by the robot radius.
inline bool is_blocked(const Environment& env, double robot_radius) {
  double ax = env.start.x, ay = env.start.y;
  double bx = env.goal.x, by = env.goal.y;
  double abx = bx - ax, aby = by - ay;
  double len2 = abx * abx + aby * aby;
  for (const Obstacle& o : env.obstacles) {
    double t = 0.0;
    if (len2 > 0.0)
      t = std::clamp(((o.cx - ax) * abx + (o.cy - ay) * aby) / len2, 0.0, 1.0);
    double dx = ax + t * abx - o.cx, dy = ay + t * aby - o.cy;
    double r = o.radius + robot_radius;
    if (dx * dx + dy * dy <= r * r) return true;
  }
  return false;
}

/// Nearest ray-circle intersection distance, or nullopt on a miss.
inline std::optional<double> ray_circle(double px, double py, double dx,
                                        double dy, const Obstacle& o) {
  // |p + t d - c|^2 = r^2 with unit d
  double mx = px - o.cx, my = py - o.cy;
  double b = mx * dx + my * dy;
  double c = mx * mx + my * my - o.radius * o.radius;
  double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  double root = std::sqrt(disc);
  double t = -b - root;
  if (t < 0.0) t = -b + root;  // origin inside the circle
  if (t < 0.0) return std::nullopt;
  return t;
}

inline LidarScan raycast_scan(const Environment& env, const Pose& pose,
                              const LidarConfig& cfg = {}) {
  LidarScan scan;
  for (int k = 0; k < kNumBeams; ++k) {
    double ang = pose.theta + beam_bearing(k);
    double dx = std::cos(ang), dy = std::sin(ang);
    double best = cfg.max_range;
    for (const Obstacle& o : env.obstacles) {
      auto t = ray_circle(pose.x, pose.y, dx, dy, o);
      if (t && *t < best) best = *t;
    }
    scan.ranges[k] = std::clamp(best, cfg.min_range, cfg.max_range);
  }
  return scan;
}

/// World-frame returns for every beam strictly below max range.
inline std::vector<ObstaclePoint> extract_obstacle_points(
    const LidarScan& scan, const Pose& pose, const LidarConfig& cfg = {}) {
  std::vector<ObstaclePoint> points;
  points.reserve(kNumBeams);
  for (int k = 0; k < kNumBeams; ++k) {
    double r = scan.ranges[k];
    if (r >= cfg.max_range) continue;
    double ang = pose.theta + beam_bearing(k);
    points.push_back({pose.x + std::cos(ang) * r, pose.y + std::sin(ang) * r});
  }
  return points;
}

/// Violation test against observed obstacle points and the speed bounds.
inline bool check_constraint(const VehicleState& s,
                             std::span<const ObstaclePoint> points,
                             double robot_radius, double v_min, double v_max) {
  if (s.v < v_min || s.v > v_max) return true;
  double r2 = robot_radius * robot_radius;
  for (const ObstaclePoint& p : points) {
    double dx = s.x - p.ox, dy = s.y - p.oy;
    if (dx * dx + dy * dy <= r2) return true;
  }
  return false;
}

inline bool goal_reached(const VehicleState& s, const VehicleState& goal,
                         double goal_radius) {
  return std::hypot(s.x - goal.x, s.y - goal.y) <= goal_radius;
}

// --- JSON serialization (replayable environment files) ---

inline void to_json(nlohmann::json& j, const VehicleState& s) {
  j = {{"x", s.x}, {"y", s.y}, {"theta", s.theta}, {"v", s.v},
       {"steer", s.steer}};
}
inline void from_json(const nlohmann::json& j, VehicleState& s) {
  j.at("x").get_to(s.x);
  j.at("y").get_to(s.y);
  j.at("theta").get_to(s.theta);
  j.at("v").get_to(s.v);
  j.at("steer").get_to(s.steer);
}

inline void to_json(nlohmann::json& j, const Obstacle& o) {
  j = {{"cx", o.cx}, {"cy", o.cy}, {"radius", o.radius}};
}
inline void from_json(const nlohmann::json& j, Obstacle& o) {
  j.at("cx").get_to(o.cx);
  j.at("cy").get_to(o.cy);
  j.at("radius").get_to(o.radius);
}

inline void to_json(nlohmann::json& j, const Workspace& w) {
  j = {{"pmin", {w.pmin.x(), w.pmin.y()}}, {"pmax", {w.pmax.x(), w.pmax.y()}}};
}
inline void from_json(const nlohmann::json& j, Workspace& w) {
  w.pmin = Vec2(j.at("pmin")[0].get<double>(), j.at("pmin")[1].get<double>());
  w.pmax = Vec2(j.at("pmax")[0].get<double>(), j.at("pmax")[1].get<double>());
}

inline void to_json(nlohmann::json& j, const Environment& e) {
  j = {{"obstacles", e.obstacles},
       {"start", e.start},
       {"goal", e.goal},
       {"workspace", e.workspace},
       {"seed", e.seed}};
}
inline void from_json(const nlohmann::json& j, Environment& e) {
  j.at("obstacles").get_to(e.obstacles);
  j.at("start").get_to(e.start);
  j.at("goal").get_to(e.goal);
  j.at("workspace").get_to(e.workspace);
  j.at("seed").get_to(e.seed);
}

}  // namespace pacnav
