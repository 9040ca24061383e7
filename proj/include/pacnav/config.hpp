#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "pacnav/dynamics.hpp"
#include "pacnav/world.hpp"

namespace pacnav {

enum class TerminalMode { kQuadratic, kLearnedVf };

inline std::string to_string(TerminalMode m) {
  return m == TerminalMode::kQuadratic ? "QUADRATIC" : "LEARNED_VF";
}
inline TerminalMode terminal_mode_from_string(const std::string& s) {
  if (s == "QUADRATIC") return TerminalMode::kQuadratic;
  if (s == "LEARNED_VF") return TerminalMode::kLearnedVf;
  throw std::invalid_argument("unknown terminal mode: " + s);
}

struct DynamicsConfig {
  double wheelbase = 0.33;
  double dt = 0.1;
  double accel_max = 1.0;
  double steer_rate_max = 1.0;
  double steer_max = 0.4;
  double v_min = -1.0;
  double v_max = 3.0;
  /// Process-noise variances; "sim" fit by default, "hardware" available.
  std::vector<double> gamma_diag = {0.0004, 0.0004, 0.0116, 0.1004, 0.0056};

  ControlLimits limits() const {
    return {accel_max, steer_rate_max, steer_max};
  }
  NoiseModel noise() const {
    NoiseModel n;
    for (int i = 0; i < 5; ++i) n.gamma_diag[i] = gamma_diag.at(i);
    return n;
  }
  BicycleModel model() const { return BicycleModel(wheelbase, limits()); }
};

struct EnvironmentConfig {
  double workspace_min = 0.0;
  double workspace_max = 25.0;
  int min_obstacles = 0;
  int max_obstacles = 50;
  double min_radius = 0.25;
  double max_radius = 1.5;
  double robot_radius = 0.2;
  double goal_radius = 1.0;
  bool no_overlap = false;

  EnvSampleConfig sampler(double steer_limit) const {
    EnvSampleConfig c;
    c.workspace.pmin = Vec2(workspace_min, workspace_min);
    c.workspace.pmax = Vec2(workspace_max, workspace_max);
    c.min_obstacles = min_obstacles;
    c.max_obstacles = max_obstacles;
    c.min_radius = min_radius;
    c.max_radius = max_radius;
    c.robot_radius = robot_radius;
    c.steer_limit = steer_limit;
    c.no_overlap = no_overlap;
    return c;
  }
};

struct Td3Config {
  int hidden = 256;
  double dropout = 0.1;
  double lr = 3e-4;
  int batch = 256;
  double gamma_d = 0.99;
  double tau = 0.005;
  int policy_delay = 2;
  double expl_noise = 0.1;
  double target_noise = 0.2;
  double noise_clip = 0.5;
  int warmup_steps = 10000;
  int buffer_capacity = 1000000;
  long max_steps = 2000000;
  int update_every = 1;
  int episode_max_steps = 250;
  double gamma_r = 100.0;   ///< constraint-violation reward penalty
  double q_xy = 0.01;       ///< position entries of the quadratic state cost
  int plateau_window = 100;
  double plateau_tol = 0.01;
  int plateau_patience = 10;
  long checkpoint_every = 100000;
};

struct PacSettings {
  int horizon_steps = 12;   ///< control steps per plan
  int iterations = 5;       ///< L
  int samples = 1024;       ///< M
  int grad_steps = 10;      ///< inner gradient steps per iteration
  double delta = 0.05;
  double constraint_weight = 2.0;  ///< cost/constraint trade-off
  double init_var = 0.05;
  double var_floor = 1e-6;
  double lr_mean = 0.05;
  double lr_logvar = 0.01;
  double grad_clip = 10.0;
  double shift_eps = 1e-3;
  int exec_steps = 2;   ///< replanning period in control steps (0.2 s)
  int substeps = 5;     ///< execution substeps per control step (50 Hz)
  bool mc_validate = true;  ///< fresh Monte Carlo draw per interval
  std::string terminal_mode = "LEARNED_VF";
  // TVLQR tracking weights (position-dominant)
  std::vector<double> q_lqr = {10, 10, 1, 1, 1};
  std::vector<double> r_lqr = {1, 1};
  std::vector<double> qf_lqr = {10, 10, 1, 1, 1};
  // running and quadratic-terminal costs
  std::vector<double> q_cost = {0.01, 0.01, 0.0, 0.0, 0.0};
  std::vector<double> qf_quad = {1.0, 1.0, 0.0, 0.0, 0.0};

  TerminalMode mode() const { return terminal_mode_from_string(terminal_mode); }
};

struct BenchmarkConfig {
  int trials = 100;
  double timeout_s = 60.0;
};

struct AppConfig {
  DynamicsConfig dynamics;
  LidarConfig lidar;
  EnvironmentConfig environment;
  Td3Config td3;
  PacSettings pac;
  BenchmarkConfig benchmark;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    DynamicsConfig, wheelbase, dt, accel_max, steer_rate_max, steer_max,
    v_min, v_max, gamma_diag)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LidarConfig, min_range,
                                                max_range)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    EnvironmentConfig, workspace_min, workspace_max, min_obstacles,
    max_obstacles, min_radius, max_radius, robot_radius, goal_radius,
    no_overlap)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    Td3Config, hidden, dropout, lr, batch, gamma_d, tau, policy_delay,
    expl_noise, target_noise, noise_clip, warmup_steps, buffer_capacity,
    max_steps, update_every, episode_max_steps, gamma_r, q_xy,
    plateau_window, plateau_tol, plateau_patience, checkpoint_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    PacSettings, horizon_steps, iterations, samples, grad_steps, delta,
    constraint_weight, init_var, var_floor, lr_mean, lr_logvar, grad_clip,
    shift_eps, exec_steps, substeps, mc_validate, terminal_mode, q_lqr,
    r_lqr, qf_lqr, q_cost, qf_quad)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BenchmarkConfig, trials,
                                                timeout_s)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AppConfig, dynamics, lidar,
                                                environment, td3, pac,
                                                benchmark)

inline AppConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  nlohmann::json j;
  in >> j;
  return j.get<AppConfig>();
}

/// FNV-1a over the canonical dump; ties replays to their configuration.
inline std::uint64_t config_hash(const AppConfig& cfg) {
  std::string dump = nlohmann::json(cfg).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline Vec5 diag5(const std::vector<double>& v) {
  if (v.size() != 5) throw std::invalid_argument("expected 5 diagonal entries");
  Vec5 d;
  for (int i = 0; i < 5; ++i) d[i] = v[i];
  return d;
}

inline Vec2 diag2(const std::vector<double>& v) {
  if (v.size() != 2) throw std::invalid_argument("expected 2 diagonal entries");
  return Vec2(v[0], v[1]);
}

}  // namespace pacnav
