#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "pacnav/rng.hpp"

namespace pacnav {

using Vec2 = Eigen::Vector2d;
using Vec5 = Eigen::Matrix<double, 5, 1>;
using Mat55 = Eigen::Matrix<double, 5, 5>;
using Mat52 = Eigen::Matrix<double, 5, 2>;
using Mat25 = Eigen::Matrix<double, 2, 5>;
using Mat22 = Eigen::Matrix<double, 2, 2>;

/// Kinematic bicycle state: planar position, heading, speed, steering angle.
struct VehicleState {
  double x = 0.0;      ///< position east [m]
  double y = 0.0;      ///< position north [m]
  double theta = 0.0;  ///< heading [rad]
  double v = 0.0;      ///< speed [m/s]
  double steer = 0.0;  ///< steering angle [rad]

  Vec5 vec() const {
    Vec5 s;
    s << x, y, theta, v, steer;
    return s;
  }
  static VehicleState from_vec(const Vec5& s) {
    return {s[0], s[1], s[2], s[3], s[4]};
  }
};

struct ControlInput {
  double accel = 0.0;       ///< longitudinal acceleration [m/s^2]
  double steer_rate = 0.0;  ///< steering rate [rad/s]

  Vec2 vec() const { return Vec2(accel, steer_rate); }
  static ControlInput from_vec(const Vec2& u) { return {u[0], u[1]}; }
};

/// Actuator limits. The steering angle is a hard clamp inside integration;
/// the speed bound is a checked constraint elsewhere and stays violable.
struct ControlLimits {
  double accel_max = 1.0;
  double steer_rate_max = 1.0;
  double steer_max = 0.4;

  ControlInput clamp(const ControlInput& u) const {
    return {std::clamp(u.accel, -accel_max, accel_max),
            std::clamp(u.steer_rate, -steer_rate_max, steer_rate_max)};
  }
  double clamp_steer(double s) const {
    return std::clamp(s, -steer_max, steer_max);
  }
};

/// Diagonal process-noise covariance on the state derivative.
struct NoiseModel {
  Vec5 gamma_diag = Vec5::Zero();  ///< per-state variances

  static NoiseModel none() { return {}; }
  /// Covariance fit used for the simulation experiments.
  static NoiseModel sim_default() {
    NoiseModel n;
    n.gamma_diag << 0.0004, 0.0004, 0.0116, 0.1004, 0.0056;
    return n;
  }
  /// Covariance fit from rally-car motion-capture data.
  static NoiseModel hardware() {
    NoiseModel n;
    n.gamma_diag << 0.001, 0.001, 0.014, 0.079, 0.006;
    return n;
  }
};

/// Discrete trajectory: |states| = |controls| + 1.
struct Trajectory {
  std::vector<VehicleState> states;
  std::vector<ControlInput> controls;
  double dt = 0.1;
};

/// Nominal trajectory tracked with time-indexed linear feedback gains.
/// `substeps` is the interpolation factor used when executing at the
/// fine control rate (5 -> 50 Hz for dt = 0.1 s).
struct FeedbackPolicy {
  Trajectory nominal;
  std::vector<Mat25> gains;
  int substeps = 5;
};

struct TvlqrResult {
  std::vector<Mat25> gains;        ///< K_t, one per control step
  std::vector<Mat55> cost_to_go;   ///< P_t, one per state (|gains| + 1)
};

/// Backward Riccati recursion over a given linearization sequence.
/// Throws if R + B'PB is not invertible (ill-conditioned R); no silent
/// regularization.
inline TvlqrResult tvlqr_recursion(std::span<const Mat55> As,
                                   std::span<const Mat52> Bs,
                                   const Mat55& Q, const Mat22& R,
                                   const Mat55& Qf) {
  const int n = static_cast<int>(As.size());
  if (static_cast<int>(Bs.size()) != n)
    throw std::invalid_argument("tvlqr_recursion: |A| != |B|");
  TvlqrResult out;
  out.gains.resize(n);
  out.cost_to_go.resize(n + 1);
  Mat55 P = Qf;
  out.cost_to_go[n] = P;
  for (int t = n - 1; t >= 0; --t) {
    const Mat55& A = As[t];
    const Mat52& B = Bs[t];
    Mat22 H = R + B.transpose() * P * B;
    Eigen::FullPivLU<Mat22> lu(H);
    if (!lu.isInvertible())
      throw std::runtime_error(
          "tvlqr: R + B'PB singular; R is ill-conditioned");
    Mat25 K = lu.solve(B.transpose() * P * A);
    Mat55 Acl = A - B * K;
    P = Q + K.transpose() * R * K + Acl.transpose() * P * Acl;
    P = 0.5 * (P + P.transpose());  // keep symmetric
    out.gains[t] = K;
    out.cost_to_go[t] = P;
  }
  return out;
}

/// Stochastic kinematic bicycle with acceleration and steering-rate inputs.
///
///   f(x, u) = [v cos(theta), v sin(theta), v tan(steer)/L, accel, steer_rate]
///   x' = x + (f(x, u) + w) dt,  w ~ N(0, Gamma)
///
/// Forward Euler throughout; pure functions over value types.
class BicycleModel {
 public:
  explicit BicycleModel(double wheelbase = 0.33, ControlLimits limits = {})
      : wheelbase_(wheelbase), limits_(limits) {
    if (wheelbase <= 0.0)
      throw std::invalid_argument("BicycleModel: wheelbase must be > 0");
  }

  double wheelbase() const { return wheelbase_; }
  const ControlLimits& limits() const { return limits_; }

  Vec5 deriv(const VehicleState& s, const ControlInput& u) const {
    Vec5 f;
    f << s.v * std::cos(s.theta), s.v * std::sin(s.theta),
        s.v * std::tan(s.steer) / wheelbase_, u.accel, u.steer_rate;
    return f;
  }

  VehicleState step_nominal(const VehicleState& s, const ControlInput& u,
                            double dt) const {
    ControlInput uc = limits_.clamp(u);
    Vec5 next = s.vec() + deriv(s, uc) * dt;
    VehicleState out = VehicleState::from_vec(next);
    out.steer = limits_.clamp_steer(out.steer);
    return out;
  }

  /// One noisy Euler step. `variance_scale` compensates a finer step rate
  /// so the diffusion per planning step is rate-independent (substepping
  /// at dt/n uses variance_scale = n).
  VehicleState step_stochastic(const VehicleState& s, const ControlInput& u,
                               const NoiseModel& noise, RngStream& rng,
                               double dt, double variance_scale = 1.0) const {
    ControlInput uc = limits_.clamp(u);
    Vec5 f = deriv(s, uc);
    for (int i = 0; i < 5; ++i)
      f[i] += rng.normal() * std::sqrt(noise.gamma_diag[i] * variance_scale);
    Vec5 next = s.vec() + f * dt;
    VehicleState out = VehicleState::from_vec(next);
    out.steer = limits_.clamp_steer(out.steer);
    return out;
  }

  /// Analytic Jacobians of the Euler step: A = I + dt df/dx, B = dt df/du.
  void linearize(const VehicleState& s, const ControlInput&, double dt,
                 Mat55& A, Mat52& B) const {
    double c = std::cos(s.theta), sn = std::sin(s.theta);
    double ts = std::tan(s.steer);
    double sec2 = 1.0 + ts * ts;
    A = Mat55::Identity();
    A(0, 2) = dt * (-s.v * sn);
    A(0, 3) = dt * c;
    A(1, 2) = dt * (s.v * c);
    A(1, 3) = dt * sn;
    A(2, 3) = dt * ts / wheelbase_;
    A(2, 4) = dt * s.v * sec2 / wheelbase_;
    B = Mat52::Zero();
    B(3, 0) = dt;
    B(4, 1) = dt;
  }

  /// Integrates the nominal (deterministic) trajectory from a control
  /// sequence; controls are clamped to bounds as they are applied.
  Trajectory rollout_nominal(const VehicleState& initial,
                             std::span<const ControlInput> controls,
                             double dt) const {
    Trajectory traj;
    traj.dt = dt;
    traj.states.reserve(controls.size() + 1);
    traj.controls.reserve(controls.size());
    traj.states.push_back(initial);
    VehicleState s = initial;
    for (const ControlInput& u : controls) {
      ControlInput uc = limits_.clamp(u);
      s = step_nominal(s, uc, dt);
      traj.states.push_back(s);
      traj.controls.push_back(uc);
    }
    return traj;
  }

  /// TVLQR gains along a nominal trajectory.
  TvlqrResult tvlqr(const Trajectory& nominal, const Mat55& Q, const Mat22& R,
                    const Mat55& Qf) const {
    const int n = static_cast<int>(nominal.controls.size());
    std::vector<Mat55> As(n);
    std::vector<Mat52> Bs(n);
    for (int t = 0; t < n; ++t)
      linearize(nominal.states[t], nominal.controls[t], nominal.dt, As[t],
                Bs[t]);
    return tvlqr_recursion(As, Bs, Q, R, Qf);
  }

  std::vector<Mat25> tvlqr_gains(const Trajectory& nominal, const Mat55& Q,
                                 const Mat22& R, const Mat55& Qf) const {
    return tvlqr(nominal, Q, R, Qf).gains;
  }

  /// Closed-loop rollout at planning resolution: feedback at the knots,
  /// noise per planning step. With zero noise this reproduces the nominal
  /// trajectory exactly.
  Trajectory rollout_policy(const FeedbackPolicy& policy,
                            const VehicleState& initial,
                            const NoiseModel& noise, RngStream& rng) const {
    const Trajectory& nom = policy.nominal;
    const int n = static_cast<int>(nom.controls.size());
    Trajectory traj;
    traj.dt = nom.dt;
    traj.states.reserve(n + 1);
    traj.controls.reserve(n);
    VehicleState s = initial;
    traj.states.push_back(s);
    for (int t = 0; t < n; ++t) {
      Vec2 fb = policy.gains[t] * (nom.states[t].vec() - s.vec());
      ControlInput u =
          limits_.clamp(ControlInput::from_vec(nom.controls[t].vec() + fb));
      s = step_stochastic(s, u, noise, rng, nom.dt);
      traj.states.push_back(s);
      traj.controls.push_back(u);
    }
    return traj;
  }

  /// Executes the first `exec_steps` planning steps of a policy at the
  /// fine control rate (substeps per planning step). Nominal states and
  /// controls are linearly interpolated between knots; gains are held
  /// over each planning step; noise variance is scaled so the diffusion
  /// per planning step matches the planning-rate rollout.
  /// Returns the substep state sequence, initial state included.
  std::vector<VehicleState> execute_policy(const FeedbackPolicy& policy,
                                           const VehicleState& initial,
                                           const NoiseModel& noise,
                                           RngStream& rng,
                                           int exec_steps) const {
    const Trajectory& nom = policy.nominal;
    const int n = static_cast<int>(nom.controls.size());
    const int sub = std::max(1, policy.substeps);
    const double dt_sub = nom.dt / sub;
    exec_steps = std::min(exec_steps, n);
    std::vector<VehicleState> out;
    out.reserve(exec_steps * sub + 1);
    VehicleState s = initial;
    out.push_back(s);
    for (int t = 0; t < exec_steps; ++t) {
      const Vec5 x0 = nom.states[t].vec();
      const Vec5 x1 = nom.states[t + 1].vec();
      const Vec2 u0 = nom.controls[t].vec();
      const Vec2 u1 = nom.controls[std::min(t + 1, n - 1)].vec();
      for (int k = 0; k < sub; ++k) {
        double a = static_cast<double>(k) / sub;
        Vec5 xref = (1.0 - a) * x0 + a * x1;
        Vec2 uref = (1.0 - a) * u0 + a * u1;
        Vec2 fb = policy.gains[t] * (xref - s.vec());
        ControlInput u = limits_.clamp(ControlInput::from_vec(uref + fb));
        s = step_stochastic(s, u, noise, rng, dt_sub,
                            static_cast<double>(sub));
        out.push_back(s);
      }
    }
    return out;
  }

 private:
  double wheelbase_;
  ControlLimits limits_;
};

}  // namespace pacnav
