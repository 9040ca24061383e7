#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "pacnav/config.hpp"
#include "pacnav/dynamics.hpp"
#include "pacnav/mlp.hpp"
#include "pacnav/world.hpp"

namespace pacnav {

inline constexpr int kMdpStateDim = 5 + kNumBeams;  // 69
inline constexpr int kActionDim = 2;

using MdpVec = Eigen::Matrix<double, kMdpStateDim, 1>;

/// Normalization constants for the MDP state mapping.
struct MdpParams {
  double v_min = -1.0;
  double v_max = 3.0;
  double steer_limit = 0.4;
  double lidar_min = 0.1;
  double lidar_max = 10.0;
  double workspace_diag = 25.0 * M_SQRT2;

  static MdpParams from(const AppConfig& cfg) {
    MdpParams m;
    m.v_min = cfg.dynamics.v_min;
    m.v_max = cfg.dynamics.v_max;
    m.steer_limit = cfg.dynamics.steer_max;
    m.lidar_min = cfg.lidar.min_range;
    m.lidar_max = cfg.lidar.max_range;
    m.workspace_diag = (cfg.environment.workspace_max -
                        cfg.environment.workspace_min) * M_SQRT2;
    return m;
  }
};

/// Normalized MDP state: speed, tan(steer), goal range, cos/sin of the
/// goal bearing error, then the normalized scan. Components are clamped
/// into their nominal intervals (the speed bound is violable).
inline MdpVec mdp_state(const VehicleState& x, const LidarScan& scan,
                        const VehicleState& goal, const MdpParams& p) {
  MdpVec s;
  double d0 = goal.x - x.x, d1 = goal.y - x.y;
  double beta_g = std::atan2(d1, d0);
  double ts = std::tan(x.steer), tl = std::tan(p.steer_limit);
  s[0] = std::clamp((x.v - p.v_min) / (p.v_max - p.v_min), 0.0, 1.0);
  s[1] = std::clamp((ts + tl) / (2.0 * tl), 0.0, 1.0);
  s[2] = std::clamp(std::hypot(d0, d1) / p.workspace_diag, 0.0, 1.0);
  s[3] = std::cos(beta_g - x.theta);
  s[4] = std::sin(beta_g - x.theta);
  for (int k = 0; k < kNumBeams; ++k)
    s[5 + k] = std::clamp(
        (scan.ranges[k] - p.lidar_min) / (p.lidar_max - p.lidar_min), 0.0,
        1.0);
  return s;
}

/// r = -(x - x_G)' Q (x - x_G) - gamma_r [violated], Q on position only.
inline double reward(const VehicleState& x, const ControlInput&,
                     const VehicleState& goal, bool violated, double q_xy,
                     double gamma_r) {
  double dx = x.x - goal.x, dy = x.y - goal.y;
  double r = -q_xy * (dx * dx + dy * dy);
  if (violated) r -= gamma_r;
  return r;
}

struct TransitionSample {
  Eigen::Matrix<float, kMdpStateDim, 1> s, s2;
  Eigen::Vector2f a;
  float r = 0.0f;
  bool done = false;  // true MDP terminal only; time limits bootstrap
};

/// Uniform-sampling ring buffer.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1000000)
      : capacity_(capacity) {}

  void push(const TransitionSample& t) {
    if (data_.size() < capacity_) {
      data_.push_back(t);
    } else {
      data_[next_] = t;
      next_ = (next_ + 1) % capacity_;
    }
  }
  std::size_t size() const { return data_.size(); }
  const TransitionSample& operator[](std::size_t i) const { return data_[i]; }
  const TransitionSample& sample(RngStream& rng) const {
    return data_[rng.index(data_.size())];
  }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<TransitionSample> data_;
};

/// Actor with tanh squash into the normalized action box, plus the
/// scaling onto control bounds (identity for the unit bounds used here).
struct ValueFunction {
  MlpParams actor;    // kMdpStateDim -> hidden -> hidden -> 2
  MlpParams critic1;  // kMdpStateDim + 2 -> hidden -> hidden -> 1
  MlpParams critic2;
  double accel_scale = 1.0;
  double steer_rate_scale = 1.0;

  ControlInput to_control(const Vec2& a) const {
    return {a[0] * accel_scale, a[1] * steer_rate_scale};
  }
};

inline Vec2 actor_action(const MlpParams& actor, const MdpVec& s,
                         const DropoutMask* mask = nullptr) {
  VectorXd out = mlp_forward(actor, s, mask);
  return Vec2(std::tanh(out[0]), std::tanh(out[1]));
}

inline double critic_value(const MlpParams& critic, const MdpVec& s,
                           const Vec2& a, const DropoutMask* mask = nullptr) {
  VectorXd in(kMdpStateDim + kActionDim);
  in << s, a;
  return mlp_forward(critic, in, mask)[0];
}

struct MaskPair {
  DropoutMask actor;
  DropoutMask critic;
};

inline MaskPair sample_mask_pair(const ValueFunction& vf, RngStream& rng) {
  return {sample_mask(vf.actor, rng), sample_mask(vf.critic1, rng)};
}

/// V(x, scan) = Q1(s, pi(s)); masks select a stochastic network sample,
/// maskless evaluates the mean network.
inline double evaluate_value(const ValueFunction& vf, const VehicleState& x,
                             const LidarScan& scan, const VehicleState& goal,
                             const MdpParams& p,
                             const MaskPair* masks = nullptr) {
  MdpVec s = mdp_state(x, scan, goal, p);
  Vec2 a = actor_action(vf.actor, s, masks ? &masks->actor : nullptr);
  return critic_value(vf.critic1, s, a, masks ? &masks->critic : nullptr);
}

/// Batched V over column states with optional per-sample masks.
inline VectorXd value_batch(const ValueFunction& vf, const MatrixXd& S,
                            const BatchMasks* actor_masks,
                            const BatchMasks* critic_masks) {
  MatrixXd pre = mlp_forward_batch(vf.actor, S, actor_masks);
  MatrixXd A = pre.array().tanh();
  MatrixXd SA(S.rows() + A.rows(), S.cols());
  SA << S, A;
  return mlp_forward_batch(vf.critic1, SA, critic_masks).row(0).transpose();
}

// --- episodes ---

enum class EpisodeEnd { kGoal, kViolation, kTimeLimit };

struct EpisodeResult {
  std::vector<TransitionSample> transitions;
  EpisodeEnd end = EpisodeEnd::kTimeLimit;
  double sum_reward = 0.0;
};

/// Everything an episode needs, derived from the app config (the training
/// wheelbase may differ from the benchmark wheelbase for the
/// model-mismatch study).
struct TrainContext {
  BicycleModel model{0.33};
  NoiseModel noise;
  double dt = 0.1;
  MdpParams mdp;
  EnvSampleConfig env_sampler;
  double goal_radius = 1.0;
  double robot_radius = 0.2;
  double gamma_r = 100.0;
  double q_xy = 0.01;
  int episode_max_steps = 250;
  LidarConfig lidar;

  static TrainContext from(const AppConfig& cfg,
                           std::optional<double> wheelbase_override = {}) {
    TrainContext c;
    double wb = wheelbase_override.value_or(cfg.dynamics.wheelbase);
    c.model = BicycleModel(wb, cfg.dynamics.limits());
    c.noise = cfg.dynamics.noise();
    c.dt = cfg.dynamics.dt;
    c.mdp = MdpParams::from(cfg);
    c.env_sampler = cfg.environment.sampler(cfg.dynamics.steer_max);
    c.goal_radius = cfg.environment.goal_radius;
    c.robot_radius = cfg.environment.robot_radius;
    c.gamma_r = cfg.td3.gamma_r;
    c.q_xy = cfg.td3.q_xy;
    c.episode_max_steps = cfg.td3.episode_max_steps;
    c.lidar = cfg.lidar;
    return c;
  }

  bool violated(const VehicleState& s, const Environment& env) const {
    return s.v < mdp.v_min || s.v > mdp.v_max ||
           check_true_collision(s, env, robot_radius);
  }
};

/// Steps the stochastic dynamics with actor actions until the goal, a
/// constraint violation, or the step cap. Exploration noise and random
/// warmup actions are for training; pass 0/false to evaluate.
inline EpisodeResult run_episode(const Environment& env,
                                 const ValueFunction& vf, RngStream& rng,
                                 const TrainContext& ctx,
                                 double expl_noise = 0.0,
                                 bool random_actions = false) {
  EpisodeResult out;
  VehicleState x = env.start;
  LidarScan scan = raycast_scan(env, {x.x, x.y, x.theta}, ctx.lidar);
  MdpVec s = mdp_state(x, scan, env.goal, ctx.mdp);
  for (int step = 0; step < ctx.episode_max_steps; ++step) {
    Vec2 a;
    if (random_actions) {
      a = Vec2(rng.uniform(-1, 1), rng.uniform(-1, 1));
    } else {
      a = actor_action(vf.actor, s);
      if (expl_noise > 0.0) {
        a[0] += rng.normal() * expl_noise;
        a[1] += rng.normal() * expl_noise;
      }
      a[0] = std::clamp(a[0], -1.0, 1.0);
      a[1] = std::clamp(a[1], -1.0, 1.0);
    }
    ControlInput u = vf.to_control(a);
    VehicleState x2 = ctx.model.step_stochastic(x, u, ctx.noise, rng, ctx.dt);
    bool viol = ctx.violated(x2, env);
    bool goal = !viol && goal_reached(x2, env.goal, ctx.goal_radius);
    double r = reward(x, u, env.goal, viol, ctx.q_xy, ctx.gamma_r);
    LidarScan scan2 = raycast_scan(env, {x2.x, x2.y, x2.theta}, ctx.lidar);
    MdpVec s2 = mdp_state(x2, scan2, env.goal, ctx.mdp);
    TransitionSample t;
    t.s = s.cast<float>();
    t.s2 = s2.cast<float>();
    t.a = a.cast<float>();
    t.r = static_cast<float>(r);
    t.done = viol || goal;
    out.transitions.push_back(t);
    out.sum_reward += r;
    if (viol) {
      out.end = EpisodeEnd::kViolation;
      return out;
    }
    if (goal) {
      out.end = EpisodeEnd::kGoal;
      return out;
    }
    x = x2;
    s = s2;
  }
  out.end = EpisodeEnd::kTimeLimit;
  return out;
}

// --- TD3 trainer ---

inline void soft_update(MlpParams& target, const MlpParams& live,
                        double tau) {
  for (int l = 0; l < live.num_layers(); ++l) {
    target.W[l] += tau * (live.W[l] - target.W[l]);
    target.b[l] += tau * (live.b[l] - target.b[l]);
  }
}

struct TrainStats {
  long steps = 0;
  long episodes = 0;
  long goal_episodes = 0;
  long violation_episodes = 0;
  double last_actor_loss = 0.0;
  std::vector<double> actor_loss_windows;  // trailing-window means
  bool plateau_stopped = false;
};

class Td3Trainer {
 public:
  Td3Trainer(const AppConfig& cfg, std::uint64_t seed,
             std::optional<double> wheelbase_override = {})
      : cfg_(cfg),
        ctx_(TrainContext::from(cfg, wheelbase_override)),
        rng_(mix_seed({seed, 0x7d3})),
        env_rng_(mix_seed({seed, 0xe17})) {}

  const ValueFunction& value_function() const { return vf_; }
  const TrainStats& stats() const { return stats_; }
  const TrainContext& context() const { return ctx_; }

  /// Full training loop; stops on the step cap or the actor-loss plateau.
  void train(const std::function<void(const TrainStats&)>& progress = {});

  /// One gradient step on a filled buffer (exposed for tests).
  void update(double lr_override = -1.0);

  void save_checkpoint(const std::filesystem::path& dir,
                       std::uint64_t cfg_hash) const;

  ReplayBuffer& buffer() { return buffer_; }
  ValueFunction& vf() { return vf_; }
  MlpParams& actor_target() { return actor_target_; }
  MlpParams& critic1_target() { return critic1_target_; }
  MlpParams& critic2_target() { return critic2_target_; }

  void init_networks();

 private:
  void actor_critic_masks(int batch, BatchMasks& am, BatchMasks& c1m,
                          BatchMasks& c2m);

  AppConfig cfg_;
  TrainContext ctx_;
  RngStream rng_;
  RngStream env_rng_;
  ReplayBuffer buffer_{1000000};
  ValueFunction vf_;
  MlpParams actor_target_, critic1_target_, critic2_target_;
  AdamState actor_opt_, critic1_opt_, critic2_opt_;
  long update_count_ = 0;
  TrainStats stats_;
  std::deque<double> actor_loss_trail_;
  bool initialized_ = false;
};

inline void Td3Trainer::init_networks() {
  const int h = cfg_.td3.hidden;
  std::vector<int> actor_dims = {kMdpStateDim, h, h, kActionDim};
  std::vector<int> critic_dims = {kMdpStateDim + kActionDim, h, h, 1};
  vf_.actor = make_mlp(actor_dims, rng_, cfg_.td3.dropout);
  vf_.critic1 = make_mlp(critic_dims, rng_, cfg_.td3.dropout);
  vf_.critic2 = make_mlp(critic_dims, rng_, cfg_.td3.dropout);
  vf_.accel_scale = cfg_.dynamics.accel_max;
  vf_.steer_rate_scale = cfg_.dynamics.steer_rate_max;
  actor_target_ = vf_.actor;
  critic1_target_ = vf_.critic1;
  critic2_target_ = vf_.critic2;
  actor_opt_ = AdamState::zeros_like(vf_.actor);
  critic1_opt_ = AdamState::zeros_like(vf_.critic1);
  critic2_opt_ = AdamState::zeros_like(vf_.critic2);
  buffer_ = ReplayBuffer(static_cast<std::size_t>(cfg_.td3.buffer_capacity));
  initialized_ = true;
}

inline void Td3Trainer::actor_critic_masks(int batch, BatchMasks& am,
                                           BatchMasks& c1m, BatchMasks& c2m) {
  am = sample_batch_masks(vf_.actor, batch, rng_);
  c1m = sample_batch_masks(vf_.critic1, batch, rng_);
  c2m = sample_batch_masks(vf_.critic2, batch, rng_);
}

inline void Td3Trainer::update(double lr_override) {
  const Td3Config& td3 = cfg_.td3;
  const int B = td3.batch;
  if (buffer_.size() < static_cast<std::size_t>(B)) return;
  const double lr = lr_override >= 0.0 ? lr_override : td3.lr;

  MatrixXd S(kMdpStateDim, B), S2(kMdpStateDim, B);
  MatrixXd A(kActionDim, B);
  VectorXd R(B);
  VectorXd not_done(B);
  for (int i = 0; i < B; ++i) {
    const TransitionSample& t = buffer_.sample(rng_);
    S.col(i) = t.s.cast<double>();
    S2.col(i) = t.s2.cast<double>();
    A.col(i) = t.a.cast<double>();
    R[i] = t.r;
    not_done[i] = t.done ? 0.0 : 1.0;
  }

  // target action with clipped smoothing noise (mean networks)
  MatrixXd A2 = mlp_forward_batch(actor_target_, S2, nullptr)
                    .array()
                    .tanh()
                    .matrix();
  for (int i = 0; i < B; ++i)
    for (int k = 0; k < kActionDim; ++k) {
      double n = std::clamp(rng_.normal() * td3.target_noise,
                            -td3.noise_clip, td3.noise_clip);
      A2(k, i) = std::clamp(A2(k, i) + n, -1.0, 1.0);
    }
  MatrixXd SA2(kMdpStateDim + kActionDim, B);
  SA2 << S2, A2;
  VectorXd q1t = mlp_forward_batch(critic1_target_, SA2, nullptr).row(0);
  VectorXd q2t = mlp_forward_batch(critic2_target_, SA2, nullptr).row(0);
  VectorXd y = R + td3.gamma_d * not_done.cwiseProduct(q1t.cwiseMin(q2t));

  // critic regression on y (dropout active on the live networks)
  MatrixXd SA(kMdpStateDim + kActionDim, B);
  SA << S, A;
  BatchMasks am, c1m, c2m;
  actor_critic_masks(B, am, c1m, c2m);
  for (auto* net : {&vf_.critic1, &vf_.critic2}) {
    BatchMasks& cm = (net == &vf_.critic1) ? c1m : c2m;
    BatchTrace trace;
    MatrixXd q = mlp_forward_batch(*net, SA, &cm, &trace);
    MatrixXd dq = (2.0 / B) * (q.row(0).transpose() - y).transpose();
    MlpGrads g = mlp_backward_batch(*net, trace, &cm, dq, nullptr);
    adam_step(*net, g,
              net == &vf_.critic1 ? critic1_opt_ : critic2_opt_, lr);
  }

  ++update_count_;
  if (update_count_ % td3.policy_delay == 0) {
    // actor ascends Q1(s, pi(s))
    BatchTrace atrace;
    MatrixXd pre = mlp_forward_batch(vf_.actor, S, &am, &atrace);
    MatrixXd Apre = pre.array().tanh().matrix();
    MatrixXd SApi(kMdpStateDim + kActionDim, B);
    SApi << S, Apre;
    BatchTrace ctrace;
    MatrixXd q = mlp_forward_batch(vf_.critic1, SApi, &c1m, &ctrace);
    stats_.last_actor_loss = -q.row(0).mean();
    MatrixXd dq = MatrixXd::Constant(1, B, -1.0 / B);
    MatrixXd dSA;
    mlp_backward_batch(vf_.critic1, ctrace, &c1m, dq, &dSA);
    MatrixXd dA = dSA.bottomRows(kActionDim);
    MatrixXd dpre =
        dA.cwiseProduct((1.0 - Apre.array().square()).matrix());
    MlpGrads ag = mlp_backward_batch(vf_.actor, atrace, &am, dpre, nullptr);
    adam_step(vf_.actor, ag, actor_opt_, lr);

    soft_update(actor_target_, vf_.actor, td3.tau);
    soft_update(critic1_target_, vf_.critic1, td3.tau);
    soft_update(critic2_target_, vf_.critic2, td3.tau);

    actor_loss_trail_.push_back(stats_.last_actor_loss);
    if (static_cast<int>(actor_loss_trail_.size()) >
        cfg_.td3.plateau_window)
      actor_loss_trail_.pop_front();
  }
}

inline void Td3Trainer::train(
    const std::function<void(const TrainStats&)>& progress) {
  if (!initialized_) init_networks();
  const Td3Config& td3 = cfg_.td3;
  long actor_updates_at_window = 0;
  double best_window = std::numeric_limits<double>::infinity();
  int windows_without_improvement = 0;

  while (stats_.steps < td3.max_steps) {
    Environment env = sample_environment(env_rng_, ctx_.env_sampler);
    VehicleState x = env.start;
    LidarScan scan = raycast_scan(env, {x.x, x.y, x.theta}, ctx_.lidar);
    MdpVec s = mdp_state(x, scan, env.goal, ctx_.mdp);
    EpisodeEnd end = EpisodeEnd::kTimeLimit;
    for (int step = 0; step < td3.episode_max_steps; ++step) {
      bool warm = stats_.steps < td3.warmup_steps;
      Vec2 a;
      if (warm) {
        a = Vec2(rng_.uniform(-1, 1), rng_.uniform(-1, 1));
      } else {
        a = actor_action(vf_.actor, s);
        a[0] = std::clamp(a[0] + rng_.normal() * td3.expl_noise, -1.0, 1.0);
        a[1] = std::clamp(a[1] + rng_.normal() * td3.expl_noise, -1.0, 1.0);
      }
      ControlInput u = vf_.to_control(a);
      VehicleState x2 =
          ctx_.model.step_stochastic(x, u, ctx_.noise, rng_, ctx_.dt);
      bool viol = ctx_.violated(x2, env);
      bool goal = !viol && goal_reached(x2, env.goal, ctx_.goal_radius);
      double r = reward(x, u, env.goal, viol, ctx_.q_xy, ctx_.gamma_r);
      LidarScan scan2 =
          raycast_scan(env, {x2.x, x2.y, x2.theta}, ctx_.lidar);
      MdpVec s2 = mdp_state(x2, scan2, env.goal, ctx_.mdp);
      TransitionSample t;
      t.s = s.cast<float>();
      t.s2 = s2.cast<float>();
      t.a = a.cast<float>();
      t.r = static_cast<float>(r);
      t.done = viol || goal;
      buffer_.push(t);
      ++stats_.steps;

      if (!warm && stats_.steps % td3.update_every == 0) update();

      if (!std::isfinite(stats_.last_actor_loss))
        throw std::runtime_error("td3 training diverged: non-finite loss");

      x = x2;
      s = s2;
      if (viol) { end = EpisodeEnd::kViolation; break; }
      if (goal) { end = EpisodeEnd::kGoal; break; }
      if (stats_.steps >= td3.max_steps) break;
    }
    ++stats_.episodes;
    if (end == EpisodeEnd::kGoal) ++stats_.goal_episodes;
    if (end == EpisodeEnd::kViolation) ++stats_.violation_episodes;

    // plateau check on trailing actor-loss windows
    long actor_updates =
        update_count_ / std::max(1, td3.policy_delay);
    if (static_cast<int>(actor_loss_trail_.size()) >= td3.plateau_window &&
        actor_updates >= actor_updates_at_window + td3.plateau_window) {
      actor_updates_at_window = actor_updates;
      double mean = 0.0;
      for (double v : actor_loss_trail_) mean += v;
      mean /= static_cast<double>(actor_loss_trail_.size());
      stats_.actor_loss_windows.push_back(mean);
      double required =
          best_window - td3.plateau_tol * std::abs(best_window);
      if (mean < required) {
        best_window = mean;
        windows_without_improvement = 0;
      } else {
        ++windows_without_improvement;
      }
      if (windows_without_improvement >= td3.plateau_patience) {
        stats_.plateau_stopped = true;
        break;
      }
    }
    if (progress) progress(stats_);
  }
}

inline void Td3Trainer::save_checkpoint(const std::filesystem::path& dir,
                                        std::uint64_t cfg_hash) const {
  std::filesystem::create_directories(dir);
  save_weights(vf_.actor, dir / "actor.mlp");
  save_weights(vf_.critic1, dir / "critic1.mlp");
  save_weights(vf_.critic2, dir / "critic2.mlp");
  save_weights(actor_target_, dir / "actor_target.mlp");
  save_weights(critic1_target_, dir / "critic1_target.mlp");
  save_weights(critic2_target_, dir / "critic2_target.mlp");
  nlohmann::json meta = {
      {"steps", stats_.steps},
      {"episodes", stats_.episodes},
      {"goal_episodes", stats_.goal_episodes},
      {"violation_episodes", stats_.violation_episodes},
      {"config_hash", cfg_hash},
      {"wheelbase", ctx_.model.wheelbase()},
      {"plateau_stopped", stats_.plateau_stopped},
      {"actor_loss_windows", stats_.actor_loss_windows},
  };
  std::ofstream out(dir / "training_meta.json");
  out << meta.dump(2) << "\n";
}

inline ValueFunction load_value_function(const std::filesystem::path& dir,
                                         double dropout = 0.1,
                                         double accel_scale = 1.0,
                                         double steer_rate_scale = 1.0) {
  ValueFunction vf;
  vf.actor = load_weights(dir / "actor.mlp", dropout);
  vf.critic1 = load_weights(dir / "critic1.mlp", dropout);
  vf.critic2 = load_weights(dir / "critic2.mlp", dropout);
  vf.accel_scale = accel_scale;
  vf.steer_rate_scale = steer_rate_scale;
  return vf;
}

}  // namespace pacnav
