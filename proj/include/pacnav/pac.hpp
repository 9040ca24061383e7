#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "pacnav/config.hpp"
#include "pacnav/dynamics.hpp"
#include "pacnav/parallel.hpp"
#include "pacnav/terminal_value.hpp"
#include "pacnav/world.hpp"

namespace pacnav {

// ---------------------------------------------------------------------------
// Surrogate distribution over nominal-control parameter vectors
// ---------------------------------------------------------------------------

/// Diagonal normal over flattened nominal controls (2 per planning step).
struct Surrogate {
  VectorXd mean;
  VectorXd log_var;

  int dim() const { return static_cast<int>(mean.size()); }
  double var(int d) const { return std::exp(log_var[d]); }
  VectorXd variances() const { return log_var.array().exp(); }

  static Surrogate make(const VectorXd& mean, double variance) {
    Surrogate s;
    s.mean = mean;
    s.log_var = VectorXd::Constant(mean.size(), std::log(variance));
    return s;
  }
};

inline double log_density(const Surrogate& nu, const VectorXd& xi) {
  double lp = 0.0;
  for (int d = 0; d < nu.dim(); ++d) {
    double lv = nu.log_var[d];
    double z = xi[d] - nu.mean[d];
    lp += -0.5 * (std::log(2.0 * M_PI) + lv + z * z * std::exp(-lv));
  }
  return lp;
}

/// Order-2 Renyi divergence between diagonal normals, D2(new || old).
/// Requires per-dimension 2 var_old - var_new > 0; throws otherwise.
inline double renyi2_diag_gauss(const Surrogate& nu_new,
                                const Surrogate& nu_old) {
  if (nu_new.dim() != nu_old.dim())
    throw std::invalid_argument("renyi2: dimension mismatch");
  double d2 = 0.0;
  for (int d = 0; d < nu_new.dim(); ++d) {
    double vn = std::exp(nu_new.log_var[d]);
    double vo = std::exp(nu_old.log_var[d]);
    double vstar = 2.0 * vo - vn;
    if (vstar <= 0.0)
      throw std::domain_error("renyi2: infeasible variances (2 vo - vn <= 0)");
    double delta = nu_new.mean[d] - nu_old.mean[d];
    d2 += delta * delta / vstar - 0.5 * std::log(vstar * vn / (vo * vo));
  }
  return d2;
}

// ---------------------------------------------------------------------------
// Sample archive and PAC bounds
// ---------------------------------------------------------------------------

/// One optimization iteration: the distribution sampled from, the raw
/// parameter samples, their realized costs and constraint indicators.
struct IterationBatch {
  Surrogate nu;
  MatrixXd xi;          // dim x M
  VectorXd cost;        // raw (unshifted) costs
  VectorXd violated;    // 0/1 indicators
  VectorXd logp_self;   // log p(xi_j | nu) cached at sampling time
};

/// Archive of the current planning interval. Costs are stored raw; the
/// bounds require nonnegative costs, so callers pass a shift (see
/// bound_shift) that is subtracted before any bound computation.
struct SampleArchive {
  std::vector<IterationBatch> iters;
  double shift_eps = 1e-3;

  void push(const Surrogate& nu, MatrixXd xi, VectorXd cost,
            VectorXd violated) {
    IterationBatch b;
    b.nu = nu;
    b.logp_self.resize(xi.cols());
    for (int j = 0; j < xi.cols(); ++j)
      b.logp_self[j] = log_density(nu, xi.col(j));
    b.xi = std::move(xi);
    b.cost = std::move(cost);
    b.violated = std::move(violated);
    iters.push_back(std::move(b));
  }

  int total_samples() const {
    int n = 0;
    for (const auto& b : iters) n += static_cast<int>(b.cost.size());
    return n;
  }

  double min_cost() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& b : iters) m = std::min(m, b.cost.minCoeff());
    return m;
  }

  /// Shift that keeps every archived cost at least eps above zero.
  double bound_shift() const { return min_cost() - shift_eps; }

  /// Mean cost after the shift; the normalization constant w.
  double mean_shifted_cost(double shift) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& b : iters) {
      sum += (b.cost.array() - shift).sum();
      n += static_cast<int>(b.cost.size());
    }
    return n > 0 ? sum / n : 0.0;
  }
};

inline VectorXd importance_weights(const IterationBatch& b,
                                   const Surrogate& nu) {
  VectorXd w(b.xi.cols());
  for (int j = 0; j < b.xi.cols(); ++j)
    w[j] = std::exp(log_density(nu, b.xi.col(j)) - b.logp_self[j]);
  return w;
}

struct BoundValue {
  double value = 0.0;
  double alpha = 0.0;
};

namespace detail {

/// Shared pieces of the bound computation at a candidate nu:
/// the importance-weighted empirical means and the divergence terms.
struct BoundTerms {
  double j_hat = 0.0;   // normalized shifted cost mean
  double c_hat = 0.0;   // violation mean
  double d_cost = 0.0;  // (1/2L) sum b_i^2 e^{D2}, normalized units
  double d_con = 0.0;   // (1/2L) sum e^{D2}
  int n_total = 0;
  int n_iters = 0;
};

inline BoundTerms bound_terms(const SampleArchive& a, const Surrogate& nu,
                              double w, double shift) {
  BoundTerms t;
  t.n_iters = static_cast<int>(a.iters.size());
  for (const auto& b : a.iters) {
    VectorXd rho = importance_weights(b, nu);
    VectorXd shifted = (b.cost.array() - shift) / w;
    t.j_hat += rho.dot(shifted);
    t.c_hat += rho.dot(b.violated);
    double bmax = shifted.maxCoeff();
    double d2 = renyi2_diag_gauss(nu, b.nu);
    t.d_cost += bmax * bmax * std::exp(d2);
    t.d_con += std::exp(d2);
    t.n_total += static_cast<int>(b.cost.size());
  }
  t.j_hat /= t.n_total;
  t.c_hat /= t.n_total;
  t.d_cost /= 2.0 * t.n_iters;
  t.d_con /= 2.0 * t.n_iters;
  return t;
}

}  // namespace detail

/// Cost bound with normalization constant w: normalized costs and
/// per-iteration maxima feed the empirical term, the divergence term, and
/// the closed-form optimal alpha; the result is scaled back by w. The
/// caller guarantees costs minus shift are nonnegative; the bound is in
/// shifted cost units.
inline BoundValue pac_cost_bound(const SampleArchive& a, const Surrogate& nu,
                                 double w, double delta, double shift = 0.0) {
  if (a.iters.empty()) throw std::invalid_argument("pac_cost_bound: empty");
  if (w <= 0.0) throw std::invalid_argument("pac_cost_bound: w must be > 0");
  detail::BoundTerms t = detail::bound_terms(a, nu, w, shift);
  double ln1d = std::log(1.0 / delta);
  double alpha = std::sqrt(ln1d / (t.n_total * t.d_cost));
  double phi = ln1d / (alpha * t.n_total);
  BoundValue out;
  out.alpha = alpha;
  out.value = w * (t.j_hat + alpha * t.d_cost + phi);
  return out;
}

/// Constraint-probability bound: indicator costs, b_i = 1, no
/// normalization; clamped into [0, 1].
inline BoundValue pac_constraint_bound(const SampleArchive& a,
                                       const Surrogate& nu, double delta) {
  if (a.iters.empty())
    throw std::invalid_argument("pac_constraint_bound: empty");
  detail::BoundTerms t = detail::bound_terms(a, nu, 1.0, 0.0);
  double ln1d = std::log(1.0 / delta);
  double alpha = std::sqrt(ln1d / (t.n_total * t.d_con));
  double phi = ln1d / (alpha * t.n_total);
  BoundValue out;
  out.alpha = alpha;
  out.value = std::clamp(t.c_hat + alpha * t.d_con + phi, 0.0, 1.0);
  return out;
}

/// The optimizer's objective splits one alpha across both bounds, which
/// is where the cost normalization genuinely tightens the combination:
/// F(alpha) = w (J_hat + alpha d_cost + Phi) + gamma (C_hat + alpha d_con
/// + Phi). Returns the minimizing alpha and both bound values at it.
struct CombinedBound {
  double jplus = 0.0;
  double cplus = 0.0;
  double alpha = 0.0;
  double objective = 0.0;
};

inline CombinedBound pac_combined_bound(const SampleArchive& a,
                                        const Surrogate& nu, double w,
                                        double delta, double gamma,
                                        double shift = 0.0) {
  detail::BoundTerms t = detail::bound_terms(a, nu, w, shift);
  double ln1d = std::log(1.0 / delta);
  double num = (w + gamma) * ln1d / t.n_total;
  double den = w * t.d_cost + gamma * t.d_con;
  double alpha = std::sqrt(num / den);
  double phi = ln1d / (alpha * t.n_total);
  CombinedBound out;
  out.alpha = alpha;
  out.jplus = w * (t.j_hat + alpha * t.d_cost + phi);
  out.cplus = std::clamp(t.c_hat + alpha * t.d_con + phi, 0.0, 1.0);
  out.objective = out.jplus + gamma * out.cplus;
  return out;
}

// ---------------------------------------------------------------------------
// Surrogate optimization
// ---------------------------------------------------------------------------

struct PacBoundReport {
  double jplus = 0.0;
  double cplus = 0.0;
  double alpha_cost = 0.0;
  double alpha_constraint = 0.0;
  double w = 1.0;
  double shift = 0.0;
  double delta = 0.05;
  double mc_cost = 0.0;       // fresh Monte Carlo mean shifted cost
  double mc_violation = 0.0;  // fresh Monte Carlo violation rate
  int mc_samples = 0;
  double wall_ms = 0.0;
};

struct OptimizeResult {
  Surrogate nu;
  PacBoundReport report;
  SampleArchive archive;
};

/// Evaluates a batch of parameter samples: fills cost and violation
/// vectors, one entry per column. iter_tag distinguishes rng streams
/// across iterations; implementations derive per-sample streams from it
/// so results are independent of threading.
using BatchEval = std::function<void(const MatrixXd& xi, std::uint64_t iter_tag,
                                     VectorXd& cost, VectorXd& violated)>;

namespace detail {

struct BoundGradient {
  VectorXd mean;
  VectorXd log_var;
};

/// Analytic gradient of the combined objective at fixed alpha. Works in
/// normalized units internally; the returned gradient is of
/// w J~+(nu) + gamma C+(nu).
inline BoundGradient combined_gradient(const SampleArchive& a,
                                       const Surrogate& nu, double w,
                                       double gamma, double alpha,
                                       double shift) {
  const int dim = nu.dim();
  BoundGradient g{VectorXd::Zero(dim), VectorXd::Zero(dim)};
  int n_total = a.total_samples();
  int L = static_cast<int>(a.iters.size());
  VectorXd var = nu.variances();
  for (const auto& b : a.iters) {
    const int M = static_cast<int>(b.xi.cols());
    VectorXd rho = importance_weights(b, nu);
    VectorXd shifted = (b.cost.array() - shift) / w;
    // empirical-term gradients through the importance weights
    for (int j = 0; j < M; ++j) {
      double coef =
          (w * shifted[j] + gamma * b.violated[j]) * rho[j] / n_total;
      for (int d = 0; d < dim; ++d) {
        double z = b.xi(d, j) - nu.mean[d];
        g.mean[d] += coef * z / var[d];
        g.log_var[d] += coef * (-0.5) * (1.0 - z * z / var[d]);
      }
    }
    // divergence-term gradients
    double bmax = shifted.maxCoeff();
    double d2 = renyi2_diag_gauss(nu, b.nu);
    double dcoef = alpha * std::exp(d2) *
                   (w * bmax * bmax + gamma) / (2.0 * L);
    for (int d = 0; d < dim; ++d) {
      double vo = std::exp(b.nu.log_var[d]);
      double vstar = 2.0 * vo - var[d];
      double delta_mu = nu.mean[d] - b.nu.mean[d];
      g.mean[d] += dcoef * 2.0 * delta_mu / vstar;
      g.log_var[d] +=
          dcoef * (delta_mu * delta_mu * var[d] / (vstar * vstar) +
                   var[d] / (2.0 * vstar) - 0.5);
    }
  }
  return g;
}

/// Keeps every archived divergence feasible with margin and enforces the
/// variance floor.
inline void project_variances(Surrogate& nu, const SampleArchive& a,
                              double var_floor) {
  for (int d = 0; d < nu.dim(); ++d) {
    double cap = std::numeric_limits<double>::infinity();
    for (const auto& b : a.iters)
      cap = std::min(cap, 2.0 * std::exp(b.nu.log_var[d]));
    double v = std::exp(nu.log_var[d]);
    v = std::min(v, 0.999 * cap);
    v = std::max(v, var_floor);
    nu.log_var[d] = std::log(v);
  }
}

}  // namespace detail

/// Iterative surrogate optimization: sample, archive, descend the
/// combined PAC bound with analytic gradients (alpha re-optimized in
/// closed form each step), project variances into the divergence-feasible
/// region. Returns the final distribution, bounds at per-bound optimal
/// alphas, and a fresh Monte Carlo validation draw.
inline OptimizeResult optimize_surrogate(const Surrogate& init,
                                         const BatchEval& eval,
                                         const PacSettings& pac,
                                         std::uint64_t seed) {
  const int dim = init.dim();
  const int M = pac.samples;
  Surrogate nu = init;
  OptimizeResult out;
  out.archive.shift_eps = pac.shift_eps;

  VectorXd mom_mean = VectorXd::Zero(dim);
  VectorXd mom_logvar = VectorXd::Zero(dim);

  auto sample_batch = [&](const Surrogate& from, std::uint64_t tag) {
    MatrixXd xi(dim, M);
    VectorXd sigma = from.variances().cwiseSqrt();
    for (int j = 0; j < M; ++j) {
      RngStream rng(mix_seed({seed, 0x5a11, tag, (std::uint64_t)j}));
      for (int d = 0; d < dim; ++d)
        xi(d, j) = from.mean[d] + sigma[d] * rng.normal();
    }
    return xi;
  };

  for (int it = 0; it < pac.iterations; ++it) {
    MatrixXd xi = sample_batch(nu, static_cast<std::uint64_t>(it));
    VectorXd cost(M), violated(M);
    eval(xi, static_cast<std::uint64_t>(it), cost, violated);
    out.archive.push(nu, std::move(xi), std::move(cost), std::move(violated));

    double shift = out.archive.bound_shift();
    double w = out.archive.mean_shifted_cost(shift);
    for (int gstep = 0; gstep < pac.grad_steps; ++gstep) {
      CombinedBound cb =
          pac_combined_bound(out.archive, nu, w, pac.delta,
                             pac.constraint_weight, shift);
      detail::BoundGradient g = detail::combined_gradient(
          out.archive, nu, w, pac.constraint_weight, cb.alpha, shift);
      double norm = std::sqrt(g.mean.squaredNorm() + g.log_var.squaredNorm());
      if (norm > pac.grad_clip) {
        g.mean *= pac.grad_clip / norm;
        g.log_var *= pac.grad_clip / norm;
      }
      mom_mean = 0.9 * mom_mean + 0.1 * g.mean;
      mom_logvar = 0.9 * mom_logvar + 0.1 * g.log_var;
      nu.mean -= pac.lr_mean * mom_mean;
      nu.log_var -= pac.lr_logvar * mom_logvar;
      detail::project_variances(nu, out.archive, pac.var_floor);
    }
  }

  double shift = out.archive.bound_shift();
  double w = out.archive.mean_shifted_cost(shift);
  BoundValue jb = pac_cost_bound(out.archive, nu, w, pac.delta, shift);
  BoundValue cb = pac_constraint_bound(out.archive, nu, pac.delta);
  PacBoundReport& rep = out.report;
  rep.jplus = jb.value;
  rep.cplus = cb.value;
  rep.alpha_cost = jb.alpha;
  rep.alpha_constraint = cb.alpha;
  rep.w = w;
  rep.shift = shift;
  rep.delta = pac.delta;

  if (pac.mc_validate) {
    MatrixXd xi = sample_batch(nu, 0xfeedull);
    VectorXd cost(M), violated(M);
    eval(xi, 0xfeedull, cost, violated);
    rep.mc_cost = (cost.array() - shift).mean();
    rep.mc_violation = violated.mean();
    rep.mc_samples = M;
  }
  out.nu = nu;
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory evaluation for the navigation problem
// ---------------------------------------------------------------------------

/// Read-only snapshot shared by all rollout workers within one planning
/// interval.
struct PlanningContext {
  BicycleModel model{0.33};
  NoiseModel noise;
  double dt = 0.1;
  int horizon = 12;
  Mat55 q_lqr = Vec5(10, 10, 1, 1, 1).asDiagonal();
  Mat22 r_lqr = Mat22::Identity();
  Mat55 qf_lqr = Vec5(10, 10, 1, 1, 1).asDiagonal();
  Vec5 q_cost = (Vec5() << 0.01, 0.01, 0, 0, 0).finished();
  Vec5 qf_quad = (Vec5() << 1, 1, 0, 0, 0).finished();
  TerminalMode mode = TerminalMode::kQuadratic;
  double robot_radius = 0.2;
  double v_min = -1.0;
  double v_max = 3.0;
  MdpParams mdp;
  LidarConfig lidar;
  VehicleState goal;
  const ValueFunction* vf = nullptr;

  static PlanningContext from(const AppConfig& cfg, const VehicleState& goal,
                              const ValueFunction* vf) {
    PlanningContext c;
    c.model = cfg.dynamics.model();
    c.noise = cfg.dynamics.noise();
    c.dt = cfg.dynamics.dt;
    c.horizon = cfg.pac.horizon_steps;
    c.q_lqr = diag5(cfg.pac.q_lqr).asDiagonal();
    c.r_lqr = diag2(cfg.pac.r_lqr).asDiagonal();
    c.qf_lqr = diag5(cfg.pac.qf_lqr).asDiagonal();
    c.q_cost = diag5(cfg.pac.q_cost);
    c.qf_quad = diag5(cfg.pac.qf_quad);
    c.mode = cfg.pac.mode();
    c.robot_radius = cfg.environment.robot_radius;
    c.v_min = cfg.dynamics.v_min;
    c.v_max = cfg.dynamics.v_max;
    c.mdp = MdpParams::from(cfg);
    c.lidar = cfg.lidar;
    c.goal = goal;
    c.vf = vf;
    if (c.mode == TerminalMode::kLearnedVf && vf == nullptr)
      throw std::invalid_argument(
          "PlanningContext: LEARNED_VF mode requires a value function");
    return c;
  }

  std::vector<ControlInput> controls_from(const VectorXd& xi) const {
    std::vector<ControlInput> us(horizon);
    for (int t = 0; t < horizon; ++t)
      us[t] = model.limits().clamp({xi[2 * t], xi[2 * t + 1]});
    return us;
  }

  FeedbackPolicy policy_from(const VectorXd& xi, const VehicleState& x0,
                             int substeps) const {
    Trajectory nominal = model.rollout_nominal(x0, controls_from(xi), dt);
    std::vector<Mat25> gains = model.tvlqr_gains(nominal, q_lqr, r_lqr,
                                                 qf_lqr);
    return FeedbackPolicy{std::move(nominal), std::move(gains), substeps};
  }

  double running_cost(const VehicleState& s) const {
    Vec5 e = s.vec() - goal.vec();
    return e.dot(q_cost.asDiagonal() * e);
  }
  double quad_terminal(const VehicleState& s) const {
    Vec5 e = s.vec() - goal.vec();
    return e.dot(qf_quad.asDiagonal() * e);
  }
};

struct TrajectoryEval {
  double cost = 0.0;
  bool violated = false;
};

/// One noise realization and (in learned-value mode) one dropout mask
/// evaluate a sampled nominal-control vector: build the nominal, close the
/// loop with TVLQR, roll out stochastically, then cost and constrain the
/// realized trajectory. The same mask serves V(x0), the terminal cost, and
/// the improvement check.
inline TrajectoryEval evaluate_trajectory(const VectorXd& xi,
                                          const VehicleState& x0,
                                          const LidarScan& scan0,
                                          std::span<const ObstaclePoint> points,
                                          const PlanningContext& ctx,
                                          RngStream& rng) {
  FeedbackPolicy policy = ctx.policy_from(xi, x0, 1);
  Trajectory real = ctx.model.rollout_policy(policy, x0, ctx.noise, rng);

  TrajectoryEval out;
  for (int i = 0; i < ctx.horizon; ++i)
    out.cost += ctx.running_cost(real.states[i]);
  for (const VehicleState& s : real.states)
    if (check_constraint(s, points, ctx.robot_radius, ctx.v_min, ctx.v_max)) {
      out.violated = true;
      break;
    }

  const VehicleState& xterm = real.states.back();
  if (ctx.mode == TerminalMode::kQuadratic) {
    out.cost += ctx.quad_terminal(xterm);
  } else {
    MaskPair masks = sample_mask_pair(*ctx.vf, rng);
    ProjectedScan proj =
        project_scan(points, {xterm.x, xterm.y, xterm.theta}, ctx.lidar);
    double v0 = evaluate_value(*ctx.vf, x0, scan0, ctx.goal, ctx.mdp, &masks);
    double vt = evaluate_value(*ctx.vf, xterm, proj.as_scan(), ctx.goal,
                               ctx.mdp, &masks);
    out.cost += -vt;
    if (vt < v0) out.violated = true;
  }
  return out;
}

/// Batched evaluator used by the optimizer: scalar rollouts in parallel,
/// then the value-function evaluations as batched matrix products. Sample
/// j under iteration tag i draws from the same stream as the per-sample
/// path, so both produce identical results.
class TrajectoryBatchEval {
 public:
  TrajectoryBatchEval(const PlanningContext& ctx, const VehicleState& x0,
                      const LidarScan& scan0, std::uint64_t seed)
      : ctx_(ctx), x0_(x0), scan0_(scan0), seed_(seed) {
    points_ = extract_obstacle_points(scan0, {x0.x, x0.y, x0.theta},
                                      ctx.lidar);
  }

  std::uint64_t sample_seed(std::uint64_t iter_tag, int j) const {
    return mix_seed({seed_, 0xeva1, iter_tag, (std::uint64_t)j});
  }

  const std::vector<ObstaclePoint>& points() const { return points_; }

  void operator()(const MatrixXd& xi, std::uint64_t iter_tag, VectorXd& cost,
                  VectorXd& violated) const {
    const int M = static_cast<int>(xi.cols());
    cost.resize(M);
    violated.resize(M);
    if (ctx_.mode == TerminalMode::kQuadratic) {
      parallel_for(M, [&](int j) {
        RngStream rng(sample_seed(iter_tag, j));
        TrajectoryEval e =
            evaluate_trajectory(xi.col(j), x0_, scan0_, points_, ctx_, rng);
        cost[j] = e.cost;
        violated[j] = e.violated ? 1.0 : 0.0;
      });
      return;
    }

    // learned-value mode: defer network evaluations and batch them
    const ValueFunction& vf = *ctx_.vf;
    MatrixXd sterm(kMdpStateDim, M);
    BatchMasks amasks, cmasks;
    for (int l = 0; l + 1 < vf.actor.num_layers(); ++l)
      amasks.keep.push_back(MatrixXd(vf.actor.dims[l + 1], M));
    for (int l = 0; l + 1 < vf.critic1.num_layers(); ++l)
      cmasks.keep.push_back(MatrixXd(vf.critic1.dims[l + 1], M));
    MdpVec s0 = mdp_state(x0_, scan0_, ctx_.goal, ctx_.mdp);
    std::vector<double> run_cost(M);
    std::vector<char> run_violated(M);

    parallel_for(M, [&](int j) {
      RngStream rng(sample_seed(iter_tag, j));
      FeedbackPolicy policy = ctx_.policy_from(xi.col(j), x0_, 1);
      Trajectory real = ctx_.model.rollout_policy(policy, x0_, ctx_.noise,
                                                  rng);
      double c = 0.0;
      for (int i = 0; i < ctx_.horizon; ++i)
        c += ctx_.running_cost(real.states[i]);
      bool viol = false;
      for (const VehicleState& s : real.states)
        if (check_constraint(s, points_, ctx_.robot_radius, ctx_.v_min,
                             ctx_.v_max)) {
          viol = true;
          break;
        }
      run_cost[j] = c;
      run_violated[j] = viol ? 1 : 0;
      MaskPair masks = sample_mask_pair(vf, rng);
      for (std::size_t l = 0; l < masks.actor.keep.size(); ++l)
        amasks.keep[l].col(j) = masks.actor.keep[l];
      for (std::size_t l = 0; l < masks.critic.keep.size(); ++l)
        cmasks.keep[l].col(j) = masks.critic.keep[l];
      const VehicleState& xt = real.states.back();
      ProjectedScan proj =
          project_scan(points_, {xt.x, xt.y, xt.theta}, ctx_.lidar);
      sterm.col(j) =
          mdp_state(xt, proj.as_scan(), ctx_.goal, ctx_.mdp);
    });

    MatrixXd s0rep = s0.replicate(1, M);
    VectorXd v0 = value_batch(vf, s0rep, &amasks, &cmasks);
    VectorXd vt = value_batch(vf, sterm, &amasks, &cmasks);
    for (int j = 0; j < M; ++j) {
      cost[j] = run_cost[j] - vt[j];
      violated[j] = (run_violated[j] || vt[j] < v0[j]) ? 1.0 : 0.0;
    }
  }

 private:
  const PlanningContext& ctx_;
  VehicleState x0_;
  LidarScan scan0_;
  std::uint64_t seed_;
  std::vector<ObstaclePoint> points_;
};

// ---------------------------------------------------------------------------
// Receding-horizon controller
// ---------------------------------------------------------------------------

struct ControllerState {
  VehicleState x;
  std::optional<Surrogate> prev_nu;
  int interval = 0;
  std::uint64_t seed = 0;  // per-trial planning seed base
  RngStream exec_rng{0};
};

struct IntervalRecord {
  int interval = 0;
  PacBoundReport report;
  Surrogate nu;
  std::vector<VehicleState> executed;  // substep states, initial included
};

/// Warm start: previous mean advanced by the executed control steps with
/// the last control repeated; variances reset to the initial spread.
inline Surrogate warm_start(const std::optional<Surrogate>& prev, int dim,
                            int exec_steps, double init_var) {
  VectorXd mean = VectorXd::Zero(dim);
  if (prev) {
    const VectorXd& pm = prev->mean;
    int shift = 2 * exec_steps;
    for (int d = 0; d < dim; ++d)
      mean[d] = (d + shift < dim) ? pm[d + shift]
                                  : pm[dim - 2 + (d % 2)];
  }
  return Surrogate::make(mean, init_var);
}

/// One planning interval: raycast, optimize the surrogate from a warm
/// start, sample one parameter vector from the result, and execute it at
/// the fine control rate on the true stochastic world.
inline IntervalRecord receding_horizon_step(ControllerState& cs,
                                            const Environment& env,
                                            const AppConfig& cfg,
                                            const ValueFunction* vf) {
  auto t0 = std::chrono::steady_clock::now();
  const PacSettings& pac = cfg.pac;
  PlanningContext ctx = PlanningContext::from(cfg, env.goal, vf);
  LidarScan scan = raycast_scan(env, {cs.x.x, cs.x.y, cs.x.theta}, ctx.lidar);
  TrajectoryBatchEval eval(ctx, cs.x, scan,
                           mix_seed({cs.seed, (std::uint64_t)cs.interval}));
  Surrogate init = warm_start(cs.prev_nu, 2 * pac.horizon_steps,
                              pac.exec_steps, pac.init_var);
  OptimizeResult opt = optimize_surrogate(
      init, std::cref(eval), pac,
      mix_seed({cs.seed, (std::uint64_t)cs.interval, 0x0b7}));

  IntervalRecord rec;
  rec.interval = cs.interval;
  rec.nu = opt.nu;
  rec.report = opt.report;

  // execute one sampled policy for the replanning period
  VectorXd xi(opt.nu.dim());
  VectorXd sigma = opt.nu.variances().cwiseSqrt();
  for (int d = 0; d < opt.nu.dim(); ++d)
    xi[d] = opt.nu.mean[d] + sigma[d] * cs.exec_rng.normal();
  FeedbackPolicy policy = ctx.policy_from(xi, cs.x, pac.substeps);
  rec.executed = ctx.model.execute_policy(policy, cs.x, ctx.noise,
                                          cs.exec_rng, pac.exec_steps);
  cs.x = rec.executed.back();
  cs.prev_nu = opt.nu;
  ++cs.interval;
  auto t1 = std::chrono::steady_clock::now();
  rec.report.wall_ms =
      std::chrono::duration<double, std::milli>(t1 - t0).count();
  return rec;
}

}  // namespace pacnav
