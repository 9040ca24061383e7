#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pacnav/td3.hpp"

using namespace pacnav;

TEST_CASE("mdp state mapping") {
  MdpParams p;
  LidarScan scan;
  scan.ranges.fill(10.0);
  SECTION("midpoint symmetry case") {
    VehicleState x{12.5, 12.5, M_PI / 4.0, 1.0, 0.0};
    VehicleState goal{25.0, 25.0, 0, 0, 0};
    MdpVec s = mdp_state(x, scan, goal, p);
    REQUIRE(s[0] == Catch::Approx(0.5));   // (1 - (-1)) / 4
    REQUIRE(s[1] == Catch::Approx(0.5));   // tan midpoint
    REQUIRE(s[2] == Catch::Approx(0.5));   // 17.68 / 35.36
    REQUIRE(s[3] == Catch::Approx(1.0));   // aligned with goal bearing
    REQUIRE(s[4] == Catch::Approx(0.0).margin(1e-12));
    for (int k = 0; k < kNumBeams; ++k) REQUIRE(s[5 + k] == 1.0);
  }
  SECTION("components stay in their intervals") {
    RngStream rng(3);
    for (int i = 0; i < 100000; ++i) {
      VehicleState x{rng.uniform(-5, 30), rng.uniform(-5, 30),
                     rng.uniform(-10, 10), rng.uniform(-2, 4),
                     rng.uniform(-0.4, 0.4)};
      VehicleState goal{rng.uniform(0, 25), rng.uniform(0, 25), 0, 0, 0};
      LidarScan sc;
      for (auto& r : sc.ranges) r = rng.uniform(0.1, 10.0);
      MdpVec s = mdp_state(x, sc, goal, p);
      for (int k = 0; k < 3; ++k) {
        REQUIRE(s[k] >= 0.0);
        REQUIRE(s[k] <= 1.0);
      }
      REQUIRE(s[3] >= -1.0);
      REQUIRE(s[3] <= 1.0);
      REQUIRE(s[4] >= -1.0);
      REQUIRE(s[4] <= 1.0);
      for (int k = 5; k < kMdpStateDim; ++k) {
        REQUIRE(s[k] >= 0.0);
        REQUIRE(s[k] <= 1.0);
      }
    }
  }
}

TEST_CASE("reward") {
  VehicleState goal{10, 5, 0, 0, 0};
  SECTION("zero at the goal") {
    REQUIRE(reward({10, 5, 1, 2, 0.1}, {}, goal, false, 0.01, 100.0) == 0.0);
  }
  SECTION("quadratic in distance") {
    REQUIRE(reward({0, 5, 0, 0, 0}, {}, goal, false, 0.01, 100.0) ==
            Catch::Approx(-1.0));
  }
  SECTION("violation penalty is additive") {
    double base = reward({3, 1, 0, 0, 0}, {}, goal, false, 0.01, 100.0);
    REQUIRE(reward({3, 1, 0, 0, 0}, {}, goal, true, 0.01, 100.0) ==
            Catch::Approx(base - 100.0));
  }
}

TEST_CASE("replay buffer uniformity") {
  ReplayBuffer buf(1000);
  for (int i = 0; i < 1000; ++i) {
    TransitionSample t;
    t.r = static_cast<float>(i);
    buf.push(t);
  }
  RngStream rng(17);
  std::vector<int> counts(1000, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i)
    counts[static_cast<int>(buf.sample(rng).r)]++;
  double chi2 = 0.0, expect = draws / 1000.0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // Wilson-Hilferty approximation of the chi-square 99th percentile
  double df = 999.0;
  double z = 2.326347874;
  double crit = df * std::pow(1.0 - 2.0 / (9.0 * df) +
                                  z * std::sqrt(2.0 / (9.0 * df)),
                              3.0);
  REQUIRE(chi2 < crit);
}

namespace {

AppConfig tiny_config() {
  AppConfig cfg;
  cfg.td3.hidden = 32;
  cfg.td3.batch = 32;
  cfg.td3.warmup_steps = 50;
  cfg.td3.buffer_capacity = 10000;
  cfg.environment.max_obstacles = 3;
  return cfg;
}

}  // namespace

TEST_CASE("episodes") {
  AppConfig cfg = tiny_config();
  TrainContext ctx = TrainContext::from(cfg);
  RngStream net_rng(1);
  ValueFunction vf;
  std::vector<int> adims = {kMdpStateDim, 16, 16, 2};
  std::vector<int> cdims = {kMdpStateDim + 2, 16, 16, 1};
  vf.actor = make_mlp(adims, net_rng, 0.1);
  vf.critic1 = make_mlp(cdims, net_rng, 0.1);
  vf.critic2 = make_mlp(cdims, net_rng, 0.1);
  for (auto& W : vf.actor.W) W.setZero();
  for (auto& b : vf.actor.b) b.setZero();

  SECTION("goal-adjacent start terminates at the goal") {
    Environment env;
    env.start = VehicleState{10, 10, 0, 0, 0};
    env.goal = VehicleState{10.5, 10, 0, 0, 0};
    RngStream rng(5);
    EpisodeResult res = run_episode(env, vf, rng, ctx);
    REQUIRE(res.end == EpisodeEnd::kGoal);
    REQUIRE(res.transitions.size() <= 5);
  }
  SECTION("wall ahead at speed terminates with a violation") {
    Environment env;
    env.start = VehicleState{10, 10, 0, 3.0, 0};
    env.goal = VehicleState{20, 10, 0, 0, 0};
    env.obstacles = {{10.5, 10, 0.3}, {10.5, 10.6, 0.3}, {10.5, 9.4, 0.3}};
    RngStream rng(5);
    EpisodeResult res = run_episode(env, vf, rng, ctx);
    REQUIRE(res.end == EpisodeEnd::kViolation);
    REQUIRE(res.transitions.size() <= 4);
  }
  SECTION("zero actor in the open runs to the step cap") {
    Environment env;
    env.start = VehicleState{5, 5, 0, 0, 0};
    env.goal = VehicleState{20, 20, 0, 0, 0};
    RngStream rng(5);
    EpisodeResult res = run_episode(env, vf, rng, ctx);
    REQUIRE(res.end == EpisodeEnd::kTimeLimit);
    REQUIRE(res.transitions.size() == 250);
    REQUIRE_FALSE(res.transitions.back().done);  // time limit bootstraps
  }
}

TEST_CASE("actor outputs squash into the action box") {
  RngStream rng(9);
  std::vector<int> adims = {kMdpStateDim, 32, 32, 2};
  for (int trial = 0; trial < 20; ++trial) {
    MlpParams actor = make_mlp(adims, rng, 0.1);
    for (auto& W : actor.W) W *= 50.0;  // exaggerate pre-activations
    MdpVec s;
    for (int i = 0; i < kMdpStateDim; ++i) s[i] = rng.uniform(-1, 1);
    Vec2 a = actor_action(actor, s);
    REQUIRE(a[0] >= -1.0);
    REQUIRE(a[0] <= 1.0);
    REQUIRE(a[1] >= -1.0);
    REQUIRE(a[1] <= 1.0);
  }
}

TEST_CASE("soft updates contract toward the live network") {
  RngStream rng(2);
  std::vector<int> dims = {4, 8, 2};
  MlpParams live = make_mlp(dims, rng, 0.0);
  MlpParams target = make_mlp(dims, rng, 0.0);
  auto dist = [&] {
    double d = 0.0;
    for (int l = 0; l < live.num_layers(); ++l)
      d += (target.W[l] - live.W[l]).squaredNorm() +
           (target.b[l] - live.b[l]).squaredNorm();
    return std::sqrt(d);
  };
  double prev = dist();
  for (int i = 0; i < 50; ++i) {
    soft_update(target, live, 0.005);
    double now = dist();
    REQUIRE(now <= prev + 1e-15);
    prev = now;
  }
  REQUIRE(prev < dist() + 1e-12);
}

TEST_CASE("td3 update") {
  SECTION("target arithmetic") {
    // y = r + gamma_d * min(Q1', Q2') on non-terminal transitions
    REQUIRE(1.0 + 0.99 * std::min(2.0, 3.0) == Catch::Approx(2.98));
  }
  SECTION("learning rate zero leaves parameters unchanged") {
    AppConfig cfg = tiny_config();
    Td3Trainer trainer(cfg, 7);
    trainer.init_networks();
    RngStream rng(3);
    for (int i = 0; i < 200; ++i) {
      TransitionSample t;
      for (int k = 0; k < kMdpStateDim; ++k) {
        t.s[k] = static_cast<float>(rng.uniform(0, 1));
        t.s2[k] = static_cast<float>(rng.uniform(0, 1));
      }
      t.a = Eigen::Vector2f(0.1f, -0.2f);
      t.r = 1.0f;
      trainer.buffer().push(t);
    }
    ValueFunction before = trainer.vf();
    MlpParams at = trainer.actor_target();
    for (int i = 0; i < 5; ++i) trainer.update(0.0);
    for (int l = 0; l < before.actor.num_layers(); ++l) {
      REQUIRE((trainer.vf().actor.W[l] - before.actor.W[l]).norm() == 0.0);
      REQUIRE((trainer.vf().critic1.W[l] - before.critic1.W[l]).norm() == 0.0);
      REQUIRE((trainer.vf().critic2.W[l] - before.critic2.W[l]).norm() == 0.0);
      // targets started equal to live nets, so they must stay put too
      REQUIRE((trainer.actor_target().W[l] - at.W[l]).norm() == 0.0);
    }
  }
  SECTION("degenerate constant-reward MDP converges to c/(1-gamma)") {
    AppConfig cfg = tiny_config();
    cfg.td3.hidden = 32;
    cfg.td3.gamma_d = 0.9;
    cfg.td3.lr = 1e-3;
    cfg.td3.dropout = 0.0;
    cfg.td3.target_noise = 0.0;
    cfg.td3.tau = 0.02;
    Td3Trainer trainer(cfg, 11);
    trainer.init_networks();
    const double c = 0.5;
    RngStream arng(5);
    for (int i = 0; i < 512; ++i) {
      TransitionSample t;
      t.s.setConstant(0.5f);
      t.s2.setConstant(0.5f);
      // cover the whole action box so the bootstrap target is pinned
      t.a = Eigen::Vector2f(static_cast<float>(arng.uniform(-1, 1)),
                            static_cast<float>(arng.uniform(-1, 1)));
      t.r = static_cast<float>(c);
      t.done = false;
      trainer.buffer().push(t);
    }
    for (int i = 0; i < 6000; ++i) trainer.update();
    MdpVec s;
    s.setConstant(0.5);
    Vec2 a = actor_action(trainer.vf().actor, s);
    double q = critic_value(trainer.vf().critic1, s, a);
    REQUIRE(q == Catch::Approx(c / (1.0 - 0.9)).epsilon(0.05));
  }
}

TEST_CASE("value function evaluation") {
  AppConfig cfg = tiny_config();
  RngStream rng(21);
  ValueFunction vf;
  std::vector<int> adims = {kMdpStateDim, 16, 16, 2};
  std::vector<int> cdims = {kMdpStateDim + 2, 16, 16, 1};
  vf.actor = make_mlp(adims, rng, 0.1);
  vf.critic1 = make_mlp(cdims, rng, 0.1);
  vf.critic2 = make_mlp(cdims, rng, 0.1);
  MdpParams mp;
  LidarScan scan;
  scan.ranges.fill(7.0);
  VehicleState x{3, 4, 0.2, 1.0, 0.05};
  VehicleState goal{20, 20, 0, 0, 0};

  SECTION("zero weights give zero value") {
    ValueFunction z = vf;
    for (auto* net : {&z.actor, &z.critic1, &z.critic2}) {
      for (auto& W : net->W) W.setZero();
      for (auto& b : net->b) b.setZero();
    }
    REQUIRE(evaluate_value(z, x, scan, goal, mp) == 0.0);
  }
  SECTION("maskless equals all-ones mask after dropout scaling") {
    // all-ones masks divide kept activations by the keep probability, so
    // scale the comparison through a critic with that factored in
    MaskPair ones{all_ones_mask(vf.actor), all_ones_mask(vf.critic1)};
    double with_mask = evaluate_value(vf, x, scan, goal, mp, &ones);
    // reference from the mlp level
    MdpVec s = mdp_state(x, scan, goal, mp);
    DropoutMask am = all_ones_mask(vf.actor);
    VectorXd pre = mlp_forward(vf.actor, s, &am);
    Vec2 a(std::tanh(pre[0]), std::tanh(pre[1]));
    DropoutMask cm = all_ones_mask(vf.critic1);
    VectorXd in(kMdpStateDim + 2);
    in << s, a;
    REQUIRE(with_mask ==
            Catch::Approx(mlp_forward(vf.critic1, in, &cm)[0]));
  }
  SECTION("batched value matches per-sample evaluation") {
    const int n = 13;
    MatrixXd S(kMdpStateDim, n);
    RngStream srng(4);
    for (int c = 0; c < n; ++c)
      for (int r = 0; r < kMdpStateDim; ++r) S(r, c) = srng.uniform(0, 1);
    RngStream mrng(8);
    BatchMasks am = sample_batch_masks(vf.actor, n, mrng);
    BatchMasks cm = sample_batch_masks(vf.critic1, n, mrng);
    VectorXd v = value_batch(vf, S, &am, &cm);
    for (int c = 0; c < n; ++c) {
      DropoutMask a1, c1;
      for (const auto& m : am.keep) a1.keep.push_back(m.col(c));
      for (const auto& m : cm.keep) c1.keep.push_back(m.col(c));
      MdpVec s = S.col(c);
      Vec2 a = actor_action(vf.actor, s, &a1);
      REQUIRE(v[c] ==
              Catch::Approx(critic_value(vf.critic1, s, a, &c1)).margin(1e-12));
    }
  }
}
