#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pacnav/terminal_value.hpp"

using namespace pacnav;

TEST_CASE("scan projection") {
  LidarConfig cfg;
  SECTION("collinear point lands on the zero-bearing beam") {
    std::vector<ObstaclePoint> pts = {{5.0, 0.0}};
    ProjectedScan ps = project_scan(pts, {4.0, 0.0, 0.0}, cfg);
    for (int k = 0; k < kNumBeams; ++k) {
      if (k == 32)
        REQUIRE(ps.ranges[k] == Catch::Approx(1.0));
      else
        REQUIRE(ps.ranges[k] == 10.0);
    }
  }
  SECTION("no points leaves every beam at max range") {
    ProjectedScan ps = project_scan({}, {1, 2, 0.5}, cfg);
    for (double r : ps.ranges) REQUIRE(r == 10.0);
  }
  SECTION("round trip at the same pose recovers originating beams") {
    RngStream rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
      Environment env;
      int n = rng.uniform_int(1, 8);
      for (int i = 0; i < n; ++i)
        env.obstacles.push_back({rng.uniform(-8, 8), rng.uniform(-8, 8),
                                 rng.uniform(0.25, 1.5)});
      Pose pose{rng.uniform(-2, 2), rng.uniform(-2, 2),
                rng.uniform(-M_PI, M_PI)};
      LidarScan scan = raycast_scan(env, pose, cfg);
      auto pts = extract_obstacle_points(scan, pose, cfg);
      ProjectedScan ps = project_scan(pts, pose, cfg);
      for (int k = 0; k < kNumBeams; ++k) {
        if (scan.ranges[k] >= cfg.max_range) continue;
        // beam may have been overwritten by a nearer conflicting point,
        // but identity projection maps each point back to its own beam
        REQUIRE(ps.ranges[k] <= scan.ranges[k] + 1e-9);
        REQUIRE(std::abs(ps.ranges[k] - scan.ranges[k]) < 1e-9);
      }
    }
  }
  SECTION("nearest-beam assignment stays within half the spacing") {
    RngStream rng(7);
    for (int trial = 0; trial < 2000; ++trial) {
      ObstaclePoint p{rng.uniform(-10, 10), rng.uniform(-10, 10)};
      Pose pose{rng.uniform(-2, 2), rng.uniform(-2, 2),
                rng.uniform(-M_PI, M_PI)};
      double range = std::hypot(p.ox - pose.x, p.oy - pose.y);
      if (range < 0.1 || range > 9.9) continue;
      ProjectedScan ps = project_scan(std::vector<ObstaclePoint>{p}, pose);
      int k = -1;
      for (int i = 0; i < kNumBeams; ++i)
        if (ps.ranges[i] < 10.0) k = i;
      REQUIRE(k >= 0);
      double bearing =
          wrap_angle(std::atan2(p.oy - pose.y, p.ox - pose.x) - pose.theta);
      REQUIRE(std::abs(wrap_angle(bearing - beam_bearing(k))) <=
              M_PI / kNumBeams + 1e-12);
    }
  }
  SECTION("minimum range wins beam conflicts") {
    std::vector<ObstaclePoint> pts = {{5.0, 0.0}, {3.0, 0.001}};
    ProjectedScan ps = project_scan(pts, {0, 0, 0});
    REQUIRE(ps.ranges[32] == Catch::Approx(std::hypot(3.0, 0.001)));
  }
  SECTION("translation equivariance") {
    // grid coordinates keep the translated differences exactly
    // representable, so the invariance holds bit for bit
    RngStream rng(11);
    std::vector<ObstaclePoint> pts;
    for (int i = 0; i < 20; ++i)
      pts.push_back({0.25 * rng.uniform_int(-20, 20),
                     0.25 * rng.uniform_int(-20, 20)});
    Pose pose{0.25, -0.75, 1.1};
    ProjectedScan a = project_scan(pts, pose);
    double tx = 4.25, ty = -1.75;
    std::vector<ObstaclePoint> moved;
    for (auto& p : pts) moved.push_back({p.ox + tx, p.oy + ty});
    ProjectedScan b =
        project_scan(moved, {pose.x + tx, pose.y + ty, pose.theta});
    for (int k = 0; k < kNumBeams; ++k)
      REQUIRE(a.ranges[k] == b.ranges[k]);
  }
  SECTION("rotation by beam multiples permutes beams") {
    RngStream rng(13);
    std::vector<ObstaclePoint> pts;
    for (int i = 0; i < 15; ++i)
      pts.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5)});
    Pose pose{0, 0, 0.4};
    ProjectedScan a = project_scan(pts, pose);
    for (int shift : {1, 7, 31}) {
      double dtheta = shift * 2.0 * M_PI / kNumBeams;
      ProjectedScan b = project_scan(pts, {0, 0, 0.4 + dtheta});
      for (int k = 0; k < kNumBeams; ++k) {
        int k2 = ((k - shift) % kNumBeams + kNumBeams) % kNumBeams;
        REQUIRE(b.ranges[k2] == Catch::Approx(a.ranges[k]).margin(1e-12));
      }
    }
  }
  SECTION("output ranges always live in the sensor interval") {
    RngStream rng(17);
    for (int trial = 0; trial < 500; ++trial) {
      std::vector<ObstaclePoint> pts;
      int n = rng.uniform_int(0, 30);
      for (int i = 0; i < n; ++i)
        pts.push_back({rng.uniform(-40, 40), rng.uniform(-40, 40)});
      ProjectedScan ps =
          project_scan(pts, {rng.uniform(-5, 5), rng.uniform(-5, 5),
                             rng.uniform(-M_PI, M_PI)});
      for (double r : ps.ranges) {
        REQUIRE(r >= 0.1);
        REQUIRE(r <= 10.0);
      }
    }
  }
}

namespace {

ValueFunction make_vf(std::uint64_t seed, double scale = 1.0) {
  RngStream rng(seed);
  ValueFunction vf;
  std::vector<int> adims = {kMdpStateDim, 16, 16, 2};
  std::vector<int> cdims = {kMdpStateDim + 2, 16, 16, 1};
  vf.actor = make_mlp(adims, rng, 0.1);
  vf.critic1 = make_mlp(cdims, rng, 0.1);
  vf.critic2 = make_mlp(cdims, rng, 0.1);
  for (auto& W : vf.critic1.W) W *= scale;
  return vf;
}

}  // namespace

TEST_CASE("terminal cost") {
  MdpParams mp;
  VehicleState term{5, 5, 0, 1, 0};
  VehicleState goal{20, 20, 0, 0, 0};
  ProjectedScan ps;
  ps.ranges.fill(10.0);
  SECTION("zero networks cost zero") {
    ValueFunction vf = make_vf(1);
    for (auto* net : {&vf.actor, &vf.critic1, &vf.critic2}) {
      for (auto& W : net->W) W.setZero();
      for (auto& b : net->b) b.setZero();
    }
    REQUIRE(terminal_cost(vf, term, ps, goal, mp) == 0.0);
  }
  SECTION("equals the negative value") {
    ValueFunction vf = make_vf(2);
    double v = evaluate_value(vf, term, ps.as_scan(), goal, mp);
    REQUIRE(terminal_cost(vf, term, ps, goal, mp) == Catch::Approx(-v));
  }
}

TEST_CASE("value improvement constraint") {
  MdpParams mp;
  VehicleState goal{20, 20, 0, 0, 0};
  LidarScan scan;
  scan.ranges.fill(8.0);
  SECTION("identical ends do not violate") {
    ValueFunction vf = make_vf(3);
    VehicleState x{5, 5, 0, 1, 0};
    ProjectedScan ps;
    ps.ranges = scan.ranges;
    REQUIRE_FALSE(
        value_improvement_violated(vf, x, scan, x, ps, goal, mp));
  }
  SECTION("constant network never violates") {
    ValueFunction vf = make_vf(4);
    for (auto& W : vf.critic1.W) W.setZero();
    for (auto& b : vf.critic1.b) b.setZero();
    vf.critic1.b.back()[0] = 3.7;  // V == 3.7 everywhere
    RngStream rng(5);
    for (int i = 0; i < 100; ++i) {
      VehicleState a{rng.uniform(0, 25), rng.uniform(0, 25),
                     rng.uniform(-M_PI, M_PI), rng.uniform(-1, 3), 0};
      VehicleState b{rng.uniform(0, 25), rng.uniform(0, 25),
                     rng.uniform(-M_PI, M_PI), rng.uniform(-1, 3), 0};
      ProjectedScan ps;
      for (auto& r : ps.ranges) r = rng.uniform(0.1, 10.0);
      REQUIRE_FALSE(
          value_improvement_violated(vf, a, scan, b, ps, goal, mp));
    }
  }
  SECTION("strictly lower terminal value violates") {
    ValueFunction vf = make_vf(6);
    // critic reads the goal-range component, so moving away lowers V
    for (auto& W : vf.critic1.W) W.setZero();
    for (auto& b : vf.critic1.b) b.setZero();
    vf.critic1.W[0].row(0).setZero();
    vf.critic1.W[0](0, 2) = 1.0;  // hidden0 = goal-range component
    vf.critic1.W[1].setZero();
    vf.critic1.W[1](0, 0) = 1.0;
    vf.critic1.W[2].setZero();
    vf.critic1.W[2](0, 0) = -1.0;  // V = -normalized goal range
    VehicleState near{19, 20, 0, 0, 0};
    VehicleState far{2, 2, 0, 0, 0};
    ProjectedScan ps;
    ps.ranges.fill(10.0);
    REQUIRE(value_improvement_violated(vf, near, scan, far, ps, goal, mp));
    REQUIRE_FALSE(
        value_improvement_violated(vf, far, scan, near, ps, goal, mp));
  }
}
