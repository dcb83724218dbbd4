#include "ma2cl/envs.hpp"

#include <doctest.h>

#include <random>

using namespace ma2cl;

namespace {

PointMassState state(std::initializer_list<Eigen::RowVector3d> pos) {
  PointMassState s;
  s.positions.resize(static_cast<Index>(pos.size()), 3);
  Index i = 0;
  for (const auto& p : pos) s.positions.row(i++) = p;
  s.velocities = Mat::Zero(s.positions.rows(), 3);
  return s;
}

GridState grid(std::vector<Eigen::Vector2i> agents, std::vector<Eigen::Vector2i> landmarks) {
  GridState g;
  g.agents = std::move(agents);
  g.landmarks = std::move(landmarks);
  return g;
}

}  // namespace

TEST_SUITE("envs") {

TEST_CASE("flock leader reward is the negative squared distance to the target") {
  CHECK(flock_reward(state({{0, 0, 1}, {5, 2, 0}}))(0) == 0.0);
  CHECK(flock_reward(state({{1, 0, 1}, {5, 2, 0}}))(0) == -1.0);
  CHECK(flock_reward(state({{1, 0, 1}, {5, 0, 9}}))(1) == 0.0);
}

TEST_CASE("flock followers track their predecessor's latitude") {
  const auto r = flock_reward(state({{0, 0, 0}, {3, 2, 0}, {0, 5, 7}}));
  CHECK(r(1) == -4.0);
  CHECK(r(2) == -9.0);
}

TEST_CASE("leader-follower rewards") {
  CHECK(leader_follower_reward(state({{0, 0, 0}, {0, 0, 0}, {1, 1, 1}}))(1) == 0.0);
  CHECK(leader_follower_reward(state({{0, 0, 0}, {1, 1, 1}, {0, 0, 0}}))(1) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(leader_follower_reward(state({{0, 0, 1}, {0, 0, 1}, {0, 0, 1}})).isZero(0.0));
}

TEST_CASE("swapping two followers swaps their rewards exactly") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    PointMassState s = point_mass_reset(4, 100, rng);
    PointMassState t = s;
    t.positions.row(1).swap(t.positions.row(3));
    const auto a = leader_follower_reward(s), b = leader_follower_reward(t);
    CHECK(a(0) == b(0));
    CHECK(a(1) == b(3));
    CHECK(a(3) == b(1));
    CHECK(a(2) == b(2));
  }
}

TEST_CASE("zero action from rest is a fixed point") {
  PointMassState s = state({{0.3, -0.2, 0.5}, {1, 1, 1}});
  const auto out = point_mass_step(s, Mat::Zero(2, 3), Scenario::leader_follower);
  CHECK(out.next.positions == s.positions);
}

TEST_CASE("unit x action from rest moves by the stated arithmetic") {
  PointMassState s = state({{0, 0, 0}, {1, 1, 1}});
  Mat a = Mat::Zero(2, 3);
  a(0, 0) = 1.0;
  const auto out = point_mass_step(s, a, Scenario::flock);
  CHECK(out.next.velocities(0, 0) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(out.next.positions(0, 0) == doctest::Approx(0.005).epsilon(1e-15));
  CHECK(out.next.positions.row(1) == s.positions.row(1));
}

TEST_CASE("actions are clipped to the unit box") {
  PointMassState s = state({{0, 0, 0}, {1, 1, 1}});
  Mat big = Mat::Constant(2, 3, 7.0);
  const auto a = point_mass_step(s, big, Scenario::flock);
  const auto b = point_mass_step(s, Mat::Ones(2, 3), Scenario::flock);
  CHECK(a.next.positions == b.next.positions);
}

TEST_CASE("non-finite and misshapen actions are rejected") {
  PointMassState s = state({{0, 0, 0}, {1, 1, 1}});
  Mat a = Mat::Zero(2, 3);
  a(1, 2) = std::nan("");
  CHECK_THROWS_AS(point_mass_step(s, a, Scenario::flock), std::domain_error);
  CHECK_THROWS_AS(point_mass_step(s, Mat::Zero(3, 3), Scenario::flock), std::invalid_argument);
}

TEST_CASE("episodes end exactly at the horizon") {
  for (const char* name : {"flock", "leader_follower", "coop_gather"}) {
    auto env = make_env(name, 3);
    Rng rng(2);
    env->reset(rng);
    const Mat a = Mat::Zero(3, env->action_space().policy_cols());
    for (int t = 1; t <= env->horizon(); ++t) CHECK(env->step(a).done == (t == env->horizon()));
  }
  CHECK(make_env("leader_follower", 3)->horizon() == 100);
  CHECK(make_env("coop_gather", 3)->horizon() == 50);
  CHECK_THROWS_AS(make_env("maze", 3), std::invalid_argument);
}

TEST_CASE("point-mass observation layout") {
  PointMassState s = state({{1, 2, 3}, {0, 0, 0}, {-1, 4, 2}});
  s.velocities.row(0) << 0.1, 0.2, 0.3;
  const Mat o = point_mass_observe(s);
  CHECK(o.cols() == point_mass_obs_dim(3));
  CHECK(o.cols() == 6 + 3 + 3 * 2);
  Eigen::RowVectorXd expect(15);
  expect << 1, 2, 3, 0.1, 0.2, 0.3, -1, -2, -2, -1, -2, -3, -2, 2, -1;
  CHECK(o.row(0) == expect);
}

TEST_CASE("an agent's observation ignores the others' velocities") {
  Rng rng(3);
  PointMassState s = point_mass_reset(3, 100, rng);
  PointMassState t = s;
  t.velocities.row(1) << 5, -5, 5;
  t.velocities.row(2) << -3, 3, 0;
  CHECK(point_mass_observe(s).row(0) == point_mass_observe(t).row(0));
}

TEST_CASE("step is deterministic and rewards stay finite and nonpositive") {
  Rng rng(4);
  PointMassState s = point_mass_reset(4, 100, rng);
  CHECK(s.positions.cwiseAbs().maxCoeff() <= 1.0);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int t = 0; t < 100; ++t) {
    Mat a(4, 3);
    for (Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
    const auto x = point_mass_step(s, a, Scenario::flock);
    const auto y = point_mass_step(s, a, Scenario::flock);
    CHECK(x.next.positions == y.next.positions);
    CHECK(x.rewards == y.rewards);
    CHECK(x.rewards.allFinite());
    CHECK((x.rewards.array() <= 0.0).all());
    CHECK((leader_follower_reward(x.next).array() <= 0.0).all());
    s = x.next;
  }
}

TEST_CASE("gather reward counts singly occupied landmarks") {
  const std::vector<Eigen::Vector2i> lm{{0, 0}, {3, 3}, {6, 6}};
  CHECK(coop_gather_team_reward(grid({{0, 0}, {3, 3}, {6, 6}}, lm)) == 3.0);
  CHECK(coop_gather_team_reward(grid({{0, 0}, {0, 0}, {6, 6}}, lm)) == 1.0);
  CHECK(coop_gather_team_reward(grid({{0, 0}, {0, 0}, {1, 1}}, lm)) == -0.01);
  CHECK(coop_gather_team_reward(grid({{1, 0}, {2, 2}, {5, 5}}, lm)) == -0.01);
}

TEST_CASE("moving into a wall leaves the position unchanged") {
  CHECK(grid_move({0, 0}, 4) == Eigen::Vector2i(0, 0));
  CHECK(grid_move({0, 0}, 2) == Eigen::Vector2i(0, 0));
  CHECK(grid_move({6, 6}, 1) == Eigen::Vector2i(6, 6));
  CHECK(grid_move({6, 6}, 3) == Eigen::Vector2i(6, 6));
  CHECK(grid_move({3, 3}, 0) == Eigen::Vector2i(3, 3));
  CHECK(grid_move({3, 3}, 1) == Eigen::Vector2i(3, 4));
  CHECK_THROWS_AS(grid_move({3, 3}, 5), std::invalid_argument);
}

TEST_CASE("gather env splits the team reward across agents") {
  CoopGatherEnv env(3);
  env.set_state(grid({{0, 0}, {3, 3}, {5, 5}}, {{0, 0}, {3, 3}, {6, 6}}));
  const auto r = env.step(Mat::Zero(3, 1));
  CHECK(r.team_reward == 2.0);
  CHECK(r.rewards.sum() == doctest::Approx(2.0));
  CHECK(r.obs.cols() == env.obs_dim());
  CHECK(r.obs.cwiseAbs().maxCoeff() <= 1.0);
}

TEST_CASE("resets are reproducible from the rng") {
  for (const char* name : {"flock", "coop_gather"}) {
    auto a = make_env(name, 3), b = make_env(name, 3);
    Rng ra(9), rb(9);
    CHECK(a->reset(ra) == b->reset(rb));
  }
}

}  // TEST_SUITE
