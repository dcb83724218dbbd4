#include "ma2cl/buffer.hpp"
#include "ma2cl/ppo.hpp"

#include <doctest.h>

#include <map>
#include <random>

using namespace ma2cl;

namespace {

// Deterministic policy: action is a fixed function of the observation.
class FixedPolicy final : public RolloutPolicy {
 public:
  explicit FixedPolicy(Index act_dim) : act_dim_(act_dim) {}
  PolicyStep act(const Mat& obs, Index n_agents, Rng&) override {
    PolicyStep ps;
    ps.actions = obs.leftCols(act_dim_).array().sin().matrix();
    ps.features = ps.actions;
    ps.log_probs = Eigen::VectorXd::Zero(obs.rows());
    ps.values = value(obs, n_agents);
    return ps;
  }
  Eigen::VectorXd value(const Mat& obs, Index n_agents) override {
    return joint_observation(obs, n_agents).rowwise().sum();
  }

 private:
  Index act_dim_;
};

// Trajectory with hand-set episode boundaries and obs[t] = t.
Trajectory synthetic(const std::vector<int>& episode_lengths) {
  Trajectory tr;
  Index id = 0, step = 0;
  for (int len : episode_lengths) {
    for (int t = 0; t < len; ++t, ++step) {
      tr.obs.push_back(Mat::Constant(2, 1, static_cast<double>(step)));
      tr.actions.push_back(Mat::Constant(2, 1, static_cast<double>(step)));
      tr.action_features.push_back(Mat::Constant(2, 1, static_cast<double>(-step)));
      tr.log_probs.push_back(Eigen::VectorXd::Zero(2));
      tr.rewards.push_back(0.0);
      tr.values.push_back(0.0);
      tr.dones.push_back(t + 1 == len ? 1 : 0);
      tr.episode_ids.push_back(id);
      tr.episode_t.push_back(t);
    }
    ++id;
  }
  return tr;
}

}  // namespace

TEST_SUITE("buffer") {

TEST_CASE("n_steps equal to the horizon yields one episode ending at the last index") {
  PointMassEnv env(Scenario::leader_follower, 3, 100);
  FixedPolicy pol(3);
  Rng rng(1);
  const Trajectory tr = collect_rollout(env, pol, 100, rng);
  CHECK(tr.size() == 100);
  for (Index t = 0; t < 99; ++t) CHECK(tr.dones[static_cast<std::size_t>(t)] == 0);
  CHECK(tr.dones.back() == 1);
  CHECK(tr.episode_ids.front() == tr.episode_ids.back());
  CHECK(tr.completed_returns.size() == 1);
  CHECK(tr.bootstrap_value == 0.0);
}

TEST_CASE("episodes auto-reset and truncated episodes carry a bootstrap value") {
  PointMassEnv env(Scenario::flock, 3, 10);
  FixedPolicy pol(3);
  Rng rng(2);
  const Trajectory tr = collect_rollout(env, pol, 25, rng);
  CHECK(tr.size() == 25);
  CHECK(tr.episode_ids.back() == 2);
  CHECK(tr.episode_t[10] == 0);
  CHECK(tr.completed_returns.size() == 2);
  CHECK(tr.bootstrap_value == pol.value(point_mass_observe(env.state()), 3)(0));
}

TEST_CASE("deterministic policy and fixed seed give bit-identical trajectories") {
  auto run = [] {
    PointMassEnv env(Scenario::leader_follower, 3, 20);
    FixedPolicy pol(3);
    Rng rng(3);
    return collect_rollout(env, pol, 50, rng);
  };
  const Trajectory a = run(), b = run();
  CHECK(a.rewards == b.rewards);
  for (std::size_t t = 0; t < a.obs.size(); ++t) {
    CHECK(a.obs[t] == b.obs[t]);
    CHECK(a.actions[t] == b.actions[t]);
  }
}

TEST_CASE("recorded rewards equal the environment's reward output") {
  PointMassEnv env(Scenario::leader_follower, 3, 100);
  FixedPolicy pol(3);
  Rng rng(4);
  const Trajectory tr = collect_rollout(env, pol, 30, rng);
  // Replay the stored actions from the stored first state.
  PointMassEnv replay(Scenario::leader_follower, 3, 100);
  Rng rng2(4);
  replay.reset(rng2);
  for (std::size_t t = 0; t < tr.obs.size(); ++t) {
    CHECK(point_mass_observe(replay.state()) == tr.obs[t]);
    const StepResult sr = replay.step(tr.action_features[t]);
    CHECK(sr.team_reward == tr.rewards[t]);
  }
}

TEST_CASE("discrete envs receive action indices") {
  CoopGatherEnv env(3);
  class Stay final : public RolloutPolicy {
   public:
    PolicyStep act(const Mat& obs, Index, Rng&) override {
      PolicyStep ps;
      ps.actions = Mat::Zero(obs.rows(), 1);
      ps.features = Mat::Zero(obs.rows(), 5);
      ps.features.col(0).setOnes();
      ps.log_probs = Eigen::VectorXd::Zero(obs.rows());
      ps.values = Eigen::VectorXd::Zero(1);
      return ps;
    }
    Eigen::VectorXd value(const Mat&, Index) override { return Eigen::VectorXd::Zero(1); }
  } stay;
  Rng rng(5);
  const Trajectory tr = collect_rollout(env, stay, 10, rng);
  for (std::size_t t = 1; t < tr.obs.size(); ++t) CHECK(tr.obs[t] == tr.obs[0]);
}

TEST_CASE("valid offsets on a length-5 episode") {
  const std::vector<Trajectory> trs{synthetic({5})};
  auto ts = [&](int k) {
    std::vector<Index> out;
    for (const auto& ix : valid_aux_indices(trs, k)) out.push_back(ix.t);
    return out;
  };
  CHECK(ts(1) == std::vector<Index>{1, 2, 3, 4});
  CHECK(ts(4) == std::vector<Index>{4});
  Rng rng(6);
  try {
    sample_aux_batch(trs, 8, 5, rng);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()) == "rollout too short for offset k");
  }
}

TEST_CASE("samples never pair steps across an episode boundary") {
  const std::vector<Trajectory> trs{synthetic({3, 4, 2}), synthetic({6})};
  Rng rng(7);
  for (int k = 1; k <= 3; ++k) {
    for (const auto& s : sample_aux_batch(trs, 500, k, rng)) {
      CHECK(s.t >= k);
      CHECK(s.obs_t(0, 0) - s.obs_prev(0, 0) == k);
      CHECK(s.act_prev(0, 0) == -s.obs_prev(0, 0));
    }
  }
}

TEST_CASE("aux draws are uniform over valid indices (chi-square)") {
  const std::vector<Trajectory> trs{synthetic({6, 6})};
  Rng rng(8);
  std::map<std::pair<Index, Index>, int> counts;
  const int draws = 10000;
  for (const auto& s : sample_aux_batch(trs, draws, 1, rng)) ++counts[{s.episode_id, s.t}];
  REQUIRE(counts.size() == 10);
  const double expected = draws / 10.0;
  double chi2 = 0.0;
  for (const auto& [_, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 9 degrees of freedom, upper 1% point.
  CHECK(chi2 < 21.666);
}

TEST_CASE("trajectory length checks and clearing") {
  Trajectory tr = synthetic({3});
  CHECK_NOTHROW(tr.check());
  tr.values.pop_back();
  CHECK_THROWS_AS(tr.check(), std::logic_error);
  tr.clear();
  CHECK(tr.size() == 0);
  CHECK(tr.obs.empty());
}

}  // TEST_SUITE
