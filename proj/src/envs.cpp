#include "ma2cl/envs.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace ma2cl {

Eigen::VectorXd flock_reward(const PointMassState& s) {
  const Index n = s.positions.rows();
  if (n < 2) throw std::invalid_argument("flock_reward: need at least 2 agents");
  Eigen::VectorXd r(n);
  r(0) = -(s.target - s.positions.row(0)).squaredNorm();
  for (Index i = 1; i < n; ++i) {
    const double dy = s.positions(i, 1) - s.positions(i - 1, 1);
    r(i) = -dy * dy;
  }
  return r;
}

Eigen::VectorXd leader_follower_reward(const PointMassState& s) {
  const Index n = s.positions.rows();
  if (n < 2) throw std::invalid_argument("leader_follower_reward: need at least 2 agents");
  Eigen::VectorXd r(n);
  r(0) = -(s.target - s.positions.row(0)).squaredNorm();
  for (Index i = 1; i < n; ++i) {
    r(i) = -(s.positions.row(i) - s.positions.row(0)).squaredNorm() / static_cast<double>(n);
  }
  return r;
}

PointMassStep point_mass_step(const PointMassState& s, const Mat& actions, Scenario scenario) {
  const Index n = s.positions.rows();
  if (actions.rows() != n || actions.cols() != 3) {
    throw std::invalid_argument("point_mass_step: actions must be [" + std::to_string(n) + "x3], got " + shape_str(actions));
  }
  if (!actions.allFinite()) throw std::domain_error("point_mass_step: non-finite action");
  PointMassStep out;
  out.next = s;
  const Mat a = actions.cwiseMax(-1.0).cwiseMin(1.0);
  out.next.velocities = kPointMassDamping * s.velocities + kPointMassGain * kPointMassDt * a;
  out.next.positions = s.positions + kPointMassDt * out.next.velocities;
  out.next.t = s.t + 1;
  out.rewards = scenario == Scenario::flock ? flock_reward(out.next) : leader_follower_reward(out.next);
  out.done = out.next.t >= s.horizon;
  return out;
}

Mat point_mass_observe(const PointMassState& s) {
  const Index n = s.positions.rows();
  Mat obs(n, point_mass_obs_dim(n));
  for (Index i = 0; i < n; ++i) {
    obs.block(i, 0, 1, 3) = s.positions.row(i);
    obs.block(i, 3, 1, 3) = s.velocities.row(i);
    obs.block(i, 6, 1, 3) = s.target - s.positions.row(i);
    Index col = 9;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      obs.block(i, col, 1, 3) = s.positions.row(j) - s.positions.row(i);
      col += 3;
    }
  }
  return obs;
}

PointMassState point_mass_reset(int n_agents, int horizon, Rng& rng) {
  std::uniform_real_distribution<double> box(-1.0, 1.0);
  PointMassState s;
  s.positions.resize(n_agents, 3);
  for (Index i = 0; i < s.positions.size(); ++i) s.positions.data()[i] = box(rng);
  s.velocities = Mat::Zero(n_agents, 3);
  s.t = 0;
  s.horizon = horizon;
  return s;
}

PointMassEnv::PointMassEnv(Scenario scenario, int n_agents, int horizon)
    : scenario_(scenario), n_(n_agents), horizon_(horizon) {
  if (n_agents < 2) throw std::invalid_argument("point-mass env: need at least 2 agents");
  if (horizon < 1) throw std::invalid_argument("point-mass env: horizon must be positive");
}

Mat PointMassEnv::reset(Rng& rng) {
  state_ = point_mass_reset(n_, horizon_, rng);
  return point_mass_observe(state_);
}

StepResult PointMassEnv::step(const Mat& actions) {
  PointMassStep ps = point_mass_step(state_, actions, scenario_);
  state_ = std::move(ps.next);
  StepResult r;
  r.obs = point_mass_observe(state_);
  r.team_reward = ps.rewards.sum();
  r.rewards = std::move(ps.rewards);
  r.done = ps.done;
  return r;
}

// ---------------------------------------------------------------------------

double coop_gather_team_reward(const GridState& s) {
  int satisfied = 0;
  for (const auto& lm : s.landmarks) {
    const auto on = std::count_if(s.agents.begin(), s.agents.end(), [&](const Eigen::Vector2i& a) { return a == lm; });
    if (on == 1) ++satisfied;
  }
  return satisfied > 0 ? static_cast<double>(satisfied) : -0.01;
}

Eigen::Vector2i grid_move(const Eigen::Vector2i& pos, int action) {
  static const int dx[5] = {0, 0, 0, 1, -1};
  static const int dy[5] = {0, 1, -1, 0, 0};
  if (action < 0 || action > 4) throw std::invalid_argument("coop_gather: action must be in [0, 4]");
  Eigen::Vector2i next(pos.x() + dx[action], pos.y() + dy[action]);
  next.x() = std::clamp(next.x(), 0, kGridSize - 1);
  next.y() = std::clamp(next.y(), 0, kGridSize - 1);
  return next;
}

CoopGatherEnv::CoopGatherEnv(int n_agents, int horizon) : n_(n_agents), horizon_(horizon) {
  if (n_agents < 1 || n_agents > kGridSize * kGridSize / 2) throw std::invalid_argument("coop_gather: bad agent count");
  if (horizon < 1) throw std::invalid_argument("coop_gather: horizon must be positive");
}

Mat CoopGatherEnv::reset(Rng& rng) {
  std::uniform_int_distribution<int> cell(0, kGridSize * kGridSize - 1);
  state_ = GridState{};
  state_.horizon = horizon_;
  while (static_cast<int>(state_.landmarks.size()) < n_) {
    const int c = cell(rng);
    Eigen::Vector2i p(c % kGridSize, c / kGridSize);
    if (std::find(state_.landmarks.begin(), state_.landmarks.end(), p) == state_.landmarks.end()) state_.landmarks.push_back(p);
  }
  for (int i = 0; i < n_; ++i) {
    const int c = cell(rng);
    state_.agents.emplace_back(c % kGridSize, c / kGridSize);
  }
  return observe();
}

Mat CoopGatherEnv::observe() const {
  const double scale = 1.0 / (kGridSize - 1);
  Mat obs(n_, obs_dim());
  for (int i = 0; i < n_; ++i) {
    const Eigen::Vector2d me = state_.agents[static_cast<std::size_t>(i)].cast<double>();
    obs(i, 0) = me.x() * scale;
    obs(i, 1) = me.y() * scale;
    Index col = 2;
    for (const auto& lm : state_.landmarks) {
      obs(i, col++) = (lm.x() - me.x()) * scale;
      obs(i, col++) = (lm.y() - me.y()) * scale;
    }
    for (int j = 0; j < n_; ++j) {
      if (j == i) continue;
      const auto& o = state_.agents[static_cast<std::size_t>(j)];
      obs(i, col++) = (o.x() - me.x()) * scale;
      obs(i, col++) = (o.y() - me.y()) * scale;
    }
  }
  return obs;
}

StepResult CoopGatherEnv::step(const Mat& actions) {
  if (actions.rows() != n_ || actions.cols() < 1) throw std::invalid_argument("coop_gather: actions must be [N x 1]");
  if (!actions.allFinite()) throw std::domain_error("coop_gather: non-finite action");
  for (int i = 0; i < n_; ++i) {
    auto& a = state_.agents[static_cast<std::size_t>(i)];
    a = grid_move(a, static_cast<int>(std::lround(actions(i, 0))));
  }
  ++state_.t;
  StepResult r;
  r.obs = observe();
  r.team_reward = coop_gather_team_reward(state_);
  r.rewards = Eigen::VectorXd::Constant(n_, r.team_reward / n_);
  r.done = state_.t >= horizon_;
  return r;
}

std::unique_ptr<Environment> make_env(const std::string& name, int n_agents, int horizon) {
  if (name == "flock") return std::make_unique<PointMassEnv>(Scenario::flock, n_agents, horizon > 0 ? horizon : 100);
  if (name == "leader_follower") {
    return std::make_unique<PointMassEnv>(Scenario::leader_follower, n_agents, horizon > 0 ? horizon : 100);
  }
  if (name == "coop_gather") return std::make_unique<CoopGatherEnv>(n_agents, horizon > 0 ? horizon : 50);
  throw std::invalid_argument("unknown env '" + name + "' (expected flock, leader_follower, coop_gather)");
}

}  // namespace ma2cl
