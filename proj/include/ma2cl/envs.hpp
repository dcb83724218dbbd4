#pragma once

// Cooperative desk-scale environments: point-mass Flock and LeaderFollower
// with continuous 3-D accelerations, and the discrete CoopGather gridworld.

#include "ma2cl/autodiff.hpp"
#include "ma2cl/nets.hpp"

#include <memory>
#include <string>
#include <vector>

namespace ma2cl {

using Mat = Tensor<double>;

struct ActionSpace {
  enum class Kind { continuous, discrete };
  Kind kind = Kind::continuous;
  Index n = 3;  // action dims (continuous) or number of actions (discrete)

  bool discrete() const { return kind == Kind::discrete; }
  /// Columns of the policy-space action stored per agent.
  Index policy_cols() const { return discrete() ? 1 : n; }
  /// Width of the action features that enter reconstruction tokens.
  Index feature_dim() const { return n; }
};

struct StepResult {
  Mat obs;                  // [N, obs_dim]
  Eigen::VectorXd rewards;  // per agent
  double team_reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual Index n_agents() const = 0;
  virtual Index obs_dim() const = 0;
  virtual ActionSpace action_space() const = 0;
  virtual int horizon() const = 0;
  virtual Mat reset(Rng& rng) = 0;
  /// Continuous: actions [N, 3]. Discrete: action indices in column 0.
  virtual StepResult step(const Mat& actions) = 0;
  virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Point-mass dynamics.

enum class Scenario { flock, leader_follower };

struct PointMassState {
  Mat positions;                                   // [N, 3], meters
  Mat velocities;                                  // [N, 3], m/s
  Eigen::RowVector3d target{0.0, 0.0, 1.0};
  int t = 0;
  int horizon = 100;
};

inline constexpr double kPointMassDt = 0.1;
inline constexpr double kPointMassDamping = 0.8;
inline constexpr double kPointMassGain = 0.5;

/// r_1 = -||p - x_1||^2, r_i = -(y_i - y_{i-1})^2 for i >= 2.
Eigen::VectorXd flock_reward(const PointMassState& s);
/// r_1 = -||p - x_1||^2, r_i = -(1/N) ||x_i - x_1||^2 for i >= 2.
Eigen::VectorXd leader_follower_reward(const PointMassState& s);

struct PointMassStep {
  PointMassState next;
  Eigen::VectorXd rewards;
  bool done = false;
};

/// v <- 0.8 v + 0.5 a dt, x <- x + v dt with a clipped to [-1, 1]^3.
PointMassStep point_mass_step(const PointMassState& s, const Mat& actions, Scenario scenario);

/// Agent i sees [x_i, v_i, p - x_i, x_j - x_i for j != i in index order].
Mat point_mass_observe(const PointMassState& s);
inline Index point_mass_obs_dim(Index n) { return 9 + 3 * (n - 1); }

PointMassState point_mass_reset(int n_agents, int horizon, Rng& rng);

class PointMassEnv final : public Environment {
 public:
  PointMassEnv(Scenario scenario, int n_agents, int horizon = 100);

  Index n_agents() const override { return n_; }
  Index obs_dim() const override { return point_mass_obs_dim(n_); }
  ActionSpace action_space() const override { return {ActionSpace::Kind::continuous, 3}; }
  int horizon() const override { return horizon_; }
  Mat reset(Rng& rng) override;
  StepResult step(const Mat& actions) override;
  std::string name() const override { return scenario_ == Scenario::flock ? "flock" : "leader_follower"; }

  const PointMassState& state() const { return state_; }
  void set_state(PointMassState s) { state_ = std::move(s); }

 private:
  Scenario scenario_;
  int n_;
  int horizon_;
  PointMassState state_;
};

// ---------------------------------------------------------------------------
// CoopGather: N agents, N landmarks on a 7x7 grid; actions {stay, N, S, E, W}.

struct GridState {
  std::vector<Eigen::Vector2i> agents;
  std::vector<Eigen::Vector2i> landmarks;
  int t = 0;
  int horizon = 50;
};

inline constexpr int kGridSize = 7;

/// +1 for each landmark holding exactly one agent; -0.01 when none does.
double coop_gather_team_reward(const GridState& s);
Eigen::Vector2i grid_move(const Eigen::Vector2i& pos, int action);

class CoopGatherEnv final : public Environment {
 public:
  explicit CoopGatherEnv(int n_agents, int horizon = 50);

  Index n_agents() const override { return n_; }
  Index obs_dim() const override { return 2 + 2 * n_ + 2 * (n_ - 1); }
  ActionSpace action_space() const override { return {ActionSpace::Kind::discrete, 5}; }
  int horizon() const override { return horizon_; }
  Mat reset(Rng& rng) override;
  StepResult step(const Mat& actions) override;
  std::string name() const override { return "coop_gather"; }

  const GridState& state() const { return state_; }
  void set_state(GridState s) { state_ = std::move(s); }
  Mat observe() const;

 private:
  int n_;
  int horizon_;
  GridState state_;
};

/// name in {flock, leader_follower, coop_gather}; horizon <= 0 picks the env default.
std::unique_ptr<Environment> make_env(const std::string& name, int n_agents, int horizon = 0);

}  // namespace ma2cl
