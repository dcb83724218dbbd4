#pragma once

// On-policy rollout storage. One Trajectory per environment worker; the
// trainer clears them after every update.

#include "ma2cl/envs.hpp"
#include "ma2cl/masking.hpp"

#include <cstdint>
#include <memory>
#include <vector>

namespace ma2cl {

/// Per-step output of a policy over a stack of W workers x N agents
/// (row w*N + i).
struct PolicyStep {
  Mat actions;               // [W*N, policy_cols]: raw Gaussian sample or action index
  Mat features;              // [W*N, feature_dim]: env-executed action or one-hot
  Eigen::VectorXd log_probs; // [W*N]
  Eigen::VectorXd values;    // [W], centralized critic
};

class RolloutPolicy {
 public:
  virtual ~RolloutPolicy() = default;
  virtual PolicyStep act(const Mat& obs, Index n_agents, Rng& rng) = 0;
  /// Critic value for each worker's joint observation.
  virtual Eigen::VectorXd value(const Mat& obs, Index n_agents) = 0;
};

struct Trajectory {
  std::vector<Mat> obs;               // [N, obs_dim] per step
  std::vector<Mat> actions;           // [N, policy_cols]
  std::vector<Mat> action_features;   // [N, feature_dim]
  std::vector<Eigen::VectorXd> log_probs;
  std::vector<double> rewards;        // team reward
  std::vector<double> values;
  std::vector<std::uint8_t> dones;
  std::vector<Index> episode_ids;
  std::vector<int> episode_t;
  double bootstrap_value = 0.0;       // V(o_T) when the last step is not terminal
  std::vector<double> completed_returns;
  Eigen::VectorXd advantages;
  Eigen::VectorXd returns;

  Index size() const { return static_cast<Index>(rewards.size()); }
  void clear();
  /// Throws if the per-step arrays disagree in length.
  void check() const;
};

/// One environment instance plus the bookkeeping that survives across rollouts.
struct RolloutWorker {
  std::unique_ptr<Environment> env;
  Mat obs;
  Index episode_id = -1;
  int t = 0;
  double episode_return = 0.0;
  bool needs_reset = true;
};

std::vector<RolloutWorker> make_workers(const std::string& env_name, int n_agents, int horizon, int count);

/// Steps every worker n_steps times, batching the policy over workers.
/// Episodes auto-reset; workers are visited in index order for all RNG use.
std::vector<Trajectory> collect_rollout(std::vector<RolloutWorker>& workers, RolloutPolicy& policy, Index n_steps,
                                        Rng& rng);
Trajectory collect_rollout(Environment& env, RolloutPolicy& policy, Index n_steps, Rng& rng);

struct AuxIndex {
  std::size_t traj = 0;
  Index t = 0;
};

/// All (trajectory, t) with t - k inside the same episode.
std::vector<AuxIndex> valid_aux_indices(const std::vector<Trajectory>& trajs, int k);

/// Uniform draws with replacement over valid_aux_indices.
std::vector<TimestepSample<double>> sample_aux_batch(const std::vector<Trajectory>& trajs, Index batch_size, int k,
                                                     Rng& rng);
std::vector<TimestepSample<double>> sample_aux_batch(const Trajectory& traj, Index batch_size, int k, Rng& rng);

}  // namespace ma2cl
