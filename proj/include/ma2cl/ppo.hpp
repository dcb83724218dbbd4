#pragma once

// MAPPO: shared-parameter actor over per-agent encodings, centralized critic
// on the joint observation, GAE, clipped surrogate.

#include "ma2cl/autodiff.hpp"
#include "ma2cl/buffer.hpp"
#include "ma2cl/nets.hpp"
#include "ma2cl/optim.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ma2cl {

using VarD = Var<double>;
using StoreD = ParamStore<double>;

struct PpoConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  int ppo_epochs = 5;
  double ppo_clip = 0.2;
  int num_mini_batch = 4;
  double entropy_coef = 0.01;
  double value_coef = 1.0;
  double max_grad_norm = 0.5;
  double lr_actor = 5e-4;
  double lr_critic = 5e-3;
  double optim_eps = 1e-5;
  bool use_huber = true;
  double huber_delta = 10.0;

  void validate() const;
};

struct GaeResult {
  Eigen::VectorXd adv;
  Eigen::VectorXd returns;
};

/// delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t, V_T = bootstrap;
/// adv_t = delta_t + gamma lam (1 - done_t) adv_{t+1}. `dones` may be empty.
GaeResult compute_gae(const Eigen::VectorXd& rewards, const Eigen::VectorXd& values, double bootstrap, double gamma,
                      double lam, const std::vector<std::uint8_t>& dones = {});

/// Fills traj.advantages and traj.returns.
void compute_advantages(Trajectory& traj, double gamma, double lam);

/// -mean(min(r adv, clip(r, 1-eps, 1+eps) adv)) with r = exp(logp_new - logp_old).
VarD ppo_actor_loss(const VarD& logp_new, const Mat& logp_old, const Mat& adv, double eps_clip);
VarD value_loss(const VarD& values, const Mat& returns, bool use_huber, double huber_delta);

/// Per-row log density of a diagonal Gaussian. mean [M, A], log_std [1, A].
VarD gaussian_log_prob(const VarD& mean, const VarD& log_std, const Mat& actions);
/// Mean per-row entropy of a diagonal Gaussian.
VarD gaussian_entropy(const VarD& log_std, Index rows);
/// Per-row log probability of integer actions (column 0) under softmax(logits).
VarD categorical_log_prob(const VarD& logits, const Mat& actions);
VarD categorical_entropy(const VarD& logits);

struct PolicyConfig {
  Index n_agents = 3;
  Index obs_dim = 0;
  ActionSpace space{};
  std::vector<Index> hidden_dims{64, 64};
  Index repr_dim = 64;
  std::vector<Index> critic_hidden{64, 64};
  double log_std_init = -0.5;

  EncoderConfig encoder() const { return {obs_dim, hidden_dims, repr_dim}; }
};

struct PolicyOutput {
  VarD mean_or_logits;  // [M, act_dim] or [M, n_actions]
  VarD log_std;         // [1, act_dim]; empty for discrete
};

/// Actor encoder -> GELU -> linear head. The critic owns a separate MLP.
class ActorCritic final : public RolloutPolicy {
 public:
  ActorCritic(const PolicyConfig& cfg, Rng& rng);

  const PolicyConfig& config() const { return cfg_; }

  PolicyOutput policy(const VarD& obs) const;
  VarD critic_values(const VarD& joint_obs) const;  // [M, 1]
  VarD log_prob(const PolicyOutput& po, const Mat& actions) const;
  VarD entropy(const PolicyOutput& po) const;

  PolicyStep act(const Mat& obs, Index n_agents, Rng& rng) override;
  Eigen::VectorXd value(const Mat& obs, Index n_agents) override;
  /// Mean action (continuous) or argmax (discrete), as env input.
  Mat act_greedy(const Mat& obs) const;
  /// Env-facing features for stored policy-space actions.
  Mat action_features(const Mat& actions) const;

  StoreD actor_encoder;
  StoreD policy_head;  // "l0.weight", "l0.bias", and "log_std" when continuous
  StoreD critic;

  std::vector<StoreD*> actor_groups() { return {&actor_encoder, &policy_head}; }
  std::vector<StoreD*> critic_groups() { return {&critic}; }

 private:
  PolicyConfig cfg_;
};

/// Flattens per-agent rows into the critic's joint input: [W*N, d] -> [W, N*d].
Mat joint_observation(const Mat& stacked, Index n_agents);

struct UpdateHooks {
  /// Called once, on the first gradient step of an update; the returned loss
  /// joins that step's objective.
  std::function<VarD()> aux_loss;
  /// Called after every optimizer step.
  std::function<void()> after_step;
};

struct UpdateStats {
  double actor_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;       // mean pre-clip norm over actor and critic parameters
  double post_clip_actor = 0.0;  // max over steps
  double post_clip_critic = 0.0;
  int steps = 0;
};

/// The actor optimizer also owns any auxiliary trainables. Each optimizer's
/// parameter set is clipped to max_grad_norm as one global L2 norm.
struct Optimizers {
  Adam<double> actor;
  Adam<double> critic;
};

/// cfg.ppo_epochs passes of cfg.num_mini_batch shuffled minibatches over all
/// (trajectory, t) samples. Advantages are normalized once per update.
UpdateStats rl_update(ActorCritic& ac, Optimizers& opt, const std::vector<Trajectory>& trajs, const PpoConfig& cfg,
                      Rng& rng, const UpdateHooks& hooks = {});

}  // namespace ma2cl
