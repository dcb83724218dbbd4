#pragma once

// Joint optimization of L_rl + lambda * L_cl, configuration, metrics,
// checkpoints and ablation presets.

#include "ma2cl/auxiliary.hpp"
#include "ma2cl/buffer.hpp"
#include "ma2cl/ppo.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ma2cl {

/// Flat key=value configuration with dotted section prefixes.
struct TrainConfig {
  std::string env_name = "leader_follower";
  int n_agents = 4;
  int episode_length = 100;
  int rollout_threads = 4;
  std::vector<Index> hidden_dims{64, 64};
  Index repr_dim = 64;
  PpoConfig ppo{};
  bool ma2cl_enabled = true;
  Ma2clConfig ma2cl{};
  std::uint64_t seed = 1;
  long total_steps = 200000;
  long eval_interval = 0;  // env steps between evaluations; 0 disables
  int eval_episodes = 20;
  bool metrics_wall_time = true;

  /// Throws std::invalid_argument on an unknown key or unparsable value.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  static std::vector<std::string> keys();

  PolicyConfig policy_config() const;
  long steps_per_update() const { return static_cast<long>(episode_length) * rollout_threads; }
};

/// Applies "key=value".
void apply_override(TrainConfig& cfg, const std::string& assignment);

struct MetricsRow {
  long step = 0;
  double episode_return_mean = 0.0;
  double episode_return_std = 0.0;
  double rl_actor_loss = 0.0;
  double rl_value_loss = 0.0;
  double entropy = 0.0;
  double cl_loss = 0.0;
  double contrastive_accuracy = 0.0;
  double grad_norm = 0.0;
  double wall_time_s = 0.0;

  static std::string csv_header();
  std::string to_csv() const;
  bool finite() const;
};

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// Independent RNG streams so that enabling the auxiliary task never shifts
/// the draws seen by rollouts or minibatch shuffling.
struct RngStreams {
  Rng init, aux_init, rollout, update, aux, eval;
  explicit RngStreams(std::uint64_t seed);
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  /// Collect one rollout per worker, then one joint update.
  MetricsRow update();
  /// Mean team return of greedy episodes on a fresh environment.
  double evaluate(int episodes);

  const TrainConfig& config() const { return cfg_; }
  long env_steps() const { return env_steps_; }
  ActorCritic& actor_critic() { return *ac_; }
  AuxStack<double>* aux() { return aux_ ? aux_.get() : nullptr; }
  /// Encoder passed to the most recent masked pass; null before the first one.
  const StoreD* last_aux_encoder() const { return last_aux_encoder_; }
  const std::vector<Trajectory>& last_rollout() const { return rollout_; }
  const UpdateStats& last_stats() const { return last_stats_; }

  std::vector<NamedStore<double>> named_stores();
  void save(const std::filesystem::path& base);
  void load(const std::filesystem::path& base);

  using Snapshot = std::map<std::string, Mat>;
  Snapshot snapshot();
  void restore(const Snapshot& s);

 private:
  TrainConfig cfg_;
  RngStreams rng_;
  std::unique_ptr<ActorCritic> ac_;
  std::unique_ptr<AuxStack<double>> aux_;
  std::unique_ptr<Optimizers> opt_;
  std::vector<RolloutWorker> workers_;
  std::vector<Trajectory> rollout_;
  UpdateStats last_stats_;
  const StoreD* last_aux_encoder_ = nullptr;
  long env_steps_ = 0;
  double last_return_mean_ = 0.0;
  double last_return_std_ = 0.0;
  std::chrono::steady_clock::time_point start_;
};

struct EvalPoint {
  long step = 0;
  double mean_return = 0.0;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  std::vector<EvalPoint> evals;
  double final_eval_return = 0.0;
};

/// Full run. When out_dir is non-empty writes config.txt, metrics.csv,
/// eval.csv, checkpoint.{manifest,bin} and summary.json there.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir = {});

/// Area under the evaluation curve (trapezoid over env steps).
double learning_curve_area(const std::vector<EvalPoint>& evals);

struct AblationRun {
  std::string label;
  std::uint64_t seed = 0;
  TrainConfig cfg;
  TrainResult result;
};

std::vector<std::string> ablation_presets();
/// One configuration per preset variant, labeled.
std::vector<std::pair<std::string, TrainConfig>> ablation_configs(const std::string& preset, const TrainConfig& base);
/// Runs every variant for every seed into out_dir/preset/label/seed_<s>.
/// Worker threads are capped by MA2CL_THREADS (default: hardware concurrency).
std::vector<AblationRun> run_ablation(const std::string& preset, const TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir);

int thread_cap();

}  // namespace ma2cl
