#include "ma2cl/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace ma2cl {

// ---------------------------------------------------------------------------
// Metrics.

std::string MetricsRow::csv_header() {
  return "step,episode_return_mean,episode_return_std,rl_actor_loss,rl_value_loss,entropy,cl_loss,contrastive_accuracy,"
         "grad_norm,wall_time_s";
}

std::string MetricsRow::to_csv() const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%ld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.3f", step, episode_return_mean,
                episode_return_std, rl_actor_loss, rl_value_loss, entropy, cl_loss, contrastive_accuracy, grad_norm,
                wall_time_s);
  return buf;
}

bool MetricsRow::finite() const {
  for (double x : {episode_return_mean, episode_return_std, rl_actor_loss, rl_value_loss, entropy, cl_loss,
                   contrastive_accuracy, grad_norm, wall_time_s}) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != MetricsRow::csv_header()) {
    throw std::runtime_error("metrics file " + path.string() + " has an unexpected header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != 10) throw std::runtime_error("metrics file " + path.string() + ": malformed row '" + line + "'");
    MetricsRow r;
    r.step = static_cast<long>(v[0]);
    r.episode_return_mean = v[1];
    r.episode_return_std = v[2];
    r.rl_actor_loss = v[3];
    r.rl_value_loss = v[4];
    r.entropy = v[5];
    r.cl_loss = v[6];
    r.contrastive_accuracy = v[7];
    r.grad_norm = v[8];
    r.wall_time_s = v[9];
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Trainer.

namespace {

Rng stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id)};
  return Rng(seq);
}

}  // namespace

RngStreams::RngStreams(std::uint64_t seed)
    : init(stream(seed, 1)),
      aux_init(stream(seed, 2)),
      rollout(stream(seed, 3)),
      update(stream(seed, 4)),
      aux(stream(seed, 5)),
      eval(stream(seed, 6)) {}

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
  cfg_.validate();
  const PolicyConfig pc = cfg_.policy_config();
  ac_ = std::make_unique<ActorCritic>(pc, rng_.init);
  std::vector<StoreD*> actor = ac_->actor_groups();
  if (cfg_.ma2cl_enabled) {
    aux_ = std::make_unique<AuxStack<double>>(
        make_aux_stack(ac_->actor_encoder, pc.n_agents, pc.space.feature_dim(), cfg_.ma2cl, rng_.aux_init));
    for (auto* s : aux_->trainable()) actor.push_back(s);
  }
  typename Adam<double>::Options ao{cfg_.ppo.lr_actor, 0.9, 0.999, cfg_.ppo.optim_eps};
  typename Adam<double>::Options co{cfg_.ppo.lr_critic, 0.9, 0.999, cfg_.ppo.optim_eps};
  opt_ = std::make_unique<Optimizers>(Optimizers{Adam<double>(actor, ao), Adam<double>(ac_->critic_groups(), co)});
  workers_ = make_workers(cfg_.env_name, cfg_.n_agents, 0, cfg_.rollout_threads);
  start_ = std::chrono::steady_clock::now();
}

MetricsRow Trainer::update() {
  rollout_ = collect_rollout(workers_, *ac_, cfg_.episode_length, rng_.rollout);
  env_steps_ += cfg_.steps_per_update();

  std::vector<double> finished;
  for (auto& tr : rollout_) {
    compute_advantages(tr, cfg_.ppo.gamma, cfg_.ppo.gae_lambda);
    finished.insert(finished.end(), tr.completed_returns.begin(), tr.completed_returns.end());
  }
  if (!finished.empty()) {
    const Eigen::Map<const Eigen::VectorXd> f(finished.data(), static_cast<Index>(finished.size()));
    last_return_mean_ = f.mean();
    last_return_std_ = std::sqrt((f.array() - last_return_mean_).square().mean());
  }

  UpdateHooks hooks;
  double cl_loss = 0.0, accuracy = 0.0;
  MaskedBatch<double> batch;
  if (aux_) {
    const auto samples = sample_aux_batch(rollout_, cfg_.ma2cl.aux_batch, cfg_.ma2cl.strategy.k, rng_.aux);
    batch = mask_batch(samples, cfg_.ma2cl.n_mask, cfg_.ma2cl.strategy, rng_.aux);
    hooks.aux_loss = [&]() {
      last_aux_encoder_ = &ac_->actor_encoder;
      AuxOutput<double> out = contrastive_pass(*aux_, ac_->actor_encoder, batch);
      cl_loss = out.loss.item();
      accuracy = out.accuracy;
      return scale(out.loss, cfg_.ma2cl.lambda);
    };
    hooks.after_step = [&]() { update_targets(*aux_, ac_->actor_encoder, cfg_.ma2cl.tau); };
  }
  last_stats_ = rl_update(*ac_, *opt_, rollout_, cfg_.ppo, rng_.update, hooks);

  MetricsRow row;
  row.step = env_steps_;
  row.episode_return_mean = last_return_mean_;
  row.episode_return_std = last_return_std_;
  row.rl_actor_loss = last_stats_.actor_loss;
  row.rl_value_loss = last_stats_.value_loss;
  row.entropy = last_stats_.entropy;
  row.cl_loss = cl_loss;
  row.contrastive_accuracy = accuracy;
  row.grad_norm = last_stats_.grad_norm;
  row.wall_time_s =
      cfg_.metrics_wall_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count() : 0.0;
  return row;
}

double Trainer::evaluate(int episodes) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  auto env = make_env(cfg_.env_name, cfg_.n_agents);
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    Mat obs = env->reset(rng_.eval);
    for (bool done = false; !done;) {
      StepResult sr = env->step(ac_->act_greedy(obs));
      total += sr.team_reward;
      done = sr.done;
      obs = std::move(sr.obs);
    }
  }
  return total / episodes;
}

std::vector<NamedStore<double>> Trainer::named_stores() {
  std::vector<NamedStore<double>> out{{"actor_encoder.", &ac_->actor_encoder},
                                      {"policy_head.", &ac_->policy_head},
                                      {"critic.", &ac_->critic}};
  if (aux_) {
    out.push_back({"target_encoder.", &aux_->target_encoder});
    out.push_back({"projector.", &aux_->projector});
    out.push_back({"target_projector.", &aux_->target_projector});
    out.push_back({"reconstructor.", &aux_->reconstructor});
    out.push_back({"similarity.", &aux_->similarity});
  }
  return out;
}

void Trainer::save(const std::filesystem::path& base) { save_checkpoint(base, named_stores()); }
void Trainer::load(const std::filesystem::path& base) { load_checkpoint(base, named_stores()); }

Trainer::Snapshot Trainer::snapshot() {
  Snapshot s;
  for (const auto& ns : named_stores()) {
    for (const auto& [name, e] : *ns.store) s.emplace(ns.prefix + name, e.var.value());
  }
  return s;
}

void Trainer::restore(const Snapshot& s) {
  for (const auto& ns : named_stores()) {
    for (auto& [name, e] : *ns.store) e.var.mutable_value() = s.at(ns.prefix + name);
  }
}

// ---------------------------------------------------------------------------
// Runs.

double learning_curve_area(const std::vector<EvalPoint>& evals) {
  double area = 0.0;
  for (std::size_t i = 1; i < evals.size(); ++i) {
    area += 0.5 * (evals[i].mean_return + evals[i - 1].mean_return) * static_cast<double>(evals[i].step - evals[i - 1].step);
  }
  return area;
}

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  Trainer tr(cfg);
  TrainResult res;
  std::ofstream metrics, evals;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "config.txt") << cfg.to_text();
    metrics.open(out_dir / "metrics.csv");
    metrics << MetricsRow::csv_header() << "\n";
    if (cfg.eval_interval > 0) {
      evals.open(out_dir / "eval.csv");
      evals << "step,eval_return_mean\n";
    }
  }
  auto record_eval = [&](long step, double ret) {
    res.evals.push_back({step, ret});
    if (evals.is_open()) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%ld,%.10g\n", step, ret);
      evals << buf;
    }
  };

  Trainer::Snapshot last_good = tr.snapshot();
  long next_eval = cfg.eval_interval;
  if (cfg.eval_interval > 0) record_eval(0, tr.evaluate(cfg.eval_episodes));
  while (tr.env_steps() < cfg.total_steps) {
    MetricsRow row;
    try {
      row = tr.update();
      if (!row.finite()) throw std::runtime_error("train: non-finite metrics at step " + std::to_string(row.step));
    } catch (const std::exception& e) {
      if (!out_dir.empty()) {
        tr.restore(last_good);
        tr.save(out_dir / "checkpoint");
      }
      throw std::runtime_error(std::string(e.what()) + "; aborted with the last good checkpoint");
    }
    res.rows.push_back(row);
    if (metrics.is_open()) metrics << row.to_csv() << "\n";
    last_good = tr.snapshot();
    if (cfg.eval_interval > 0 && tr.env_steps() >= next_eval) {
      record_eval(tr.env_steps(), tr.evaluate(cfg.eval_episodes));
      while (next_eval <= tr.env_steps()) next_eval += cfg.eval_interval;
    }
  }
  if (!res.evals.empty() && res.evals.back().step == tr.env_steps()) {
    res.final_eval_return = res.evals.back().mean_return;
  } else {
    res.final_eval_return = tr.evaluate(cfg.eval_episodes);
    if (cfg.eval_interval > 0) record_eval(tr.env_steps(), res.final_eval_return);
  }

  if (!out_dir.empty()) {
    tr.save(out_dir / "checkpoint");
    nlohmann::json summary;
    summary["env_steps"] = tr.env_steps();
    summary["updates"] = res.rows.size();
    summary["final_eval_return"] = res.final_eval_return;
    summary["learning_curve_area"] = learning_curve_area(res.evals);
    if (!res.rows.empty()) {
      summary["final_cl_loss"] = res.rows.back().cl_loss;
      summary["final_contrastive_accuracy"] = res.rows.back().contrastive_accuracy;
    }
    std::ofstream(out_dir / "summary.json") << summary.dump(2) << "\n";
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablations.

std::vector<std::string> ablation_presets() {
  return {"strategy_sweep", "nmask_sweep", "offset_sweep", "lambda_sweep", "concat_action_off", "pos_embed_off", "baseline"};
}

std::vector<std::pair<std::string, TrainConfig>> ablation_configs(const std::string& preset, const TrainConfig& base) {
  std::vector<std::pair<std::string, TrainConfig>> out;
  TrainConfig on = base;
  on.ma2cl_enabled = true;
  if (preset == "strategy_sweep") {
    for (auto v : {MaskVariant::prev_step, MaskVariant::prev_step_gauss, MaskVariant::full_gauss, MaskVariant::zero}) {
      TrainConfig c = on;
      c.ma2cl.strategy.variant = v;
      out.emplace_back("strategy_" + to_string(v), c);
    }
  } else if (preset == "nmask_sweep") {
    for (int m = 1; m <= base.n_agents; ++m) {
      TrainConfig c = on;
      c.ma2cl.n_mask = m;
      out.emplace_back("nmask_" + std::to_string(m), c);
    }
  } else if (preset == "offset_sweep") {
    for (int k = 1; k <= 4; ++k) {
      TrainConfig c = on;
      c.ma2cl.strategy.k = k;
      out.emplace_back("offset_" + std::to_string(k), c);
    }
  } else if (preset == "lambda_sweep") {
    for (double l : {0.1, 0.5, 1.0, 2.0}) {
      TrainConfig c = on;
      c.ma2cl.lambda = l;
      char buf[32];
      std::snprintf(buf, sizeof buf, "lambda_%g", l);
      out.emplace_back(buf, c);
    }
  } else if (preset == "concat_action_off") {
    TrainConfig c = on;
    c.ma2cl.concat_action = false;
    out.emplace_back("concat_action_off", c);
  } else if (preset == "pos_embed_off") {
    TrainConfig c = on;
    c.ma2cl.pos_embedding = false;
    out.emplace_back("pos_embed_off", c);
  } else if (preset == "baseline") {
    TrainConfig c = base;
    c.ma2cl_enabled = false;
    out.emplace_back("baseline", c);
  } else {
    std::string names;
    for (const auto& p : ablation_presets()) names += (names.empty() ? "" : ", ") + p;
    throw std::invalid_argument("unknown ablation preset '" + preset + "' (valid: " + names + ")");
  }
  return out;
}

int thread_cap() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("MA2CL_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

std::vector<AblationRun> run_ablation(const std::string& preset, const TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir) {
  if (seeds.empty()) throw std::invalid_argument("run_ablation: need at least one seed");
  std::vector<AblationRun> runs;
  for (auto& [label, cfg] : ablation_configs(preset, base)) {
    for (std::uint64_t s : seeds) {
      AblationRun r;
      r.label = label;
      r.seed = s;
      r.cfg = cfg;
      r.cfg.seed = s;
      r.cfg.validate();
      runs.push_back(std::move(r));
    }
  }

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::string first_error;
  auto work = [&]() {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      auto& r = runs[i];
      try {
        const auto dir = out_dir.empty() ? std::filesystem::path{}
                                         : out_dir / preset / r.label / ("seed_" + std::to_string(r.seed));
        r.result = train(r.cfg, dir);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (first_error.empty()) first_error = r.label + " seed " + std::to_string(r.seed) + ": " + e.what();
      }
    }
  };
  const int n_threads = std::min<int>(thread_cap(), static_cast<int>(runs.size()));
  if (n_threads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (!first_error.empty()) throw std::runtime_error("ablation " + preset + " failed: " + first_error);
  return runs;
}

}  // namespace ma2cl
