#include "ma2cl/buffer.hpp"

#include <random>
#include <stdexcept>

namespace ma2cl {

void Trajectory::clear() { *this = Trajectory{}; }

void Trajectory::check() const {
  const std::size_t n = rewards.size();
  if (obs.size() != n || actions.size() != n || action_features.size() != n || log_probs.size() != n ||
      values.size() != n || dones.size() != n || episode_ids.size() != n || episode_t.size() != n) {
    throw std::logic_error("Trajectory: per-step arrays have different lengths");
  }
}

std::vector<RolloutWorker> make_workers(const std::string& env_name, int n_agents, int horizon, int count) {
  if (count < 1) throw std::invalid_argument("make_workers: need at least one worker");
  std::vector<RolloutWorker> ws(static_cast<std::size_t>(count));
  for (auto& w : ws) w.env = make_env(env_name, n_agents, horizon);
  return ws;
}

std::vector<Trajectory> collect_rollout(std::vector<RolloutWorker>& workers, RolloutPolicy& policy, Index n_steps,
                                        Rng& rng) {
  if (n_steps < 1) throw std::invalid_argument("collect_rollout: n_steps must be >= 1");
  if (workers.empty()) throw std::invalid_argument("collect_rollout: no workers");
  const Index n = workers.front().env->n_agents();
  const Index od = workers.front().env->obs_dim();
  const Index nw = static_cast<Index>(workers.size());
  std::vector<Trajectory> trajs(workers.size());
  Mat stacked(nw * n, od);

  for (Index step = 0; step < n_steps; ++step) {
    for (Index w = 0; w < nw; ++w) {
      auto& wk = workers[static_cast<std::size_t>(w)];
      if (wk.needs_reset) {
        wk.obs = wk.env->reset(rng);
        ++wk.episode_id;
        wk.t = 0;
        wk.episode_return = 0.0;
        wk.needs_reset = false;
      }
      stacked.middleRows(w * n, n) = wk.obs;
    }
    PolicyStep ps = policy.act(stacked, n, rng);
    for (Index w = 0; w < nw; ++w) {
      auto& wk = workers[static_cast<std::size_t>(w)];
      auto& tr = trajs[static_cast<std::size_t>(w)];
      const Mat feats = ps.features.middleRows(w * n, n);
      StepResult sr = wk.env->step(wk.env->action_space().discrete() ? Mat(ps.actions.middleRows(w * n, n)) : feats);
      tr.obs.push_back(wk.obs);
      tr.actions.push_back(ps.actions.middleRows(w * n, n));
      tr.action_features.push_back(feats);
      tr.log_probs.push_back(ps.log_probs.segment(w * n, n));
      tr.rewards.push_back(sr.team_reward);
      tr.values.push_back(ps.values(w));
      tr.dones.push_back(sr.done ? 1 : 0);
      tr.episode_ids.push_back(wk.episode_id);
      tr.episode_t.push_back(wk.t);
      wk.episode_return += sr.team_reward;
      ++wk.t;
      wk.obs = std::move(sr.obs);
      if (sr.done) {
        tr.completed_returns.push_back(wk.episode_return);
        wk.needs_reset = true;
      }
    }
  }

  // Bootstrap values for workers whose episode is still running.
  std::vector<Index> open;
  for (Index w = 0; w < nw; ++w) {
    if (!workers[static_cast<std::size_t>(w)].needs_reset) open.push_back(w);
  }
  if (!open.empty()) {
    Mat tail(static_cast<Index>(open.size()) * n, od);
    for (std::size_t i = 0; i < open.size(); ++i) tail.middleRows(static_cast<Index>(i) * n, n) = workers[static_cast<std::size_t>(open[i])].obs;
    const Eigen::VectorXd v = policy.value(tail, n);
    for (std::size_t i = 0; i < open.size(); ++i) trajs[static_cast<std::size_t>(open[i])].bootstrap_value = v(static_cast<Index>(i));
  }
  for (auto& tr : trajs) tr.check();
  return trajs;
}

Trajectory collect_rollout(Environment& env, RolloutPolicy& policy, Index n_steps, Rng& rng) {
  // Non-owning adapter so the caller keeps its env.
  struct Borrowed final : Environment {
    Environment& e;
    explicit Borrowed(Environment& x) : e(x) {}
    Index n_agents() const override { return e.n_agents(); }
    Index obs_dim() const override { return e.obs_dim(); }
    ActionSpace action_space() const override { return e.action_space(); }
    int horizon() const override { return e.horizon(); }
    Mat reset(Rng& r) override { return e.reset(r); }
    StepResult step(const Mat& a) override { return e.step(a); }
    std::string name() const override { return e.name(); }
  };
  std::vector<RolloutWorker> ws(1);
  ws[0].env = std::make_unique<Borrowed>(env);
  return std::move(collect_rollout(ws, policy, n_steps, rng).front());
}

std::vector<AuxIndex> valid_aux_indices(const std::vector<Trajectory>& trajs, int k) {
  if (k < 1) throw std::invalid_argument("sample_aux_batch: k must be >= 1");
  std::vector<AuxIndex> out;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& tr = trajs[i];
    for (Index t = k; t < tr.size(); ++t) {
      if (tr.episode_ids[static_cast<std::size_t>(t)] == tr.episode_ids[static_cast<std::size_t>(t - k)]) out.push_back({i, t});
    }
  }
  return out;
}

std::vector<TimestepSample<double>> sample_aux_batch(const std::vector<Trajectory>& trajs, Index batch_size, int k,
                                                     Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("sample_aux_batch: batch_size must be >= 1");
  const auto valid = valid_aux_indices(trajs, k);
  if (valid.empty()) throw std::invalid_argument("rollout too short for offset k");
  std::uniform_int_distribution<std::size_t> pick(0, valid.size() - 1);
  std::vector<TimestepSample<double>> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (Index b = 0; b < batch_size; ++b) {
    const AuxIndex ix = valid[pick(rng)];
    const auto& tr = trajs[ix.traj];
    const auto t = static_cast<std::size_t>(ix.t);
    const auto p = static_cast<std::size_t>(ix.t - k);
    TimestepSample<double> s;
    s.obs_t = tr.obs[t];
    s.act_t = tr.action_features[t];
    s.obs_prev = tr.obs[p];
    s.act_prev = tr.action_features[p];
    s.episode_id = tr.episode_ids[t];
    s.t = tr.episode_t[t];
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TimestepSample<double>> sample_aux_batch(const Trajectory& traj, Index batch_size, int k, Rng& rng) {
  std::vector<Trajectory> one{traj};
  return sample_aux_batch(one, batch_size, k, rng);
}

}  // namespace ma2cl
