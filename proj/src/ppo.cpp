#include "ma2cl/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace ma2cl {

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * M_PI);

}  // namespace

void PpoConfig::validate() const {
  auto bad = [](const std::string& what) { throw std::invalid_argument("ppo config: " + what); };
  if (!(gamma >= 0.0 && gamma <= 1.0)) bad("gamma must lie in [0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) bad("gae_lambda must lie in [0, 1]");
  if (ppo_epochs < 1) bad("ppo_epochs must be >= 1");
  if (!(ppo_clip > 0.0)) bad("ppo_clip must be > 0");
  if (num_mini_batch < 1) bad("num_mini_batch must be >= 1");
  if (!(entropy_coef >= 0.0) || !(value_coef >= 0.0)) bad("loss coefficients must be >= 0");
  if (!(max_grad_norm > 0.0)) bad("max_grad_norm must be > 0");
  if (!(lr_actor > 0.0) || !(lr_critic > 0.0) || !(optim_eps > 0.0)) bad("learning rates and eps must be > 0");
  if (!(huber_delta > 0.0)) bad("huber_delta must be > 0");
}

GaeResult compute_gae(const Eigen::VectorXd& rewards, const Eigen::VectorXd& values, double bootstrap, double gamma,
                      double lam, const std::vector<std::uint8_t>& dones) {
  const Index T = rewards.size();
  if (values.size() != T || (!dones.empty() && static_cast<Index>(dones.size()) != T)) {
    throw std::invalid_argument("compute_gae: rewards, values and dones must share a length");
  }
  GaeResult out;
  out.adv.resize(T);
  double next_value = bootstrap;
  double next_adv = 0.0;
  for (Index t = T - 1; t >= 0; --t) {
    const double live = (!dones.empty() && dones[static_cast<std::size_t>(t)]) ? 0.0 : 1.0;
    const double delta = rewards(t) + gamma * next_value * live - values(t);
    next_adv = delta + gamma * lam * live * next_adv;
    out.adv(t) = next_adv;
    next_value = values(t);
  }
  out.returns = out.adv + values;
  return out;
}

void compute_advantages(Trajectory& traj, double gamma, double lam) {
  traj.check();
  const Eigen::VectorXd r = Eigen::Map<const Eigen::VectorXd>(traj.rewards.data(), traj.size());
  const Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(traj.values.data(), traj.size());
  GaeResult g = compute_gae(r, v, traj.bootstrap_value, gamma, lam, traj.dones);
  traj.advantages = std::move(g.adv);
  traj.returns = std::move(g.returns);
}

VarD ppo_actor_loss(const VarD& logp_new, const Mat& logp_old, const Mat& adv, double eps_clip) {
  if (!(eps_clip > 0.0)) throw std::invalid_argument("ppo_actor_loss: eps_clip must be > 0");
  if (logp_new.rows() != logp_old.rows() || logp_new.cols() != logp_old.cols() || adv.rows() != logp_old.rows() ||
      adv.cols() != logp_old.cols()) {
    throw std::invalid_argument("ppo_actor_loss: shape mismatch " + shape_str(logp_new.value()) + " / " +
                                shape_str(logp_old) + " / " + shape_str(adv));
  }
  VarD ratio = exp(sub(logp_new, VarD::constant(logp_old)));
  if (!ratio.value().allFinite()) throw std::domain_error("ppo_actor_loss: non-finite probability ratio");
  const VarD a = VarD::constant(adv);
  VarD surr1 = mul(ratio, a);
  VarD surr2 = mul(clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip), a);
  return -mean(minimum(surr1, surr2));
}

VarD value_loss(const VarD& values, const Mat& returns, bool use_huber, double huber_delta) {
  if (values.rows() != returns.rows() || values.cols() != returns.cols()) {
    throw std::invalid_argument("value_loss: shape mismatch " + shape_str(values.value()) + " vs " + shape_str(returns));
  }
  VarD err = sub(values, VarD::constant(returns));
  return use_huber ? mean(huber(err, huber_delta)) : mean(square(err));
}

VarD gaussian_log_prob(const VarD& mean_, const VarD& log_std, const Mat& actions) {
  if (actions.rows() != mean_.rows() || actions.cols() != mean_.cols() || log_std.rows() != 1 ||
      log_std.cols() != mean_.cols()) {
    throw std::invalid_argument("gaussian_log_prob: shape mismatch");
  }
  VarD diff = sub(VarD::constant(actions), mean_);
  VarD inv_var = exp(scale(log_std, -2.0));
  VarD quad = scale(mul(square(diff), inv_var), 0.5);
  VarD per_dim = add_scalar(add(quad, log_std), kHalfLog2Pi);
  return -sum_last(per_dim);
}

VarD gaussian_entropy(const VarD& log_std, Index /*rows*/) {
  return add_scalar(sum(log_std), static_cast<double>(log_std.cols()) * (0.5 + kHalfLog2Pi));
}

VarD categorical_log_prob(const VarD& logits, const Mat& actions) {
  if (actions.rows() != logits.rows() || actions.cols() < 1) throw std::invalid_argument("categorical_log_prob: shape mismatch");
  std::vector<Index> idx(static_cast<std::size_t>(actions.rows()));
  for (Index r = 0; r < actions.rows(); ++r) {
    const auto a = static_cast<Index>(std::lround(actions(r, 0)));
    if (a < 0 || a >= logits.cols()) throw std::invalid_argument("categorical_log_prob: action out of range");
    idx[static_cast<std::size_t>(r)] = a;
  }
  return gather(log_softmax(logits), std::move(idx));
}

VarD categorical_entropy(const VarD& logits) {
  VarD lp = log_softmax(logits);
  return -mean(sum_last(mul(softmax(logits), lp)));
}

// ---------------------------------------------------------------------------

ActorCritic::ActorCritic(const PolicyConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.n_agents < 1 || cfg.obs_dim < 1) throw std::invalid_argument("ActorCritic: bad agent count or obs_dim");
  actor_encoder = make_encoder<double>(cfg.encoder(), rng);
  const Index out = cfg.space.n;
  add_linear(policy_head, "l0", cfg.repr_dim, out, rng);
  // Small last-layer gain keeps the initial policy near uniform / zero-mean.
  policy_head.at("l0.weight").mutable_value() *= 0.01;
  if (!cfg.space.discrete()) policy_head.add("log_std", Mat::Constant(1, out, cfg.log_std_init));
  std::vector<Index> cd{cfg.n_agents * cfg.obs_dim};
  cd.insert(cd.end(), cfg.critic_hidden.begin(), cfg.critic_hidden.end());
  cd.push_back(1);
  critic = make_mlp<double>(cd, rng);
}

PolicyOutput ActorCritic::policy(const VarD& obs) const {
  VarD z = mlp_encode(actor_encoder, obs);
  PolicyOutput po;
  po.mean_or_logits = linear(policy_head, "l0", gelu(z));
  if (!po.mean_or_logits.value().allFinite()) throw std::domain_error("policy: non-finite distribution parameters");
  if (!cfg_.space.discrete()) {
    po.log_std = policy_head.at("log_std");
    if (!po.log_std.value().allFinite()) throw std::domain_error("policy: non-finite log_std");
  }
  return po;
}

VarD ActorCritic::critic_values(const VarD& joint_obs) const { return mlp_forward(critic, joint_obs, "critic"); }

VarD ActorCritic::log_prob(const PolicyOutput& po, const Mat& actions) const {
  return cfg_.space.discrete() ? categorical_log_prob(po.mean_or_logits, actions)
                               : gaussian_log_prob(po.mean_or_logits, po.log_std, actions);
}

VarD ActorCritic::entropy(const PolicyOutput& po) const {
  return cfg_.space.discrete() ? categorical_entropy(po.mean_or_logits) : gaussian_entropy(po.log_std, po.mean_or_logits.rows());
}

Mat joint_observation(const Mat& stacked, Index n_agents) {
  if (n_agents < 1 || stacked.rows() % n_agents != 0) throw std::invalid_argument("joint_observation: rows not divisible by N");
  return stacked.reshaped<Eigen::RowMajor>(stacked.rows() / n_agents, n_agents * stacked.cols());
}

Mat ActorCritic::action_features(const Mat& actions) const {
  if (!cfg_.space.discrete()) return actions.array().tanh().matrix();
  Mat f = Mat::Zero(actions.rows(), cfg_.space.n);
  for (Index r = 0; r < actions.rows(); ++r) f(r, static_cast<Index>(std::lround(actions(r, 0)))) = 1.0;
  return f;
}

PolicyStep ActorCritic::act(const Mat& obs, Index n_agents, Rng& rng) {
  if (!obs.allFinite()) throw std::domain_error("act: non-finite observation");
  if (n_agents != cfg_.n_agents) throw std::invalid_argument("act: agent count mismatch");
  const PolicyOutput po = policy(VarD::constant(obs));
  const Mat& head = po.mean_or_logits.value();
  PolicyStep ps;
  if (cfg_.space.discrete()) {
    const Mat probs = softmax(VarD::constant(head)).value();
    ps.actions.resize(head.rows(), 1);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (Index r = 0; r < head.rows(); ++r) {
      const double u = u01(rng);
      double c = 0.0;
      Index a = head.cols() - 1;
      for (Index j = 0; j < head.cols(); ++j) {
        c += probs(r, j);
        if (u < c) {
          a = j;
          break;
        }
      }
      ps.actions(r, 0) = static_cast<double>(a);
    }
  } else {
    std::normal_distribution<double> normal(0.0, 1.0);
    const Eigen::RowVectorXd std_dev = po.log_std.value().array().exp();
    ps.actions.resize(head.rows(), head.cols());
    for (Index r = 0; r < head.rows(); ++r) {
      for (Index j = 0; j < head.cols(); ++j) ps.actions(r, j) = head(r, j) + std_dev(j) * normal(rng);
    }
  }
  ps.features = action_features(ps.actions);
  ps.log_probs = log_prob(PolicyOutput{VarD::constant(head), cfg_.space.discrete() ? VarD{} : VarD::constant(po.log_std.value())},
                          ps.actions)
                     .value()
                     .col(0);
  ps.values = value(obs, n_agents);
  return ps;
}

Eigen::VectorXd ActorCritic::value(const Mat& obs, Index n_agents) {
  return critic_values(VarD::constant(joint_observation(obs, n_agents))).value().col(0);
}

Mat ActorCritic::act_greedy(const Mat& obs) const {
  const Mat head = policy(VarD::constant(obs)).mean_or_logits.value();
  if (!cfg_.space.discrete()) return head.array().tanh().matrix();
  Mat a(head.rows(), 1);
  for (Index r = 0; r < head.rows(); ++r) {
    Index best = 0;
    for (Index j = 1; j < head.cols(); ++j) {
      if (head(r, j) > head(r, best)) best = j;
    }
    a(r, 0) = static_cast<double>(best);
  }
  return a;
}

// ---------------------------------------------------------------------------

namespace {

struct Flat {
  std::size_t traj;
  std::size_t t;
};

}  // namespace

UpdateStats rl_update(ActorCritic& ac, Optimizers& opt, const std::vector<Trajectory>& trajs, const PpoConfig& cfg,
                      Rng& rng, const UpdateHooks& hooks) {
  cfg.validate();
  std::vector<Flat> samples;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& tr = trajs[i];
    if (tr.advantages.size() != tr.size()) throw std::invalid_argument("rl_update: advantages not computed");
    for (Index t = 0; t < tr.size(); ++t) samples.push_back({i, static_cast<std::size_t>(t)});
  }
  if (samples.empty()) throw std::invalid_argument("rl_update: empty batch");
  const Index n = ac.config().n_agents;
  const Index od = ac.config().obs_dim;
  const Index pc = ac.config().space.policy_cols();

  Eigen::VectorXd adv_all(static_cast<Index>(samples.size()));
  for (std::size_t s = 0; s < samples.size(); ++s) adv_all(static_cast<Index>(s)) = trajs[samples[s].traj].advantages(static_cast<Index>(samples[s].t));
  const double adv_mean = adv_all.mean();
  const double adv_std = std::sqrt((adv_all.array() - adv_mean).square().mean());
  const Eigen::VectorXd adv_norm = (adv_all.array() - adv_mean) / (adv_std + 1e-8);

  std::vector<std::size_t> order(samples.size());
  const int n_mb = std::min<int>(cfg.num_mini_batch, static_cast<int>(samples.size()));
  UpdateStats st;
  bool aux_pending = static_cast<bool>(hooks.aux_loss);

  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t per = samples.size() / static_cast<std::size_t>(n_mb);
    for (int mb = 0; mb < n_mb; ++mb) {
      const std::size_t lo = static_cast<std::size_t>(mb) * per;
      const std::size_t hi = mb + 1 == n_mb ? samples.size() : lo + per;
      const Index m = static_cast<Index>(hi - lo);
      Mat obs(m * n, od), actions(m * n, pc), logp_old(m * n, 1), adv(m * n, 1), returns(m, 1);
      for (std::size_t k = lo; k < hi; ++k) {
        const Index r = static_cast<Index>(k - lo);
        const std::size_t s = order[k];
        const auto& tr = trajs[samples[s].traj];
        const std::size_t t = samples[s].t;
        obs.middleRows(r * n, n) = tr.obs[t];
        actions.middleRows(r * n, n) = tr.actions[t];
        logp_old.middleRows(r * n, n) = tr.log_probs[t];
        adv.middleRows(r * n, n).setConstant(adv_norm(static_cast<Index>(s)));
        returns(r, 0) = tr.returns(static_cast<Index>(t));
      }

      const PolicyOutput po = ac.policy(VarD::constant(obs));
      VarD logp = ac.log_prob(po, actions);
      VarD actor = ppo_actor_loss(logp, logp_old, adv, cfg.ppo_clip);
      VarD vloss = value_loss(ac.critic_values(VarD::constant(joint_observation(obs, n))), returns, cfg.use_huber,
                              cfg.huber_delta);
      VarD ent = ac.entropy(po);
      VarD total = add(add(actor, scale(vloss, cfg.value_coef)), scale(ent, -cfg.entropy_coef));
      if (aux_pending) {
        total = add(total, hooks.aux_loss());
        aux_pending = false;
      }
      if (!std::isfinite(total.item())) {
        std::ostringstream os;
        os << "rl_update: non-finite loss (actor=" << actor.item() << " value=" << vloss.item() << " entropy=" << ent.item()
           << " total=" << total.item() << ") at epoch " << epoch << " minibatch " << mb;
        throw std::runtime_error(os.str());
      }
      backward(total);
      const double na = clip_grad_norm(opt.actor.groups(), cfg.max_grad_norm);
      const double nc = clip_grad_norm(opt.critic.groups(), cfg.max_grad_norm);
      st.grad_norm += std::sqrt(na * na + nc * nc);
      st.post_clip_actor = std::max(st.post_clip_actor, global_grad_norm(opt.actor.groups()));
      st.post_clip_critic = std::max(st.post_clip_critic, global_grad_norm(opt.critic.groups()));
      opt.actor.step();
      opt.critic.step();
      opt.actor.zero_grad();
      opt.critic.zero_grad();
      if (hooks.after_step) hooks.after_step();

      st.actor_loss += actor.item();
      st.value_loss += vloss.item();
      st.entropy += ent.item();
      ++st.steps;
    }
  }
  st.actor_loss /= st.steps;
  st.value_loss /= st.steps;
  st.entropy /= st.steps;
  st.grad_norm /= st.steps;
  return st;
}

}  // namespace ma2cl
