#include "ma2cl/probe.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace ma2cl {

MixKind parse_mix_kind(const std::string& s) {
  if (s == "zero") return MixKind::zero;
  if (s == "sum_zero") return MixKind::sum_zero;
  if (s == "random") return MixKind::random;
  throw std::invalid_argument("unknown B kind '" + s + "' (expected zero, sum_zero, random)");
}

TemporalKind parse_temporal_kind(const std::string& s) {
  if (s == "zero") return TemporalKind::zero;
  if (s == "rotation") return TemporalKind::rotation;
  if (s == "random") return TemporalKind::random;
  throw std::invalid_argument("unknown C kind '" + s + "' (expected zero, rotation, random)");
}

std::string to_string(MixKind k) {
  switch (k) {
    case MixKind::zero: return "zero";
    case MixKind::sum_zero: return "sum_zero";
    case MixKind::random: return "random";
  }
  return "?";
}

std::string to_string(TemporalKind k) {
  switch (k) {
    case TemporalKind::zero: return "zero";
    case TemporalKind::rotation: return "rotation";
    case TemporalKind::random: return "random";
  }
  return "?";
}

void ProbeSpec::validate() const {
  if (n_agents < 2) throw std::invalid_argument("probe: n_agents must be >= 2");
  if (obs_dim < 1) throw std::invalid_argument("probe: obs_dim must be >= 1");
  if (n_sequences < 1 || length < 1) throw std::invalid_argument("probe: need at least one sequence of length >= 1");
}

namespace {

Tensor<double> gaussian(Index r, Index c, double s, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = s * n(rng);
  return m;
}

}  // namespace

ProbeDataset generate(const ProbeSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Index n = spec.n_agents, d = spec.obs_dim, nd = n * d;
  ProbeDataset ds;

  switch (spec.b) {
    case MixKind::zero: ds.B = Tensor<double>::Zero(d, d); break;
    case MixKind::sum_zero: ds.B = -static_cast<double>(n - 1) * Tensor<double>::Identity(d, d); break;
    case MixKind::random: ds.B = gaussian(d, d, 0.5 / std::sqrt(static_cast<double>(d)), rng); break;
  }
  switch (spec.c) {
    case TemporalKind::zero: ds.C = Tensor<double>::Zero(d, d); break;
    case TemporalKind::rotation: {
      Eigen::MatrixXd g = gaussian(d, d, 1.0, rng);
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
      Eigen::MatrixXd q = qr.householderQ();
      // Sign-fix so Q is a deterministic function of g.
      for (Index j = 0; j < d; ++j) {
        if (qr.matrixQR()(j, j) < 0) q.col(j) *= -1.0;
      }
      ds.C = q;
      break;
    }
    case TemporalKind::random: ds.C = gaussian(d, d, 0.9 / std::sqrt(static_cast<double>(d)), rng); break;
  }

  Eigen::MatrixXd S = Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n - 1));
  S.diagonal().setZero();
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(nd, nd);
  Eigen::MatrixXd IC = Eigen::MatrixXd::Zero(nd, nd);
  for (Index i = 0; i < n; ++i) {
    IC.block(i * d, i * d, d, d) = ds.C;
    for (Index j = 0; j < n; ++j) A.block(i * d, j * d, d, d) -= S(i, j) * ds.B;
  }
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const double tol = 1e-10 * std::max(1.0, svd.singularValues()(0));
  Index rank = 0;
  for (Index i = 0; i < svd.singularValues().size(); ++i) rank += svd.singularValues()(i) > tol ? 1 : 0;
  const Eigen::MatrixXd null_basis = svd.matrixV().rightCols(nd - rank);
  if (null_basis.cols() == 0 && ds.C.isZero(0.0)) {
    throw std::invalid_argument("probe: B=" + to_string(spec.b) + ", C=" + to_string(spec.c) +
                                " only admits all-zero observations");
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  ds.sequences.resize(static_cast<std::size_t>(spec.n_sequences));
  for (auto& seq : ds.sequences) {
    seq.push_back(gaussian(n, d, 1.0, rng));
    for (int t = 1; t <= spec.length; ++t) {
      const Eigen::VectorXd prev = seq.back().reshaped<Eigen::RowMajor>();
      Eigen::VectorXd x = cod.solve(IC * prev);
      if (null_basis.cols() > 0) {
        Eigen::VectorXd g(null_basis.cols());
        for (Index i = 0; i < g.size(); ++i) g(i) = normal(rng);
        x += null_basis * g;
      }
      const double res = (A * x - IC * prev).cwiseAbs().maxCoeff();
      if (!(res <= 1e-9)) throw std::runtime_error("probe: generator residual " + std::to_string(res) + " exceeds 1e-9");
      seq.push_back(x.reshaped<Eigen::RowMajor>(n, d));
    }
  }

  Index episode = 0;
  for (const auto& seq : ds.sequences) {
    for (std::size_t t = 1; t < seq.size(); ++t) {
      TimestepSample<double> s;
      s.obs_t = seq[t];
      s.obs_prev = seq[t - 1];
      s.act_t = Tensor<double>(n, 0);
      s.act_prev = Tensor<double>(n, 0);
      s.episode_id = episode;
      s.t = static_cast<Index>(t);
      ds.samples.push_back(std::move(s));
    }
    ++episode;
  }
  return ds;
}

double relation_residual(const ProbeDataset& data) {
  double worst = 0.0;
  for (const auto& seq : data.sequences) {
    for (std::size_t t = 1; t < seq.size(); ++t) {
      const auto& o = seq[t];
      const Index n = o.rows();
      const Tensor<double> mixed = o * data.B.transpose();  // row j holds (B o^j)^T
      for (Index i = 0; i < n; ++i) {
        const Eigen::RowVectorXd others = (mixed.colwise().sum() - mixed.row(i)) / static_cast<double>(n - 1);
        const Eigen::RowVectorXd pred = others + seq[t - 1].row(i) * data.C.transpose();
        worst = std::max(worst, (o.row(i) - pred).cwiseAbs().maxCoeff());
      }
    }
  }
  return worst;
}

ProbeStack make_probe_stack(const ProbeSpec& spec, const ProbeTrainConfig& cfg, Rng& rng) {
  ProbeStack s;
  s.encoder = make_encoder<double>(EncoderConfig{spec.obs_dim, cfg.hidden_dims, cfg.repr_dim}, rng);
  s.aux = make_aux_stack(s.encoder, spec.n_agents, 0, cfg.ma2cl, rng);
  return s;
}

double probe_accuracy(const ProbeStack& stack, const std::vector<TimestepSample<double>>& samples, const Ma2clConfig& cfg,
                      Index instances, Rng& rng) {
  if (samples.empty()) throw std::invalid_argument("probe_accuracy: no samples");
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  const Index per_sample = cfg.n_mask;
  Index remaining = (instances + per_sample - 1) / per_sample;
  double hits = 0.0, total = 0.0;
  while (remaining > 0) {
    const Index b = std::min<Index>(remaining, 256);
    std::vector<TimestepSample<double>> batch;
    for (Index i = 0; i < b; ++i) batch.push_back(samples[pick(rng)]);
    const auto mb = mask_batch(batch, cfg.n_mask, cfg.strategy, rng);
    const auto out = contrastive_pass(stack.aux, stack.encoder, mb);
    const double masked = mb.mask.sum();
    hits += out.accuracy * masked;
    total += masked;
    remaining -= b;
  }
  return hits / total;
}

ProbeResult probe_train(const ProbeSpec& spec, const ProbeTrainConfig& cfg, std::uint64_t train_seed) {
  const ProbeDataset train = generate(spec);
  ProbeSpec held = spec;
  held.seed = spec.seed + 1;
  const ProbeDataset eval = generate(held);

  Rng init(train_seed), draw(train_seed ^ 0x9e3779b97f4a7c15ULL), eval_rng(train_seed + 17);
  ProbeStack st = make_probe_stack(spec, cfg, init);
  std::vector<ParamStore<double>*> groups{&st.encoder};
  for (auto* g : st.aux.trainable()) groups.push_back(g);
  Adam<double> opt(groups, {cfg.lr, 0.9, 0.999, 1e-8});

  ProbeResult res;
  res.initial_accuracy = probe_accuracy(st, eval.samples, cfg.ma2cl, cfg.eval_instances, eval_rng);
  std::uniform_int_distribution<std::size_t> pick(0, train.samples.size() - 1);
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<TimestepSample<double>> batch;
    batch.reserve(static_cast<std::size_t>(cfg.ma2cl.aux_batch));
    for (Index i = 0; i < cfg.ma2cl.aux_batch; ++i) batch.push_back(train.samples[pick(draw)]);
    const auto mb = mask_batch(batch, cfg.ma2cl.n_mask, cfg.ma2cl.strategy, draw);
    const auto out = contrastive_pass(st.aux, st.encoder, mb);
    if (!std::isfinite(out.loss.item())) throw std::runtime_error("probe_train: non-finite loss at step " + std::to_string(step));
    backward(out.loss);
    opt.step();
    opt.zero_grad();
    update_targets(st.aux, st.encoder, cfg.ma2cl.tau);
    res.loss.push_back(out.loss.item());
    if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      res.eval_steps.push_back(step);
      res.eval_accuracy.push_back(probe_accuracy(st, eval.samples, cfg.ma2cl, cfg.eval_instances, eval_rng));
    }
  }
  res.final_accuracy = res.eval_accuracy.empty() ? probe_accuracy(st, eval.samples, cfg.ma2cl, cfg.eval_instances, eval_rng)
                                                 : res.eval_accuracy.back();
  return res;
}

}  // namespace ma2cl
