#pragma once

// The masked attentive contrastive auxiliary task, assembled from the
// masking, encoder/projector, reconstruction, and contrastive pieces.

#include "ma2cl/autodiff.hpp"
#include "ma2cl/contrastive.hpp"
#include "ma2cl/masking.hpp"
#include "ma2cl/nets.hpp"
#include "ma2cl/reconstruction.hpp"

#include <vector>

namespace ma2cl {

struct Ma2clConfig {
  int n_mask = 1;
  MaskStrategy strategy{};
  double lambda = 1.0;
  double tau = 0.01;
  Index aux_batch = 128;
  Index proj_hidden = 512;
  Index proj_out = 0;  // 0 selects the encoder's repr_dim
  Index blocks = 1;
  Index heads = 1;
  bool concat_action = true;
  bool pos_embedding = true;

  void validate() const {
    strategy.validate();
    if (n_mask < 1) throw std::invalid_argument("ma2cl: n_mask must be >= 1");
    if (!(tau >= 0.0 && tau < 1.0)) throw std::invalid_argument("ma2cl: tau must lie in [0, 1)");
    if (!(lambda >= 0.0)) throw std::invalid_argument("ma2cl: lambda must be >= 0");
    if (aux_batch < 1 || proj_hidden < 1 || proj_out < 0 || blocks < 1 || heads < 1) {
      throw std::invalid_argument("ma2cl: sizes must be positive");
    }
  }
};

/// Everything the auxiliary task owns. The online encoder is not here: it is
/// borrowed from the actor on every pass.
template <typename Scalar>
struct AuxStack {
  ReconstructorConfig recon_cfg;
  ParamStore<Scalar> target_encoder;
  ParamStore<Scalar> projector;
  ParamStore<Scalar> target_projector;
  ParamStore<Scalar> reconstructor;
  ParamStore<Scalar> similarity;

  /// Stores updated by gradient descent.
  std::vector<ParamStore<Scalar>*> trainable() { return {&projector, &reconstructor, &similarity}; }
};

template <typename Scalar>
AuxStack<Scalar> make_aux_stack(const ParamStore<Scalar>& online_encoder, Index n_agents, Index act_dim,
                                const Ma2clConfig& cfg, Rng& rng) {
  cfg.validate();
  const Index repr = mlp_output_dim(online_encoder);
  ProjectorConfig pc{repr, cfg.proj_hidden, cfg.proj_out == 0 ? repr : cfg.proj_out};
  ReconstructorConfig rc;
  rc.n_agents_max = n_agents;
  rc.proj_dim = pc.out_dim;
  rc.act_dim = act_dim;
  rc.blocks = cfg.blocks;
  rc.heads = cfg.heads;
  rc.concat_action = cfg.concat_action;
  rc.pos_embedding = cfg.pos_embedding;

  AuxStack<Scalar> s;
  s.recon_cfg = rc;
  s.target_encoder = online_encoder.make_target();
  s.projector = make_projector<Scalar>(pc, rng);
  s.target_projector = s.projector.make_target();
  s.reconstructor = make_reconstructor<Scalar>(rc, rng);
  s.similarity = make_similarity<Scalar>(pc.out_dim);
  return s;
}

/// B samples stacked agent-major: row b*N + i is agent i of sample b.
template <typename Scalar>
struct MaskedBatch {
  Tensor<Scalar> masked_obs;
  Tensor<Scalar> masked_act;
  Tensor<Scalar> obs;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mask;
  Index n_agents = 0;
};

template <typename Scalar>
MaskedBatch<Scalar> mask_batch(const std::vector<TimestepSample<Scalar>>& samples, int n_mask, const MaskStrategy& strategy,
                               Rng& rng) {
  if (samples.empty()) throw std::invalid_argument("mask_batch: empty batch");
  const Index n = samples.front().obs_t.rows();
  const Index od = samples.front().obs_t.cols();
  const Index ad = samples.front().act_t.cols();
  const Index rows = n * static_cast<Index>(samples.size());
  MaskedBatch<Scalar> mb;
  mb.n_agents = n;
  mb.masked_obs.resize(rows, od);
  mb.masked_act.resize(rows, ad);
  mb.obs.resize(rows, od);
  mb.mask.resize(rows);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& s = samples[b];
    const MaskVector m = sample_mask(static_cast<int>(n), n_mask, rng);
    auto masked = apply_mask(s, m, strategy, rng);
    const Index r0 = static_cast<Index>(b) * n;
    mb.masked_obs.middleRows(r0, n) = masked.obs;
    mb.masked_act.middleRows(r0, n) = masked.act;
    mb.obs.middleRows(r0, n) = s.obs_t;
    mb.mask.segment(r0, n) = m.template weights<Scalar>();
  }
  return mb;
}

template <typename Scalar>
struct AuxOutput {
  Var<Scalar> loss;
  Var<Scalar> queries;   // reconstructed features y_hat
  Tensor<Scalar> keys;   // target features y (no graph)
  double accuracy = 0.0;
};

/// One forward pass of the auxiliary task. Gradients from `loss` reach the
/// online encoder, projector, reconstructor, and W only.
template <typename Scalar>
AuxOutput<Scalar> contrastive_pass(const AuxStack<Scalar>& stack, const ParamStore<Scalar>& online_encoder,
                                   const MaskedBatch<Scalar>& batch) {
  const Index n = batch.n_agents;
  Var<Scalar> z_tilde = mlp_encode(online_encoder, Var<Scalar>::constant(batch.masked_obs));
  Var<Scalar> z_hat = project(stack.projector, z_tilde);
  Var<Scalar> tokens = build_tokens(z_hat, batch.masked_act, stack.reconstructor, stack.recon_cfg, n);
  Var<Scalar> y_hat = reconstruct(stack.reconstructor, stack.recon_cfg, tokens, n);

  Var<Scalar> z = mlp_encode(stack.target_encoder, Var<Scalar>::constant(batch.obs));
  Var<Scalar> y = stop_gradient(project(stack.target_projector, z));

  const auto& w = stack.similarity.at("W");
  AuxOutput<Scalar> out;
  out.loss = info_nce(y_hat, y, w, batch.mask, n);
  out.queries = y_hat;
  out.keys = y.value();
  out.accuracy = contrastive_accuracy(y_hat.value(), y.value(), w.value(), batch.mask, n);
  return out;
}

template <typename Scalar>
void update_targets(AuxStack<Scalar>& stack, const ParamStore<Scalar>& online_encoder, Scalar tau) {
  ema_update(stack.target_encoder, online_encoder, tau);
  ema_update(stack.target_projector, stack.projector, tau);
}

}  // namespace ma2cl
