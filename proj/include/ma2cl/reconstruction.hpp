#pragma once

#include "ma2cl/autodiff.hpp"
#include "ma2cl/nets.hpp"

#include <string>
#include <vector>

namespace ma2cl {

struct ReconstructorConfig {
  Index n_agents_max = 0;
  Index proj_dim = 64;     // width of z_hat and of the reconstructed features
  Index act_dim = 0;       // raw continuous action width or one-hot width
  Index blocks = 1;
  Index heads = 1;
  bool concat_action = true;
  bool pos_embedding = true;

  Index d_tok() const { return proj_dim + act_dim; }
  AttentionConfig attention() const { return AttentionConfig{d_tok(), heads, 4}; }

  void validate() const {
    if (n_agents_max <= 0 || proj_dim <= 0 || act_dim < 0) throw std::invalid_argument("ReconstructorConfig: bad dims");
    if (blocks < 1) throw std::invalid_argument("ReconstructorConfig: need at least one block");
    attention().validate();
  }
};

inline std::string block_prefix(Index l) { return "block" + std::to_string(l) + "."; }

/// Parameters: `pos.table` [N_max, d_tok], `block<l>.*`, `head.weight` [d_tok, proj_dim], `head.bias`.
template <typename Scalar>
ParamStore<Scalar> make_reconstructor(const ReconstructorConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore<Scalar> p;
  p.add("pos.table", uniform_tensor<Scalar>(cfg.n_agents_max, cfg.d_tok(), Scalar(1) / std::sqrt(Scalar(cfg.d_tok())), rng));
  for (Index l = 0; l < cfg.blocks; ++l) add_attention_block(p, block_prefix(l), cfg.attention(), rng);
  add_linear(p, "head", cfg.d_tok(), cfg.proj_dim, rng);
  return p;
}

/// token_i = [z_hat_i : a_i] + p^(i mod N). Rows are grouped per sample of
/// `n_agents` consecutive agents. With concat_action off the action slot is
/// zero; with positional embedding off nothing is added.
template <typename Scalar>
Var<Scalar> build_tokens(const Var<Scalar>& z_hat, const Tensor<Scalar>& act_masked, const ParamStore<Scalar>& params,
                         const ReconstructorConfig& cfg, Index n_agents) {
  if (n_agents < 1 || n_agents > cfg.n_agents_max) {
    throw std::invalid_argument("build_tokens: " + std::to_string(n_agents) + " agents exceeds positional table of " +
                                std::to_string(cfg.n_agents_max));
  }
  if (z_hat.cols() != cfg.proj_dim || z_hat.rows() % n_agents != 0) {
    throw std::invalid_argument("build_tokens: latent shape " + shape_str(z_hat.value()) + " incompatible with config");
  }
  if (act_masked.rows() != z_hat.rows() || act_masked.cols() != cfg.act_dim) {
    throw std::invalid_argument("build_tokens: action shape " + shape_str(act_masked) + " vs latent " + shape_str(z_hat.value()));
  }
  Var<Scalar> act = cfg.concat_action ? Var<Scalar>::constant(act_masked)
                                      : Var<Scalar>::constant(Tensor<Scalar>::Zero(act_masked.rows(), act_masked.cols()));
  Var<Scalar> tokens = concat(z_hat, act);
  if (!cfg.pos_embedding) return tokens;
  std::vector<Index> agent(static_cast<std::size_t>(z_hat.rows()));
  for (Index r = 0; r < z_hat.rows(); ++r) agent[static_cast<std::size_t>(r)] = r % n_agents;
  return add(tokens, gather_rows(params.at("pos.table"), std::move(agent)));
}

/// L attention blocks followed by the linear head: [B*N, d_tok] -> [B*N, proj_dim].
template <typename Scalar>
Var<Scalar> reconstruct(const ParamStore<Scalar>& params, const ReconstructorConfig& cfg, const Var<Scalar>& tokens,
                        Index n_agents, std::vector<AttentionTrace<Scalar>>* traces = nullptr) {
  if (tokens.cols() != cfg.d_tok() || n_agents < 1 || tokens.rows() % n_agents != 0) {
    throw std::invalid_argument("reconstruct: token shape " + shape_str(tokens.value()) + " incompatible with config");
  }
  if (!tokens.value().allFinite()) throw std::domain_error("reconstruct: non-finite tokens");
  Var<Scalar> x = tokens;
  for (Index l = 0; l < cfg.blocks; ++l) {
    AttentionTrace<Scalar>* tr = nullptr;
    if (traces) tr = &traces->emplace_back();
    x = attention_block(params, cfg.attention(), x, n_agents, block_prefix(l), tr);
  }
  return linear(params, "head", x);
}

}  // namespace ma2cl
