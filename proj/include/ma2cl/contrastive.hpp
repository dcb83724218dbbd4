#pragma once

#include "ma2cl/autodiff.hpp"
#include "ma2cl/nets.hpp"

#include <cmath>
#include <vector>

namespace ma2cl {

/// Store holding the learned bilinear matrix `W` [d, d], initialized to I.
template <typename Scalar>
ParamStore<Scalar> make_similarity(Index dim) {
  if (dim <= 0) throw std::invalid_argument("make_similarity: dim must be positive");
  ParamStore<Scalar> p;
  p.add("W", Tensor<Scalar>::Identity(dim, dim));
  return p;
}

/// omega(q, k) = q^T W k.
template <typename Scalar, typename Q, typename K>
Scalar bilinear_similarity(const Eigen::MatrixBase<Q>& q, const Eigen::MatrixBase<K>& k, const Tensor<Scalar>& w) {
  if (q.size() != w.rows() || k.size() != w.cols()) {
    throw std::invalid_argument("bilinear_similarity: dims q=" + std::to_string(q.size()) + " k=" + std::to_string(k.size()) +
                                " W=" + shape_str(w));
  }
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> qr = q.reshaped().transpose().template cast<Scalar>();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> kc = k.reshaped().template cast<Scalar>();
  return (qr * w * kc)(0, 0);
}

/// Masked InfoNCE over rows grouped as B samples of n_agents:
///   loss = (1/B) sum_b sum_i M_bi * -log softmax_j(q_bi^T W k_bj)_i
/// Keys pass through stop_gradient, so only q and W receive gradients.
template <typename Scalar>
Var<Scalar> info_nce(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& w,
                     const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& mask, Index n_agents) {
  if (q.rows() != k.rows() || q.cols() != k.cols() || w.rows() != q.cols() || w.cols() != k.cols()) {
    throw std::invalid_argument("info_nce: shape mismatch q=" + shape_str(q.value()) + " k=" + shape_str(k.value()) +
                                " W=" + shape_str(w.value()));
  }
  if (n_agents < 1 || q.rows() % n_agents != 0 || mask.size() != q.rows()) {
    throw std::invalid_argument("info_nce: rows " + std::to_string(q.rows()) + " incompatible with " +
                                std::to_string(n_agents) + " agents / mask of length " + std::to_string(mask.size()));
  }
  const Index batch = q.rows() / n_agents;
  Var<Scalar> logits = grouped_matmul_nt(matmul(q, w), stop_gradient(k), n_agents);
  if (!logits.value().allFinite()) throw std::domain_error("info_nce: non-finite similarity");
  std::vector<Index> positive(static_cast<std::size_t>(q.rows()));
  for (Index r = 0; r < q.rows(); ++r) positive[static_cast<std::size_t>(r)] = r % n_agents;
  Var<Scalar> log_p = gather(log_softmax(logits), std::move(positive));
  Var<Scalar> weighted = mul(log_p, Var<Scalar>::constant(Tensor<Scalar>(mask)));
  return scale(sum(weighted), Scalar(-1) / static_cast<Scalar>(batch));
}

/// Fraction of masked rows whose argmax_j omega(q_i, k_j) (lowest index on
/// ties) is the agent itself. Returns 0 when nothing is masked.
template <typename Scalar>
double contrastive_accuracy(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& w,
                            const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& mask, Index n_agents) {
  if (q.rows() != k.rows() || q.rows() % n_agents != 0 || mask.size() != q.rows()) {
    throw std::invalid_argument("contrastive_accuracy: shape mismatch");
  }
  const Tensor<Scalar> qw = q * w;
  Index hits = 0, total = 0;
  for (Index b = 0; b < q.rows() / n_agents; ++b) {
    const Tensor<Scalar> sims = qw.middleRows(b * n_agents, n_agents) * k.middleRows(b * n_agents, n_agents).transpose();
    for (Index i = 0; i < n_agents; ++i) {
      if (mask(b * n_agents + i) == Scalar(0)) continue;
      Index best = 0;
      for (Index j = 1; j < n_agents; ++j) {
        if (sims(i, j) > sims(i, best)) best = j;
      }
      hits += best == i ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace ma2cl
