#pragma once

#include "ma2cl/autodiff.hpp"
#include "ma2cl/nets.hpp"

#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace ma2cl {

/// Binary per-agent selection with 1 <= count <= N.
class MaskVector {
 public:
  explicit MaskVector(std::vector<int> m) : m_(std::move(m)) {
    int total = 0;
    for (int v : m_) {
      if (v != 0 && v != 1) throw std::invalid_argument("MaskVector: entries must be 0 or 1");
      total += v;
    }
    if (total < 1 || total > static_cast<int>(m_.size())) {
      throw std::invalid_argument("MaskVector: need 1 <= masked count <= N");
    }
  }

  Index size() const { return static_cast<Index>(m_.size()); }
  int operator[](Index i) const { return m_[static_cast<std::size_t>(i)]; }
  int n_masked() const { return std::accumulate(m_.begin(), m_.end(), 0); }
  const std::vector<int>& values() const { return m_; }

  template <typename Scalar>
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> weights() const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> w(size());
    for (Index i = 0; i < size(); ++i) w(i) = static_cast<Scalar>(m_[static_cast<std::size_t>(i)]);
    return w;
  }

 private:
  std::vector<int> m_;
};

enum class MaskVariant { prev_step, prev_step_gauss, full_gauss, zero };

inline MaskVariant parse_mask_variant(const std::string& s) {
  if (s == "prev") return MaskVariant::prev_step;
  if (s == "prev_gauss") return MaskVariant::prev_step_gauss;
  if (s == "full_gauss") return MaskVariant::full_gauss;
  if (s == "zero") return MaskVariant::zero;
  throw std::invalid_argument("unknown mask strategy '" + s + "' (expected prev, prev_gauss, full_gauss, zero)");
}

inline std::string to_string(MaskVariant v) {
  switch (v) {
    case MaskVariant::prev_step: return "prev";
    case MaskVariant::prev_step_gauss: return "prev_gauss";
    case MaskVariant::full_gauss: return "full_gauss";
    case MaskVariant::zero: return "zero";
  }
  return "?";
}

struct MaskStrategy {
  MaskVariant variant = MaskVariant::prev_step;
  int k = 1;  // antecedent offset; FullGauss and Zero ignore it for the observation

  void validate() const {
    if (k < 1) throw std::invalid_argument("MaskStrategy: k must be >= 1");
  }
};

/// Observations and actions of all agents at step t plus their t-k antecedents.
template <typename Scalar>
struct TimestepSample {
  Tensor<Scalar> obs_t;     // [N, obs_dim]
  Tensor<Scalar> act_t;     // [N, act_dim]
  Tensor<Scalar> obs_prev;  // [N, obs_dim] at t - k
  Tensor<Scalar> act_prev;  // [N, act_dim] at t - k
  Index episode_id = 0;
  Index t = 0;
};

/// Uniform over all C(n_agents, n_mask) subsets (partial Fisher-Yates).
inline MaskVector sample_mask(int n_agents, int n_mask, Rng& rng) {
  if (n_agents < 1 || n_mask < 1 || n_mask > n_agents) {
    throw std::invalid_argument("sample_mask: need 1 <= n_mask <= n_agents, got n_mask=" + std::to_string(n_mask) +
                                " n_agents=" + std::to_string(n_agents));
  }
  std::vector<int> idx(static_cast<std::size_t>(n_agents));
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> m(static_cast<std::size_t>(n_agents), 0);
  for (int i = 0; i < n_mask; ++i) {
    std::uniform_int_distribution<int> pick(i, n_agents - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    m[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
  }
  return MaskVector(std::move(m));
}

template <typename Scalar>
struct MaskedSequence {
  Tensor<Scalar> obs;  // [N, obs_dim]
  Tensor<Scalar> act;  // [N, act_dim]
};

/// Replaces masked rows; unmasked rows are copied bit-for-bit. Masked actions
/// always carry the t-k action regardless of the observation variant.
template <typename Scalar>
MaskedSequence<Scalar> apply_mask(const TimestepSample<Scalar>& s, const MaskVector& mask, const MaskStrategy& strategy,
                                  Rng& rng) {
  strategy.validate();
  const Index n = s.obs_t.rows();
  if (mask.size() != n || s.obs_prev.rows() != n || s.act_t.rows() != n || s.act_prev.rows() != n ||
      s.obs_prev.cols() != s.obs_t.cols() || s.act_prev.cols() != s.act_t.cols()) {
    throw std::invalid_argument("apply_mask: sample tensors and mask disagree on shape");
  }
  MaskedSequence<Scalar> out{s.obs_t, s.act_t};
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < n; ++i) {
    if (mask[i] == 0) continue;
    out.act.row(i) = s.act_prev.row(i);
    switch (strategy.variant) {
      case MaskVariant::prev_step:
        out.obs.row(i) = s.obs_prev.row(i);
        break;
      case MaskVariant::prev_step_gauss:
        for (Index j = 0; j < out.obs.cols(); ++j) out.obs(i, j) = s.obs_prev(i, j) + static_cast<Scalar>(normal(rng));
        break;
      case MaskVariant::full_gauss:
        for (Index j = 0; j < out.obs.cols(); ++j) out.obs(i, j) = static_cast<Scalar>(normal(rng));
        break;
      case MaskVariant::zero:
        out.obs.row(i).setZero();
        break;
    }
  }
  return out;
}

}  // namespace ma2cl
