#pragma once

#include "ma2cl/nets.hpp"

#include <cmath>
#include <unordered_map>
#include <vector>

namespace ma2cl {

template <typename Scalar>
Scalar global_grad_norm(const std::vector<ParamStore<Scalar>*>& groups) {
  Scalar sq = 0;
  for (auto* g : groups) {
    for (const auto& [_, e] : *g) {
      if (e.var.has_grad()) sq += e.var.grad().squaredNorm();
    }
  }
  return std::sqrt(sq);
}

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename Scalar>
Scalar clip_grad_norm(const std::vector<ParamStore<Scalar>*>& groups, Scalar max_norm) {
  const Scalar norm = global_grad_norm(groups);
  if (norm > max_norm && norm > Scalar(0)) {
    const Scalar s = max_norm / norm;
    for (auto* g : groups) {
      for (auto& [_, e] : *g) {
        if (e.var.has_grad()) e.var.mutable_grad() *= s;
      }
    }
  }
  return norm;
}

/// Adaptive moment estimation. Parameters without a gradient are skipped.
template <typename Scalar>
class Adam {
 public:
  struct Options {
    Scalar lr = Scalar(5e-4);
    Scalar beta1 = Scalar(0.9);
    Scalar beta2 = Scalar(0.999);
    Scalar eps = Scalar(1e-5);
  };

  Adam(std::vector<ParamStore<Scalar>*> groups, Options opt) : groups_(std::move(groups)), opt_(opt) {}

  void step() {
    for (auto* g : groups_) {
      for (auto& [_, e] : *g) {
        if (!e.var.has_grad()) continue;
        auto& st = state_[e.var.node()];
        if (st.m.size() == 0) {
          st.m = Tensor<Scalar>::Zero(e.var.rows(), e.var.cols());
          st.v = Tensor<Scalar>::Zero(e.var.rows(), e.var.cols());
        }
        ++st.t;
        const auto& grad = e.var.grad();
        st.m = opt_.beta1 * st.m + (Scalar(1) - opt_.beta1) * grad;
        st.v = opt_.beta2 * st.v + (Scalar(1) - opt_.beta2) * grad.cwiseProduct(grad);
        const Scalar bc1 = Scalar(1) - std::pow(opt_.beta1, static_cast<Scalar>(st.t));
        const Scalar bc2 = Scalar(1) - std::pow(opt_.beta2, static_cast<Scalar>(st.t));
        Tensor<Scalar>& w = e.var.mutable_value();
        w.array() -= opt_.lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + opt_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto* g : groups_) g->zero_grad();
  }

  const std::vector<ParamStore<Scalar>*>& groups() const { return groups_; }
  Options& options() { return opt_; }

 private:
  struct State {
    Tensor<Scalar> m, v;
    long t = 0;
  };
  std::vector<ParamStore<Scalar>*> groups_;
  Options opt_;
  std::unordered_map<const Node<Scalar>*, State> state_;
};

}  // namespace ma2cl
