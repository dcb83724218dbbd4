#include "ma2cl/auxiliary.hpp"
#include "ma2cl/contrastive.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace ma2cl;
using T = Tensor<double>;
using V = Var<double>;
using Vec = Eigen::VectorXd;

namespace {

T randn(Index r, Index c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  T m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

double nce(const T& q, const T& k, const T& w, const Vec& mask, Index n) {
  return info_nce(V::constant(q), V::constant(k), V::constant(w), mask, n).item();
}

// Direct per-sample evaluation with explicit loops.
double reference_nce(const T& q, const T& k, const T& w, const Vec& mask, Index n) {
  const Index batch = q.rows() / n;
  double total = 0.0;
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < n; ++i) {
      if (mask(b * n + i) == 0.0) continue;
      std::vector<double> s(static_cast<std::size_t>(n));
      for (Index j = 0; j < n; ++j) s[static_cast<std::size_t>(j)] = bilinear_similarity<double>(q.row(b * n + i), k.row(b * n + j), w);
      double m = s[0];
      for (double x : s) m = std::max(m, x);
      double z = 0.0;
      for (double x : s) z += std::exp(x - m);
      total += mask(b * n + i) * -(s[static_cast<std::size_t>(i)] - m - std::log(z));
    }
  }
  return total / static_cast<double>(batch);
}

}  // namespace

TEST_SUITE("contrastive") {

TEST_CASE("bilinear similarity examples") {
  const T I = T::Identity(2, 2);
  const T swap = (T(2, 2) << 0, 1, 1, 0).finished();
  CHECK(bilinear_similarity<double>(vec({1, 0}), vec({1, 0}), I) == 1.0);
  CHECK(bilinear_similarity<double>(vec({1, 0}), vec({0, 1}), I) == 0.0);
  CHECK(bilinear_similarity<double>(vec({1, 0}), vec({0, 1}), swap) == 1.0);
  CHECK_THROWS_AS(bilinear_similarity<double>(vec({1, 0, 0}), vec({0, 1}), I), std::invalid_argument);
}

TEST_CASE("uniform similarities give N_m ln N") {
  const T q = T::Zero(3, 2), k = T::Zero(3, 2), w = T::Identity(2, 2);
  CHECK(std::abs(nce(q, k, w, vec({1, 1, 1}), 3) - 3.0 * std::log(3.0)) <= 1e-9);
  CHECK(std::abs(nce(q, k, w, vec({1, 0, 0}), 3) - std::log(3.0)) <= 1e-9);
}

TEST_CASE("two agents with diagonal similarity two") {
  const T q = std::sqrt(2.0) * T::Identity(2, 2);
  const double loss = nce(q, q, T::Identity(2, 2), vec({1, 1}), 2);
  CHECK(std::abs(loss - 2.0 * std::log(1.0 + std::exp(-2.0))) <= 1e-12);
  CHECK(std::abs(loss - 0.25386) <= 1e-5);
}

TEST_CASE("matches a loop implementation on random batches") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + trial % 4, batch = 1 + trial % 3, d = 3;
    const T q = randn(n * batch, d, rng), k = randn(n * batch, d, rng), w = randn(d, d, rng);
    Vec mask = Vec::Zero(n * batch);
    for (Index r = 0; r < mask.size(); ++r) mask(r) = (rng() % 2) ? 1.0 : 0.0;
    CHECK(std::abs(nce(q, k, w, mask, n) - reference_nce(q, k, w, mask, n)) <= 1e-10);
  }
}

TEST_CASE("empty mask gives zero loss and zero gradients") {
  Rng rng(2);
  V q = V::leaf(randn(3, 4, rng));
  V w = V::leaf(T::Identity(4, 4));
  V loss = info_nce(q, V::constant(randn(3, 4, rng)), w, Vec(Vec::Zero(3)), 3);
  CHECK(loss.item() == 0.0);
  backward(loss);
  CHECK(q.grad_or_zero().isZero(0.0));
  CHECK(w.grad_or_zero().isZero(0.0));
}

TEST_CASE("loss is invariant to a joint permutation of queries, keys and mask") {
  Rng rng(3);
  const T q = randn(4, 3, rng), k = randn(4, 3, rng), w = randn(3, 3, rng);
  const Vec mask = vec({1, 0, 1, 1});
  const std::vector<Index> perm{2, 3, 0, 1};
  T qp(4, 3), kp(4, 3);
  Vec mp(4);
  for (Index i = 0; i < 4; ++i) {
    qp.row(i) = q.row(perm[static_cast<std::size_t>(i)]);
    kp.row(i) = k.row(perm[static_cast<std::size_t>(i)]);
    mp(i) = mask(perm[static_cast<std::size_t>(i)]);
  }
  CHECK(std::abs(nce(q, k, w, mask, 4) - nce(qp, kp, w, mp, 4)) <= 1e-12);
}

TEST_CASE("every masked term is nonnegative for N >= 2 and zero for N = 1") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 2 + trial % 5;
    const T q = randn(n, 3, rng) * 3.0, k = randn(n, 3, rng) * 3.0, w = randn(3, 3, rng);
    for (Index i = 0; i < n; ++i) {
      Vec m = Vec::Zero(n);
      m(i) = 1.0;
      CHECK(nce(q, k, w, m, n) >= 0.0);
    }
  }
  CHECK(nce(T::Ones(1, 2), T::Ones(1, 2), T::Identity(2, 2), vec({1}), 1) == 0.0);
}

TEST_CASE("keys receive no gradient") {
  Rng rng(5);
  V q = V::leaf(randn(6, 3, rng));
  V k = V::leaf(randn(6, 3, rng));
  V w = V::leaf(T::Identity(3, 3));
  backward(info_nce(q, k, w, vec({1, 1, 0, 0, 1, 0}), 3));
  CHECK(k.grad_or_zero().isZero(0.0));
  CHECK_FALSE(q.grad().isZero(0.0));
  CHECK_FALSE(w.grad().isZero(0.0));
}

TEST_CASE("a constant shift of one query row's similarities leaves its term unchanged") {
  Rng rng(6);
  const Index n = 4, d = 3;
  T q = randn(n, d, rng), k = randn(n, d, rng);
  // Append a coordinate on which every key is 1, so adding c to the query's
  // last entry shifts all of its similarities by c.
  T qa(n, d + 1), ka(n, d + 1);
  qa << q, T::Zero(n, 1);
  ka << k, T::Ones(n, 1);
  const T w = T::Identity(d + 1, d + 1);
  const Vec m = vec({0, 1, 0, 0});
  const double base = nce(qa, ka, w, m, n);
  for (double c : {-50.0, 3.0, 200.0}) {
    T shifted = qa;
    shifted(1, d) = c;
    CHECK(std::abs(nce(shifted, ka, w, m, n) - base) <= 1e-9);
  }
}

TEST_CASE("non-finite similarities are rejected") {
  T q = T::Ones(2, 2);
  q(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(nce(q, T::Ones(2, 2), T::Identity(2, 2), vec({1, 1}), 2), std::domain_error);
}

TEST_CASE("accuracy is one for orthogonal keys that equal their queries") {
  const T k = T::Identity(4, 4);
  CHECK(contrastive_accuracy<double>(k, k, T::Identity(4, 4), Vec::Ones(4), 4) == 1.0);
}

TEST_CASE("ties resolve to the lowest index") {
  Rng rng(7);
  const T q = randn(8, 3, rng);
  const T k = randn(1, 3, rng).replicate(8, 1);
  // Two samples of four; masked agents 0, 2 in the first sample and 0 in the second.
  CHECK(contrastive_accuracy<double>(q, k, T::Identity(3, 3), vec({1, 0, 1, 0, 1, 0, 0, 0}), 4) == doctest::Approx(2.0 / 3.0));
  CHECK(contrastive_accuracy<double>(q, k, T::Identity(3, 3), Vec::Zero(8), 4) == 0.0);
}

TEST_CASE("random queries score near chance") {
  Rng rng(8);
  for (Index n : {2, 4, 6}) {
    const Index trials = 10000;
    const T q = randn(n * trials, 5, rng), k = randn(n * trials, 5, rng);
    Vec mask = Vec::Zero(n * trials);
    for (Index b = 0; b < trials; ++b) mask(b * n + static_cast<Index>(rng() % static_cast<std::uint64_t>(n))) = 1.0;
    const double acc = contrastive_accuracy<double>(q, k, T::Identity(5, 5), mask, n);
    CHECK(std::abs(acc - 1.0 / static_cast<double>(n)) <= 0.02);
  }
}

TEST_CASE("similarity matrix starts at the identity") {
  const auto s = make_similarity<double>(5);
  CHECK(s.at("W").value() == T::Identity(5, 5));
  CHECK_THROWS_AS(make_similarity<double>(0), std::invalid_argument);
}

TEST_CASE("InfoNCE gradient check on random three-agent inputs") {
  Rng rng(9);
  const T k = randn(6, 4, rng), w = T::Identity(4, 4) + 0.3 * randn(4, 4, rng);
  auto f = std::function<V(const V&)>([&](const V& q) { return info_nce(q, V::constant(k), V::constant(w), vec({1, 0, 1, 0, 1, 1}), 3); });
  CHECK(grad_check<double>(f, randn(6, 4, rng), 1e-5) <= 1e-4);
}

TEST_CASE("masked pass gradients reach only the online side") {
  Rng rng(10);
  ParamStore<double> enc = make_encoder<double>(EncoderConfig{4, {8}, 6}, rng);
  Ma2clConfig mc;
  mc.proj_hidden = 10;
  AuxStack<double> st = make_aux_stack(enc, 3, 2, mc, rng);
  std::vector<TimestepSample<double>> samples;
  for (int b = 0; b < 4; ++b) samples.push_back({randn(3, 4, rng), randn(3, 2, rng), randn(3, 4, rng), randn(3, 2, rng), 0, 1});
  const auto batch = mask_batch(samples, 1, mc.strategy, rng);
  backward(contrastive_pass(st, enc, batch).loss);
  for (auto* s : {&st.target_encoder, &st.target_projector}) {
    for (const auto& [_, e] : *s) CHECK_FALSE(e.var.has_grad());
  }
  for (auto* s : {&enc, &st.projector, &st.reconstructor, &st.similarity}) {
    for (const auto& [name, e] : *s) {
      INFO(name);
      CHECK(e.var.has_grad());
    }
  }
}

}  // TEST_SUITE
