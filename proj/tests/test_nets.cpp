#include "ma2cl/nets.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

using namespace ma2cl;
using T = Tensor<double>;
using V = Var<double>;
using Store = ParamStore<double>;

namespace {

T randn(Index r, Index c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  T m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

void zero_all(Store& s) {
  for (auto& [_, e] : s) e.var.mutable_value().setZero();
}

T permute_rows(const T& x, const std::vector<Index>& perm) {
  T out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) out.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  return out;
}

// Plain loops, no Eigen products: x -> gelu(x W0 + b0) -> ... -> x WL + bL.
std::vector<double> scalar_mlp(const Store& s, const std::vector<double>& x) {
  std::vector<double> h = x;
  const Index depth = mlp_depth(s);
  for (Index l = 0; l < depth; ++l) {
    const T& w = s.at("l" + std::to_string(l) + ".weight").value();
    const T& b = s.at("l" + std::to_string(l) + ".bias").value();
    std::vector<double> o(static_cast<std::size_t>(w.cols()));
    for (Index j = 0; j < w.cols(); ++j) {
      double acc = b(0, j);
      for (Index i = 0; i < w.rows(); ++i) acc += h[static_cast<std::size_t>(i)] * w(i, j);
      if (l + 1 < depth) acc = 0.5 * acc * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (acc + 0.044715 * acc * acc * acc)));
      o[static_cast<std::size_t>(j)] = acc;
    }
    h = std::move(o);
  }
  return h;
}

}  // namespace

TEST_SUITE("nets") {

TEST_CASE("zero-parameter encoder outputs zeros of shape N x repr") {
  Rng rng(1);
  Store enc = make_encoder<double>(EncoderConfig{4, {64, 64}, 64}, rng);
  zero_all(enc);
  const T y = mlp_encode(enc, V::constant(randn(3, 4, rng))).value();
  CHECK(y.rows() == 3);
  CHECK(y.cols() == 64);
  CHECK(y.isZero(0.0));
}

TEST_CASE("encoder and projector are row-wise: permuting agents permutes outputs") {
  Rng rng(2);
  Store enc = make_encoder<double>(EncoderConfig{5, {16, 16}, 8}, rng);
  Store proj = make_projector<double>(ProjectorConfig{8, 32, 6}, rng);
  const T x = randn(4, 5, rng);
  const std::vector<Index> perm{2, 0, 3, 1};
  const T y = project(proj, mlp_encode(enc, V::constant(x))).value();
  const T yp = project(proj, mlp_encode(enc, V::constant(permute_rows(x, perm)))).value();
  CHECK(yp == permute_rows(y, perm));
}

TEST_CASE("encoder matches an independent scalar implementation") {
  Rng rng(1);
  Store enc = make_encoder<double>(EncoderConfig{4, {64, 64}, 64}, rng);
  const T y = mlp_encode(enc, V::constant(T::Ones(2, 4))).value();
  const std::vector<double> ref = scalar_mlp(enc, {1.0, 1.0, 1.0, 1.0});
  for (Index r = 0; r < 2; ++r) {
    for (Index j = 0; j < 64; ++j) CHECK(std::abs(y(r, j) - ref[static_cast<std::size_t>(j)]) < 1e-12);
  }
}

TEST_CASE("encoder rejects a mismatched observation width") {
  Rng rng(1);
  Store enc = make_encoder<double>(EncoderConfig{4, {8}, 8}, rng);
  CHECK_THROWS_AS(mlp_encode(enc, V::constant(T::Ones(2, 5))), std::invalid_argument);
  CHECK_THROWS_AS(make_encoder<double>(EncoderConfig{0, {8}, 8}, rng), std::invalid_argument);
}

TEST_CASE("linear init is fan-in uniform with zero bias") {
  Rng rng(4);
  Store s;
  add_linear(s, "fc", 16, 200, rng);
  CHECK(s.at("fc.weight").value().cwiseAbs().maxCoeff() <= 0.25);
  CHECK(s.at("fc.bias").value().isZero(0.0));
}

TEST_CASE("projector gradient check") {
  Rng rng(5);
  Store p = make_projector<double>(ProjectorConfig{6, 10, 4}, rng);
  const T R = randn(3, 4, rng);
  auto f = std::function<V(const V&)>([&](const V& z) { return sum(mul(project(p, z), V::constant(R))); });
  CHECK(grad_check<double>(f, randn(3, 6, rng), 1e-5) <= 1e-4);
}

TEST_CASE("EMA arithmetic") {
  Store online, target;
  online.add("w", T::Constant(1, 1, 1.0));
  target.add("w", T::Constant(1, 1, 2.0), Store::Role::target);
  ema_update(target, online, 0.5);
  CHECK(target.at("w").value()(0, 0) == 1.5);

  Store on2, tg2;
  on2.add("w", T::Constant(1, 1, 0.0));
  tg2.add("w", T::Constant(1, 1, 1.0), Store::Role::target);
  ema_update(tg2, on2, 0.01);
  CHECK(std::abs(tg2.at("w").value()(0, 0) - 0.01) <= 1e-12);
}

TEST_CASE("EMA with tau 0 copies online exactly and keeps the target flag") {
  Rng rng(6);
  Store online = make_encoder<double>(EncoderConfig{3, {4}, 2}, rng);
  Store target = online.make_target();
  for (auto& [_, e] : online) e.var.mutable_value() = randn(e.var.rows(), e.var.cols(), rng);
  ema_update(target, online, 0.0);
  for (const auto& [name, e] : target) {
    CHECK(e.var.value() == online.at(name).value());
    CHECK(e.role == Store::Role::target);
    CHECK_FALSE(e.var.requires_grad());
  }
}

TEST_CASE("EMA contracts geometrically toward frozen online parameters") {
  Rng rng(7);
  Store online = make_encoder<double>(EncoderConfig{3, {5}, 4}, rng);
  Store target = online.make_target();
  for (auto& [_, e] : target) e.var.mutable_value() = randn(e.var.rows(), e.var.cols(), rng);
  auto gap = [&] {
    double g = 0.0;
    for (const auto& [name, e] : target) g = std::max(g, (e.var.value() - online.at(name).value()).cwiseAbs().maxCoeff());
    return g;
  };
  const double tau = 0.9, g0 = gap();
  for (int u = 1; u <= 20; ++u) {
    ema_update(target, online, tau);
    CHECK(std::abs(gap() - std::pow(tau, u) * g0) <= 1e-12);
  }
}

TEST_CASE("EMA rejects mismatched stores and tau outside [0,1)") {
  Rng rng(8);
  Store a = make_encoder<double>(EncoderConfig{3, {4}, 2}, rng);
  Store b = make_encoder<double>(EncoderConfig{3, {5}, 2}, rng);
  Store ta = a.make_target();
  CHECK_THROWS_AS(ema_update(ta, b, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(ema_update(ta, a, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(ema_update(ta, a, -0.1), std::invalid_argument);
}

TEST_CASE("store names are unique and targets mirror their online store") {
  Store s;
  s.add("a", T::Zero(1, 1));
  CHECK_THROWS_AS(s.add("a", T::Zero(1, 1)), std::invalid_argument);
  Rng rng(9);
  Store enc = make_encoder<double>(EncoderConfig{3, {4, 4}, 2}, rng);
  Store tgt = enc.make_target();
  CHECK(tgt.size() == enc.size());
  for (const auto& [name, e] : enc) CHECK(tgt.at(name).value() == e.var.value());
}

TEST_CASE("zero-parameter attention block is the identity") {
  Rng rng(10);
  for (Index heads : {1, 2}) {
    AttentionConfig cfg{6, heads, 4};
    Store p = make_attention_block<double>(cfg, rng);
    zero_all(p);
    const T x = randn(5, 6, rng);
    CHECK(attention_block(p, cfg, V::constant(x)).value() == x);
  }
}

TEST_CASE("attention block commutes with token permutations") {
  Rng rng(11);
  AttentionConfig cfg{8, 2, 4};
  Store p = make_attention_block<double>(cfg, rng);
  const T x = randn(4, 8, rng);
  const T y = attention_block(p, cfg, V::constant(x)).value();
  std::vector<Index> perm{0, 1, 2, 3};
  while (std::next_permutation(perm.begin(), perm.end())) {
    const T yp = attention_block(p, cfg, V::constant(permute_rows(x, perm))).value();
    CHECK((yp - permute_rows(y, perm)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("single token attends to itself with weight one") {
  Rng rng(12);
  AttentionConfig cfg{4, 1, 4};
  Store p = make_attention_block<double>(cfg, rng);
  AttentionTrace<double> trace;
  attention_block(p, cfg, V::constant(randn(1, 4, rng)), 0, "", &trace);
  REQUIRE(trace.weights.size() == 1);
  CHECK(trace.weights[0](0, 0) == 1.0);
}

TEST_CASE("attention rejects head counts that do not divide the width") {
  Rng rng(13);
  CHECK_THROWS_AS(make_attention_block<double>(AttentionConfig{6, 4, 4}, rng), std::invalid_argument);
}

TEST_CASE("attention block gradient check on a two-token input") {
  Rng rng(14);
  AttentionConfig cfg{4, 1, 4};
  Store p = make_attention_block<double>(cfg, rng);
  const T R = randn(2, 4, rng);
  auto f = std::function<V(const V&)>([&](const V& x) { return sum(mul(attention_block(p, cfg, x), V::constant(R))); });
  CHECK(grad_check<double>(f, randn(2, 4, rng), 1e-5) <= 1e-4);
}

TEST_CASE("target stores never receive gradients") {
  Rng rng(15);
  Store online = make_encoder<double>(EncoderConfig{3, {4}, 2}, rng);
  Store target = online.make_target();
  const V x = V::constant(randn(2, 3, rng));
  backward(sum(add(mlp_encode(online, x), mlp_encode(target, x))));
  for (const auto& [_, e] : target) CHECK_FALSE(e.var.has_grad());
  for (const auto& [_, e] : online) CHECK(e.var.has_grad());
}

TEST_CASE("checkpoint round trip preserves float32 values") {
  Rng rng(16);
  Store a = make_encoder<double>(EncoderConfig{3, {4}, 2}, rng);
  Store b = make_encoder<double>(EncoderConfig{3, {4}, 2}, rng);
  const auto base = std::filesystem::temp_directory_path() / "ma2cl_nets_ckpt";
  save_checkpoint<double>(base, {{"enc.", &a}});
  load_checkpoint<double>(base, {{"enc.", &b}});
  for (const auto& [name, e] : a) {
    const T expect = e.var.value().cast<float>().cast<double>();
    CHECK(b.at(name).value() == expect);
  }
  Store c = make_encoder<double>(EncoderConfig{3, {5}, 2}, rng);
  CHECK_THROWS(load_checkpoint<double>(base, {{"enc.", &c}}));
}

}  // TEST_SUITE
