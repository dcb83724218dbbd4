#include "ma2cl/gradcheck_suite.hpp"

#include "ma2cl/auxiliary.hpp"
#include "ma2cl/ppo.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

namespace ma2cl {

namespace {

constexpr double kStep = 1e-4;

Mat randn(Index r, Index c, Rng& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = s * n(rng);
  return m;
}

/// sum(y * R) for a fixed random R, so no coordinate has an analytically
/// vanishing gradient by symmetry.
VarD readout(const VarD& y, const Mat& r) { return sum(mul(y, VarD::constant(r))); }

struct Tally {
  GradcheckComponent c;
  void add(double err, Index coords) {
    c.max_error = std::max(c.max_error, err);
    c.coordinates += coords;
  }
};

void check_store(Tally& t, StoreD& store, const std::function<VarD()>& f) {
  for (auto& [_, e] : store) {
    if (!e.var.requires_grad()) continue;
    t.add(grad_check<double>(f, e.var, kStep), e.var.value().size());
  }
}

void check_leaf(Tally& t, VarD& leaf, const std::function<VarD()>& f) {
  t.add(grad_check<double>(f, leaf, kStep), leaf.value().size());
}

void primitives(Tally& t, Rng& rng) {
  std::uniform_int_distribution<int> dim(2, 5);
  const Index r = dim(rng), c = dim(rng), k = dim(rng);
  VarD a = VarD::leaf(randn(r, c, rng));
  VarD b = VarD::leaf(randn(c, k, rng));
  VarD row = VarD::leaf(randn(1, c, rng));
  VarD pos = VarD::leaf(randn(r, c, rng).cwiseAbs().array() + 0.5);
  const Mat R1 = randn(r, k, rng), R2 = randn(r, c, rng), R3 = randn(r, 1, rng);
  const Mat Rc = randn(r, c + k, rng), Rs = randn(r, c - 1, rng), Rg = randn(3, c, rng);
  auto g = [&] {
    VarD y = readout(tanh(matmul(a, b)), R1);
    y = add(y, readout(mul(gelu(add(a, row)), exp(scale(a, 0.3))), R2));
    y = add(y, readout(log_softmax(sub(a, row)), R2));
    y = add(y, readout(softmax(a), R2));
    y = add(y, readout(sum_last(square(a)), R3));
    y = add(y, readout(log(pos), R2));
    y = add(y, readout(layer_norm(a, add_scalar(row, 1.0), row), R2));
    y = add(y, readout(concat(a, transpose(matmul(transpose(b), transpose(a)))), Rc));
    y = add(y, readout(slice_cols(a, 1, c - 1), Rs));
    y = add(y, readout(gather_rows(a, {0, r - 1, 0}), Rg));
    y = add(y, mean(huber(scale(a, 3.0), 1.5)));
    return y;
  };
  check_leaf(t, a, g);
  check_leaf(t, b, g);
  check_leaf(t, row, g);
  check_leaf(t, pos, g);
}

void encoder(Tally& t, Rng& rng) {
  std::uniform_int_distribution<int> dim(3, 9);
  const Index n = dim(rng), od = dim(rng);
  StoreD enc = make_encoder<double>(EncoderConfig{od, {static_cast<Index>(dim(rng)), static_cast<Index>(dim(rng))}, 6}, rng);
  VarD x = VarD::leaf(randn(n, od, rng));
  const Mat R = randn(n, 6, rng);
  auto f = [&] { return readout(mlp_encode(enc, x), R); };
  check_store(t, enc, f);
  check_leaf(t, x, f);
}

void projector(Tally& t, Rng& rng) {
  std::uniform_int_distribution<int> dim(3, 8);
  const Index n = dim(rng), in = dim(rng), out = dim(rng);
  StoreD p = make_projector<double>(ProjectorConfig{in, 16, out}, rng);
  VarD z = VarD::leaf(randn(n, in, rng));
  const Mat R = randn(n, out, rng);
  auto f = [&] { return readout(project(p, z), R); };
  check_store(t, p, f);
  check_leaf(t, z, f);
}

void attention(Tally& t, Rng& rng, int instance) {
  const Index heads = 1 + instance % 2;
  const Index d = 4 * heads;
  const Index group = 3, batch = 2;
  AttentionConfig cfg{d, heads, 4};
  StoreD p = make_attention_block<double>(cfg, rng);
  for (auto& [name, e] : p) {
    if (name.find("ln") != std::string::npos) e.var.mutable_value() = randn(1, d, rng, 0.5).array() + (name.find("gain") != std::string::npos ? 1.0 : 0.0);
  }
  VarD x = VarD::leaf(randn(group * batch, d, rng));
  const Mat R = randn(group * batch, d, rng);
  auto f = [&] { return readout(attention_block(p, cfg, x, group), R); };
  check_store(t, p, f);
  check_leaf(t, x, f);
}

ReconstructorConfig small_recon(Index n, Index proj, Index act, int instance) {
  ReconstructorConfig rc;
  rc.n_agents_max = n;
  rc.proj_dim = proj;
  rc.act_dim = act;
  rc.blocks = 1 + instance % 2;
  rc.heads = 1;
  rc.concat_action = true;
  rc.pos_embedding = true;
  return rc;
}

void reconstructor(Tally& t, Rng& rng, int instance) {
  const Index n = 3, batch = 2, proj = 5, act = 2;
  const ReconstructorConfig rc = small_recon(n, proj, act, instance);
  StoreD p = make_reconstructor<double>(rc, rng);
  VarD z = VarD::leaf(randn(n * batch, proj, rng));
  const Mat acts = randn(n * batch, act, rng);
  const Mat R = randn(n * batch, proj, rng);
  auto f = [&] { return readout(reconstruct(p, rc, build_tokens(z, acts, p, rc, n), n), R); };
  check_store(t, p, f);
  check_leaf(t, z, f);
}

void infonce(Tally& t, Rng& rng) {
  std::uniform_int_distribution<int> dim(2, 5);
  const Index n = dim(rng), batch = dim(rng), d = dim(rng);
  VarD q = VarD::leaf(randn(n * batch, d, rng));
  VarD k = VarD::constant(randn(n * batch, d, rng));
  VarD w = VarD::leaf(Mat::Identity(d, d) + randn(d, d, rng, 0.3));
  Eigen::VectorXd mask = Eigen::VectorXd::Zero(n * batch);
  std::bernoulli_distribution coin(0.5);
  for (Index b = 0; b < batch; ++b) {
    mask(b * n + static_cast<Index>(rng() % static_cast<std::uint64_t>(n))) = 1.0;
    for (Index i = 0; i < n; ++i) {
      if (coin(rng)) mask(b * n + i) = 1.0;
    }
  }
  auto f = [&] { return info_nce(q, k, w, mask, n); };
  check_leaf(t, q, f);
  check_leaf(t, w, f);
}

void full_aux(Tally& t, Rng& rng) {
  const Index n = 3, od = 4, ad = 2;
  StoreD enc = make_encoder<double>(EncoderConfig{od, {6}, 5}, rng);
  Ma2clConfig mc;
  mc.proj_hidden = 7;
  mc.aux_batch = 2;
  AuxStack<double> st = make_aux_stack(enc, n, ad, mc, rng);
  std::vector<TimestepSample<double>> samples;
  for (int b = 0; b < 2; ++b) {
    samples.push_back({randn(n, od, rng), randn(n, ad, rng), randn(n, od, rng), randn(n, ad, rng), 0, 1});
  }
  const MaskedBatch<double> mb = mask_batch(samples, 1, mc.strategy, rng);
  auto f = [&] { return contrastive_pass(st, enc, mb).loss; };
  check_store(t, enc, f);
  check_store(t, st.projector, f);
  check_store(t, st.reconstructor, f);
  check_store(t, st.similarity, f);
}

void ppo_losses(Tally& t, Rng& rng) {
  std::uniform_int_distribution<int> dim(2, 6);
  const Index m = dim(rng), a = dim(rng);
  VarD mean_ = VarD::leaf(randn(m, a, rng, 0.5));
  VarD log_std = VarD::leaf(randn(1, a, rng, 0.2).array() - 0.5);
  const Mat actions = randn(m, a, rng, 0.7);
  const Mat logp_old = gaussian_log_prob(VarD::constant(mean_.value()), VarD::constant(log_std.value()), actions).value() +
                       randn(m, 1, rng, 0.3);
  const Mat adv = randn(m, 1, rng);
  auto f = [&] {
    VarD lp = gaussian_log_prob(mean_, log_std, actions);
    return add(ppo_actor_loss(lp, logp_old, adv, 0.2), scale(gaussian_entropy(log_std, m), -0.01));
  };
  check_leaf(t, mean_, f);
  check_leaf(t, log_std, f);

  const Index k = dim(rng);
  VarD logits = VarD::leaf(randn(m, k, rng));
  Mat acts(m, 1);
  for (Index r = 0; r < m; ++r) acts(r, 0) = static_cast<double>(rng() % static_cast<std::uint64_t>(k));
  const Mat old_c = categorical_log_prob(VarD::constant(logits.value()), acts).value() + randn(m, 1, rng, 0.3);
  auto g = [&] {
    return add(ppo_actor_loss(categorical_log_prob(logits, acts), old_c, adv, 0.2), scale(categorical_entropy(logits), -0.01));
  };
  check_leaf(t, logits, g);

  VarD values = VarD::leaf(randn(m, 1, rng, 5.0));
  const Mat returns = randn(m, 1, rng, 5.0);
  auto h = [&] { return add(value_loss(values, returns, true, 2.0), value_loss(values, returns, false, 2.0)); };
  check_leaf(t, values, h);
}

}  // namespace

bool GradcheckReport::pass() const {
  for (const auto& c : components) {
    if (!c.pass) return false;
  }
  return !components.empty();
}

std::string GradcheckReport::to_string() const {
  std::ostringstream os;
  char buf[160];
  for (const auto& c : components) {
    std::snprintf(buf, sizeof buf, "%-14s instances=%-3d coords=%-7ld max_rel_err=%.3e %s\n", c.name.c_str(), c.instances,
                  c.coordinates, c.max_error, c.pass ? "PASS" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "tolerance %.1e, %.2f s, overall %s\n", tolerance, seconds, pass() ? "PASS" : "FAIL");
  os << buf;
  return os.str();
}

GradcheckReport run_gradcheck_suite(int instances, std::uint64_t seed, double tolerance) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport rep;
  rep.tolerance = tolerance;
  const std::vector<std::pair<std::string, std::function<void(Tally&, Rng&, int)>>> blocks = {
      {"primitives", [](Tally& t, Rng& r, int) { primitives(t, r); }},
      {"encoder", [](Tally& t, Rng& r, int) { encoder(t, r); }},
      {"projector", [](Tally& t, Rng& r, int) { projector(t, r); }},
      {"attention", attention},
      {"reconstructor", reconstructor},
      {"info_nce", [](Tally& t, Rng& r, int) { infonce(t, r); }},
      {"aux_pipeline", [](Tally& t, Rng& r, int) { full_aux(t, r); }},
      {"ppo_losses", [](Tally& t, Rng& r, int) { ppo_losses(t, r); }},
  };
  std::uint64_t stream = 0;
  for (const auto& [name, fn] : blocks) {
    Tally t;
    t.c.name = name;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(++stream)};
    Rng rng(seq);
    for (int i = 0; i < instances; ++i) {
      fn(t, rng, i);
      ++t.c.instances;
    }
    t.c.pass = t.c.max_error <= tolerance;
    rep.components.push_back(t.c);
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace ma2cl
