#pragma once

#include "ma2cl/autodiff.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace ma2cl {

using Rng = std::mt19937_64;

/// Named parameter arrays, each flagged trainable or target. Move-only; use
/// clone() for a deep copy.
template <typename Scalar>
class ParamStore {
 public:
  enum class Role { trainable, target };

  struct Entry {
    Var<Scalar> var;
    Role role = Role::trainable;
  };

  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Var<Scalar>& add(const std::string& name, Tensor<Scalar> init, Role role = Role::trainable) {
    if (entries_.count(name)) throw std::invalid_argument("ParamStore: duplicate entry '" + name + "'");
    auto [it, _] = entries_.emplace(name, Entry{Var<Scalar>::leaf(std::move(init), role == Role::trainable), role});
    return it->second.var;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Var<Scalar>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("ParamStore: no entry '" + name + "'");
    return it->second.var;
  }
  Var<Scalar>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("ParamStore: no entry '" + name + "'");
    return it->second.var;
  }

  Role role(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("ParamStore: no entry '" + name + "'");
    return it->second.role;
  }

  std::size_t size() const { return entries_.size(); }
  Index num_scalars() const {
    Index n = 0;
    for (const auto& [_, e] : entries_) n += e.var.value().size();
    return n;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.var.zero_grad();
  }

  /// Deep copy with fresh nodes.
  ParamStore clone(Role role) const {
    ParamStore out;
    for (const auto& [name, e] : entries_) out.add(name, e.var.value(), role);
    return out;
  }
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, e] : entries_) out.add(name, e.var.value(), e.role);
    return out;
  }
  /// Mirror of this store flagged as an EMA target (never requires grad).
  ParamStore make_target() const { return clone(Role::target); }

 private:
  std::map<std::string, Entry> entries_;
};

template <typename Scalar>
Tensor<Scalar> uniform_tensor(Index rows, Index cols, Scalar bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  Tensor<Scalar> t(rows, cols);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(dist(rng));
  return t;
}

/// Registers `prefix.weight` [in, out] ~ U(-1/sqrt(in), 1/sqrt(in)) and a zero `prefix.bias` [1, out].
template <typename Scalar>
void add_linear(ParamStore<Scalar>& store, const std::string& prefix, Index in, Index out, Rng& rng) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(in));
  store.add(prefix + ".weight", uniform_tensor<Scalar>(in, out, bound, rng));
  store.add(prefix + ".bias", Tensor<Scalar>::Zero(1, out));
}

template <typename Scalar>
Var<Scalar> linear(const ParamStore<Scalar>& store, const std::string& prefix, const Var<Scalar>& x) {
  return add(matmul(x, store.at(prefix + ".weight")), store.at(prefix + ".bias"));
}

// ---------------------------------------------------------------------------
// Multi-layer perceptrons: layers l0, l1, ... with GELU between them and a
// linear final layer.

template <typename Scalar>
ParamStore<Scalar> make_mlp(const std::vector<Index>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output dims");
  for (Index d : dims) {
    if (d <= 0) throw std::invalid_argument("make_mlp: dims must be positive");
  }
  ParamStore<Scalar> store;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) add_linear(store, "l" + std::to_string(i), dims[i], dims[i + 1], rng);
  return store;
}

template <typename Scalar>
Index mlp_depth(const ParamStore<Scalar>& store) {
  Index n = 0;
  while (store.contains("l" + std::to_string(n) + ".weight")) ++n;
  return n;
}

template <typename Scalar>
Index mlp_input_dim(const ParamStore<Scalar>& store) {
  return store.at("l0.weight").rows();
}

template <typename Scalar>
Index mlp_output_dim(const ParamStore<Scalar>& store) {
  return store.at("l" + std::to_string(mlp_depth(store) - 1) + ".weight").cols();
}

template <typename Scalar>
Var<Scalar> mlp_forward(const ParamStore<Scalar>& store, const Var<Scalar>& x, const char* who = "mlp_forward") {
  const Index depth = mlp_depth(store);
  if (depth == 0) throw std::invalid_argument(std::string(who) + ": empty parameter store");
  if (x.cols() != mlp_input_dim(store)) {
    throw std::invalid_argument(std::string(who) + ": expected input with " + std::to_string(mlp_input_dim(store)) +
                                " columns, got " + shape_str(x.value()));
  }
  Var<Scalar> h = x;
  for (Index i = 0; i < depth; ++i) {
    h = linear(store, "l" + std::to_string(i), h);
    if (i + 1 < depth) h = gelu(h);
  }
  return h;
}

struct EncoderConfig {
  Index obs_dim = 0;
  std::vector<Index> hidden_dims{64, 64};
  Index repr_dim = 64;

  void validate() const {
    if (obs_dim <= 0 || repr_dim <= 0) throw std::invalid_argument("EncoderConfig: dims must be positive");
    for (Index h : hidden_dims) {
      if (h <= 0) throw std::invalid_argument("EncoderConfig: hidden dims must be positive");
    }
  }
  std::vector<Index> dims() const {
    std::vector<Index> d{obs_dim};
    d.insert(d.end(), hidden_dims.begin(), hidden_dims.end());
    d.push_back(repr_dim);
    return d;
  }
};

struct ProjectorConfig {
  Index in_dim = 64;
  Index hidden_dim = 512;
  Index out_dim = 64;

  void validate() const {
    if (in_dim <= 0 || hidden_dim <= 0 || out_dim <= 0) throw std::invalid_argument("ProjectorConfig: dims must be positive");
  }
};

template <typename Scalar>
ParamStore<Scalar> make_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  return make_mlp<Scalar>(cfg.dims(), rng);
}

/// Row-wise encoder shared by all agents: obs [N, obs_dim] -> [N, repr_dim].
template <typename Scalar>
Var<Scalar> mlp_encode(const ParamStore<Scalar>& params, const Var<Scalar>& obs) {
  return mlp_forward(params, obs, "mlp_encode");
}

template <typename Scalar>
ParamStore<Scalar> make_projector(const ProjectorConfig& cfg, Rng& rng) {
  cfg.validate();
  return make_mlp<Scalar>({cfg.in_dim, cfg.hidden_dim, cfg.out_dim}, rng);
}

template <typename Scalar>
Var<Scalar> project(const ParamStore<Scalar>& params, const Var<Scalar>& z) {
  return mlp_forward(params, z, "project");
}

// ---------------------------------------------------------------------------
// Pre-norm self-attention block:
//   h = MSHA(LN(x)) + x
//   y = FFN(LN(h)) + h

struct AttentionConfig {
  Index d_tok = 0;
  Index heads = 1;
  Index ffn_mult = 4;

  void validate() const {
    if (d_tok <= 0 || heads <= 0 || ffn_mult <= 0) throw std::invalid_argument("AttentionConfig: dims must be positive");
    if (d_tok % heads != 0) {
      throw std::invalid_argument("AttentionConfig: d_tok " + std::to_string(d_tok) + " not divisible by " +
                                  std::to_string(heads) + " heads");
    }
  }
};

template <typename Scalar>
struct AttentionTrace {
  std::vector<Tensor<Scalar>> weights;  // one [rows, group] matrix per head
};

template <typename Scalar>
void add_attention_block(ParamStore<Scalar>& store, const std::string& prefix, const AttentionConfig& cfg, Rng& rng) {
  cfg.validate();
  const Index d = cfg.d_tok;
  store.add(prefix + "ln1.gain", Tensor<Scalar>::Ones(1, d));
  store.add(prefix + "ln1.bias", Tensor<Scalar>::Zero(1, d));
  add_linear(store, prefix + "attn.q", d, d, rng);
  add_linear(store, prefix + "attn.k", d, d, rng);
  add_linear(store, prefix + "attn.v", d, d, rng);
  add_linear(store, prefix + "attn.out", d, d, rng);
  store.add(prefix + "ln2.gain", Tensor<Scalar>::Ones(1, d));
  store.add(prefix + "ln2.bias", Tensor<Scalar>::Zero(1, d));
  add_linear(store, prefix + "ffn.l0", d, cfg.ffn_mult * d, rng);
  add_linear(store, prefix + "ffn.l1", cfg.ffn_mult * d, d, rng);
}

template <typename Scalar>
ParamStore<Scalar> make_attention_block(const AttentionConfig& cfg, Rng& rng) {
  ParamStore<Scalar> store;
  add_attention_block(store, "", cfg, rng);
  return store;
}

/// Tokens are laid out as consecutive groups of `group` rows (one group per
/// sample); attention never crosses a group. `group == 0` means one group.
template <typename Scalar>
Var<Scalar> attention_block(const ParamStore<Scalar>& p, const AttentionConfig& cfg, const Var<Scalar>& x, Index group = 0,
                            const std::string& prefix = "", AttentionTrace<Scalar>* trace = nullptr) {
  cfg.validate();
  if (x.cols() != cfg.d_tok) {
    throw std::invalid_argument("attention_block: expected tokens of width " + std::to_string(cfg.d_tok) + ", got " +
                                shape_str(x.value()));
  }
  if (x.rows() < 1) throw std::invalid_argument("attention_block: need at least one token");
  if (group == 0) group = x.rows();

  const Index dh = cfg.d_tok / cfg.heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Var<Scalar> n1 = layer_norm(x, p.at(prefix + "ln1.gain"), p.at(prefix + "ln1.bias"));
  Var<Scalar> q = linear(p, prefix + "attn.q", n1);
  Var<Scalar> k = linear(p, prefix + "attn.k", n1);
  Var<Scalar> v = linear(p, prefix + "attn.v", n1);
  std::vector<Var<Scalar>> heads;
  heads.reserve(cfg.heads);
  for (Index h = 0; h < cfg.heads; ++h) {
    Var<Scalar> qh = cfg.heads == 1 ? q : slice_cols(q, h * dh, dh);
    Var<Scalar> kh = cfg.heads == 1 ? k : slice_cols(k, h * dh, dh);
    Var<Scalar> vh = cfg.heads == 1 ? v : slice_cols(v, h * dh, dh);
    Var<Scalar> w = softmax(scale(grouped_matmul_nt(qh, kh, group), inv_sqrt));
    if (trace) trace->weights.push_back(w.value());
    heads.push_back(grouped_matmul(w, vh, group));
  }
  Var<Scalar> h = add(linear(p, prefix + "attn.out", concat(heads)), x);

  Var<Scalar> n2 = layer_norm(h, p.at(prefix + "ln2.gain"), p.at(prefix + "ln2.bias"));
  Var<Scalar> ff = linear(p, prefix + "ffn.l1", gelu(linear(p, prefix + "ffn.l0", n2)));
  return add(ff, h);
}

// ---------------------------------------------------------------------------
// Exponential moving average: target <- tau * target + (1 - tau) * online.

template <typename Scalar>
void check_mirror(const ParamStore<Scalar>& a, const ParamStore<Scalar>& b, const char* who) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(who) + ": stores have different entry counts");
  for (const auto& [name, e] : a) {
    if (!b.contains(name)) throw std::invalid_argument(std::string(who) + ": entry '" + name + "' missing");
    const auto& other = b.at(name).value();
    if (other.rows() != e.var.rows() || other.cols() != e.var.cols()) {
      throw std::invalid_argument(std::string(who) + ": entry '" + name + "' shape " + shape_str(e.var.value()) + " vs " +
                                  shape_str(other));
    }
  }
}

template <typename Scalar>
void ema_update(ParamStore<Scalar>& target, const ParamStore<Scalar>& online, Scalar tau) {
  if (!(tau >= Scalar(0) && tau < Scalar(1))) throw std::invalid_argument("ema_update: tau must lie in [0, 1)");
  check_mirror(target, online, "ema_update");
  for (auto& [name, e] : target) {
    Tensor<Scalar>& t = e.var.mutable_value();
    t = tau * t + (Scalar(1) - tau) * online.at(name).value();
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: `<base>.manifest` lists "key rows cols" per line; `<base>.bin`
// holds the entries as little-endian float32, concatenated in manifest order.

template <typename Scalar>
struct NamedStore {
  std::string prefix;
  ParamStore<Scalar>* store;
};

namespace detail {
inline void write_f32_le(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                        static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline float read_f32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated data file");
  const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
                             (std::uint32_t(b[3]) << 24);
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}
}  // namespace detail

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& base, const std::vector<NamedStore<Scalar>>& stores) {
  std::ofstream manifest(base.string() + ".manifest");
  std::ofstream data(base.string() + ".bin", std::ios::binary);
  if (!manifest || !data) throw std::runtime_error("checkpoint: cannot open " + base.string());
  for (const auto& ns : stores) {
    for (const auto& [name, e] : *ns.store) {
      const auto& v = e.var.value();
      manifest << ns.prefix << name << " " << v.rows() << " " << v.cols() << "\n";
      for (Index i = 0; i < v.size(); ++i) detail::write_f32_le(data, static_cast<float>(v.data()[i]));
    }
  }
}

/// Loads values into existing stores; names and shapes must match exactly.
template <typename Scalar>
void load_checkpoint(const std::filesystem::path& base, const std::vector<NamedStore<Scalar>>& stores) {
  std::ifstream manifest(base.string() + ".manifest");
  std::ifstream data(base.string() + ".bin", std::ios::binary);
  if (!manifest || !data) throw std::runtime_error("checkpoint: cannot open " + base.string());
  std::map<std::string, std::pair<ParamStore<Scalar>*, std::string>> lookup;
  for (const auto& ns : stores) {
    for (const auto& [name, _] : *ns.store) lookup[ns.prefix + name] = {ns.store, name};
  }
  std::string key;
  Index rows = 0, cols = 0;
  std::size_t loaded = 0;
  while (manifest >> key >> rows >> cols) {
    auto it = lookup.find(key);
    if (it == lookup.end()) throw std::runtime_error("checkpoint: unexpected entry '" + key + "'");
    Tensor<Scalar>& t = it->second.first->at(it->second.second).mutable_value();
    if (t.rows() != rows || t.cols() != cols) throw std::runtime_error("checkpoint: shape mismatch for '" + key + "'");
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(detail::read_f32_le(data));
    ++loaded;
  }
  if (loaded != lookup.size()) throw std::runtime_error("checkpoint: manifest does not cover every parameter");
}

}  // namespace ma2cl
