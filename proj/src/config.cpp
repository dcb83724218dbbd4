#include "ma2cl/trainer.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace ma2cl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw std::invalid_argument("config: key '" + key + "' expects " + expected + ", got '" + value + "'");
}

long parse_long(const std::string& key, const std::string& v) {
  long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

int parse_int(const std::string& key, const std::string& v) {
  const long x = parse_long(key, v);
  if (x < INT32_MIN || x > INT32_MAX) bad_value(key, v, "a 32-bit integer");
  return static_cast<int>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  if (v.empty()) bad_value(key, v, "a number");
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    bad_value(key, v, "a number");
  }
  if (used != v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true/false");
}

std::vector<Index> parse_dims(const std::string& key, const std::string& v) {
  std::vector<Index> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(parse_long(key, trim(part)));
  if (out.empty()) bad_value(key, v, "a comma-separated list of sizes");
  return out;
}

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define INT_FIELD(expr) \
  Field { [](TrainConfig& c, const std::string& k, const std::string& v) { c.expr = parse_int(k, v); }, \
          [](const TrainConfig& c) { return std::to_string(c.expr); } }
#define LONG_FIELD(expr) \
  Field { [](TrainConfig& c, const std::string& k, const std::string& v) { c.expr = parse_long(k, v); }, \
          [](const TrainConfig& c) { return std::to_string(c.expr); } }
#define DOUBLE_FIELD(expr) \
  Field { [](TrainConfig& c, const std::string& k, const std::string& v) { c.expr = parse_double(k, v); }, \
          [](const TrainConfig& c) { return fmt_double(c.expr); } }
#define BOOL_FIELD(expr) \
  Field { [](TrainConfig& c, const std::string& k, const std::string& v) { c.expr = parse_bool(k, v); }, \
          [](const TrainConfig& c) { return fmt_bool(c.expr); } }

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"env.name", Field{[](TrainConfig& c, const std::string&, const std::string& v) { c.env_name = v; },
                         [](const TrainConfig& c) { return c.env_name; }}},
      {"env.n_agents", INT_FIELD(n_agents)},
      {"episode_length", INT_FIELD(episode_length)},
      {"rollout_threads", INT_FIELD(rollout_threads)},
      {"model.hidden_dims",
       Field{[](TrainConfig& c, const std::string& k, const std::string& v) { c.hidden_dims = parse_dims(k, v); },
             [](const TrainConfig& c) {
               std::string s;
               for (std::size_t i = 0; i < c.hidden_dims.size(); ++i) s += (i ? "," : "") + std::to_string(c.hidden_dims[i]);
               return s;
             }}},
      {"model.repr_dim", LONG_FIELD(repr_dim)},
      {"gamma", DOUBLE_FIELD(ppo.gamma)},
      {"gae_lambda", DOUBLE_FIELD(ppo.gae_lambda)},
      {"ppo_epochs", INT_FIELD(ppo.ppo_epochs)},
      {"ppo_clip", DOUBLE_FIELD(ppo.ppo_clip)},
      {"entropy_coef", DOUBLE_FIELD(ppo.entropy_coef)},
      {"value_coef", DOUBLE_FIELD(ppo.value_coef)},
      {"max_grad_norm", DOUBLE_FIELD(ppo.max_grad_norm)},
      {"num_mini_batch", INT_FIELD(ppo.num_mini_batch)},
      {"lr_actor", DOUBLE_FIELD(ppo.lr_actor)},
      {"lr_critic", DOUBLE_FIELD(ppo.lr_critic)},
      {"optim_eps", DOUBLE_FIELD(ppo.optim_eps)},
      {"use_huber", BOOL_FIELD(ppo.use_huber)},
      {"huber_delta", DOUBLE_FIELD(ppo.huber_delta)},
      {"ma2cl.enabled", BOOL_FIELD(ma2cl_enabled)},
      {"ma2cl.lambda", DOUBLE_FIELD(ma2cl.lambda)},
      {"ma2cl.tau", DOUBLE_FIELD(ma2cl.tau)},
      {"ma2cl.aux_batch", LONG_FIELD(ma2cl.aux_batch)},
      {"ma2cl.proj_hidden", LONG_FIELD(ma2cl.proj_hidden)},
      {"ma2cl.proj_out", LONG_FIELD(ma2cl.proj_out)},
      {"mask.strategy",
       Field{[](TrainConfig& c, const std::string&, const std::string& v) { c.ma2cl.strategy.variant = parse_mask_variant(v); },
             [](const TrainConfig& c) { return to_string(c.ma2cl.strategy.variant); }}},
      {"mask.k", INT_FIELD(ma2cl.strategy.k)},
      {"mask.n_mask", INT_FIELD(ma2cl.n_mask)},
      {"recon.blocks", LONG_FIELD(ma2cl.blocks)},
      {"recon.heads", LONG_FIELD(ma2cl.heads)},
      {"recon.concat_action", BOOL_FIELD(ma2cl.concat_action)},
      {"recon.pos_embedding", BOOL_FIELD(ma2cl.pos_embedding)},
      {"seed",
       Field{[](TrainConfig& c, const std::string& k, const std::string& v) {
               const long s = parse_long(k, v);
               if (s < 0) bad_value(k, v, "a non-negative integer");
               c.seed = static_cast<std::uint64_t>(s);
             },
             [](const TrainConfig& c) { return std::to_string(c.seed); }}},
      {"total_steps", LONG_FIELD(total_steps)},
      {"eval_interval", LONG_FIELD(eval_interval)},
      {"eval_episodes", INT_FIELD(eval_episodes)},
      {"metrics.wall_time", BOOL_FIELD(metrics_wall_time)},
  };
  return table;
}

#undef INT_FIELD
#undef LONG_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  const std::string k = trim(key), v = trim(value);
  for (const auto& [name, f] : fields()) {
    if (name == k) {
      f.set(*this, k, v);
      return;
    }
  }
  throw std::invalid_argument("config: unknown key '" + k + "'");
}

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [name, _] : fields()) out.push_back(name);
  return out;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (env_name != "flock" && env_name != "leader_follower" && env_name != "coop_gather") {
    bad("env.name must be one of flock, leader_follower, coop_gather (got '" + env_name + "')");
  }
  if (n_agents < 2) bad("env.n_agents must be >= 2");
  if (episode_length < 2) bad("episode_length must be >= 2");
  if (rollout_threads < 1) bad("rollout_threads must be >= 1");
  if (hidden_dims.empty()) bad("model.hidden_dims must be non-empty");
  for (Index h : hidden_dims) {
    if (h < 1) bad("model.hidden_dims entries must be positive");
  }
  if (repr_dim < 1) bad("model.repr_dim must be positive");
  ppo.validate();
  ma2cl.validate();
  if (ma2cl.n_mask > n_agents) bad("mask.n_mask must not exceed env.n_agents");
  if (ma2cl.strategy.k >= episode_length) bad("mask.k must be smaller than episode_length");
  if (total_steps < 1) bad("total_steps must be >= 1");
  if (eval_interval < 0) bad("eval_interval must be >= 0");
  if (eval_episodes < 1) bad("eval_episodes must be >= 1");
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + "=" + f.get(*this) + "\n";
  return out;
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    cfg.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("override must look like key=value, got '" + assignment + "'");
  cfg.set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

PolicyConfig TrainConfig::policy_config() const {
  auto env = make_env(env_name, n_agents);
  PolicyConfig pc;
  pc.n_agents = n_agents;
  pc.obs_dim = env->obs_dim();
  pc.space = env->action_space();
  pc.hidden_dims = hidden_dims;
  pc.repr_dim = repr_dim;
  pc.critic_hidden = hidden_dims;
  return pc;
}

}  // namespace ma2cl
