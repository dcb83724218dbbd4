#include "ma2cl/gradcheck_suite.hpp"
#include "ma2cl/probe.hpp"
#include "ma2cl/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace ma2cl;

namespace {

struct RunFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::uint64_t seed = 1;
  std::string env = "leader_follower";
  long steps = 200000;
  std::string out = "runs/default";
};

void add_run_flags(CLI::App* app, RunFlags& f) {
  app->add_option("--config", f.config, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("--set", f.overrides, "override, repeatable: --set ma2cl.lambda=0.5");
  app->add_option("--seed", f.seed, "random seed")->capture_default_str();
  app->add_option("--env", f.env, "flock | leader_follower | coop_gather")->capture_default_str();
  app->add_option("--steps", f.steps, "total environment steps")->capture_default_str();
  app->add_option("--out", f.out, "output directory")->capture_default_str();
}

/// File values first, then the dedicated flags, then --set overrides.
TrainConfig resolve(const RunFlags& f, CLI::App* app) {
  TrainConfig cfg = f.config.empty() ? TrainConfig{} : TrainConfig::load(f.config);
  if (f.config.empty() || app->count("--seed")) cfg.seed = f.seed;
  if (f.config.empty() || app->count("--env")) cfg.env_name = f.env;
  if (f.config.empty() || app->count("--steps")) cfg.total_steps = f.steps;
  for (const auto& o : f.overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked attentive contrastive learning for multi-agent PPO"};
  app.require_subcommand(1);

  RunFlags train_f;
  auto* train_cmd = app.add_subcommand("train", "train one configuration");
  add_run_flags(train_cmd, train_f);

  RunFlags ablate_f;
  std::string preset;
  std::vector<std::uint64_t> seeds;
  auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation preset");
  add_run_flags(ablate_cmd, ablate_f);
  ablate_cmd->add_option("--preset", preset, "strategy_sweep | nmask_sweep | offset_sweep | lambda_sweep | "
                                             "concat_action_off | pos_embed_off | baseline")
      ->required();
  ablate_cmd->add_option("--seeds", seeds, "seeds (default: --seed)");

  std::string eval_dir;
  int eval_episodes = 20;
  auto* eval_cmd = app.add_subcommand("eval", "greedy evaluation of a trained run");
  eval_cmd->add_option("--out", eval_dir, "run directory holding config.txt and checkpoint")->required();
  eval_cmd->add_option("--episodes", eval_episodes, "episodes")->capture_default_str();

  int gc_instances = 20;
  std::uint64_t gc_seed = 0;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every block and loss");
  gc_cmd->add_option("--instances", gc_instances, "randomized instances per component")->capture_default_str();
  gc_cmd->add_option("--seed", gc_seed, "random seed")->capture_default_str();

  ProbeSpec spec;
  ProbeTrainConfig pcfg;
  std::string b_kind = "sum_zero", c_kind = "zero", strategy = "prev", probe_out;
  std::uint64_t probe_seed = 1;
  auto* probe_cmd = app.add_subcommand("probe", "train the auxiliary stack on synthetic recoverable observations");
  probe_cmd->add_option("--n-agents", spec.n_agents)->capture_default_str();
  probe_cmd->add_option("--obs-dim", spec.obs_dim)->capture_default_str();
  probe_cmd->add_option("--b", b_kind, "zero | sum_zero | random")->capture_default_str();
  probe_cmd->add_option("--c", c_kind, "zero | rotation | random")->capture_default_str();
  probe_cmd->add_option("--strategy", strategy, "prev | prev_gauss | full_gauss | zero")->capture_default_str();
  probe_cmd->add_option("--n-mask", pcfg.ma2cl.n_mask)->capture_default_str();
  probe_cmd->add_option("--steps", pcfg.steps)->capture_default_str();
  probe_cmd->add_option("--data-seed", spec.seed)->capture_default_str();
  probe_cmd->add_option("--seed", probe_seed, "initialization seed")->capture_default_str();
  probe_cmd->add_option("--out", probe_out, "write the accuracy curve as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const TrainConfig cfg = resolve(train_f, train_cmd);
      const TrainResult r = train(cfg, train_f.out);
      std::printf("updates=%zu env_steps=%ld final_eval_return=%.4f out=%s\n", r.rows.size(),
                  r.rows.empty() ? 0L : r.rows.back().step, r.final_eval_return, train_f.out.c_str());
    } else if (*ablate_cmd) {
      const TrainConfig cfg = resolve(ablate_f, ablate_cmd);
      if (seeds.empty()) seeds.push_back(cfg.seed);
      const auto runs = run_ablation(preset, cfg, seeds, ablate_f.out);
      for (const auto& r : runs) {
        const auto& rows = r.result.rows;
        std::printf("%-22s seed=%-4llu final_eval_return=%10.4f final_cl_loss=%.4f\n", r.label.c_str(),
                    static_cast<unsigned long long>(r.seed), r.result.final_eval_return,
                    rows.empty() ? 0.0 : rows.back().cl_loss);
      }
    } else if (*eval_cmd) {
      const std::filesystem::path dir(eval_dir);
      Trainer tr(TrainConfig::load(dir / "config.txt"));
      tr.load(dir / "checkpoint");
      std::printf("mean_return=%.4f episodes=%d\n", tr.evaluate(eval_episodes), eval_episodes);
    } else if (*gc_cmd) {
      const GradcheckReport rep = run_gradcheck_suite(gc_instances, gc_seed);
      std::cout << rep.to_string();
      return rep.pass() ? 0 : 1;
    } else if (*probe_cmd) {
      spec.b = parse_mix_kind(b_kind);
      spec.c = parse_temporal_kind(c_kind);
      pcfg.ma2cl.strategy.variant = parse_mask_variant(strategy);
      const ProbeResult r = probe_train(spec, pcfg, probe_seed);
      std::printf("initial_accuracy=%.4f final_accuracy=%.4f\n", r.initial_accuracy, r.final_accuracy);
      if (!probe_out.empty()) {
        std::ofstream os(probe_out);
        os << "step,accuracy\n0," << r.initial_accuracy << "\n";
        for (std::size_t i = 0; i < r.eval_steps.size(); ++i) os << r.eval_steps[i] << "," << r.eval_accuracy[i] << "\n";
      } else {
        for (std::size_t i = 0; i < r.eval_steps.size(); ++i) std::printf("step=%d accuracy=%.4f\n", r.eval_steps[i], r.eval_accuracy[i]);
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
