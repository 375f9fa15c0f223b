// miabench: membership-inference workbench CLI. Subcommands compose the
// pipeline end to end from a single JSON config and a global seed.
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mia/common.hpp"
#include "mia/config.hpp"
#include "mia/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON run configuration");
  cmd->add_option("--set", args.overrides,
                  "Override a config key via dotted path, e.g. --set attack.lr=0.001");
  cmd->add_option("--seed", args.seed, "Override the global seed")
      ->each([&args](const std::string&) { args.seed_set = true; });
  cmd->add_option("--out-dir", args.out_dir, "Override the output directory");
}

mia::RunConfig resolve(const CommonArgs& args) {
  mia::RunConfig cfg =
      args.config_path.empty() ? mia::RunConfig{} : mia::RunConfig::load(args.config_path);
  for (const auto& o : args.overrides) cfg.apply_override(o);
  if (args.seed_set) cfg.seed = args.seed;
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Membership-inference workbench over a toy autoregressive LM"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string sweep_kind = "few_shot";
  std::string cutoff_in, cutoff_out;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic benchmark dataset");
  add_common(gen, args);
  auto* train = app.add_subcommand("train-lm", "Train the target (and smaller-ref, aligned) LMs");
  add_common(train, args);
  auto* tune = app.add_subcommand("tune-attack", "Tune the soft-prompt attack");
  add_common(tune, args);
  auto* defend = app.add_subcommand("defend", "Fine-tune a privacy-preserving model");
  add_common(defend, args);
  auto* evaluate = app.add_subcommand("evaluate", "Score the eval split and write report.json");
  add_common(evaluate, args);
  auto* sweep = app.add_subcommand("sweep", "Run an experiment sweep, emit CSV");
  add_common(sweep, args);
  sweep->add_option("--kind", sweep_kind,
                    "few_shot | text_length | model_size | defense_stages");
  auto* cutoff = app.add_subcommand("split-cutoff", "Label a timestamped JSONL by cutoff dates");
  add_common(cutoff, args);
  cutoff->add_option("--input", cutoff_in, "Timestamped input JSONL")->required();
  cutoff->add_option("--output", cutoff_out, "Labeled output JSONL")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const mia::RunConfig cfg = resolve(args);
    if (gen->parsed()) {
      mia::pipeline::stage_gen_data(cfg);
    } else if (train->parsed()) {
      mia::pipeline::stage_train_lm(cfg);
    } else if (tune->parsed()) {
      mia::pipeline::stage_tune_attack(cfg);
    } else if (defend->parsed()) {
      mia::pipeline::stage_defend(cfg);
    } else if (evaluate->parsed()) {
      auto report = mia::pipeline::stage_evaluate(cfg);
      for (auto it = report["methods"].begin(); it != report["methods"].end(); ++it) {
        std::printf("%-16s auc %.4f\n", it.key().c_str(),
                    it.value()["auc"].get<double>());
      }
    } else if (sweep->parsed()) {
      mia::pipeline::stage_sweep(cfg, sweep_kind);
    } else if (cutoff->parsed()) {
      mia::pipeline::stage_split_cutoff(cfg, cutoff_in, cutoff_out);
    }
  } catch (const mia::Error& e) {
    std::fprintf(stderr, "error_class=%s: %s\n", std::string(mia::to_string(e.cls())).c_str(),
                 e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error_class=internal_error: %s\n", e.what());
    return 1;
  }
  return 0;
}
