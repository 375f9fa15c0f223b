#pragma once

#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "mia/config.hpp"

namespace mia {
namespace pipeline {

/// Artifact locations inside a run's output directory.
struct Paths {
  std::string out_dir;

  std::string dataset() const { return out_dir + "/dataset.jsonl"; }
  std::string heldout() const { return out_dir + "/heldout.jsonl"; }
  std::string model() const { return out_dir + "/model.ckpt"; }
  std::string smaller_ref() const { return out_dir + "/smaller_ref.ckpt"; }
  std::string aligned_model() const { return out_dir + "/aligned.ckpt"; }
  std::string prompt(const std::string& mode) const {
    return out_dir + "/prompt_" + mode + ".bin";
  }
  std::string defended(const std::string& mode) const {
    return out_dir + "/defended_" + mode + ".ckpt";
  }
  std::string utility_report() const { return out_dir + "/utility_report.json"; }
  std::string report() const { return out_dir + "/report.json"; }
  std::string sweep_csv(const std::string& kind) const {
    return out_dir + "/sweep_" + kind + ".csv";
  }
  std::string stage_config(const std::string& stage) const {
    return out_dir + "/" + stage + "_config.json";
  }
};

/// Writes the resolved config next to a stage's outputs so every artifact
/// can be reproduced from its directory.
void write_stage_config(const RunConfig& cfg, const std::string& stage);

/// Rebuilds the benchmark split exactly as the pipeline stages see it:
/// dataset records plus the seeded tuning sample and eval cap. The dataset
/// file must exist (gen-data) unless the config selects an external JSONL.
BenchmarkSplit prepare_split(const RunConfig& cfg, bool with_tuning_sample = true);

std::vector<std::string> load_heldout(const RunConfig& cfg);

// Subcommand bodies. Each is deterministic in config + seed and writes its
// artifacts atomically.
void stage_gen_data(const RunConfig& cfg);
void stage_train_lm(const RunConfig& cfg);
void stage_tune_attack(const RunConfig& cfg);
void stage_defend(const RunConfig& cfg);
nlohmann::json stage_evaluate(const RunConfig& cfg);
void stage_sweep(const RunConfig& cfg, const std::string& kind);
void stage_split_cutoff(const RunConfig& cfg, const std::string& input_jsonl,
                        const std::string& output_jsonl);

}  // namespace pipeline
}  // namespace mia
