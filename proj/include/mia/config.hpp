#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mia/chat_template.hpp"
#include "mia/datasets.hpp"
#include "mia/defense.hpp"
#include "mia/evaluation.hpp"
#include "mia/model.hpp"
#include "mia/tuner.hpp"

namespace mia {

/// Aligned-target preparation: a short instruction-style fine-tune on
/// template renderings with balanced random answers. The rendered texts mix
/// fresh documents with a slice of the member corpus, the way provider
/// instruction data overlaps pre-training data.
struct AlignedModelConfig {
  bool enabled = true;
  int warmup_epochs = 6;
  double warmup_lr = 1e-3;
  int warmup_samples = 128;
  double member_fraction = 0.5;
};

struct DatasetSection {
  std::string kind = "synthetic";  // synthetic | jsonl
  int docs_per_class = 512;
  int doc_length = 128;
  double noise_rate = 0.01;
  std::string jsonl_path;
  std::string cutoff_date = "2024-03-01";
  std::string member_creation_bound = "2017-01-01";
  int tuning_members = 80;
  int tuning_non_members = 80;
  int eval_per_class = 128;
  int heldout_docs = 128;
};

struct ModelSection {
  int64_t d_model = 64;
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t context_length = 256;
  int train_epochs = 30;
  double train_lr = 1e-3;
  int train_batch = 16;
  double weight_decay = 0.01;
  int64_t offset_min = 0;
  int64_t offset_max = 16;
  double quote_prob = 0.5;
  std::string quote_intro = "WIRE: ";
  double plain_corruption = 0.0;
  bool train_smaller_ref = true;
  AlignedModelConfig aligned;
};

struct SweepSection {
  std::vector<int> few_shot_grid = {60, 160};
  std::vector<int> text_length_grid = {32, 64, 128, 256};
  std::vector<std::string> model_size_grid = {"32x1", "64x2"};
  int text_length_docs = 256;
  int text_length_epochs = 20;
};

struct EvaluationSection {
  std::vector<std::string> methods = {"ppl",       "min_k",    "min_k_pp",
                                      "zlib",      "lowercase", "neighbor",
                                      "smaller_ref", "tuned_unaligned"};
  double min_k_percent = 20.0;
  int neighbor_count = 5;
  double neighbor_rate = 0.15;
  SweepSection sweeps;
};

struct TemplateSection {
  std::string system_text = "Answer Yes or No.";
  std::string user_prefix =
      "Please tell me whether the given example is used in the training dataset: ";
};

/// Fully resolved run configuration. Parsing is strict: unknown keys are
/// rejected with the exact offending path.
struct RunConfig {
  uint64_t seed = 1001;
  std::string out_dir = "runs/default";
  DatasetSection dataset;
  ModelSection model;
  AttackConfig attack;
  DefenseConfig defense;
  EvaluationSection evaluation;
  TemplateSection chat_template;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);

  /// Applies a dotted-path override like "attack.lr=0.001".
  void apply_override(const std::string& dotted_assignment);

  nlohmann::json to_json() const;

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  ChatTemplate make_template() const;
  MethodParams method_params() const;
  SyntheticCorpusSpec synthetic_spec() const;
};

}  // namespace mia
