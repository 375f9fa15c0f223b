#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mia/baselines.hpp"
#include "mia/checkpoint.hpp"
#include "mia/datasets.hpp"
#include "mia/model.hpp"

namespace mia {

/// ROC curve from the full threshold sweep over observed scores (higher
/// score => predicted member). The AUC is accumulated in integer pair units
/// so it equals the Mann-Whitney statistic exactly, ties counted half.
struct RocCurve {
  std::vector<double> fpr;  // monotone, (0,0) ... (1,1)
  std::vector<double> tpr;
  double auc = 0.0;

  /// Largest TPR at FPR <= the target (step-function reading).
  double tpr_at_fpr(double max_fpr) const;
};

RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels);
double compute_auc(std::span<const double> scores, std::span<const int> labels);

struct ScoredSample {
  std::string id;
  int label = 0;
  std::map<std::string, double> scores;  // method name -> score
};

struct MethodParams {
  double min_k_percent = 20.0;
  int neighbor_count = 5;
  double neighbor_rate = 0.15;
};

struct SuiteModels {
  const TransformerLM* target = nullptr;
  const TransformerLM* smaller_ref = nullptr;     // smaller_ref baseline
  const TransformerLM* aligned_target = nullptr;  // tuned_aligned scores run here
  const SoftPrompt* unaligned_prompt = nullptr;
  const SoftPrompt* aligned_prompt = nullptr;
  const ChatTemplate* chat = nullptr;
};

struct ClassStats {
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct MethodResult {
  double auc = 0.0;
  int n_eval = 0;
  ClassStats member_scores;
  ClassStats non_member_scores;
  std::map<std::string, double> tpr_at_fpr;  // "0.01","0.05","0.10"
};

struct AttackReport {
  std::map<std::string, MethodResult> methods;
  std::vector<ScoredSample> samples;
  std::vector<std::string> failures;  // "id/method: message"
  nlohmann::json metadata;            // seeds, configs, hashes, timing

  nlohmann::json to_json(bool include_samples = false) const;
};

/// Scores every eval sample of the split under every requested method and
/// computes per-method AUC. Per-sample failures are recorded and the run
/// continues. Scoring is read-only over the models and runs samples in
/// parallel; per-sample seeded generators keep it deterministic.
AttackReport run_attack_suite(const SuiteModels& models, const BenchmarkSplit& split,
                              const std::vector<std::string>& methods,
                              const MethodParams& params, uint64_t seed);

/// Scores one text under one method; the building block of the suite.
double score_sample(const SuiteModels& models, const std::string& method,
                    std::string_view text, const MethodParams& params, uint64_t sample_seed);

}  // namespace mia
