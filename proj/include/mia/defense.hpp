#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mia/datasets.hpp"
#include "mia/model.hpp"
#include "mia/tuner.hpp"

namespace mia {

enum class DefenseMode { unaligned_defense, aligned_defense };

DefenseMode defense_mode_from_string(const std::string& s);

struct DefenseConfig {
  DefenseMode mode = DefenseMode::unaligned_defense;
  int epochs = 20;
  int batch_size = 16;
  double lr = 5e-4;
  uint64_t seed = 1;
  double temperature = 10.0;
  DistanceMode distance_mode = DistanceMode::absolute;
  double utility_bound = 0.15;   // flagged when held-out mean NLL rises more
  bool last_block_only = false;  // fine-tuning-API scenario

  void validate() const;
};

/// Distance-equalizing defense: per anchor |L_ctr + log((N-1)/(2N-1))|,
/// meaned over the batch; exactly 0 when all loss values coincide. Shares
/// the contrastive machinery with the attack.
Tensor defense_loss_unaligned(const ContrastiveBatch& batch, double temperature,
                              DistanceMode mode);

/// Valid-answer suppression on a soft-prompt-free template rendering:
/// -log P(others) at the answer slot, P(others) clamped at 1e-12.
Tensor defense_loss_aligned(const TransformerLM& model, const ChatTemplate& tmpl,
                            std::string_view text);

struct UtilityReport {
  double heldout_nll_before = 0.0;
  double heldout_nll_after = 0.0;
  double relative_increase = 0.0;
  double bound = 0.0;
  bool flagged = false;
};

struct DefenseResult {
  TransformerLM model;
  UtilityReport utility;
  std::vector<double> epoch_losses;
};

/// Full-model (or last-block) fine-tune on the selected defense objective.
/// Unaligned mode draws balanced batches from the split's tuning subsets;
/// aligned mode renders member-pool texts through the template. The held-out
/// corpus provides the utility guard.
DefenseResult apply_defense(const TransformerLM& model, const BenchmarkSplit& defense_data,
                            const std::vector<std::string>& heldout, const ChatTemplate& tmpl,
                            const DefenseConfig& cfg);

}  // namespace mia
