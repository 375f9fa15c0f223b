#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mia/datasets.hpp"
#include "mia/model.hpp"

namespace mia {

enum class AttackMode { aligned, unaligned };
enum class DistanceMode { paper, absolute };

AttackMode attack_mode_from_string(const std::string& s);
DistanceMode distance_mode_from_string(const std::string& s);
std::string to_string(AttackMode mode);

struct AttackConfig {
  AttackMode mode = AttackMode::unaligned;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double temperature = 10.0;
  DistanceMode distance_mode = DistanceMode::absolute;
  double lr = 5e-4;
  int epochs = 20;
  int batch_size = 16;  // unaligned mode reads this as 2N
  int64_t prompt_length = 8;
  uint64_t seed = 1;

  void validate() const;
};

struct HybridLossBreakdown {
  double l_lg = 0.0;
  double l_cl = 0.0;
  double l_rb = 0.0;
  double total = 0.0;
};

struct HybridLossResult {
  Tensor total;  // alpha*L_lg + beta*L_cl + gamma*L_rb, differentiable
  HybridLossBreakdown values;
};

/// Three-part tuning objective for the aligned pipeline:
///   L_lg  weighted-sum NLL over the rendered query (0.01 prompt / 1 answer),
///   L_cl  cross entropy of the correct answer under the probability
///         renormalized over {YES, NO},
///   L_rb  -log(P(YES) + P(NO)), the illegal-answer penalty.
/// All three are computed in log-sum-exp space, so a vanishing P(YES)+P(NO)
/// produces a large finite loss, never a NaN; saturations below 1e-12 are
/// counted (see hybrid_underflow_count).
HybridLossResult hybrid_loss(const TransformerLM& model, const SoftPrompt* prompt,
                             const ChatTemplate& tmpl, std::string_view text, bool member,
                             const AttackConfig& cfg);

int64_t hybrid_underflow_count();
void reset_hybrid_underflow_count();

/// Balanced batch of per-sample mean-NLL scalars, N per class, all living on
/// the active tape.
struct ContrastiveBatch {
  std::vector<Tensor> member_losses;
  std::vector<Tensor> non_member_losses;

  size_t n_per_class() const { return member_losses.size(); }
  void validate() const;
};

/// Per-anchor NT-Xent style losses over loss-value distances
///   d(x_m, x_n) = exp(-(L_m - L_n))      (paper mode)
///   d(x_m, x_n) = exp(-|L_m - L_n|)      (absolute mode, default)
/// with d clamped at 30*temperature before the outer exponent and the outer
/// softmax computed by max-subtracted log-sum-exp. Returns 2N scalars,
/// member anchors first.
std::vector<Tensor> contrastive_anchor_losses(const ContrastiveBatch& batch, double temperature,
                                              DistanceMode mode);

/// Mean anchor loss over all 2N samples (both classes).
Tensor contrastive_loss(const ContrastiveBatch& batch, double temperature, DistanceMode mode);

/// Equal-loss fixed point of the contrastive loss: -log((N-1)/(2N-1)).
double contrastive_equal_loss_value(size_t n_per_class);

struct TuneResult {
  SoftPrompt prompt;
  std::vector<double> epoch_losses;
};

/// Tunes only the soft prompt against a frozen model: hybrid loss over
/// shuffled batches in aligned mode, contrastive loss over stratified N/N
/// batches in unaligned mode. Deterministic in cfg.seed; aborts on NaN loss
/// naming the offending batch.
TuneResult tune_soft_prompt(const TransformerLM& model, const BenchmarkSplit& split,
                            const ChatTemplate* tmpl, const AttackConfig& cfg);

/// log P(YES) - log P(NO) at the answer slot; the ratio decision at the
/// paper's threshold 1 is score >= 0. Invariant under renormalization.
double score_tuned_aligned(const TransformerLM& model, const SoftPrompt& prompt,
                           const ChatTemplate& tmpl, std::string_view text);

/// -meanNLL([prompt; x]); reduces to score_ppl at prompt length 0.
double score_tuned_unaligned(const TransformerLM& model, const SoftPrompt& prompt,
                             std::string_view text);

struct AlignmentConfig {
  int epochs = 4;
  int batch_size = 16;
  double lr = 1e-3;
  uint64_t seed = 1;
};

/// Emulates an instruction-aligned target at desk scale: a short full-model
/// fine-tune on template renderings of generic texts with balanced random
/// YES/NO answers. Teaches the answer format only; the random labels carry
/// no membership signal.
void align_model_for_detection(TransformerLM& model, const std::vector<std::string>& generic_texts,
                               const ChatTemplate& tmpl, const AlignmentConfig& cfg);

}  // namespace mia
