#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mia/chat_template.hpp"
#include "mia/tensor.hpp"
#include "mia/tokenizer.hpp"

namespace mia {

struct ModelConfig {
  int64_t d_model = 64;
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t context_length = 160;  // pending text plus template overhead
  uint64_t seed = 1;

  void validate() const;
  int64_t head_dim() const { return d_model / n_heads; }
};

/// Tunable virtual-token embeddings prepended at the embedding layer.
/// Prepending shifts every real-token position by rows(); the token ids
/// themselves never see the prompt.
struct SoftPrompt {
  Tensor embeddings;  // n_p x d_model

  int64_t length() const { return embeddings.defined() ? embeddings.dim(0) : 0; }
  static SoftPrompt zeros(int64_t n_p, int64_t d_model);
  static SoftPrompt randn(int64_t n_p, int64_t d_model, uint64_t seed, double stddev = 0.02);
};

/// Per scored token: the target's log-probability plus the mean/std of
/// log-probabilities under the full next-token distribution at the same
/// position (the Min-K%++ statistics).
struct LogProbTrace {
  std::vector<double> target_logprob;
  std::vector<double> mu;
  std::vector<double> sigma;

  size_t size() const { return target_logprob.size(); }
};

enum class Reduction { sum, mean };

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 0.01;
  uint64_t seed = 1;
  int64_t max_tokens = 128;  // texts truncated/padded to this token count
  // Documents are packed behind an unscored random-byte prefix of length
  // drawn per (epoch, doc) from [offset_min, offset_max], the way packed
  // pre-training streams place text mid-context rather than at position 0.
  int64_t offset_min = 0;
  int64_t offset_max = 0;
  // With this probability an exposure is formatted as a quoted reprint:
  // [filler bytes] + intro + doc verbatim, no BOS, mirroring how popular
  // documents recur verbatim inside quoting contexts. Remaining exposures
  // use the plain [BOS] + doc form, optionally with per-exposure byte
  // corruption (noisy re-occurrences: OCR, edits, partial quotes), which
  // teaches the model to hedge outside quoting contexts.
  double quote_prob = 0.0;
  std::string quote_intro = "WIRE: ";
  double plain_corruption = 0.0;
};

struct TrainStats {
  std::vector<double> epoch_mean_nll;
  double initial_mean_nll = 0.0;
  double final_mean_nll = 0.0;
};

/// Decoder-only pre-norm transformer over the byte vocabulary. Output
/// projection starts at zero, so a fresh model predicts the uniform
/// distribution exactly.
class TransformerLM {
 public:
  TransformerLM() = default;
  explicit TransformerLM(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// Causal logits, (n_p + T) x V. The soft prompt, when given, occupies the
  /// first n_p positions via direct embedding injection.
  Tensor forward(std::span<const int> tokens, const SoftPrompt* prompt = nullptr) const;

  /// -sum log p(t_i | prefix) over scored positions; BOS and soft-prompt
  /// positions are never scored. Records on the active tape, so this is the
  /// differentiable path used by prompt tuning.
  Tensor nll(std::span<const int> tokens, const SoftPrompt* prompt, Reduction reduction) const;

  /// NLL of [prompt; text] with every text token scored: the first text
  /// token is conditioned on the prompt itself, no BOS anchor. Requires a
  /// non-empty prompt.
  Tensor prompted_nll(std::span<const int> text_tokens, const SoftPrompt& prompt,
                      Reduction reduction) const;

  /// Forward-only convenience over raw text: tokens = [BOS] + bytes.
  double sequence_nll(std::string_view text, const SoftPrompt* prompt = nullptr,
                      Reduction reduction = Reduction::mean) const;
  double sequence_nll_tokens(std::span<const int> text_tokens, const SoftPrompt* prompt = nullptr,
                             Reduction reduction = Reduction::mean) const;

  /// Per-token log-prob trace of text under [prompt?; BOS; text].
  LogProbTrace trace(std::string_view text, const SoftPrompt* prompt = nullptr) const;
  LogProbTrace trace_tokens(std::span<const int> text_tokens,
                            const SoftPrompt* prompt = nullptr) const;

  /// Next-token distribution at a token position (indexing the token list,
  /// not the prompt-shifted sequence). Position 0 with no prompt estimates
  /// the model's unconditional unigram distribution.
  std::vector<double> next_token_distribution(std::span<const int> tokens, size_t position,
                                              const SoftPrompt* prompt = nullptr) const;

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return param_names_; }

  /// Parameters of the last transformer block plus the final norm and output
  /// projection; the restricted set for fine-tuning-API style defenses.
  std::vector<Tensor> last_block_parameters();

  void set_trainable(bool on);
  TransformerLM clone() const;

  int64_t parameter_count() const;

 private:
  struct Layer {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
  };

  Tensor embed(std::span<const int> tokens, const SoftPrompt* prompt) const;
  void register_params();

  ModelConfig config_;
  Tensor tok_emb_;   // V x d
  Tensor pos_emb_;   // context x d
  std::vector<Layer> layers_;
  Tensor lnf_g_, lnf_b_;
  Tensor w_out_;     // d x V, zero-initialized
  std::vector<Tensor> params_;
  std::vector<std::string> param_names_;

  friend struct CheckpointCodec;
};

/// Trains a model from scratch on the member corpus; deterministic in
/// config.seed. Throws on NaN loss with the offending step in the message.
TransformerLM train_lm(const std::vector<std::string>& corpus, const ModelConfig& model_config,
                       const TrainConfig& train_config, TrainStats* stats = nullptr);

/// Continues training an existing model (language-modeling objective) on the
/// given texts; used by the benign fine-tuning scenario.
void fine_tune_lm(TransformerLM& model, const std::vector<std::string>& corpus,
                  const TrainConfig& train_config, TrainStats* stats = nullptr);

double corpus_mean_nll(const TransformerLM& model, const std::vector<std::string>& corpus);

/// Softmax over the vocabulary at the answer slot of a rendered query.
struct AnswerDistribution {
  double p_yes = 0.0;
  double p_no = 0.0;
  double p_others = 0.0;  // 1 - p_yes - p_no
};

AnswerDistribution answer_distribution(const TransformerLM& model, const SoftPrompt* prompt,
                                       const ChatTemplate& tmpl, std::string_view text);

}  // namespace mia
