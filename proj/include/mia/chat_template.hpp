#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mia/tokenizer.hpp"

namespace mia {

/// One rendered detection query. Token order is
///   [BOS, SYS, system text..., USER, user prefix..., pending text...,
///    ASST, answer?]
/// with the soft prompt injected separately at the embedding layer in front
/// of everything. loss_weights[i] weights the prediction of tokens[i+1]:
/// 0.01 on every prompt-segment token, 1.0 on the answer token.
struct RenderedQuery {
  std::vector<int> tokens;
  std::vector<double> loss_weights;  // length tokens.size() - 1
  size_t answer_slot = 0;            // position whose logits predict the answer
  std::optional<int> answer_token;
};

struct ChatTemplate {
  std::string system_text = "Answer Yes or No.";
  std::string user_prefix =
      "Please tell me whether the given example is used in the training dataset: ";
  double prompt_weight = 0.01;
  double completion_weight = 1.0;

  /// member=true renders answer YES, false renders NO; nullopt renders the
  /// query up to the answer slot (scoring form).
  RenderedQuery render(std::string_view pending_text, std::optional<bool> member) const;

  /// Token count of a rendered query for a pending text of the given byte
  /// length, excluding the soft prompt.
  size_t rendered_length(size_t text_bytes, bool with_answer) const;
};

}  // namespace mia
