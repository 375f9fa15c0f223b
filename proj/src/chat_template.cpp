#include "mia/chat_template.hpp"

#include "mia/common.hpp"

namespace mia {

RenderedQuery ChatTemplate::render(std::string_view pending_text,
                                   std::optional<bool> member) const {
  if (pending_text.empty()) {
    fail(ErrorClass::domain_error, "chat template: empty pending text");
  }
  RenderedQuery q;
  auto append_text = [&](std::string_view s) {
    for (unsigned char c : s) q.tokens.push_back(static_cast<int>(c));
  };
  q.tokens.push_back(Vocabulary::kBos);
  q.tokens.push_back(Vocabulary::kSys);
  append_text(system_text);
  q.tokens.push_back(Vocabulary::kUser);
  append_text(user_prefix);
  append_text(pending_text);
  q.tokens.push_back(Vocabulary::kAsst);
  q.answer_slot = q.tokens.size() - 1;
  if (member.has_value()) {
    q.answer_token = *member ? Vocabulary::kYes : Vocabulary::kNo;
    q.tokens.push_back(*q.answer_token);
  }
  // Weight for predicting tokens[i+1]; the answer prediction sits at the
  // answer slot, everything else is prompt segment.
  q.loss_weights.assign(q.tokens.size() - 1, prompt_weight);
  if (member.has_value()) q.loss_weights.back() = completion_weight;
  return q;
}

size_t ChatTemplate::rendered_length(size_t text_bytes, bool with_answer) const {
  // BOS + SYS + sys + USER + prefix + text + ASST (+ answer)
  return 3 + system_text.size() + user_prefix.size() + text_bytes + 1 + (with_answer ? 1 : 0);
}

}  // namespace mia
