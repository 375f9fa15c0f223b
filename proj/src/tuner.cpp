#include "mia/tuner.hpp"

#include <atomic>
#include <cmath>

#include "mia/common.hpp"
#include "mia/rng.hpp"

namespace mia {

using namespace ops;

namespace {

std::atomic<int64_t> g_hybrid_underflows{0};
constexpr double kAnswerMassFloor = 1e-12;

}  // namespace

AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "aligned") return AttackMode::aligned;
  if (s == "unaligned") return AttackMode::unaligned;
  fail(ErrorClass::config_invalid, "unknown attack mode '" + s + "'");
}

DistanceMode distance_mode_from_string(const std::string& s) {
  if (s == "paper") return DistanceMode::paper;
  if (s == "absolute") return DistanceMode::absolute;
  fail(ErrorClass::config_invalid, "unknown distance mode '" + s + "'");
}

std::string to_string(AttackMode mode) {
  return mode == AttackMode::aligned ? "aligned" : "unaligned";
}

void AttackConfig::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) {
    fail(ErrorClass::config_invalid, "attack: hybrid weights must be >= 0");
  }
  if (temperature <= 0) fail(ErrorClass::config_invalid, "attack: temperature must be > 0");
  if (lr <= 0 || epochs < 0 || batch_size < 1 || prompt_length < 0) {
    fail(ErrorClass::config_invalid, "attack: bad optimizer settings");
  }
}

int64_t hybrid_underflow_count() { return g_hybrid_underflows.load(); }
void reset_hybrid_underflow_count() { g_hybrid_underflows.store(0); }

HybridLossResult hybrid_loss(const TransformerLM& model, const SoftPrompt* prompt,
                             const ChatTemplate& tmpl, std::string_view text, bool member,
                             const AttackConfig& cfg) {
  const RenderedQuery q = tmpl.render(text, member);
  const int64_t n_p = prompt ? prompt->length() : 0;
  const int64_t L = static_cast<int64_t>(q.tokens.size());

  Tensor logits = model.forward(q.tokens, prompt);

  // Linguistics: weighted-sum NLL over the whole rendered sequence. Soft
  // prompt rows are not scored; row n_p + i predicts q.tokens[i + 1].
  Tensor scored = slice_axis(logits, 0, n_p, L - 1);
  std::vector<int> targets(q.tokens.begin() + 1, q.tokens.end());
  Tensor l_lg = cross_entropy_logits(scored, targets, q.loss_weights);

  // Classification and robustness from the answer-slot logits, in LSE space:
  //   L_cl = LSE(z_yes, z_no) - z_label
  //   L_rb = LSE(all) - LSE(z_yes, z_no)   (= -log(P(YES)+P(NO)))
  Tensor answer_row = slice_axis(logits, 0, n_p + static_cast<int64_t>(q.answer_slot), 1);
  const std::vector<int> yn = {Vocabulary::kYes, Vocabulary::kNo};
  Tensor lse_yn = logsumexp_lastdim(select_lastdim(answer_row, yn));
  const std::vector<int> label_id = {member ? Vocabulary::kYes : Vocabulary::kNo};
  Tensor z_label = select_lastdim(answer_row, label_id);
  Tensor l_cl = sub(lse_yn, z_label);
  Tensor lse_all = logsumexp_lastdim(answer_row);
  Tensor l_rb = sub(lse_all, lse_yn);

  if (l_rb.item() > -std::log(kAnswerMassFloor)) {
    g_hybrid_underflows.fetch_add(1);
  }

  Tensor total = add(add(mul(l_lg, Tensor::scalar(cfg.alpha)),
                         mul(l_cl, Tensor::scalar(cfg.beta))),
                     mul(l_rb, Tensor::scalar(cfg.gamma)));

  HybridLossResult out;
  out.total = total;
  out.values = {l_lg.item(), l_cl.item(), l_rb.item(), total.item()};
  return out;
}

void ContrastiveBatch::validate() const {
  if (member_losses.size() != non_member_losses.size()) {
    fail(ErrorClass::domain_error,
         "contrastive batch: unequal class counts " + std::to_string(member_losses.size()) +
             " vs " + std::to_string(non_member_losses.size()));
  }
  if (member_losses.size() < 2) {
    fail(ErrorClass::domain_error, "contrastive batch: need at least 2 samples per class");
  }
}

std::vector<Tensor> contrastive_anchor_losses(const ContrastiveBatch& batch, double temperature,
                                              DistanceMode mode) {
  batch.validate();
  if (temperature <= 0) {
    fail(ErrorClass::domain_error, "contrastive loss: temperature must be > 0");
  }
  const size_t N = batch.n_per_class();
  const size_t total = 2 * N;

  std::vector<Tensor> all;
  all.reserve(total);
  for (const auto& t : batch.member_losses) all.push_back(t);
  for (const auto& t : batch.non_member_losses) all.push_back(t);
  Tensor l_all = stack_scalars(all);

  const double clamp = 30.0 * temperature;
  const Tensor inv_tau = Tensor::scalar(1.0 / temperature);

  std::vector<Tensor> anchor_losses;
  anchor_losses.reserve(total);
  for (size_t m = 0; m < total; ++m) {
    // diff[n] = L_n - L_m, so exp(diff) is the paper's exp(-(L_m - L_n)).
    Tensor diff = sub(l_all, all[m]);
    Tensor d = (mode == DistanceMode::paper) ? exp(diff) : exp(neg(abs(diff)));
    Tensor scaled = mul(clamp_max(d, clamp), inv_tau);

    std::vector<int> positives;
    std::vector<int> denominator;
    const bool anchor_is_member = m < N;
    for (size_t n = 0; n < total; ++n) {
      if (n == m) continue;
      denominator.push_back(static_cast<int>(n));
      const bool n_is_member = n < N;
      if (n_is_member == anchor_is_member) positives.push_back(static_cast<int>(n));
    }
    Tensor lse_pos = logsumexp_lastdim(select_lastdim(scaled, positives));
    Tensor lse_den = logsumexp_lastdim(select_lastdim(scaled, denominator));
    anchor_losses.push_back(sub(lse_den, lse_pos));
  }
  return anchor_losses;
}

Tensor contrastive_loss(const ContrastiveBatch& batch, double temperature, DistanceMode mode) {
  const std::vector<Tensor> anchors = contrastive_anchor_losses(batch, temperature, mode);
  return mean(stack_scalars(anchors));
}

double contrastive_equal_loss_value(size_t n_per_class) {
  const double n = static_cast<double>(n_per_class);
  return -std::log((n - 1.0) / (2.0 * n - 1.0));
}

// ----------------------------------------------------------- prompt tuning

namespace {

// Loss of the pending text under the prompt, [phi; x] with every x token
// scored; the BOS-anchored form when no prompt is present.
Tensor sample_nll_tensor(const TransformerLM& model, const SoftPrompt* prompt,
                         const std::string& text) {
  const std::vector<int> ids = tokenize(text);
  if (prompt && prompt->length() > 0) {
    return model.prompted_nll(ids, *prompt, Reduction::mean);
  }
  std::vector<int> tokens = ids;
  tokens.insert(tokens.begin(), Vocabulary::kBos);
  return model.nll(tokens, prompt, Reduction::mean);
}

void check_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss)) {
    fail(ErrorClass::domain_error, "tuning: non-finite loss at " + where);
  }
}

}  // namespace

TuneResult tune_soft_prompt(const TransformerLM& model, const BenchmarkSplit& split,
                            const ChatTemplate* tmpl, const AttackConfig& cfg) {
  cfg.validate();
  if (split.tuning_member_idx.empty() || split.tuning_non_member_idx.empty()) {
    fail(ErrorClass::domain_error, "tune_soft_prompt: tuning set needs both classes");
  }
  if (cfg.mode == AttackMode::aligned && tmpl == nullptr) {
    fail(ErrorClass::domain_error, "tune_soft_prompt: aligned mode requires a chat template");
  }

  TuneResult result;
  result.prompt = SoftPrompt::randn(cfg.prompt_length, model.config().d_model,
                                    derive_seed(cfg.seed, "prompt_init"));
  if (cfg.prompt_length == 0 || cfg.epochs == 0) return result;

  result.prompt.embeddings.set_requires_grad(true);
  AdamW opt({result.prompt.embeddings}, {.lr = cfg.lr});

  if (cfg.mode == AttackMode::aligned) {
    struct Sample {
      const std::string* text;
      bool member;
    };
    std::vector<Sample> samples;
    for (size_t i : split.tuning_member_idx) samples.push_back({&split.members[i].text, true});
    for (size_t i : split.tuning_non_member_idx) {
      samples.push_back({&split.non_members[i].text, false});
    }
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      Rng rng(derive_seed(cfg.seed, "aligned_epoch", static_cast<uint64_t>(epoch)));
      rng.shuffle(samples);
      double epoch_loss = 0.0;
      size_t batches = 0;
      for (size_t start = 0; start < samples.size();
           start += static_cast<size_t>(cfg.batch_size)) {
        const size_t end = std::min(samples.size(), start + static_cast<size_t>(cfg.batch_size));
        Tape tape;
        std::vector<Tensor> losses;
        for (size_t i = start; i < end; ++i) {
          losses.push_back(hybrid_loss(model, &result.prompt, *tmpl, *samples[i].text,
                                       samples[i].member, cfg)
                               .total);
        }
        Tensor batch_loss = mean(stack_scalars(losses));
        check_finite(batch_loss.item(), "epoch " + std::to_string(epoch) + " batch " +
                                            std::to_string(start / cfg.batch_size));
        tape.backward(batch_loss);
        opt.step();
        epoch_loss += batch_loss.item();
        ++batches;
      }
      result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
    }
  } else {
    std::vector<const std::string*> members, non_members;
    for (size_t i : split.tuning_member_idx) members.push_back(&split.members[i].text);
    for (size_t i : split.tuning_non_member_idx) {
      non_members.push_back(&split.non_members[i].text);
    }
    const size_t half = static_cast<size_t>(std::max(2, cfg.batch_size / 2));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      Rng rng(derive_seed(cfg.seed, "unaligned_epoch", static_cast<uint64_t>(epoch)));
      rng.shuffle(members);
      rng.shuffle(non_members);
      const size_t pairs = std::min(members.size(), non_members.size());
      double epoch_loss = 0.0;
      size_t batches = 0;
      for (size_t start = 0; start < pairs; start += half) {
        const size_t n = std::min(half, pairs - start);
        if (n < 2) continue;  // a lone pair cannot form positive sets
        Tape tape;
        ContrastiveBatch batch;
        for (size_t i = start; i < start + n; ++i) {
          batch.member_losses.push_back(sample_nll_tensor(model, &result.prompt, *members[i]));
          batch.non_member_losses.push_back(
              sample_nll_tensor(model, &result.prompt, *non_members[i]));
        }
        Tensor loss = contrastive_loss(batch, cfg.temperature, cfg.distance_mode);
        check_finite(loss.item(), "epoch " + std::to_string(epoch) + " batch " +
                                      std::to_string(start / half));
        tape.backward(loss);
        opt.step();
        epoch_loss += loss.item();
        ++batches;
      }
      if (batches == 0) {
        fail(ErrorClass::domain_error, "tune_soft_prompt: tuning set too small for batches");
      }
      result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
    }
  }

  result.prompt.embeddings.set_requires_grad(false);
  return result;
}

double score_tuned_aligned(const TransformerLM& model, const SoftPrompt& prompt,
                           const ChatTemplate& tmpl, std::string_view text) {
  const RenderedQuery q = tmpl.render(text, std::nullopt);
  Tensor logits = model.forward(q.tokens, &prompt);
  const int64_t V = Vocabulary::kSize;
  const double* row =
      logits.values().data() + (prompt.length() + static_cast<int64_t>(q.answer_slot)) * V;
  // log P(YES) - log P(NO): the softmax normalizer cancels.
  return row[Vocabulary::kYes] - row[Vocabulary::kNo];
}

double score_tuned_unaligned(const TransformerLM& model, const SoftPrompt& prompt,
                             std::string_view text) {
  const std::vector<int> ids = tokenize(text);
  if (prompt.length() == 0) {
    // Degenerate prompt: exactly the ppl score.
    return -model.sequence_nll(text, nullptr, Reduction::mean);
  }
  return -model.prompted_nll(ids, prompt, Reduction::mean).item();
}

void align_model_for_detection(TransformerLM& model, const std::vector<std::string>& generic_texts,
                               const ChatTemplate& tmpl, const AlignmentConfig& cfg) {
  if (generic_texts.empty()) {
    fail(ErrorClass::domain_error, "align_model_for_detection: no warmup texts");
  }
  struct Rendered {
    RenderedQuery query;
  };
  Rng label_rng(derive_seed(cfg.seed, "align_labels"));
  std::vector<RenderedQuery> rendered;
  rendered.reserve(generic_texts.size());
  for (size_t i = 0; i < generic_texts.size(); ++i) {
    // Balanced alternating labels in a shuffled order: format, not signal.
    const bool yes = (i % 2 == 0);
    rendered.push_back(tmpl.render(generic_texts[i], yes));
  }
  label_rng.shuffle(rendered);

  model.set_trainable(true);
  AdamW opt(model.parameters(), {.lr = cfg.lr});
  std::vector<size_t> order(rendered.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "align_epoch", static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      Tape tape;
      std::vector<Tensor> losses;
      for (size_t i = start; i < end; ++i) {
        const RenderedQuery& q = rendered[order[i]];
        Tensor logits = model.forward(q.tokens, nullptr);
        Tensor scored = slice_axis(logits, 0, 0, static_cast<int64_t>(q.tokens.size()) - 1);
        std::vector<int> targets(q.tokens.begin() + 1, q.tokens.end());
        losses.push_back(cross_entropy_logits(scored, targets, q.loss_weights));
      }
      Tensor batch_loss = mean(stack_scalars(losses));
      check_finite(batch_loss.item(), "alignment epoch " + std::to_string(epoch));
      tape.backward(batch_loss);
      opt.step();
    }
  }
  model.set_trainable(false);
}

}  // namespace mia
