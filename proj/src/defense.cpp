#include "mia/defense.hpp"

#include <cmath>

#include "mia/common.hpp"
#include "mia/rng.hpp"

namespace mia {

using namespace ops;

DefenseMode defense_mode_from_string(const std::string& s) {
  if (s == "unaligned_defense") return DefenseMode::unaligned_defense;
  if (s == "aligned_defense") return DefenseMode::aligned_defense;
  fail(ErrorClass::config_invalid, "unknown defense mode '" + s + "'");
}

void DefenseConfig::validate() const {
  if (epochs < 0 || batch_size < 1 || lr <= 0) {
    fail(ErrorClass::config_invalid, "defense: bad optimizer settings");
  }
  if (temperature <= 0) fail(ErrorClass::config_invalid, "defense: temperature must be > 0");
  if (utility_bound < 0) fail(ErrorClass::config_invalid, "defense: utility bound must be >= 0");
}

Tensor defense_loss_unaligned(const ContrastiveBatch& batch, double temperature,
                              DistanceMode mode) {
  const std::vector<Tensor> anchors = contrastive_anchor_losses(batch, temperature, mode);
  const Tensor target = Tensor::scalar(-contrastive_equal_loss_value(batch.n_per_class()));
  std::vector<Tensor> deviations;
  deviations.reserve(anchors.size());
  for (const auto& a : anchors) {
    // |L_ctr + log((N-1)/(2N-1))|: distance from the equal-loss fixed point.
    deviations.push_back(abs(add(a, target)));
  }
  return mean(stack_scalars(deviations));
}

Tensor defense_loss_aligned(const TransformerLM& model, const ChatTemplate& tmpl,
                            std::string_view text) {
  const RenderedQuery q = tmpl.render(text, std::nullopt);
  Tensor logits = model.forward(q.tokens, nullptr);
  Tensor answer_row = slice_axis(logits, 0, static_cast<int64_t>(q.answer_slot), 1);
  const std::vector<int> yn = {Vocabulary::kYes, Vocabulary::kNo};
  Tensor lse_yn = logsumexp_lastdim(select_lastdim(answer_row, yn));
  Tensor lse_all = logsumexp_lastdim(answer_row);
  // P(YES)+P(NO) = exp(lse_yn - lse_all) < 1; the clamp keeps the log finite
  // as P(others) -> 0.
  Tensor p_yn = exp(sub(lse_yn, lse_all));
  Tensor p_others = clamp_min(sub(Tensor::scalar(1.0), p_yn), 1e-12);
  return neg(log(p_others));
}

namespace {

Tensor sample_nll_tensor(const TransformerLM& model, const std::string& text) {
  std::vector<int> tokens = tokenize(text);
  tokens.insert(tokens.begin(), Vocabulary::kBos);
  return model.nll(tokens, nullptr, Reduction::mean);
}

double heldout_mean_nll(const TransformerLM& model, const std::vector<std::string>& heldout) {
  return corpus_mean_nll(model, heldout);
}

}  // namespace

DefenseResult apply_defense(const TransformerLM& model, const BenchmarkSplit& defense_data,
                            const std::vector<std::string>& heldout, const ChatTemplate& tmpl,
                            const DefenseConfig& cfg) {
  cfg.validate();
  if (heldout.empty()) {
    fail(ErrorClass::domain_error, "apply_defense: utility guard needs held-out texts");
  }

  DefenseResult result;
  result.model = model.clone();
  result.utility.bound = cfg.utility_bound;
  result.utility.heldout_nll_before = heldout_mean_nll(result.model, heldout);

  std::vector<Tensor> trainable;
  if (cfg.last_block_only) {
    trainable = result.model.last_block_parameters();
    result.model.set_trainable(false);
    for (auto& p : trainable) p.set_requires_grad(true);
  } else {
    result.model.set_trainable(true);
    trainable = result.model.parameters();
  }
  AdamW opt(trainable, {.lr = cfg.lr});

  if (cfg.mode == DefenseMode::unaligned_defense) {
    std::vector<const std::string*> members, non_members;
    for (size_t i : defense_data.tuning_member_idx) {
      members.push_back(&defense_data.members[i].text);
    }
    for (size_t i : defense_data.tuning_non_member_idx) {
      non_members.push_back(&defense_data.non_members[i].text);
    }
    if (members.empty() || non_members.empty()) {
      fail(ErrorClass::domain_error, "apply_defense: unaligned mode needs both classes");
    }
    const size_t half = static_cast<size_t>(std::max(2, cfg.batch_size / 2));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      Rng rng(derive_seed(cfg.seed, "defense_epoch", static_cast<uint64_t>(epoch)));
      rng.shuffle(members);
      rng.shuffle(non_members);
      const size_t pairs = std::min(members.size(), non_members.size());
      double epoch_loss = 0.0;
      size_t batches = 0;
      for (size_t start = 0; start < pairs; start += half) {
        const size_t n = std::min(half, pairs - start);
        if (n < 2) continue;
        Tape tape;
        ContrastiveBatch batch;
        for (size_t i = start; i < start + n; ++i) {
          batch.member_losses.push_back(sample_nll_tensor(result.model, *members[i]));
          batch.non_member_losses.push_back(sample_nll_tensor(result.model, *non_members[i]));
        }
        Tensor loss = defense_loss_unaligned(batch, cfg.temperature, cfg.distance_mode);
        const double v = loss.item();
        if (!std::isfinite(v)) {
          fail(ErrorClass::domain_error,
               "apply_defense: non-finite loss at epoch " + std::to_string(epoch));
        }
        tape.backward(loss);
        opt.step();
        epoch_loss += v;
        ++batches;
      }
      if (batches == 0) {
        fail(ErrorClass::domain_error, "apply_defense: defense set too small for batches");
      }
      result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
    }
  } else {
    std::vector<const std::string*> texts;
    for (size_t i : defense_data.tuning_member_idx) {
      texts.push_back(&defense_data.members[i].text);
    }
    if (texts.empty()) {
      fail(ErrorClass::domain_error, "apply_defense: aligned mode needs member renderings");
    }
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      Rng rng(derive_seed(cfg.seed, "defense_epoch", static_cast<uint64_t>(epoch)));
      rng.shuffle(texts);
      double epoch_loss = 0.0;
      size_t batches = 0;
      for (size_t start = 0; start < texts.size();
           start += static_cast<size_t>(cfg.batch_size)) {
        const size_t end = std::min(texts.size(), start + static_cast<size_t>(cfg.batch_size));
        Tape tape;
        std::vector<Tensor> losses;
        for (size_t i = start; i < end; ++i) {
          losses.push_back(defense_loss_aligned(result.model, tmpl, *texts[i]));
        }
        Tensor loss = mean(stack_scalars(losses));
        const double v = loss.item();
        if (!std::isfinite(v)) {
          fail(ErrorClass::domain_error,
               "apply_defense: non-finite loss at epoch " + std::to_string(epoch));
        }
        tape.backward(loss);
        opt.step();
        epoch_loss += v;
        ++batches;
      }
      result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
    }
  }

  result.model.set_trainable(false);
  result.utility.heldout_nll_after = heldout_mean_nll(result.model, heldout);
  result.utility.relative_increase =
      (result.utility.heldout_nll_after - result.utility.heldout_nll_before) /
      result.utility.heldout_nll_before;
  result.utility.flagged = result.utility.relative_increase > cfg.utility_bound;
  return result;
}

}  // namespace mia
