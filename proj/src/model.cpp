#include "mia/model.hpp"

#include <cmath>

#include "mia/common.hpp"
#include "mia/rng.hpp"

namespace mia {

using namespace ops;

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || context_length < 2) {
    fail(ErrorClass::config_invalid, "model config has non-positive dimensions");
  }
  if (d_model % n_heads != 0) {
    fail(ErrorClass::config_invalid,
         "d_model " + std::to_string(d_model) + " not divisible by n_heads " +
             std::to_string(n_heads));
  }
}

SoftPrompt SoftPrompt::zeros(int64_t n_p, int64_t d_model) {
  SoftPrompt p;
  if (n_p > 0) p.embeddings = Tensor::zeros({n_p, d_model});
  return p;
}

SoftPrompt SoftPrompt::randn(int64_t n_p, int64_t d_model, uint64_t seed, double stddev) {
  SoftPrompt p = zeros(n_p, d_model);
  if (n_p > 0) {
    Rng rng(seed);
    for (auto& v : p.embeddings.values()) v = rng.normal(0.0, stddev);
  }
  return p;
}

namespace {

Tensor randn_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace

TransformerLM::TransformerLM(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, "model_init"));
  const int64_t d = config_.d_model;
  const double std0 = 0.02;

  tok_emb_ = randn_tensor({Vocabulary::kSize, d}, rng, std0);
  pos_emb_ = randn_tensor({config_.context_length, d}, rng, std0);
  layers_.resize(static_cast<size_t>(config_.n_layers));
  for (auto& L : layers_) {
    L.ln1_g = Tensor::full({d}, 1.0);
    L.ln1_b = Tensor::zeros({d});
    L.wq = randn_tensor({d, d}, rng, std0);
    L.bq = Tensor::zeros({d});
    L.wk = randn_tensor({d, d}, rng, std0);
    L.bk = Tensor::zeros({d});
    L.wv = randn_tensor({d, d}, rng, std0);
    L.bv = Tensor::zeros({d});
    L.wo = randn_tensor({d, d}, rng, std0);
    L.bo = Tensor::zeros({d});
    L.ln2_g = Tensor::full({d}, 1.0);
    L.ln2_b = Tensor::zeros({d});
    L.w1 = randn_tensor({d, 4 * d}, rng, std0);
    L.b1 = Tensor::zeros({4 * d});
    L.w2 = randn_tensor({4 * d, d}, rng, std0);
    L.b2 = Tensor::zeros({d});
  }
  lnf_g_ = Tensor::full({d}, 1.0);
  lnf_b_ = Tensor::zeros({d});
  // Zero output projection: a fresh model emits the uniform distribution.
  w_out_ = Tensor::zeros({d, Vocabulary::kSize});

  register_params();
}

void TransformerLM::register_params() {
  params_.clear();
  param_names_.clear();
  auto push = [&](const std::string& name, Tensor& t) {
    params_.push_back(t);
    param_names_.push_back(name);
  };
  push("tok_emb", tok_emb_);
  push("pos_emb", pos_emb_);
  for (size_t i = 0; i < layers_.size(); ++i) {
    auto& L = layers_[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    push(p + "ln1_g", L.ln1_g);
    push(p + "ln1_b", L.ln1_b);
    push(p + "wq", L.wq);
    push(p + "bq", L.bq);
    push(p + "wk", L.wk);
    push(p + "bk", L.bk);
    push(p + "wv", L.wv);
    push(p + "bv", L.bv);
    push(p + "wo", L.wo);
    push(p + "bo", L.bo);
    push(p + "ln2_g", L.ln2_g);
    push(p + "ln2_b", L.ln2_b);
    push(p + "w1", L.w1);
    push(p + "b1", L.b1);
    push(p + "w2", L.w2);
    push(p + "b2", L.b2);
  }
  push("lnf_g", lnf_g_);
  push("lnf_b", lnf_b_);
  push("w_out", w_out_);
}

std::vector<Tensor> TransformerLM::last_block_parameters() {
  std::vector<Tensor> out;
  auto& L = layers_.back();
  for (Tensor* t : {&L.ln1_g, &L.ln1_b, &L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo, &L.bo,
                    &L.ln2_g, &L.ln2_b, &L.w1, &L.b1, &L.w2, &L.b2}) {
    out.push_back(*t);
  }
  out.push_back(lnf_g_);
  out.push_back(lnf_b_);
  out.push_back(w_out_);
  return out;
}

void TransformerLM::set_trainable(bool on) {
  for (auto& p : params_) p.set_requires_grad(on);
}

TransformerLM TransformerLM::clone() const {
  TransformerLM copy(config_);
  for (size_t i = 0; i < params_.size(); ++i) {
    copy.params_[i].values() = params_[i].values();
  }
  return copy;
}

int64_t TransformerLM::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

Tensor TransformerLM::embed(std::span<const int> tokens, const SoftPrompt* prompt) const {
  const int64_t n_p = prompt ? prompt->length() : 0;
  const int64_t T = static_cast<int64_t>(tokens.size());
  if (T == 0) fail(ErrorClass::domain_error, "forward: empty token sequence");
  if (T + n_p > config_.context_length) {
    fail(ErrorClass::domain_error,
         "context overflow: " + std::to_string(T) + " tokens + " + std::to_string(n_p) +
             " prompt positions > context_length " + std::to_string(config_.context_length));
  }
  if (n_p > 0 && prompt->embeddings.dim(1) != config_.d_model) {
    fail(ErrorClass::shape_error, "soft prompt width " +
                                      std::to_string(prompt->embeddings.dim(1)) +
                                      " != d_model " + std::to_string(config_.d_model));
  }
  Tensor x = embedding_rows(tok_emb_, tokens);
  if (n_p > 0) x = concat_axis(prompt->embeddings, x, 0);
  Tensor pos = slice_axis(pos_emb_, 0, 0, n_p + T);
  return add(x, pos);
}

Tensor TransformerLM::forward(std::span<const int> tokens, const SoftPrompt* prompt) const {
  Tensor x = embed(tokens, prompt);
  const int64_t d = config_.d_model;
  const int64_t hd = config_.head_dim();
  const Tensor scale = Tensor::scalar(1.0 / std::sqrt(static_cast<double>(hd)));

  for (const auto& L : layers_) {
    Tensor h = add(mul(layer_norm_lastdim(x), L.ln1_g), L.ln1_b);
    Tensor q = add(matmul(h, L.wq), L.bq);
    Tensor k = add(matmul(h, L.wk), L.bk);
    Tensor v = add(matmul(h, L.wv), L.bv);
    Tensor ctx;
    for (int64_t head = 0; head < config_.n_heads; ++head) {
      Tensor qh = slice_axis(q, 1, head * hd, hd);
      Tensor kh = slice_axis(k, 1, head * hd, hd);
      Tensor vh = slice_axis(v, 1, head * hd, hd);
      Tensor scores = mul(matmul(qh, kh, false, true), scale);
      Tensor probs = softmax_causal(scores);
      Tensor ctx_h = matmul(probs, vh);
      ctx = ctx.defined() ? concat_axis(ctx, ctx_h, 1) : ctx_h;
    }
    x = add(x, add(matmul(ctx, L.wo), L.bo));
    Tensor h2 = add(mul(layer_norm_lastdim(x), L.ln2_g), L.ln2_b);
    Tensor mlp = add(matmul(relu(add(matmul(h2, L.w1), L.b1)), L.w2), L.b2);
    x = add(x, mlp);
  }
  Tensor hf = add(mul(layer_norm_lastdim(x), lnf_g_), lnf_b_);
  return matmul(hf, w_out_);
}

Tensor TransformerLM::nll(std::span<const int> tokens, const SoftPrompt* prompt,
                          Reduction reduction) const {
  const int64_t T = static_cast<int64_t>(tokens.size());
  if (T < 2) {
    fail(ErrorClass::domain_error,
         "nll: need at least 2 tokens, got " + std::to_string(T));
  }
  const int64_t n_p = prompt ? prompt->length() : 0;
  Tensor logits = forward(tokens, prompt);
  Tensor scored = slice_axis(logits, 0, n_p, T - 1);
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  std::vector<double> weights(static_cast<size_t>(T - 1), 1.0);
  Tensor loss = cross_entropy_logits(scored, targets, weights);
  if (reduction == Reduction::mean) {
    loss = mul(loss, Tensor::scalar(1.0 / static_cast<double>(T - 1)));
  }
  return loss;
}

Tensor TransformerLM::prompted_nll(std::span<const int> text_tokens, const SoftPrompt& prompt,
                                   Reduction reduction) const {
  const int64_t n_p = prompt.length();
  if (n_p < 1) {
    fail(ErrorClass::domain_error, "prompted_nll: needs a non-empty soft prompt");
  }
  const int64_t T = static_cast<int64_t>(text_tokens.size());
  if (T < 1) fail(ErrorClass::domain_error, "prompted_nll: empty text");
  Tensor logits = forward(text_tokens, &prompt);
  // Row n_p - 1 (the prompt's last position) predicts text token 0.
  Tensor scored = slice_axis(logits, 0, n_p - 1, T);
  std::vector<int> targets(text_tokens.begin(), text_tokens.end());
  std::vector<double> weights(static_cast<size_t>(T), 1.0);
  Tensor loss = cross_entropy_logits(scored, targets, weights);
  if (reduction == Reduction::mean) {
    loss = mul(loss, Tensor::scalar(1.0 / static_cast<double>(T)));
  }
  return loss;
}

double TransformerLM::sequence_nll_tokens(std::span<const int> text_tokens,
                                          const SoftPrompt* prompt, Reduction reduction) const {
  std::vector<int> tokens;
  tokens.reserve(text_tokens.size() + 1);
  tokens.push_back(Vocabulary::kBos);
  tokens.insert(tokens.end(), text_tokens.begin(), text_tokens.end());
  return nll(tokens, prompt, reduction).item();
}

double TransformerLM::sequence_nll(std::string_view text, const SoftPrompt* prompt,
                                   Reduction reduction) const {
  const std::vector<int> ids = tokenize(text);
  return sequence_nll_tokens(ids, prompt, reduction);
}

LogProbTrace TransformerLM::trace_tokens(std::span<const int> text_tokens,
                                         const SoftPrompt* prompt) const {
  if (text_tokens.empty()) fail(ErrorClass::domain_error, "trace: empty text");
  std::vector<int> tokens;
  tokens.reserve(text_tokens.size() + 1);
  tokens.push_back(Vocabulary::kBos);
  tokens.insert(tokens.end(), text_tokens.begin(), text_tokens.end());

  const int64_t n_p = prompt ? prompt->length() : 0;
  Tensor logits = forward(tokens, prompt);
  const int64_t V = Vocabulary::kSize;
  const auto& lv = logits.values();

  LogProbTrace tr;
  const size_t n = text_tokens.size();
  tr.target_logprob.resize(n);
  tr.mu.resize(n);
  tr.sigma.resize(n);
  std::vector<double> e(static_cast<size_t>(V));
  std::vector<double> u(static_cast<size_t>(V));
  // Row n_p + i holds the distribution that predicts text token i.
  for (size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + (n_p + static_cast<int64_t>(i)) * V;
    double m = row[0];
    for (int64_t j = 1; j < V; ++j) m = std::max(m, row[j]);
    double z = 0.0, zu = 0.0;
    for (int64_t j = 0; j < V; ++j) {
      u[static_cast<size_t>(j)] = row[j] - m;
      e[static_cast<size_t>(j)] = std::exp(u[static_cast<size_t>(j)]);
      z += e[static_cast<size_t>(j)];
      zu += e[static_cast<size_t>(j)] * u[static_cast<size_t>(j)];
    }
    const double logz = std::log(z);
    const double mu = zu / z - logz;
    // Second pass keeps the degenerate (uniform) case exactly at zero.
    double var = 0.0;
    for (int64_t j = 0; j < V; ++j) {
      const double c = u[static_cast<size_t>(j)] - logz - mu;
      var += (e[static_cast<size_t>(j)] / z) * c * c;
    }
    tr.mu[i] = mu;
    tr.sigma[i] = std::sqrt(std::max(0.0, var));
    tr.target_logprob[i] = (row[text_tokens[i]] - m) - logz;
  }
  return tr;
}

LogProbTrace TransformerLM::trace(std::string_view text, const SoftPrompt* prompt) const {
  const std::vector<int> ids = tokenize(text);
  return trace_tokens(ids, prompt);
}

std::vector<double> TransformerLM::next_token_distribution(std::span<const int> tokens,
                                                           size_t position,
                                                           const SoftPrompt* prompt) const {
  Tensor logits = forward(tokens, prompt);
  const int64_t n_p = prompt ? prompt->length() : 0;
  if (position >= tokens.size()) {
    fail(ErrorClass::domain_error, "next_token_distribution: position out of range");
  }
  const int64_t V = Vocabulary::kSize;
  const double* row = logits.values().data() + (n_p + static_cast<int64_t>(position)) * V;
  double m = row[0];
  for (int64_t j = 1; j < V; ++j) m = std::max(m, row[j]);
  double z = 0.0;
  std::vector<double> p(static_cast<size_t>(V));
  for (int64_t j = 0; j < V; ++j) {
    p[static_cast<size_t>(j)] = std::exp(row[j] - m);
    z += p[static_cast<size_t>(j)];
  }
  for (auto& v : p) v /= z;
  return p;
}

// -------------------------------------------------------------- training

namespace {

struct PreparedDoc {
  std::vector<int> tokens;      // [prefix bytes] + [BOS] + text (+ PAD tail)
  std::vector<int> targets;     // tokens[1..]
  std::vector<double> weights;  // 1 only where the target is a text token
  int64_t scored = 0;
};

// Builds one training exposure. The plain form is [filler*offset, BOS, doc];
// the quoted form is [filler*offset, intro bytes, doc] with no BOS. Only doc
// tokens are scored in either form.
PreparedDoc prepare_doc(const std::vector<int>& ids, int64_t offset, Rng* prefix_rng,
                        const std::vector<int>* quote_intro) {
  PreparedDoc doc;
  for (int64_t i = 0; i < offset; ++i) {
    doc.tokens.push_back(prefix_rng ? static_cast<int>(32 + prefix_rng->below(95))
                                    : Vocabulary::kPad);
  }
  if (quote_intro) {
    doc.tokens.insert(doc.tokens.end(), quote_intro->begin(), quote_intro->end());
  } else {
    doc.tokens.push_back(Vocabulary::kBos);
  }
  const int64_t prefix_len = static_cast<int64_t>(doc.tokens.size());
  doc.tokens.insert(doc.tokens.end(), ids.begin(), ids.end());
  doc.targets.assign(doc.tokens.begin() + 1, doc.tokens.end());
  doc.weights.assign(doc.targets.size(), 0.0);
  for (size_t i = 0; i < doc.targets.size(); ++i) {
    // targets[i] == tokens[i+1]; doc tokens start at prefix_len.
    const bool is_text =
        static_cast<int64_t>(i) + 1 >= prefix_len && doc.targets[i] != Vocabulary::kPad;
    if (is_text) {
      doc.weights[i] = 1.0;
      ++doc.scored;
    }
  }
  if (doc.scored == 0) fail(ErrorClass::domain_error, "train_lm: empty document");
  return doc;
}

std::vector<int> doc_ids(const std::string& text, int64_t max_tokens) {
  std::vector<int> ids = tokenize(text);
  if (static_cast<int64_t>(ids.size()) > max_tokens) ids.resize(static_cast<size_t>(max_tokens));
  while (static_cast<int64_t>(ids.size()) < max_tokens) ids.push_back(Vocabulary::kPad);
  return ids;
}

double run_training(TransformerLM& model, const std::vector<std::string>& corpus,
                    const TrainConfig& cfg, TrainStats* stats) {
  if (corpus.empty()) fail(ErrorClass::domain_error, "train_lm: empty corpus");
  if (cfg.offset_min < 0 || cfg.offset_max < cfg.offset_min) {
    fail(ErrorClass::config_invalid, "train_lm: bad offset range");
  }
  if (cfg.offset_max + 1 + static_cast<int64_t>(cfg.quote_intro.size()) + cfg.max_tokens >
      model.config().context_length) {
    fail(ErrorClass::config_invalid,
         "train_lm: offset_max " + std::to_string(cfg.offset_max) +
             " + text does not fit context_length " +
             std::to_string(model.config().context_length));
  }
  if (cfg.quote_prob < 0.0 || cfg.quote_prob > 1.0) {
    fail(ErrorClass::config_invalid, "train_lm: quote_prob must be in [0, 1]");
  }
  if (cfg.plain_corruption < 0.0 || cfg.plain_corruption >= 1.0) {
    fail(ErrorClass::config_invalid, "train_lm: plain_corruption must be in [0, 1)");
  }
  const std::vector<int> quote_intro_ids = tokenize(cfg.quote_intro);
  // Standalone re-occurrences vary in fidelity per document: each doc keeps
  // one corruption severity across epochs (patterns still re-drawn), while
  // quoted reprints stay verbatim.
  std::vector<double> plain_rate(corpus.size(), 0.0);
  if (cfg.plain_corruption > 0.0) {
    Rng severity_rng(derive_seed(cfg.seed, "plain_severity"));
    for (auto& r : plain_rate) r = cfg.plain_corruption * severity_rng.uniform();
  }
  std::vector<std::vector<int>> ids;
  ids.reserve(corpus.size());
  for (const auto& text : corpus) ids.push_back(doc_ids(text, cfg.max_tokens));

  model.set_trainable(true);
  AdamW opt(model.parameters(),
            {.lr = cfg.lr, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8,
             .weight_decay = cfg.weight_decay});

  auto eval_mean_nll = [&]() {
    model.set_trainable(false);
    double total = 0.0;
    int64_t count = 0;
    for (const auto& doc_id : ids) {
      const PreparedDoc doc = prepare_doc(doc_id, 0, nullptr, nullptr);
      Tensor logits = model.forward(doc.tokens, nullptr);
      Tensor scored = ops::slice_axis(logits, 0, 0, static_cast<int64_t>(doc.targets.size()));
      total += ops::cross_entropy_logits(scored, doc.targets, doc.weights).item();
      count += doc.scored;
    }
    model.set_trainable(true);
    return total / static_cast<double>(count);
  };

  if (stats) stats->initial_mean_nll = eval_mean_nll();

  std::vector<size_t> order(ids.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double last_epoch_nll = stats ? stats->initial_mean_nll : 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng(derive_seed(cfg.seed, "train_shuffle", static_cast<uint64_t>(epoch)));
    epoch_rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t epoch_scored = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      Tape tape;
      Tensor batch_sum;
      int64_t batch_scored = 0;
      for (size_t bi = start; bi < end; ++bi) {
        const bool quoted = cfg.quote_prob > 0.0 && epoch_rng.uniform() < cfg.quote_prob;
        // Quoted reprints sit mid-stream behind filler; the plain form is
        // the BOS-anchored layout that scoring reads.
        const int64_t offset =
            quoted && cfg.offset_max > 0
                ? cfg.offset_min + static_cast<int64_t>(epoch_rng.below(
                                       static_cast<uint64_t>(cfg.offset_max - cfg.offset_min) + 1))
                : 0;
        std::vector<int> exposure = ids[order[bi]];
        if (!quoted && plain_rate[order[bi]] > 0.0) {
          for (auto& t : exposure) {
            if (t != Vocabulary::kPad && epoch_rng.uniform() < plain_rate[order[bi]]) {
              t = static_cast<int>(32 + epoch_rng.below(95));
            }
          }
        }
        const PreparedDoc doc =
            prepare_doc(exposure, offset, &epoch_rng, quoted ? &quote_intro_ids : nullptr);
        Tensor logits = model.forward(doc.tokens, nullptr);
        Tensor scored = ops::slice_axis(logits, 0, 0, static_cast<int64_t>(doc.targets.size()));
        Tensor ce = ops::cross_entropy_logits(scored, doc.targets, doc.weights);
        batch_sum = batch_sum.defined() ? ops::add(batch_sum, ce) : ce;
        batch_scored += doc.scored;
      }
      Tensor batch_loss =
          ops::mul(batch_sum, Tensor::scalar(1.0 / static_cast<double>(batch_scored)));
      const double loss_value = batch_loss.item();
      if (!std::isfinite(loss_value)) {
        fail(ErrorClass::domain_error,
             "train_lm: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                 std::to_string(start / static_cast<size_t>(cfg.batch_size)));
      }
      tape.backward(batch_loss);
      opt.step();
      epoch_loss += loss_value * static_cast<double>(batch_scored);
      epoch_scored += batch_scored;
    }
    last_epoch_nll = epoch_loss / static_cast<double>(epoch_scored);
    if (stats) stats->epoch_mean_nll.push_back(last_epoch_nll);
  }

  const double final_nll = eval_mean_nll();
  if (stats) stats->final_mean_nll = final_nll;
  model.set_trainable(false);
  return final_nll;
}

}  // namespace

TransformerLM train_lm(const std::vector<std::string>& corpus, const ModelConfig& model_config,
                       const TrainConfig& train_config, TrainStats* stats) {
  TransformerLM model(model_config);
  run_training(model, corpus, train_config, stats);
  return model;
}

void fine_tune_lm(TransformerLM& model, const std::vector<std::string>& corpus,
                  const TrainConfig& train_config, TrainStats* stats) {
  run_training(model, corpus, train_config, stats);
}

double corpus_mean_nll(const TransformerLM& model, const std::vector<std::string>& corpus) {
  if (corpus.empty()) fail(ErrorClass::domain_error, "corpus_mean_nll: empty corpus");
  double total = 0.0;
  for (const auto& text : corpus) total += model.sequence_nll(text);
  return total / static_cast<double>(corpus.size());
}

AnswerDistribution answer_distribution(const TransformerLM& model, const SoftPrompt* prompt,
                                       const ChatTemplate& tmpl, std::string_view text) {
  const RenderedQuery q = tmpl.render(text, std::nullopt);
  const std::vector<double> dist = model.next_token_distribution(q.tokens, q.answer_slot, prompt);
  AnswerDistribution out;
  out.p_yes = dist[Vocabulary::kYes];
  out.p_no = dist[Vocabulary::kNo];
  out.p_others = 1.0 - out.p_yes - out.p_no;
  return out;
}

}  // namespace mia
