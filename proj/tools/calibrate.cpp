// Fixture calibration harness: trains the standard fixture and reports every
// baseline and tuned-attack AUC plus timing. Not installed; development use.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>

#include "mia/baselines.hpp"
#include "mia/checkpoint.hpp"
#include "mia/datasets.hpp"
#include "mia/defense.hpp"
#include "mia/evaluation.hpp"
#include "mia/model.hpp"
#include "mia/rng.hpp"
#include "mia/tuner.hpp"

using namespace mia;

static double getenv_or(const char* name, double fallback) {
  const char* v = std::getenv(name);
  return v ? atof(v) : fallback;
}

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  const uint64_t seed = (uint64_t)getenv_or("SEED", 1001);
  SyntheticCorpusSpec spec{.seed = seed,
                           .docs_per_class = (int)getenv_or("DOCS", 512),
                           .doc_length = (int)getenv_or("LEN", 128),
                           .noise_rate = getenv_or("NOISE", 0.01)};
  auto split = generate_synthetic_corpus(spec);

  ModelConfig mc{.d_model = (int64_t)getenv_or("DM", 64),
                 .n_layers = (int64_t)getenv_or("NL", 2),
                 .n_heads = (int64_t)getenv_or("NH", 2),
                 .context_length = (int64_t)getenv_or("CTX", 256),
                 .seed = seed};
  TrainConfig tc{.epochs = (int)getenv_or("EPOCHS", 30),
                 .batch_size = 16,
                 .lr = getenv_or("LR", 1e-3),
                 .seed = seed,
                 .max_tokens = spec.doc_length,
                 .offset_min = (int64_t)getenv_or("OFFMIN", 0),
                 .offset_max = (int64_t)getenv_or("OFFMAX", 16),
                 .quote_prob = getenv_or("QUOTE", 0.5)};
  TrainStats ts;
  TransformerLM model = train_lm(split.member_texts(), mc, tc, &ts);
  std::printf("[%6.1fs] trained: nll %.3f -> %.3f\n", elapsed(), ts.initial_mean_nll,
              ts.final_mean_nll);

  ModelConfig half = mc;
  half.d_model = mc.d_model / 2;
  half.n_layers = std::max<int64_t>(1, mc.n_layers / 2);
  TransformerLM smaller = train_lm(split.member_texts(), half, tc);
  std::printf("[%6.1fs] smaller ref trained\n", elapsed());

  sample_tuning_set(split, (int)getenv_or("TUNE_N", 80), (int)getenv_or("TUNE_N", 80), seed);
  cap_eval_set(split, (int)getenv_or("EVAL_N", 128), seed);

  SuiteModels models;
  models.target = &model;
  models.smaller_ref = &smaller;
  MethodParams params;
  std::vector<std::string> methods = {"ppl", "min_k", "min_k_pp", "zlib",
                                      "lowercase", "neighbor", "smaller_ref"};
  AttackReport rep = run_attack_suite(models, split, methods, params, seed);
  for (const auto& [name, res] : rep.methods) {
    std::printf("  %-12s AUC %.4f\n", name.c_str(), res.auc);
  }
  std::printf("[%6.1fs] baselines done, failures: %zu\n", elapsed(), rep.failures.size());

  auto auc_of = [&](auto score){
    std::vector<double> s; std::vector<int> l;
    for (size_t i : split.eval_member_idx){ s.push_back(score(split.members[i].text)); l.push_back(1); }
    for (size_t i : split.eval_non_member_idx){ s.push_back(score(split.non_members[i].text)); l.push_back(0); }
    return compute_auc(s, l);
  };

  AttackConfig ac;
  ac.lr = getenv_or("TLR", 5e-4);
  ac.epochs = (int)getenv_or("TEPOCHS", 20);
  ac.seed = seed;
  ac.prompt_length = (int64_t)getenv_or("NP", 8);

  // init-only and filler-embedding prompts, to separate tuning effect from
  // prompt-presence effect
  SoftPrompt init = SoftPrompt::randn(ac.prompt_length, mc.d_model, derive_seed(seed, "prompt_init"));
  std::printf("[%6.1fs] init-prompt AUC %.4f\n", elapsed(),
              auc_of([&](const std::string& t){ return score_tuned_unaligned(model, init, t); }));
  {
    const auto& emb = model.parameters()[0];
    auto ids = tokenize("q WIRE: ");
    SoftPrompt filler = SoftPrompt::zeros((int64_t)ids.size(), mc.d_model);
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t j = 0; j < mc.d_model; ++j)
        filler.embeddings.values()[i*mc.d_model+j] = emb.values()[ids[i]*mc.d_model+j];
    std::printf("[%6.1fs] filler-prompt AUC %.4f\n", elapsed(),
                auc_of([&](const std::string& t){ return score_tuned_unaligned(model, filler, t); }));
  }

  TuneResult tuned = tune_soft_prompt(model, split, nullptr, ac);
  models.unaligned_prompt = &tuned.prompt;
  AttackReport rep2 = run_attack_suite(models, split, {"tuned_unaligned"}, params, seed);
  std::printf("[%6.1fs] tuned_unaligned AUC %.4f (loss %.4f -> %.4f)\n", elapsed(),
              rep2.methods["tuned_unaligned"].auc, tuned.epoch_losses.front(),
              tuned.epoch_losses.back());

  if (getenv_or("ALIGNED", 1) > 0) {
    ChatTemplate tmpl;
    TransformerLM aligned = model.clone();
    std::vector<std::string> warm = generate_heldout_docs(spec, (int)getenv_or("WARM_FRESH", 64), 2);
    Rng wr(derive_seed(seed, "warmup_members"));
    for (int i = 0; i < (int)getenv_or("WARM_MEM", 64); ++i)
      warm.push_back(split.members[wr.below(split.members.size())].text);
    wr.shuffle(warm);
    align_model_for_detection(aligned, warm, tmpl,
        {.epochs = (int)getenv_or("WARM_EPOCHS", 6), .batch_size = 16,
         .lr = getenv_or("WARM_LR", 1e-3), .seed = derive_seed(seed, "align_warmup")});
    auto d0 = answer_distribution(aligned, nullptr, tmpl, split.members[0].text);
    std::printf("[%6.1fs] aligned warmup done, P(yes)+P(no)=%.3f\n", elapsed(), d0.p_yes + d0.p_no);

    AttackConfig aa = ac;
    aa.mode = AttackMode::aligned;
    TuneResult atuned = tune_soft_prompt(aligned, split, &tmpl, aa);
    const double aauc = auc_of([&](const std::string& t){
      return score_tuned_aligned(aligned, atuned.prompt, tmpl, t); });
    std::printf("[%6.1fs] tuned_aligned AUC %.4f (loss %.4f -> %.4f)\n", elapsed(), aauc,
                atuned.epoch_losses.front(), atuned.epoch_losses.back());

    if (getenv_or("DEFENSE", 1) > 0) {
      DefenseConfig d11;
      d11.mode = DefenseMode::aligned_defense;
      d11.epochs = (int)getenv_or("DEF_EPOCHS", 20);
      d11.lr = getenv_or("DEF_LR", 5e-4);
      d11.seed = derive_seed(seed, "def11");
      auto heldout = generate_heldout_docs(spec, 64, 1);
      DefenseResult r11 = apply_defense(aligned, split, heldout, tmpl, d11);
      const double after = auc_of([&](const std::string& t){
        return score_tuned_aligned(r11.model, atuned.prompt, tmpl, t); });
      std::printf("[%6.1fs] eq11 defense: aligned attack %.4f -> %.4f (utility +%.1f%%)\n",
                  elapsed(), aauc, after, 100*r11.utility.relative_increase);
    }
  }

  if (getenv_or("DEFENSE", 1) > 0) {
    DefenseConfig d10;
    d10.epochs = (int)getenv_or("DEF_EPOCHS", 20);
    d10.lr = getenv_or("DEF_LR", 5e-4);
    d10.seed = derive_seed(seed, "def10");
    ChatTemplate tmpl;
    auto heldout = generate_heldout_docs(spec, 64, 1);
    DefenseResult r10 = apply_defense(model, split, heldout, tmpl, d10);
    const double ppl_after = auc_of([&](const std::string& t){
      return score_ppl(r10.model.trace(t)); });
    std::printf("[%6.1fs] eq10 defense: ppl %.4f -> %.4f (utility +%.1f%%)\n", elapsed(),
                rep.methods["ppl"].auc, ppl_after, 100*r10.utility.relative_increase);
  }
  return 0;
}
