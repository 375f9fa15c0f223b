// Acceptance suite: runs every acceptance criterion against the standard
// fixture (byte-level LM, d_model 64, 2 layers, 512 member docs of 128
// tokens, 30 training epochs, 128+128 eval samples, seeded) and prints one
// pass/fail line per criterion. Exit code is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fd_check.hpp"
#include "mia/baselines.hpp"
#include "mia/checkpoint.hpp"
#include "mia/common.hpp"
#include "mia/config.hpp"
#include "mia/defense.hpp"
#include "mia/evaluation.hpp"
#include "mia/pipeline.hpp"
#include "mia/rng.hpp"
#include "mia/tuner.hpp"

using namespace mia;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double now_seconds() {
  static const auto start = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

double check_grad(std::vector<Tensor> params, const std::function<Tensor()>& loss_fn) {
  for (auto& p : params) p.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(loss_fn());
  }
  auto rep = mia::testing::fd_compare(params, [&]() { return loss_fn().item(); });
  for (auto& p : params) p.set_requires_grad(false);
  return rep.max_rel_err;
}

// ---------------------------------------------------------------- fixture

struct Fixture {
  RunConfig cfg;
  BenchmarkSplit split;
  TransformerLM model;
  TransformerLM smaller;
  TransformerLM aligned;
  ChatTemplate tmpl;
  nlohmann::json report_json;
  double ppl_auc = 0.0;
  double train_plus_baselines_seconds = 0.0;
};

Fixture build_fixture(const std::string& dir) {
  Fixture f;
  f.cfg = RunConfig{};
  f.cfg.out_dir = dir;
  fs::remove_all(dir);
  fs::create_directories(dir);

  const double t0 = now_seconds();
  pipeline::stage_gen_data(f.cfg);
  pipeline::stage_train_lm(f.cfg);
  const double t_train = now_seconds() - t0;

  RunConfig tune_cfg = f.cfg;
  tune_cfg.attack.mode = AttackMode::unaligned;
  pipeline::stage_tune_attack(tune_cfg);
  tune_cfg.attack.mode = AttackMode::aligned;
  pipeline::stage_tune_attack(tune_cfg);

  RunConfig eval_cfg = f.cfg;
  eval_cfg.evaluation.methods.push_back("tuned_aligned");
  const double t1 = now_seconds();
  f.report_json = pipeline::stage_evaluate(eval_cfg);
  const double t_eval = now_seconds() - t1;
  f.train_plus_baselines_seconds = t_train + t_eval;

  f.split = pipeline::prepare_split(f.cfg);
  pipeline::Paths paths{f.cfg.out_dir};
  f.model = load_checkpoint(paths.model());
  f.smaller = load_checkpoint(paths.smaller_ref());
  f.aligned = load_checkpoint(paths.aligned_model());
  f.tmpl = f.cfg.make_template();
  f.ppl_auc = f.report_json["methods"]["ppl"]["auc"].get<double>();
  return f;
}

double auc_of_scores(const BenchmarkSplit& split,
                     const std::function<double(const std::string&)>& score) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (size_t i : split.eval_member_idx) {
    scores.push_back(score(split.members[i].text));
    labels.push_back(1);
  }
  for (size_t i : split.eval_non_member_idx) {
    scores.push_back(score(split.non_members[i].text));
    labels.push_back(0);
  }
  return compute_auc(scores, labels);
}

// ------------------------------------------------------------- criteria

void criterion1_gradients(const Fixture& f) {
  const double t0 = now_seconds();
  double worst = 0.0;
  Rng rng(101);

  // tensor primitives through a composite scalar
  {
    Tensor a = random_tensor({4, 6}, rng), b = random_tensor({6, 5}, rng);
    Tensor bias = random_tensor({5}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    worst = std::max(worst, check_grad({a, b, bias, w}, [&]() {
      Tensor h = ops::add(ops::matmul(a, b), bias);
      Tensor s = ops::mul(ops::softmax_lastdim(h), w);
      return ops::mean(ops::mul(ops::layer_norm_lastdim(ops::gelu(s)), w));
    }));
    Tensor sc = random_tensor({5, 5}, rng);
    Tensor sw = random_tensor({5, 5}, rng);
    worst = std::max(worst, check_grad({sc}, [&]() {
      return ops::mean(ops::mul(ops::softmax_causal(sc), sw));
    }));
    Tensor logits = random_tensor({6, 17}, rng);
    const std::vector<int> targets = {1, 5, 16, 0, 8, 3};
    const std::vector<double> weights = {1, 0.01, 1, 0, 0.01, 1};
    worst = std::max(worst, check_grad({logits}, [&]() {
      return ops::cross_entropy_logits(logits, targets, weights);
    }));
  }

  // hybrid loss w.r.t. the soft prompt, against the real fixture model
  AttackConfig ac;
  SoftPrompt prompt = SoftPrompt::randn(2, f.model.config().d_model, 11);
  const std::string text = f.split.members[0].text.substr(0, 48);
  worst = std::max(worst, check_grad({prompt.embeddings}, [&]() {
    return hybrid_loss(f.model, &prompt, f.tmpl, text, true, ac).total;
  }));

  // contrastive loss through both exponentials, both distance modes
  for (auto mode : {DistanceMode::absolute, DistanceMode::paper}) {
    ContrastiveBatch batch;
    for (int i = 0; i < 3; ++i) {
      batch.member_losses.push_back(Tensor::scalar(rng.uniform(0.5, 4.0)));
      batch.non_member_losses.push_back(Tensor::scalar(rng.uniform(0.5, 4.0)));
    }
    std::vector<Tensor> scalars;
    for (auto& t : batch.member_losses) scalars.push_back(t);
    for (auto& t : batch.non_member_losses) scalars.push_back(t);
    worst = std::max(worst, check_grad(scalars, [&]() {
      return contrastive_loss(batch, 10.0, mode);
    }));
  }

  // valid-answer suppression loss through the softmax
  {
    TransformerLM model = f.model.clone();
    auto params = model.last_block_parameters();
    Tensor bias = params[params.size() - 2];  // final norm bias
    worst = std::max(worst, check_grad({bias}, [&]() {
      return defense_loss_aligned(model, f.tmpl, text);
    }));
  }

  const double elapsed = now_seconds() - t0;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "finite-difference checks: max rel err %.2e (< 1e-4), %.1f s (< 60 s)", worst,
                elapsed);
  report(1, worst < 1e-4 && elapsed < 60.0, buf);
}

void criterion2_closed_forms(const Fixture& f) {
  bool pass = true;
  std::string detail = "closed-form identities:";

  for (size_t n : {2, 4, 8}) {
    for (auto mode : {DistanceMode::absolute, DistanceMode::paper}) {
      ContrastiveBatch b;
      for (size_t i = 0; i < n; ++i) {
        b.member_losses.push_back(Tensor::scalar(1.3));
        b.non_member_losses.push_back(Tensor::scalar(1.3));
      }
      const double v = contrastive_loss(b, 10.0, mode).item();
      if (std::fabs(v - contrastive_equal_loss_value(n)) > 1e-9) pass = false;
      ContrastiveBatch b2;
      for (size_t i = 0; i < n; ++i) {
        b2.member_losses.push_back(Tensor::scalar(0.8));
        b2.non_member_losses.push_back(Tensor::scalar(0.8));
      }
      if (defense_loss_unaligned(b2, 10.0, mode).item() > 1e-9) pass = false;
    }
  }
  detail += " equal-loss batches ok;";

  // L_rb -> 0 as P(YES)+P(NO) -> 1: answer row with all other logits deeply
  // suppressed, same LSE path the hybrid loss uses.
  {
    Tensor row = Tensor::full({1, Vocabulary::kSize}, -40.0);
    row.values()[Vocabulary::kYes] = 2.0;
    row.values()[Vocabulary::kNo] = 1.0;
    const std::vector<int> yn = {Vocabulary::kYes, Vocabulary::kNo};
    Tensor l_rb = ops::sub(ops::logsumexp_lastdim(row),
                           ops::logsumexp_lastdim(ops::select_lastdim(row, yn)));
    if (std::fabs(l_rb.item()) > 1e-9) pass = false;
    detail += " L_rb(PY+PN=1)=0 ok;";
  }

  {
    Rng rng(55);
    bool mink_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
      LogProbTrace tr;
      const size_t n = 1 + rng.below(200);
      for (size_t i = 0; i < n; ++i) tr.target_logprob.push_back(-rng.uniform(0, 9));
      tr.mu.assign(n, 0.0);
      tr.sigma.assign(n, 0.0);
      if (std::fabs(score_min_k(tr, 100.0) - score_ppl(tr)) > 1e-12) mink_ok = false;
    }
    if (!mink_ok) pass = false;
    detail += " min-k(100)==ppl ok";
  }
  (void)f;
  report(2, pass, detail);
}

void criterion3_auc_oracle() {
  Rng rng(314);
  bool pass = true;
  for (int trial = 0; trial < 100; ++trial) {
    const size_t n = 2 + rng.below(199);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    size_t members = 0;
    for (size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng.below(10)) / 3.0;  // ties injected
      labels[i] = static_cast<int>(rng.below(2));
      members += static_cast<size_t>(labels[i]);
    }
    if (members == 0) labels[0] = 1;
    if (members == n) labels[0] = 0;

    int64_t units = 0, pairs = 0;
    for (size_t i = 0; i < n; ++i) {
      if (labels[i] != 1) continue;
      for (size_t j = 0; j < n; ++j) {
        if (labels[j] != 0) continue;
        ++pairs;
        if (scores[i] > scores[j]) units += 2;
        else if (scores[i] == scores[j]) units += 1;
      }
    }
    const double oracle = static_cast<double>(units) / (2.0 * static_cast<double>(pairs));
    if (compute_auc(scores, labels) != oracle) {
      pass = false;
      break;
    }
  }
  report(3, pass, "compute_auc equals the brute-force pairwise oracle exactly on 100 instances");
}

void criterion4_baselines(const Fixture& f) {
  const auto& methods = f.report_json["methods"];
  bool pass = true;
  std::string detail = "baseline AUCs:";
  const std::vector<std::string> baselines = {"ppl",      "min_k",    "min_k_pp", "zlib",
                                              "lowercase", "neighbor", "smaller_ref"};
  for (const auto& name : baselines) {
    const double auc = methods[name]["auc"].get<double>();
    char buf[48];
    std::snprintf(buf, sizeof(buf), " %s=%.3f", name.c_str(), auc);
    detail += buf;
    if (auc < 0.55) pass = false;
  }
  if (f.ppl_auc < 0.65) pass = false;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "; train+score %.0f s (< 600)",
                f.train_plus_baselines_seconds);
  detail += buf;
  if (f.train_plus_baselines_seconds >= 600.0) pass = false;
  report(4, pass, detail);
}

void criterion5_core_claim(const Fixture& f) {
  const auto& methods = f.report_json["methods"];
  const double tuned_unaligned = methods["tuned_unaligned"]["auc"].get<double>();
  const double tuned_aligned = methods["tuned_aligned"]["auc"].get<double>();
  const bool unaligned_ok =
      tuned_unaligned >= f.ppl_auc + 0.10 && tuned_unaligned >= 0.85;
  const bool aligned_ok = tuned_aligned >= 0.85;

  char buf[220];
  std::snprintf(buf, sizeof(buf),
                "core claim: tuned_unaligned=%.3f (need >= max(ppl+0.10=%.3f, 0.85)), "
                "tuned_aligned=%.3f (need >= 0.85)",
                tuned_unaligned, f.ppl_auc + 0.10, tuned_aligned);
  report(5, unaligned_ok && aligned_ok, buf);

  // Two additional tuning seeds, reported without gating.
  for (uint64_t extra = 1; extra <= 2; ++extra) {
    AttackConfig ac = f.cfg.attack;
    ac.mode = AttackMode::unaligned;
    ac.seed = derive_seed(f.cfg.seed, "extra_seed", extra);
    TuneResult tuned = tune_soft_prompt(f.model, f.split, nullptr, ac);
    const double auc = auc_of_scores(f.split, [&](const std::string& t) {
      return score_tuned_unaligned(f.model, tuned.prompt, t);
    });
    std::printf("  (info) criterion 5 extra seed %llu: tuned_unaligned=%.3f\n",
                static_cast<unsigned long long>(extra), auc);
  }
}

void criterion6_few_shot(const Fixture& f) {
  BenchmarkSplit split = pipeline::prepare_split(f.cfg, /*with_tuning_sample=*/false);
  sample_tuning_set(split, 30, 30, derive_seed(f.cfg.seed, "few_shot"));
  cap_eval_set(split, f.cfg.dataset.eval_per_class, derive_seed(f.cfg.seed, "eval_cap"));

  AttackConfig ac = f.cfg.attack;
  ac.mode = AttackMode::unaligned;
  ac.seed = derive_seed(f.cfg.seed, "few_shot_tune");
  TuneResult tuned = tune_soft_prompt(f.model, split, nullptr, ac);

  const double tuned_auc = auc_of_scores(split, [&](const std::string& t) {
    return score_tuned_unaligned(f.model, tuned.prompt, t);
  });
  const double untuned_auc = auc_of_scores(split, [&](const std::string& t) {
    return score_ppl(f.model.trace(t));
  });
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "few-shot (60 samples): tuned=%.3f (need >= 0.80), untuned=%.3f (tuned >= "
                "untuned)",
                tuned_auc, untuned_auc);
  report(6, tuned_auc >= 0.80 && tuned_auc >= untuned_auc, buf);
}

void criterion7_defenses(const Fixture& f) {
  // Eq. (10) direction: metric-equalizing defense on the raw model.
  DefenseConfig def = f.cfg.defense;
  def.mode = DefenseMode::unaligned_defense;
  def.seed = derive_seed(f.cfg.seed, "defense_eq10");
  DefenseResult defended =
      apply_defense(f.model, f.split, pipeline::load_heldout(f.cfg), f.tmpl, def);
  const double ppl_after = auc_of_scores(f.split, [&](const std::string& t) {
    return score_ppl(defended.model.trace(t));
  });
  const bool eq10_ok = (f.ppl_auc - ppl_after >= 0.05) && ppl_after >= 0.5 &&
                       defended.utility.relative_increase <= 0.15;

  // Eq. (11) direction: suppress valid answers against the tuned aligned
  // attack.
  pipeline::Paths paths{f.cfg.out_dir};
  PromptArtifact aligned_prompt = load_prompt(paths.prompt("aligned"));
  const double aligned_before = auc_of_scores(f.split, [&](const std::string& t) {
    return score_tuned_aligned(f.aligned, aligned_prompt.prompt, f.tmpl, t);
  });
  DefenseConfig def11 = f.cfg.defense;
  def11.mode = DefenseMode::aligned_defense;
  def11.seed = derive_seed(f.cfg.seed, "defense_eq11");
  DefenseResult defended11 =
      apply_defense(f.aligned, f.split, pipeline::load_heldout(f.cfg), f.tmpl, def11);
  const double aligned_after = auc_of_scores(f.split, [&](const std::string& t) {
    return score_tuned_aligned(defended11.model, aligned_prompt.prompt, f.tmpl, t);
  });
  double mass_before = 0.0, mass_after = 0.0;
  for (size_t k = 0; k < 16 && k < f.split.eval_member_idx.size(); ++k) {
    const auto& text = f.split.members[f.split.eval_member_idx[k]].text;
    auto d0 = answer_distribution(f.aligned, nullptr, f.tmpl, text);
    auto d1 = answer_distribution(defended11.model, nullptr, f.tmpl, text);
    mass_before += d0.p_yes + d0.p_no;
    mass_after += d1.p_yes + d1.p_no;
  }
  const bool eq11_ok = (aligned_before - aligned_after >= 0.10) && mass_after < mass_before;

  char buf[260];
  std::snprintf(buf, sizeof(buf),
                "defenses: eq10 ppl %.3f->%.3f (drop >= 0.05 toward 0.5), utility +%.1f%% "
                "(<= 15%%); eq11 aligned attack %.3f->%.3f (drop >= 0.10), answer mass "
                "%.3f->%.3f",
                f.ppl_auc, ppl_after, 100.0 * defended.utility.relative_increase,
                aligned_before, aligned_after, mass_before / 16.0, mass_after / 16.0);
  report(7, eq10_ok && eq11_ok, buf);
}

void criterion8_text_length(const Fixture& f) {
  pipeline::stage_sweep(f.cfg, "text_length");
  const std::string csv = read_file(pipeline::Paths{f.cfg.out_dir}.sweep_csv("text_length"));

  // parse rows: sweep_kind,setting,method,auc,n_eval,seed
  double auc32 = -1.0, auc256 = -1.0;
  std::map<std::string, int> rows_per_method;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string col;
    while (std::getline(ls, col, ',')) cols.push_back(col);
    if (cols.size() != 6) continue;
    rows_per_method[cols[2]] += 1;
    if (cols[2] == "ppl" && cols[1] == "32") auc32 = atof(cols[3].c_str());
    if (cols[2] == "ppl" && cols[1] == "256") auc256 = atof(cols[3].c_str());
  }
  bool shape_ok = !rows_per_method.empty();
  for (const auto& [method, count] : rows_per_method) {
    if (count != 4) shape_ok = false;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "text-length sweep: 4 rows per method %s; ppl auc len32=%.3f <= len256=%.3f",
                shape_ok ? "ok" : "BROKEN", auc32, auc256);
  report(8, shape_ok && auc32 >= 0.0 && auc256 >= auc32, buf);
}

void criterion9_determinism(const Fixture& f) {
  RunConfig second = f.cfg;
  second.out_dir = f.cfg.out_dir + "_repeat";
  fs::remove_all(second.out_dir);
  fs::create_directories(second.out_dir);
  pipeline::stage_gen_data(second);
  pipeline::stage_train_lm(second);
  RunConfig tune_cfg = second;
  tune_cfg.attack.mode = AttackMode::unaligned;
  pipeline::stage_tune_attack(tune_cfg);
  nlohmann::json rep2 = pipeline::stage_evaluate(second);

  pipeline::Paths p1{f.cfg.out_dir}, p2{second.out_dir};
  const bool model_same = fnv1a64_file(p1.model()) == fnv1a64_file(p2.model());
  const bool ref_same = fnv1a64_file(p1.smaller_ref()) == fnv1a64_file(p2.smaller_ref());
  bool aucs_same = true;
  for (auto it = rep2["methods"].begin(); it != rep2["methods"].end(); ++it) {
    const double a = f.report_json["methods"][it.key()]["auc"].get<double>();
    const double b = it.value()["auc"].get<double>();
    if (a != b) aucs_same = false;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "determinism: checkpoint hashes %s, report AUCs byte-identical %s",
                model_same && ref_same ? "equal" : "DIFFER", aucs_same ? "yes" : "NO");
  report(9, model_same && ref_same && aucs_same, buf);
}

}  // namespace

int main() {
  std::printf("acceptance suite: building the standard fixture...\n");
  Fixture f = build_fixture("/tmp/mia_acceptance/run");
  std::printf("fixture ready after %.0f s\n", now_seconds());

  criterion1_gradients(f);
  criterion2_closed_forms(f);
  criterion3_auc_oracle();
  criterion4_baselines(f);
  criterion5_core_claim(f);
  criterion6_few_shot(f);
  criterion7_defenses(f);
  criterion8_text_length(f);
  criterion9_determinism(f);

  std::printf("acceptance finished in %.0f s with %d failing criteria\n", now_seconds(),
              g_failures);
  return g_failures;
}
