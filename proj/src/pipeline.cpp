#include "mia/pipeline.hpp"

#include <chrono>
#include <filesystem>
#include <sstream>

#include "mia/baselines.hpp"
#include "mia/checkpoint.hpp"
#include "mia/common.hpp"
#include "mia/rng.hpp"

namespace mia {
namespace pipeline {

using nlohmann::json;

namespace {

Paths paths_for(const RunConfig& cfg) { return Paths{cfg.out_dir}; }

void require_artifact(const std::string& path, const std::string& what) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorClass::missing_artifact, what + " not found: " + path + " (run the producing "
                                       "subcommand first)");
  }
}

uint64_t stage_seed(const RunConfig& cfg, const std::string& stage) {
  return derive_seed(cfg.seed, "stage:" + stage);
}

/// Warmup corpus for the aligned target: fresh generator draws mixed with a
/// slice of the member corpus (provider instruction data overlaps
/// pre-training data), shuffled; labels are assigned balanced inside
/// align_model_for_detection.
std::vector<std::string> warmup_texts(const RunConfig& cfg, const BenchmarkSplit& split) {
  const int total = cfg.model.aligned.warmup_samples;
  const int members = static_cast<int>(total * cfg.model.aligned.member_fraction);
  std::vector<std::string> texts =
      generate_heldout_docs(cfg.synthetic_spec(), total - members, /*stream_offset=*/2);
  Rng rng(derive_seed(cfg.seed, "warmup_members"));
  for (int i = 0; i < members; ++i) {
    texts.push_back(split.members[rng.below(split.members.size())].text);
  }
  rng.shuffle(texts);
  return texts;
}

TransformerLM make_aligned_model(const RunConfig& cfg, const TransformerLM& base,
                                 const BenchmarkSplit& split) {
  TransformerLM aligned = base.clone();
  const ChatTemplate tmpl = cfg.make_template();
  align_model_for_detection(aligned, warmup_texts(cfg, split), tmpl,
                            {.epochs = cfg.model.aligned.warmup_epochs,
                             .batch_size = cfg.model.train_batch,
                             .lr = cfg.model.aligned.warmup_lr,
                             .seed = derive_seed(cfg.seed, "align_warmup")});
  return aligned;
}

}  // namespace

void write_stage_config(const RunConfig& cfg, const std::string& stage) {
  write_file_atomic(paths_for(cfg).stage_config(stage), cfg.to_json().dump(2) + "\n");
}

BenchmarkSplit prepare_split(const RunConfig& cfg, bool with_tuning_sample) {
  const Paths paths = paths_for(cfg);
  std::string dataset_path = paths.dataset();
  if (cfg.dataset.kind == "jsonl") {
    dataset_path = cfg.dataset.jsonl_path;
    if (dataset_path.empty()) {
      fail(ErrorClass::config_invalid, "dataset.kind=jsonl requires dataset.jsonl_path");
    }
  }
  require_artifact(dataset_path, "dataset");
  BenchmarkSplit split;
  for (auto& rec : load_jsonl(dataset_path)) {
    (rec.label == 1 ? split.members : split.non_members).push_back(std::move(rec));
  }
  if (split.members.empty() || split.non_members.empty()) {
    fail(ErrorClass::domain_error, "dataset must contain both classes: " + dataset_path);
  }
  split.eval_member_idx.resize(split.members.size());
  for (size_t i = 0; i < split.members.size(); ++i) split.eval_member_idx[i] = i;
  split.eval_non_member_idx.resize(split.non_members.size());
  for (size_t i = 0; i < split.non_members.size(); ++i) split.eval_non_member_idx[i] = i;

  if (with_tuning_sample) {
    sample_tuning_set(split, cfg.dataset.tuning_members, cfg.dataset.tuning_non_members,
                      derive_seed(cfg.seed, "tuning_sample"));
    cap_eval_set(split, cfg.dataset.eval_per_class, derive_seed(cfg.seed, "eval_cap"));
  }
  return split;
}

std::vector<std::string> load_heldout(const RunConfig& cfg) {
  const Paths paths = paths_for(cfg);
  require_artifact(paths.heldout(), "held-out corpus");
  std::vector<std::string> texts;
  for (auto& rec : load_jsonl(paths.heldout(), /*require_label=*/false)) {
    texts.push_back(std::move(rec.text));
  }
  return texts;
}

void stage_gen_data(const RunConfig& cfg) {
  if (cfg.dataset.kind != "synthetic") {
    fail(ErrorClass::config_invalid, "gen-data only applies to dataset.kind=synthetic");
  }
  const Paths paths = paths_for(cfg);
  BenchmarkSplit split = generate_synthetic_corpus(cfg.synthetic_spec());
  std::vector<TextRecord> records;
  records.reserve(split.members.size() + split.non_members.size());
  for (auto& r : split.members) records.push_back(std::move(r));
  for (auto& r : split.non_members) records.push_back(std::move(r));
  save_jsonl(records, paths.dataset());

  std::vector<TextRecord> heldout;
  for (auto& text : generate_heldout_docs(cfg.synthetic_spec(), cfg.dataset.heldout_docs)) {
    heldout.push_back(TextRecord{std::move(text), 0, std::nullopt, ""});
  }
  save_jsonl(heldout, paths.heldout());
  write_stage_config(cfg, "gen_data");
}

void stage_train_lm(const RunConfig& cfg) {
  const Paths paths = paths_for(cfg);
  BenchmarkSplit split = prepare_split(cfg, /*with_tuning_sample=*/false);

  TrainStats stats;
  TransformerLM model = train_lm(split.member_texts(), cfg.model_config(), cfg.train_config(),
                                 &stats);
  save_checkpoint(model, paths.model());

  json stats_json;
  stats_json["initial_mean_nll"] = stats.initial_mean_nll;
  stats_json["final_mean_nll"] = stats.final_mean_nll;
  stats_json["epoch_mean_nll"] = stats.epoch_mean_nll;

  if (cfg.model.train_smaller_ref) {
    ModelConfig half = cfg.model_config();
    half.d_model = std::max<int64_t>(cfg.model.n_heads, cfg.model.d_model / 2);
    half.n_layers = std::max<int64_t>(1, cfg.model.n_layers / 2);
    TransformerLM smaller = train_lm(split.member_texts(), half, cfg.train_config());
    save_checkpoint(smaller, paths.smaller_ref());
  }

  if (cfg.model.aligned.enabled) {
    TransformerLM aligned = make_aligned_model(cfg, model, split);
    save_checkpoint(aligned, paths.aligned_model());
  }

  write_file_atomic(cfg.out_dir + "/train_stats.json", stats_json.dump(2) + "\n");
  write_stage_config(cfg, "train_lm");
}

void stage_tune_attack(const RunConfig& cfg) {
  const Paths paths = paths_for(cfg);
  BenchmarkSplit split = prepare_split(cfg);

  const bool aligned = cfg.attack.mode == AttackMode::aligned;
  const std::string model_path = aligned ? paths.aligned_model() : paths.model();
  require_artifact(model_path, aligned ? "aligned model checkpoint" : "model checkpoint");
  TransformerLM model = load_checkpoint(model_path);

  AttackConfig attack = cfg.attack;
  attack.seed = derive_seed(cfg.seed, "tune_attack");
  const ChatTemplate tmpl = cfg.make_template();
  TuneResult result = tune_soft_prompt(model, split, aligned ? &tmpl : nullptr, attack);

  PromptArtifact artifact;
  artifact.prompt = std::move(result.prompt);
  artifact.mode = to_string(cfg.attack.mode);
  artifact.seed = attack.seed;
  artifact.config_hash = fnv1a64(cfg.to_json().dump());
  artifact.d_model = cfg.model.d_model;
  save_prompt(artifact, paths.prompt(artifact.mode));

  json curve;
  curve["epoch_losses"] = result.epoch_losses;
  write_file_atomic(cfg.out_dir + "/tuning_curve_" + artifact.mode + ".json",
                    curve.dump(2) + "\n");
  write_stage_config(cfg, "tune_attack");
}

void stage_defend(const RunConfig& cfg) {
  const Paths paths = paths_for(cfg);
  BenchmarkSplit split = prepare_split(cfg);

  const bool aligned = cfg.defense.mode == DefenseMode::aligned_defense;
  const std::string model_path = aligned ? paths.aligned_model() : paths.model();
  require_artifact(model_path, aligned ? "aligned model checkpoint" : "model checkpoint");
  TransformerLM model = load_checkpoint(model_path);

  DefenseConfig defense = cfg.defense;
  defense.seed = derive_seed(cfg.seed, "defense");
  const ChatTemplate tmpl = cfg.make_template();
  DefenseResult result = apply_defense(model, split, load_heldout(cfg), tmpl, defense);

  const std::string mode = aligned ? "aligned_defense" : "unaligned_defense";
  save_checkpoint(result.model, paths.defended(mode));

  json utility;
  utility["heldout_nll_before"] = result.utility.heldout_nll_before;
  utility["heldout_nll_after"] = result.utility.heldout_nll_after;
  utility["relative_increase"] = result.utility.relative_increase;
  utility["bound"] = result.utility.bound;
  utility["flagged"] = result.utility.flagged;
  utility["epoch_losses"] = result.epoch_losses;
  write_file_atomic(paths.utility_report(), utility.dump(2) + "\n");
  write_stage_config(cfg, "defend");
}

nlohmann::json stage_evaluate(const RunConfig& cfg) {
  const auto wall_start = std::chrono::steady_clock::now();
  const Paths paths = paths_for(cfg);
  BenchmarkSplit split = prepare_split(cfg);

  require_artifact(paths.model(), "model checkpoint");
  TransformerLM model = load_checkpoint(paths.model());

  std::optional<TransformerLM> smaller;
  std::optional<TransformerLM> aligned_model;
  std::optional<PromptArtifact> unaligned_prompt;
  std::optional<PromptArtifact> aligned_prompt;

  SuiteModels models;
  models.target = &model;
  const ChatTemplate tmpl = cfg.make_template();
  models.chat = &tmpl;

  for (const auto& method : cfg.evaluation.methods) {
    if (method == method_names::kSmallerRef) {
      require_artifact(paths.smaller_ref(), "smaller-ref checkpoint");
      smaller.emplace(load_checkpoint(paths.smaller_ref()));
      models.smaller_ref = &*smaller;
    } else if (method == method_names::kTunedUnaligned) {
      require_artifact(paths.prompt("unaligned"), "tuned unaligned prompt");
      unaligned_prompt.emplace(load_prompt(paths.prompt("unaligned")));
      models.unaligned_prompt = &unaligned_prompt->prompt;
    } else if (method == method_names::kTunedAligned) {
      require_artifact(paths.prompt("aligned"), "tuned aligned prompt");
      require_artifact(paths.aligned_model(), "aligned model checkpoint");
      aligned_prompt.emplace(load_prompt(paths.prompt("aligned")));
      aligned_model.emplace(load_checkpoint(paths.aligned_model()));
      models.aligned_prompt = &aligned_prompt->prompt;
      models.aligned_target = &*aligned_model;
    }
  }

  AttackReport report = run_attack_suite(models, split, cfg.evaluation.methods,
                                         cfg.method_params(), derive_seed(cfg.seed, "evaluate"));
  report.metadata["config"] = cfg.to_json();
  report.metadata["checkpoints"] = {{"target", hex64(fnv1a64_file(paths.model()))}};
  if (smaller) {
    report.metadata["checkpoints"]["smaller_ref"] = hex64(fnv1a64_file(paths.smaller_ref()));
  }
  if (aligned_model) {
    report.metadata["checkpoints"]["aligned"] = hex64(fnv1a64_file(paths.aligned_model()));
  }
  report.metadata["timing"] = {
      {"wall_clock_s",
       std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count()}};

  json out = report.to_json();
  write_file_atomic(paths.report(), out.dump(2) + "\n");
  write_stage_config(cfg, "evaluate");
  return out;
}

namespace {

struct CsvRows {
  std::ostringstream csv;

  CsvRows() { csv << "sweep_kind,setting,method,auc,n_eval,seed\n"; }

  void add(const std::string& kind, const std::string& setting, const AttackReport& report,
           uint64_t seed) {
    for (const auto& [method, res] : report.methods) {
      csv << kind << "," << setting << "," << method << ",";
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.17g", res.auc);
      csv << buf << "," << res.n_eval << "," << seed << "\n";
    }
  }
};

// Truncates every record to the given byte length; records shorter than a
// couple of tokens cannot be scored and keep their full text.
BenchmarkSplit truncate_split(const BenchmarkSplit& split, int length) {
  BenchmarkSplit out = split;
  auto cut = [&](std::vector<TextRecord>& records) {
    for (auto& r : records) {
      if (static_cast<int>(r.text.size()) > length) r.text.resize(static_cast<size_t>(length));
    }
  };
  cut(out.members);
  cut(out.non_members);
  return out;
}

void sweep_few_shot(const RunConfig& cfg, CsvRows& rows) {
  const Paths paths = paths_for(cfg);
  require_artifact(paths.model(), "model checkpoint");
  TransformerLM model = load_checkpoint(paths.model());
  const std::vector<int>& grid = cfg.evaluation.sweeps.few_shot_grid;
  for (size_t gi = 0; gi < grid.size(); ++gi) {
    const uint64_t point_seed = derive_seed(cfg.seed, "sweep:few_shot", gi);
    const int per_class = grid[gi] / 2;
    BenchmarkSplit split = prepare_split(cfg, /*with_tuning_sample=*/false);
    sample_tuning_set(split, per_class, per_class, point_seed);
    cap_eval_set(split, cfg.dataset.eval_per_class, derive_seed(cfg.seed, "eval_cap"));

    AttackConfig attack = cfg.attack;
    attack.mode = AttackMode::unaligned;
    attack.seed = point_seed;
    TuneResult tuned = tune_soft_prompt(model, split, nullptr, attack);

    SuiteModels models;
    models.target = &model;
    models.unaligned_prompt = &tuned.prompt;
    AttackReport report = run_attack_suite(models, split, {"ppl", "tuned_unaligned"},
                                           cfg.method_params(), point_seed);
    rows.add("few_shot", std::to_string(grid[gi]), report, point_seed);
  }
}

void sweep_text_length(const RunConfig& cfg, CsvRows& rows) {
  const auto& sweeps = cfg.evaluation.sweeps;
  const std::vector<int>& grid = sweeps.text_length_grid;
  if (grid.empty()) fail(ErrorClass::config_invalid, "text_length sweep: empty grid");
  int max_len = 0;
  for (int v : grid) max_len = std::max(max_len, v);

  // The sweep needs texts as long as the largest grid point, so it builds
  // its own corpus and model at that pending-text length.
  RunConfig sweep_cfg = cfg;
  sweep_cfg.dataset.doc_length = max_len;
  sweep_cfg.dataset.docs_per_class = sweeps.text_length_docs;
  sweep_cfg.model.train_epochs = sweeps.text_length_epochs;
  sweep_cfg.model.context_length =
      std::max<int64_t>(cfg.model.context_length,
                        max_len + cfg.model.offset_max + cfg.attack.prompt_length + 2);
  const uint64_t sweep_seed = derive_seed(cfg.seed, "sweep:text_length");

  SyntheticCorpusSpec spec = sweep_cfg.synthetic_spec();
  BenchmarkSplit split = generate_synthetic_corpus(spec);
  TransformerLM model = train_lm(split.member_texts(), sweep_cfg.model_config(),
                                 sweep_cfg.train_config());
  sample_tuning_set(split, cfg.dataset.tuning_members, cfg.dataset.tuning_non_members,
                    sweep_seed);
  cap_eval_set(split, cfg.dataset.eval_per_class, sweep_seed);

  // One tuning pass at full length; scoring lengths reuse the prompt.
  AttackConfig attack = cfg.attack;
  attack.mode = AttackMode::unaligned;
  attack.seed = sweep_seed;
  TuneResult tuned = tune_soft_prompt(model, split, nullptr, attack);

  std::vector<std::string> methods = {"ppl", "min_k", "zlib", "tuned_unaligned"};
  for (size_t gi = 0; gi < grid.size(); ++gi) {
    BenchmarkSplit truncated = truncate_split(split, grid[gi]);
    SuiteModels models;
    models.target = &model;
    models.unaligned_prompt = &tuned.prompt;
    AttackReport report = run_attack_suite(models, truncated, methods, cfg.method_params(),
                                           derive_seed(cfg.seed, "sweep:text_length", gi));
    rows.add("text_length", std::to_string(grid[gi]), report, sweep_seed);
  }
}

void sweep_model_size(const RunConfig& cfg, CsvRows& rows) {
  BenchmarkSplit base_split = prepare_split(cfg, /*with_tuning_sample=*/false);
  const auto& grid = cfg.evaluation.sweeps.model_size_grid;
  for (size_t gi = 0; gi < grid.size(); ++gi) {
    // grid entries look like "64x2": d_model x n_layers
    const std::string& entry = grid[gi];
    const size_t x = entry.find('x');
    if (x == std::string::npos) {
      fail(ErrorClass::config_invalid, "model_size grid entry '" + entry + "' must be DxL");
    }
    const uint64_t point_seed = derive_seed(cfg.seed, "sweep:model_size", gi);
    RunConfig point_cfg = cfg;
    point_cfg.model.d_model = std::stoll(entry.substr(0, x));
    point_cfg.model.n_layers = std::stoll(entry.substr(x + 1));

    BenchmarkSplit split = base_split;
    TransformerLM model = train_lm(split.member_texts(), point_cfg.model_config(),
                                   point_cfg.train_config());
    sample_tuning_set(split, cfg.dataset.tuning_members, cfg.dataset.tuning_non_members,
                      point_seed);
    cap_eval_set(split, cfg.dataset.eval_per_class, point_seed);

    AttackConfig attack = cfg.attack;
    attack.mode = AttackMode::unaligned;
    attack.seed = point_seed;
    TuneResult tuned = tune_soft_prompt(model, split, nullptr, attack);

    SuiteModels models;
    models.target = &model;
    models.unaligned_prompt = &tuned.prompt;
    AttackReport report = run_attack_suite(models, split, {"ppl", "min_k", "tuned_unaligned"},
                                           cfg.method_params(), point_seed);
    rows.add("model_size", entry, report, point_seed);
  }
}

// Fine-tuning-API scenario: a benign user fine-tunes on their own corpus
// while a malicious user runs the prompt attack; the provider applies the
// defense after user fine-tuning. Reports the attack AUC per stage; the
// benign user's fine-tuning quality goes to the utility sidecar.
void sweep_defense_stages(const RunConfig& cfg, CsvRows& rows) {
  const Paths paths = paths_for(cfg);
  require_artifact(paths.model(), "model checkpoint");
  BenchmarkSplit split = prepare_split(cfg);
  const uint64_t sweep_seed = derive_seed(cfg.seed, "sweep:defense_stages");
  const ChatTemplate tmpl = cfg.make_template();

  const bool aligned = cfg.attack.mode == AttackMode::aligned;
  TransformerLM target = aligned
                             ? (require_artifact(paths.aligned_model(),
                                                 "aligned model checkpoint"),
                                load_checkpoint(paths.aligned_model()))
                             : load_checkpoint(paths.model());

  std::vector<std::string> benign_corpus =
      generate_heldout_docs(cfg.synthetic_spec(), cfg.dataset.heldout_docs, /*stream_offset=*/3);

  auto eval_stage = [&](const TransformerLM& m, const SoftPrompt* prompt,
                        const std::string& stage) {
    SuiteModels models;
    models.target = &m;
    models.chat = &tmpl;
    std::vector<std::string> methods = {"ppl"};
    if (prompt) {
      if (aligned) {
        models.aligned_target = &m;
        models.aligned_prompt = prompt;
        methods.push_back("tuned_aligned");
      } else {
        models.unaligned_prompt = prompt;
        methods.push_back("tuned_unaligned");
      }
    }
    AttackReport report = run_attack_suite(models, split, methods, cfg.method_params(),
                                           sweep_seed);
    rows.add("defense_stages", stage, report, sweep_seed);
  };

  json utility;
  utility["benign_nll_before_ft"] = corpus_mean_nll(target, benign_corpus);
  eval_stage(target, nullptr, "before_ft");

  // Both users fine-tune: benign LM fine-tune on their corpus, malicious
  // prompt tuning against the served model.
  TransformerLM after_ft = target.clone();
  TrainConfig benign_ft = cfg.train_config();
  benign_ft.epochs = 3;
  benign_ft.seed = derive_seed(cfg.seed, "benign_ft");
  fine_tune_lm(after_ft, benign_corpus, benign_ft);
  utility["benign_nll_after_ft"] = corpus_mean_nll(after_ft, benign_corpus);

  AttackConfig attack = cfg.attack;
  attack.seed = sweep_seed;
  TuneResult tuned = tune_soft_prompt(after_ft, split, aligned ? &tmpl : nullptr, attack);
  eval_stage(after_ft, &tuned.prompt, "after_ft_no_defense");

  DefenseConfig defense = cfg.defense;
  defense.mode = aligned ? DefenseMode::aligned_defense : DefenseMode::unaligned_defense;
  defense.seed = derive_seed(cfg.seed, "stage_defense");
  DefenseResult defended = apply_defense(after_ft, split, load_heldout(cfg), tmpl, defense);
  utility["benign_nll_after_defense"] = corpus_mean_nll(defended.model, benign_corpus);
  utility["heldout_utility"] = {{"before", defended.utility.heldout_nll_before},
                                {"after", defended.utility.heldout_nll_after},
                                {"relative_increase", defended.utility.relative_increase},
                                {"flagged", defended.utility.flagged}};
  eval_stage(defended.model, &tuned.prompt, "after_ft_with_defense");

  write_file_atomic(cfg.out_dir + "/defense_stages_utility.json", utility.dump(2) + "\n");
}

}  // namespace

void stage_sweep(const RunConfig& cfg, const std::string& kind) {
  CsvRows rows;
  if (kind == "few_shot") {
    sweep_few_shot(cfg, rows);
  } else if (kind == "text_length") {
    sweep_text_length(cfg, rows);
  } else if (kind == "model_size") {
    sweep_model_size(cfg, rows);
  } else if (kind == "defense_stages") {
    sweep_defense_stages(cfg, rows);
  } else {
    fail(ErrorClass::config_invalid, "unknown sweep kind '" + kind + "'");
  }
  write_file_atomic(paths_for(cfg).sweep_csv(kind), rows.csv.str());
  write_stage_config(cfg, "sweep_" + kind);
}

void stage_split_cutoff(const RunConfig& cfg, const std::string& input_jsonl,
                        const std::string& output_jsonl) {
  require_artifact(input_jsonl, "input JSONL");
  auto records = load_jsonl(input_jsonl, /*require_label=*/false);
  CutoffResult result =
      split_by_cutoff(records, cfg.dataset.cutoff_date, cfg.dataset.member_creation_bound);
  std::vector<TextRecord> labeled;
  labeled.reserve(result.split.members.size() + result.split.non_members.size());
  for (auto& r : result.split.members) labeled.push_back(std::move(r));
  for (auto& r : result.split.non_members) labeled.push_back(std::move(r));
  save_jsonl(labeled, output_jsonl);
  std::printf("split-cutoff: members=%zu non_members=%zu excluded=%d\n",
              result.split.members.size(), result.split.non_members.size(), result.excluded);
}

}  // namespace pipeline
}  // namespace mia
