#include "mia/config.hpp"

#include <set>

#include "mia/common.hpp"
#include "mia/rng.hpp"

namespace mia {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& path,
                const std::set<std::string>& allowed) {
  if (!obj.is_object()) {
    fail(ErrorClass::config_invalid, "config: " + path + " must be an object");
  }
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      fail(ErrorClass::config_invalid,
           "config: unknown key '" + (path.empty() ? it.key() : path + "." + it.key()) + "'");
    }
  }
}

template <typename T>
void read_field(const json& obj, const std::string& path, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorClass::config_invalid,
         "config: bad value type for '" + path + "." + key + "'");
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig cfg;
  check_keys(j, "", {"seed", "out_dir", "dataset", "model", "attack", "defense", "evaluation",
                     "template"});
  read_field(j, "", "seed", cfg.seed);
  read_field(j, "", "out_dir", cfg.out_dir);

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, "dataset",
               {"kind", "docs_per_class", "doc_length", "noise_rate", "jsonl_path",
                "cutoff_date", "member_creation_bound", "tuning_members", "tuning_non_members",
                "eval_per_class", "heldout_docs"});
    read_field(d, "dataset", "kind", cfg.dataset.kind);
    read_field(d, "dataset", "docs_per_class", cfg.dataset.docs_per_class);
    read_field(d, "dataset", "doc_length", cfg.dataset.doc_length);
    read_field(d, "dataset", "noise_rate", cfg.dataset.noise_rate);
    read_field(d, "dataset", "jsonl_path", cfg.dataset.jsonl_path);
    read_field(d, "dataset", "cutoff_date", cfg.dataset.cutoff_date);
    read_field(d, "dataset", "member_creation_bound", cfg.dataset.member_creation_bound);
    read_field(d, "dataset", "tuning_members", cfg.dataset.tuning_members);
    read_field(d, "dataset", "tuning_non_members", cfg.dataset.tuning_non_members);
    read_field(d, "dataset", "eval_per_class", cfg.dataset.eval_per_class);
    read_field(d, "dataset", "heldout_docs", cfg.dataset.heldout_docs);
    if (cfg.dataset.kind != "synthetic" && cfg.dataset.kind != "jsonl") {
      fail(ErrorClass::config_invalid, "config: dataset.kind must be synthetic or jsonl");
    }
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model",
               {"d_model", "n_layers", "n_heads", "context_length", "train_epochs", "train_lr",
                "train_batch", "weight_decay", "offset_min", "offset_max", "quote_prob",
                "quote_intro", "plain_corruption", "train_smaller_ref", "aligned"});
    read_field(m, "model", "d_model", cfg.model.d_model);
    read_field(m, "model", "n_layers", cfg.model.n_layers);
    read_field(m, "model", "n_heads", cfg.model.n_heads);
    read_field(m, "model", "context_length", cfg.model.context_length);
    read_field(m, "model", "train_epochs", cfg.model.train_epochs);
    read_field(m, "model", "train_lr", cfg.model.train_lr);
    read_field(m, "model", "train_batch", cfg.model.train_batch);
    read_field(m, "model", "weight_decay", cfg.model.weight_decay);
    read_field(m, "model", "offset_min", cfg.model.offset_min);
    read_field(m, "model", "offset_max", cfg.model.offset_max);
    read_field(m, "model", "quote_prob", cfg.model.quote_prob);
    read_field(m, "model", "quote_intro", cfg.model.quote_intro);
    read_field(m, "model", "plain_corruption", cfg.model.plain_corruption);
    read_field(m, "model", "train_smaller_ref", cfg.model.train_smaller_ref);
    if (m.contains("aligned")) {
      const auto& a = m.at("aligned");
      check_keys(a, "model.aligned",
                 {"enabled", "warmup_epochs", "warmup_lr", "warmup_samples", "member_fraction"});
      read_field(a, "model.aligned", "enabled", cfg.model.aligned.enabled);
      read_field(a, "model.aligned", "warmup_epochs", cfg.model.aligned.warmup_epochs);
      read_field(a, "model.aligned", "warmup_lr", cfg.model.aligned.warmup_lr);
      read_field(a, "model.aligned", "warmup_samples", cfg.model.aligned.warmup_samples);
      read_field(a, "model.aligned", "member_fraction", cfg.model.aligned.member_fraction);
    }
  }

  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    check_keys(a, "attack",
               {"mode", "alpha", "beta", "gamma", "temperature", "distance_mode", "lr", "epochs",
                "batch_size", "prompt_length", "seed"});
    std::string mode = to_string(cfg.attack.mode);
    read_field(a, "attack", "mode", mode);
    cfg.attack.mode = attack_mode_from_string(mode);
    read_field(a, "attack", "alpha", cfg.attack.alpha);
    read_field(a, "attack", "beta", cfg.attack.beta);
    read_field(a, "attack", "gamma", cfg.attack.gamma);
    read_field(a, "attack", "temperature", cfg.attack.temperature);
    std::string dist = cfg.attack.distance_mode == DistanceMode::paper ? "paper" : "absolute";
    read_field(a, "attack", "distance_mode", dist);
    cfg.attack.distance_mode = distance_mode_from_string(dist);
    read_field(a, "attack", "lr", cfg.attack.lr);
    read_field(a, "attack", "epochs", cfg.attack.epochs);
    read_field(a, "attack", "batch_size", cfg.attack.batch_size);
    read_field(a, "attack", "prompt_length", cfg.attack.prompt_length);
    cfg.attack.validate();
  }

  if (j.contains("defense")) {
    const auto& d = j.at("defense");
    check_keys(d, "defense",
               {"mode", "epochs", "batch_size", "lr", "temperature", "distance_mode",
                "utility_bound", "last_block_only"});
    std::string mode =
        cfg.defense.mode == DefenseMode::aligned_defense ? "aligned_defense" : "unaligned_defense";
    read_field(d, "defense", "mode", mode);
    cfg.defense.mode = defense_mode_from_string(mode);
    read_field(d, "defense", "epochs", cfg.defense.epochs);
    read_field(d, "defense", "batch_size", cfg.defense.batch_size);
    read_field(d, "defense", "lr", cfg.defense.lr);
    read_field(d, "defense", "temperature", cfg.defense.temperature);
    std::string dist = cfg.defense.distance_mode == DistanceMode::paper ? "paper" : "absolute";
    read_field(d, "defense", "distance_mode", dist);
    cfg.defense.distance_mode = distance_mode_from_string(dist);
    read_field(d, "defense", "utility_bound", cfg.defense.utility_bound);
    read_field(d, "defense", "last_block_only", cfg.defense.last_block_only);
    cfg.defense.validate();
  }

  if (j.contains("evaluation")) {
    const auto& e = j.at("evaluation");
    check_keys(e, "evaluation",
               {"methods", "min_k_percent", "neighbor_count", "neighbor_rate", "sweeps"});
    read_field(e, "evaluation", "methods", cfg.evaluation.methods);
    read_field(e, "evaluation", "min_k_percent", cfg.evaluation.min_k_percent);
    read_field(e, "evaluation", "neighbor_count", cfg.evaluation.neighbor_count);
    read_field(e, "evaluation", "neighbor_rate", cfg.evaluation.neighbor_rate);
    if (e.contains("sweeps")) {
      const auto& s = e.at("sweeps");
      check_keys(s, "evaluation.sweeps",
                 {"few_shot_grid", "text_length_grid", "model_size_grid", "text_length_docs",
                  "text_length_epochs"});
      read_field(s, "evaluation.sweeps", "few_shot_grid", cfg.evaluation.sweeps.few_shot_grid);
      read_field(s, "evaluation.sweeps", "text_length_grid",
                 cfg.evaluation.sweeps.text_length_grid);
      read_field(s, "evaluation.sweeps", "model_size_grid",
                 cfg.evaluation.sweeps.model_size_grid);
      read_field(s, "evaluation.sweeps", "text_length_docs",
                 cfg.evaluation.sweeps.text_length_docs);
      read_field(s, "evaluation.sweeps", "text_length_epochs",
                 cfg.evaluation.sweeps.text_length_epochs);
    }
  }

  if (j.contains("template")) {
    const auto& t = j.at("template");
    check_keys(t, "template", {"system_text", "user_prefix"});
    read_field(t, "template", "system_text", cfg.chat_template.system_text);
    read_field(t, "template", "user_prefix", cfg.chat_template.user_prefix);
  }

  cfg.attack.seed = cfg.seed;
  cfg.defense.seed = cfg.seed;
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  const std::string text = read_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) {
    fail(ErrorClass::config_invalid, "config: unparsable JSON in " + path);
  }
  return from_json(j);
}

void RunConfig::apply_override(const std::string& dotted_assignment) {
  const size_t eq = dotted_assignment.find('=');
  if (eq == std::string::npos) {
    fail(ErrorClass::config_invalid,
         "override must look like section.key=value, got '" + dotted_assignment + "'");
  }
  const std::string path = dotted_assignment.substr(0, eq);
  const std::string value = dotted_assignment.substr(eq + 1);

  json j = to_json();
  json* node = &j;
  size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    const size_t dot = path.find('.', start);
    parts.push_back(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) {
      fail(ErrorClass::config_invalid, "override: unknown path '" + path + "'");
    }
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back())) {
    fail(ErrorClass::config_invalid, "override: unknown path '" + path + "'");
  }
  json parsed = json::parse(value, nullptr, false);
  (*node)[parts.back()] = parsed.is_discarded() ? json(value) : parsed;
  *this = from_json(j);
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["dataset"] = {{"kind", dataset.kind},
                  {"docs_per_class", dataset.docs_per_class},
                  {"doc_length", dataset.doc_length},
                  {"noise_rate", dataset.noise_rate},
                  {"jsonl_path", dataset.jsonl_path},
                  {"cutoff_date", dataset.cutoff_date},
                  {"member_creation_bound", dataset.member_creation_bound},
                  {"tuning_members", dataset.tuning_members},
                  {"tuning_non_members", dataset.tuning_non_members},
                  {"eval_per_class", dataset.eval_per_class},
                  {"heldout_docs", dataset.heldout_docs}};
  j["model"] = {{"d_model", model.d_model},
                {"n_layers", model.n_layers},
                {"n_heads", model.n_heads},
                {"context_length", model.context_length},
                {"train_epochs", model.train_epochs},
                {"train_lr", model.train_lr},
                {"train_batch", model.train_batch},
                {"weight_decay", model.weight_decay},
                {"offset_min", model.offset_min},
                {"offset_max", model.offset_max},
                {"quote_prob", model.quote_prob},
                {"quote_intro", model.quote_intro},
                {"plain_corruption", model.plain_corruption},
                {"train_smaller_ref", model.train_smaller_ref},
                {"aligned",
                 {{"enabled", model.aligned.enabled},
                  {"warmup_epochs", model.aligned.warmup_epochs},
                  {"warmup_lr", model.aligned.warmup_lr},
                  {"warmup_samples", model.aligned.warmup_samples},
                  {"member_fraction", model.aligned.member_fraction}}}};
  j["attack"] = {{"mode", to_string(attack.mode)},
                 {"alpha", attack.alpha},
                 {"beta", attack.beta},
                 {"gamma", attack.gamma},
                 {"temperature", attack.temperature},
                 {"distance_mode",
                  attack.distance_mode == DistanceMode::paper ? "paper" : "absolute"},
                 {"lr", attack.lr},
                 {"epochs", attack.epochs},
                 {"batch_size", attack.batch_size},
                 {"prompt_length", attack.prompt_length}};
  j["defense"] = {{"mode", defense.mode == DefenseMode::aligned_defense ? "aligned_defense"
                                                                        : "unaligned_defense"},
                  {"epochs", defense.epochs},
                  {"batch_size", defense.batch_size},
                  {"lr", defense.lr},
                  {"temperature", defense.temperature},
                  {"distance_mode",
                   defense.distance_mode == DistanceMode::paper ? "paper" : "absolute"},
                  {"utility_bound", defense.utility_bound},
                  {"last_block_only", defense.last_block_only}};
  j["evaluation"] = {{"methods", evaluation.methods},
                     {"min_k_percent", evaluation.min_k_percent},
                     {"neighbor_count", evaluation.neighbor_count},
                     {"neighbor_rate", evaluation.neighbor_rate},
                     {"sweeps",
                      {{"few_shot_grid", evaluation.sweeps.few_shot_grid},
                       {"text_length_grid", evaluation.sweeps.text_length_grid},
                       {"model_size_grid", evaluation.sweeps.model_size_grid},
                       {"text_length_docs", evaluation.sweeps.text_length_docs},
                       {"text_length_epochs", evaluation.sweeps.text_length_epochs}}}};
  j["template"] = {{"system_text", chat_template.system_text},
                   {"user_prefix", chat_template.user_prefix}};
  return j;
}

ModelConfig RunConfig::model_config() const {
  return ModelConfig{.d_model = model.d_model,
                     .n_layers = model.n_layers,
                     .n_heads = model.n_heads,
                     .context_length = model.context_length,
                     .seed = seed};
}

TrainConfig RunConfig::train_config() const {
  return TrainConfig{.epochs = model.train_epochs,
                     .batch_size = model.train_batch,
                     .lr = model.train_lr,
                     .weight_decay = model.weight_decay,
                     .seed = derive_seed(seed, "train_lm"),
                     .max_tokens = dataset.doc_length,
                     .offset_min = model.offset_min,
                     .offset_max = model.offset_max,
                     .quote_prob = model.quote_prob,
                     .quote_intro = model.quote_intro,
                     .plain_corruption = model.plain_corruption};
}

ChatTemplate RunConfig::make_template() const {
  ChatTemplate t;
  t.system_text = chat_template.system_text;
  t.user_prefix = chat_template.user_prefix;
  return t;
}

MethodParams RunConfig::method_params() const {
  MethodParams p;
  p.min_k_percent = evaluation.min_k_percent;
  p.neighbor_count = evaluation.neighbor_count;
  p.neighbor_rate = evaluation.neighbor_rate;
  return p;
}

SyntheticCorpusSpec RunConfig::synthetic_spec() const {
  return SyntheticCorpusSpec{.seed = derive_seed(seed, "gen_data"),
                             .docs_per_class = dataset.docs_per_class,
                             .doc_length = dataset.doc_length,
                             .noise_rate = dataset.noise_rate};
}

}  // namespace mia
