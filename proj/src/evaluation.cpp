#include "mia/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

#include "mia/common.hpp"
#include "mia/rng.hpp"
#include "mia/tuner.hpp"

namespace mia {

double RocCurve::tpr_at_fpr(double max_fpr) const {
  double best = 0.0;
  for (size_t i = 0; i < fpr.size(); ++i) {
    if (fpr[i] <= max_fpr + 1e-15) best = std::max(best, tpr[i]);
  }
  return best;
}

RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    fail(ErrorClass::domain_error, "roc_curve: scores/labels size mismatch or empty");
  }
  int64_t n_member = 0, n_non = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) ++n_member;
    else if (labels[i] == 0) ++n_non;
    else fail(ErrorClass::domain_error, "roc_curve: labels must be 0 or 1");
    if (!std::isfinite(scores[i])) {
      fail(ErrorClass::domain_error, "roc_curve: non-finite score at index " + std::to_string(i));
    }
  }
  if (n_member == 0 || n_non == 0) {
    fail(ErrorClass::domain_error, "roc_curve: both classes must be present");
  }

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  RocCurve curve;
  curve.fpr.push_back(0.0);
  curve.tpr.push_back(0.0);
  // Sweep thresholds over distinct score values; ties advance TP and FP
  // together. The pair count runs in integers: a tie group adds
  // fp_inc * (2*tp_before + tp_inc) half-pair units, which is exactly the
  // trapezoid increment scaled by 2*n_member*n_non.
  int64_t tp = 0, fp = 0;
  int64_t units = 0;
  size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    int64_t tp_inc = 0, fp_inc = 0;
    while (i < order.size() && scores[order[i]] == s) {
      if (labels[order[i]] == 1) ++tp_inc;
      else ++fp_inc;
      ++i;
    }
    units += fp_inc * (2 * tp + tp_inc);
    tp += tp_inc;
    fp += fp_inc;
    curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(n_non));
    curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(n_member));
  }
  curve.auc = static_cast<double>(units) / (2.0 * static_cast<double>(n_member) *
                                            static_cast<double>(n_non));
  return curve;
}

double compute_auc(std::span<const double> scores, std::span<const int> labels) {
  return roc_curve(scores, labels).auc;
}

// ------------------------------------------------------------------ suite

namespace {

ClassStats class_stats(const std::vector<double>& v) {
  ClassStats s;
  if (v.empty()) return s;
  s.min = v[0];
  s.max = v[0];
  double sum = 0.0;
  for (double x : v) {
    sum += x;
    s.min = std::min(s.min, x);
    s.max = std::max(s.max, x);
  }
  s.mean = sum / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(v.size()));
  return s;
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  const size_t hw = std::max<size_t>(1, std::thread::hardware_concurrency());
  const size_t workers = std::min(hw, n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> methods = {
      method_names::kPpl,       method_names::kMinK,        method_names::kMinKpp,
      method_names::kZlib,      method_names::kLowercase,   method_names::kNeighbor,
      method_names::kSmallerRef, method_names::kTunedAligned,
      method_names::kTunedUnaligned, "random_control"};
  return methods;
}

}  // namespace

double score_sample(const SuiteModels& models, const std::string& method, std::string_view text,
                    const MethodParams& params, uint64_t sample_seed) {
  if (!models.target) fail(ErrorClass::missing_artifact, "score_sample: no target model");
  const TransformerLM& target = *models.target;

  if (method == method_names::kPpl) {
    return score_ppl(target.trace(text));
  }
  if (method == method_names::kMinK) {
    return score_min_k(target.trace(text), params.min_k_percent);
  }
  if (method == method_names::kMinKpp) {
    return score_min_k_pp(target.trace(text), params.min_k_percent);
  }
  if (method == method_names::kZlib) {
    return score_zlib(target.trace(text), text);
  }
  if (method == method_names::kLowercase) {
    return score_lowercase(target, text);
  }
  if (method == method_names::kNeighbor) {
    return score_neighbor(target, text, params.neighbor_count, params.neighbor_rate,
                          sample_seed);
  }
  if (method == method_names::kSmallerRef) {
    if (!models.smaller_ref) {
      fail(ErrorClass::missing_artifact, "smaller_ref: no reference model loaded");
    }
    return score_smaller_ref(target, *models.smaller_ref, text);
  }
  if (method == method_names::kTunedAligned) {
    if (!models.aligned_prompt || !models.chat) {
      fail(ErrorClass::missing_artifact, "tuned_aligned: no tuned prompt/template loaded");
    }
    const TransformerLM& aligned = models.aligned_target ? *models.aligned_target : target;
    return score_tuned_aligned(aligned, *models.aligned_prompt, *models.chat, text);
  }
  if (method == method_names::kTunedUnaligned) {
    if (!models.unaligned_prompt) {
      fail(ErrorClass::missing_artifact, "tuned_unaligned: no tuned prompt loaded");
    }
    return score_tuned_unaligned(target, *models.unaligned_prompt, text);
  }
  if (method == "random_control") {
    Rng rng(sample_seed);
    return rng.uniform();
  }
  fail(ErrorClass::config_invalid, "unknown method '" + method + "'");
}

AttackReport run_attack_suite(const SuiteModels& models, const BenchmarkSplit& split,
                              const std::vector<std::string>& methods,
                              const MethodParams& params, uint64_t seed) {
  if (split.eval_member_idx.empty() || split.eval_non_member_idx.empty()) {
    fail(ErrorClass::domain_error, "run_attack_suite: empty eval subset");
  }
  for (const auto& m : methods) {
    const auto& known = known_methods();
    if (std::find(known.begin(), known.end(), m) == known.end()) {
      fail(ErrorClass::config_invalid, "run_attack_suite: unknown method '" + m + "'");
    }
  }

  struct EvalItem {
    const TextRecord* record;
    int label;
  };
  std::vector<EvalItem> items;
  for (size_t i : split.eval_member_idx) items.push_back({&split.members[i], 1});
  for (size_t i : split.eval_non_member_idx) items.push_back({&split.non_members[i], 0});

  AttackReport report;
  report.samples.resize(items.size());
  std::vector<std::vector<std::string>> failures(items.size());

  parallel_for(items.size(), [&](size_t i) {
    ScoredSample& sample = report.samples[i];
    sample.id = items[i].record->id;
    sample.label = items[i].label;
    for (const auto& method : methods) {
      // Seed depends on sample id and method only, so concurrency and eval
      // ordering cannot perturb the scores.
      const uint64_t sample_seed =
          derive_seed(seed, "score:" + method + ":" + sample.id);
      try {
        const double s =
            score_sample(models, method, items[i].record->text, params, sample_seed);
        if (!std::isfinite(s)) {
          fail(ErrorClass::domain_error, "non-finite score");
        }
        sample.scores[method] = s;
      } catch (const std::exception& e) {
        failures[i].push_back(sample.id + "/" + method + ": " + e.what());
      }
    }
  });

  for (auto& f : failures) {
    for (auto& msg : f) report.failures.push_back(std::move(msg));
  }

  for (const auto& method : methods) {
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<double> member_scores, non_member_scores;
    for (const auto& sample : report.samples) {
      auto it = sample.scores.find(method);
      if (it == sample.scores.end()) continue;  // recorded failure
      scores.push_back(it->second);
      labels.push_back(sample.label);
      (sample.label == 1 ? member_scores : non_member_scores).push_back(it->second);
    }
    MethodResult res;
    res.n_eval = static_cast<int>(scores.size());
    if (!member_scores.empty() && !non_member_scores.empty()) {
      RocCurve curve = roc_curve(scores, labels);
      res.auc = curve.auc;
      res.tpr_at_fpr["0.01"] = curve.tpr_at_fpr(0.01);
      res.tpr_at_fpr["0.05"] = curve.tpr_at_fpr(0.05);
      res.tpr_at_fpr["0.10"] = curve.tpr_at_fpr(0.10);
    }
    res.member_scores = class_stats(member_scores);
    res.non_member_scores = class_stats(non_member_scores);
    report.methods[method] = std::move(res);
  }
  report.metadata["seed"] = seed;
  report.metadata["n_eval_members"] = split.eval_member_idx.size();
  report.metadata["n_eval_non_members"] = split.eval_non_member_idx.size();
  return report;
}

nlohmann::json AttackReport::to_json(bool include_samples) const {
  nlohmann::json j;
  j["schema_version"] = 1;
  nlohmann::json jm;
  for (const auto& [name, res] : methods) {
    nlohmann::json e;
    e["auc"] = res.auc;
    e["n_eval"] = res.n_eval;
    e["member_scores"] = {{"mean", res.member_scores.mean},
                          {"stddev", res.member_scores.stddev},
                          {"min", res.member_scores.min},
                          {"max", res.member_scores.max}};
    e["non_member_scores"] = {{"mean", res.non_member_scores.mean},
                              {"stddev", res.non_member_scores.stddev},
                              {"min", res.non_member_scores.min},
                              {"max", res.non_member_scores.max}};
    e["tpr_at_fpr"] = res.tpr_at_fpr;
    jm[name] = std::move(e);
  }
  j["methods"] = std::move(jm);
  j["failures"] = failures;
  j["metadata"] = metadata;
  if (include_samples) {
    nlohmann::json js = nlohmann::json::array();
    for (const auto& s : samples) {
      js.push_back({{"id", s.id}, {"label", s.label}, {"scores", s.scores}});
    }
    j["samples"] = std::move(js);
  }
  return j;
}

}  // namespace mia
