#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mia {

struct TextRecord {
  std::string text;
  int label = 0;  // member=1, non-member=0
  std::optional<std::string> timestamp;  // ISO-8601 date
  std::string id;
};

/// Labeled member/non-member pools with disjoint tuning and eval index sets.
struct BenchmarkSplit {
  std::vector<TextRecord> members;
  std::vector<TextRecord> non_members;
  std::vector<size_t> tuning_member_idx;
  std::vector<size_t> tuning_non_member_idx;
  std::vector<size_t> eval_member_idx;
  std::vector<size_t> eval_non_member_idx;

  std::vector<std::string> member_texts() const;
  std::vector<std::string> non_member_texts() const;
  const TextRecord& tuning_member(size_t i) const { return members[tuning_member_idx[i]]; }
  const TextRecord& tuning_non_member(size_t i) const {
    return non_members[tuning_non_member_idx[i]];
  }
};

struct SyntheticCorpusSpec {
  uint64_t seed = 1;
  int docs_per_class = 512;
  int doc_length = 128;      // bytes; also the pending-text token length
  double noise_rate = 0.02;  // per-byte substitution probability
};

/// Draws member and non-member pools i.i.d. from one template-grammar
/// generator stream; the two classes differ only by later training exposure.
/// Deterministic in the seed, no duplicate texts across pools.
BenchmarkSplit generate_synthetic_corpus(const SyntheticCorpusSpec& spec);

/// Extra held-out documents from the same generator (utility guard and
/// benign fine-tuning data); offset separates the stream from the pools.
std::vector<std::string> generate_heldout_docs(const SyntheticCorpusSpec& spec, int count,
                                               uint64_t stream_offset = 1);

/// JSONL with fields "input", "label" (0/1) and optional "timestamp"
/// (ISO-8601 date), one object per line, WIKIMIA-compatible. Ids are
/// assigned as <stem>:<line>. With require_label=false missing labels
/// default to 0 (raw feeds for cutoff splitting).
std::vector<TextRecord> load_jsonl(const std::string& path, bool require_label = true);
void save_jsonl(const std::vector<TextRecord>& records, const std::string& path);

struct CutoffResult {
  BenchmarkSplit split;
  int excluded = 0;
};

/// Records created strictly before member_creation_bound become members;
/// records strictly after cutoff_date become non-members; anything between
/// (bounds inclusive) is excluded and counted. Dates are ISO-8601 strings.
CutoffResult split_by_cutoff(const std::vector<TextRecord>& records,
                             const std::string& cutoff_date,
                             const std::string& member_creation_bound);

/// Uniform without-replacement tuning sample from each pool; the eval set is
/// the remainder. n = 0 for both leaves eval covering the full split.
void sample_tuning_set(BenchmarkSplit& split, int n_member, int n_non_member, uint64_t seed);

/// Caps each eval side to per_class entries (seeded subsample) so the eval
/// set size is independent of the pool size.
void cap_eval_set(BenchmarkSplit& split, int per_class, uint64_t seed);

}  // namespace mia
