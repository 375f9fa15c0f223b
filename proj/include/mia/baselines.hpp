#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mia/model.hpp"

namespace mia {

// Reference-free and reference-based MIA score functions, all normalized to
// one convention: higher score means "predicted member".

/// Mean per-token log-probability, i.e. the negated mean NLL.
double score_ppl(const LogProbTrace& trace);

/// Mean of the ceil(k% * T) smallest per-token log-probs; k = 100 reduces to
/// score_ppl exactly.
double score_min_k(const LogProbTrace& trace, double k_percent);

/// Min-K%++ token score s_i = (log p(t_i) - mu_i) / max(sigma_i, eps) with
/// eps guarding the uniform-distribution singularity; mean of the smallest
/// ceil(k% * T) values.
double score_min_k_pp(const LogProbTrace& trace, double k_percent, double eps = 1e-6);

/// Sum of per-token log-probs divided by the zlib-compressed byte length of
/// the raw text (DEFLATE, default level).
double score_zlib(const LogProbTrace& trace, std::string_view raw_text);

/// meanNLL(lowercased) - meanNLL(original); exactly 0 on all-lowercase text.
double score_lowercase(const TransformerLM& model, std::string_view text);

/// Mean over n neighbors of meanNLL(neighbor) - meanNLL(text), where
/// neighbors replace ceil(rate * T) positions with draws from the model's
/// position-0 unigram distribution. Deterministic in the seed.
double score_neighbor(const TransformerLM& model, std::string_view text, int n_neighbors,
                      double substitution_rate, uint64_t seed);

/// meanNLL on the reference (smaller) model minus meanNLL on the target.
double score_smaller_ref(const TransformerLM& target, const TransformerLM& reference,
                         std::string_view text);

/// Compressed size in bytes of the text under zlib at the default level.
size_t zlib_compressed_size(std::string_view text);

/// Stable method-name strings used in reports and CLI flags.
namespace method_names {
inline constexpr const char* kPpl = "ppl";
inline constexpr const char* kMinK = "min_k";
inline constexpr const char* kMinKpp = "min_k_pp";
inline constexpr const char* kZlib = "zlib";
inline constexpr const char* kLowercase = "lowercase";
inline constexpr const char* kNeighbor = "neighbor";
inline constexpr const char* kSmallerRef = "smaller_ref";
inline constexpr const char* kTunedAligned = "tuned_aligned";
inline constexpr const char* kTunedUnaligned = "tuned_unaligned";
}  // namespace method_names

}  // namespace mia
