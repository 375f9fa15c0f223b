#include "mia/baselines.hpp"

#include <algorithm>
#include <cmath>

#include <zlib.h>

#include "mia/common.hpp"
#include "mia/rng.hpp"

namespace mia {

namespace {

// Mean of the ceil(k% * n) smallest values.
double mean_of_smallest(std::vector<double> values, double k_percent) {
  if (k_percent <= 0.0 || k_percent > 100.0) {
    fail(ErrorClass::domain_error,
         "min-k: k must be in (0, 100], got " + std::to_string(k_percent));
  }
  const size_t n = values.size();
  const size_t k = static_cast<size_t>(
      std::ceil(k_percent / 100.0 * static_cast<double>(n)));
  const size_t take = std::max<size_t>(1, std::min(n, k));
  std::partial_sort(values.begin(), values.begin() + static_cast<int64_t>(take), values.end());
  double s = 0.0;
  for (size_t i = 0; i < take; ++i) s += values[i];
  return s / static_cast<double>(take);
}

}  // namespace

double score_ppl(const LogProbTrace& trace) {
  if (trace.size() == 0) fail(ErrorClass::domain_error, "score_ppl: empty trace");
  double s = 0.0;
  for (double lp : trace.target_logprob) s += lp;
  return s / static_cast<double>(trace.size());
}

double score_min_k(const LogProbTrace& trace, double k_percent) {
  if (trace.size() == 0) fail(ErrorClass::domain_error, "score_min_k: empty trace");
  return mean_of_smallest(trace.target_logprob, k_percent);
}

double score_min_k_pp(const LogProbTrace& trace, double k_percent, double eps) {
  if (trace.size() == 0) fail(ErrorClass::domain_error, "score_min_k_pp: empty trace");
  std::vector<double> normalized(trace.size());
  for (size_t i = 0; i < trace.size(); ++i) {
    normalized[i] = (trace.target_logprob[i] - trace.mu[i]) / std::max(trace.sigma[i], eps);
  }
  return mean_of_smallest(std::move(normalized), k_percent);
}

size_t zlib_compressed_size(std::string_view text) {
  uLongf bound = compressBound(static_cast<uLong>(text.size()));
  std::vector<Bytef> buffer(bound);
  const int rc = compress(buffer.data(), &bound, reinterpret_cast<const Bytef*>(text.data()),
                          static_cast<uLong>(text.size()));
  if (rc != Z_OK) {
    fail(ErrorClass::internal_error, "zlib compress failed with code " + std::to_string(rc));
  }
  return static_cast<size_t>(bound);
}

double score_zlib(const LogProbTrace& trace, std::string_view raw_text) {
  if (raw_text.empty()) fail(ErrorClass::domain_error, "score_zlib: empty text");
  double total = 0.0;
  for (double lp : trace.target_logprob) total += lp;
  return total / static_cast<double>(zlib_compressed_size(raw_text));
}

double score_lowercase(const TransformerLM& model, std::string_view text) {
  if (text.empty()) fail(ErrorClass::domain_error, "score_lowercase: empty text");
  const std::string lower = lowercase_ascii(text);
  return model.sequence_nll(lower) - model.sequence_nll(text);
}

double score_neighbor(const TransformerLM& model, std::string_view text, int n_neighbors,
                      double substitution_rate, uint64_t seed) {
  if (n_neighbors < 1) fail(ErrorClass::domain_error, "score_neighbor: n_neighbors must be >= 1");
  if (substitution_rate <= 0.0 || substitution_rate >= 1.0) {
    fail(ErrorClass::domain_error, "score_neighbor: rate must be in (0, 1)");
  }
  const std::vector<int> tokens = tokenize(text);
  if (tokens.size() < 2) {
    fail(ErrorClass::domain_error, "score_neighbor: text shorter than 2 tokens");
  }
  const size_t replace = static_cast<size_t>(
      std::ceil(substitution_rate * static_cast<double>(tokens.size())));

  // Unconditional unigram estimate: the next-token distribution after BOS.
  const std::vector<int> bos = {Vocabulary::kBos};
  const std::vector<double> unigram = model.next_token_distribution(bos, 0);

  Rng rng(seed);
  auto sample_token = [&]() {
    const double r = rng.uniform();
    double c = 0.0;
    for (size_t v = 0; v < unigram.size(); ++v) {
      c += unigram[v];
      if (r < c) return static_cast<int>(v);
    }
    return static_cast<int>(unigram.size() - 1);
  };

  const double base = model.sequence_nll_tokens(tokens);
  double acc = 0.0;
  for (int n = 0; n < n_neighbors; ++n) {
    std::vector<int> neighbor = tokens;
    const auto positions = rng.sample_without_replacement(tokens.size(), replace);
    for (size_t pos : positions) neighbor[pos] = sample_token();
    acc += model.sequence_nll_tokens(neighbor) - base;
  }
  return acc / static_cast<double>(n_neighbors);
}

double score_smaller_ref(const TransformerLM& target, const TransformerLM& reference,
                         std::string_view text) {
  if (text.empty()) fail(ErrorClass::domain_error, "score_smaller_ref: empty text");
  return reference.sequence_nll(text) - target.sequence_nll(text);
}

}  // namespace mia
