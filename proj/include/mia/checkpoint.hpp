#pragma once

#include <string>

#include "mia/model.hpp"

namespace mia {

/// Model checkpoint: magic + JSON header (config, parameter manifest with
/// names/shapes) followed by the raw little-endian float64 blobs in manifest
/// order. Reloading reproduces traces bit-exactly.
void save_checkpoint(const TransformerLM& model, const std::string& path);
TransformerLM load_checkpoint(const std::string& path);

struct PromptArtifact {
  SoftPrompt prompt;
  std::string mode;  // "aligned" | "unaligned"
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  int64_t d_model = 0;
};

void save_prompt(const PromptArtifact& artifact, const std::string& path);
PromptArtifact load_prompt(const std::string& path);

}  // namespace mia
