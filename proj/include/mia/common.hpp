#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mia {

/// Stable error classes surfaced by the CLI as machine-parsable one-liners.
enum class ErrorClass {
  config_invalid,
  missing_artifact,
  io_error,
  domain_error,
  shape_error,
  internal_error,
};

std::string_view to_string(ErrorClass cls);

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& message)
      : std::runtime_error(message), cls_(cls) {}

  ErrorClass cls() const { return cls_; }

 private:
  ErrorClass cls_;
};

[[noreturn]] inline void fail(ErrorClass cls, const std::string& message) {
  throw Error(cls, message);
}

/// FNV-1a over a byte range; used for config and checkpoint fingerprints.
uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64(std::string_view s);

std::string hex64(uint64_t v);

/// Reads a whole file; throws io_error / missing_artifact.
std::string read_file(const std::string& path);

/// Writes via temp file + rename so partially written artifacts never land.
void write_file_atomic(const std::string& path, std::string_view content);

uint64_t fnv1a64_file(const std::string& path);

}  // namespace mia
