#include "mia/common.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mia {

std::string_view to_string(ErrorClass cls) {
  switch (cls) {
    case ErrorClass::config_invalid: return "config_invalid";
    case ErrorClass::missing_artifact: return "missing_artifact";
    case ErrorClass::io_error: return "io_error";
    case ErrorClass::domain_error: return "domain_error";
    case ErrorClass::shape_error: return "shape_error";
    case ErrorClass::internal_error: return "internal_error";
  }
  return "internal_error";
}

uint64_t fnv1a64(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    fail(ErrorClass::missing_artifact, "cannot open file: " + path);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) {
    fail(ErrorClass::io_error, "read failed: " + path);
  }
  return ss.str();
}

void write_file_atomic(const std::string& path, std::string_view content) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      fail(ErrorClass::io_error, "cannot open for write: " + tmp);
    }
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      fail(ErrorClass::io_error, "write failed: " + tmp);
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fail(ErrorClass::io_error, "rename failed: " + tmp + " -> " + path + ": " + ec.message());
  }
}

uint64_t fnv1a64_file(const std::string& path) {
  const std::string bytes = read_file(path);
  return fnv1a64(bytes);
}

}  // namespace mia
