#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace mia {

/// Byte-level vocabulary: ids 0..255 are the raw byte values, followed by
/// reserved single-token specials. YES/NO are single tokens so the answer
/// probability ratio is exact instead of a product over sub-tokens.
struct Vocabulary {
  static constexpr int kBos = 256;
  static constexpr int kSys = 257;
  static constexpr int kUser = 258;
  static constexpr int kAsst = 259;
  static constexpr int kYes = 260;
  static constexpr int kNo = 261;
  static constexpr int kPad = 262;
  static constexpr int kSize = 263;

  static bool is_special(int id) { return id >= 256 && id < kSize; }
  static std::string_view special_name(int id);
};

std::vector<int> tokenize(std::string_view text);

/// Exact inverse for byte tokens; special ids render as named placeholders
/// like "<BOS>". Ids outside the vocabulary are an error.
std::string detokenize(const std::vector<int>& ids);

/// ASCII A-Z -> a-z, all other bytes untouched.
std::string lowercase_ascii(std::string_view text);

}  // namespace mia
