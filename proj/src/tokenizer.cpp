#include "mia/tokenizer.hpp"

#include "mia/common.hpp"

namespace mia {

std::string_view Vocabulary::special_name(int id) {
  switch (id) {
    case kBos: return "<BOS>";
    case kSys: return "<SYS>";
    case kUser: return "<USER>";
    case kAsst: return "<ASST>";
    case kYes: return "<YES>";
    case kNo: return "<NO>";
    case kPad: return "<PAD>";
  }
  fail(ErrorClass::domain_error, "not a special token id: " + std::to_string(id));
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if (Vocabulary::is_special(id)) {
      out += Vocabulary::special_name(id);
    } else {
      fail(ErrorClass::domain_error, "detokenize: id " + std::to_string(id) +
                                         " outside vocabulary of " +
                                         std::to_string(Vocabulary::kSize));
    }
  }
  return out;
}

std::string lowercase_ascii(std::string_view text) {
  std::string out(text);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

}  // namespace mia
