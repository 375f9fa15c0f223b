#include "mia/datasets.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mia/common.hpp"
#include "mia/rng.hpp"

namespace mia {

using nlohmann::json;

std::vector<std::string> BenchmarkSplit::member_texts() const {
  std::vector<std::string> out;
  out.reserve(members.size());
  for (const auto& r : members) out.push_back(r.text);
  return out;
}

std::vector<std::string> BenchmarkSplit::non_member_texts() const {
  std::vector<std::string> out;
  out.reserve(non_members.size());
  for (const auto& r : non_members) out.push_back(r.text);
  return out;
}

namespace {

void reset_eval_full(BenchmarkSplit& split) {
  split.eval_member_idx.resize(split.members.size());
  for (size_t i = 0; i < split.members.size(); ++i) split.eval_member_idx[i] = i;
  split.eval_non_member_idx.resize(split.non_members.size());
  for (size_t i = 0; i < split.non_members.size(); ++i) split.eval_non_member_idx[i] = i;
  split.tuning_member_idx.clear();
  split.tuning_non_member_idx.clear();
}

// ----------------------------------------------------- synthetic grammar

const char* kFirst[] = {"Alina",  "Boris",  "Clara",  "Dmitri", "Elena",  "Farid",  "Greta",
                        "Hector", "Ingrid", "Jonas",  "Katya",  "Lionel", "Marta",  "Nadia",
                        "Oskar",  "Priya",  "Quentin", "Rosa",  "Stefan", "Tamar",  "Ulrich",
                        "Vera",   "Wendel", "Ximena", "Yusuf",  "Zlata",  "Anders", "Bianca",
                        "Casimir", "Dalia", "Emilio", "Freya"};
const char* kLast[] = {"Abramov",  "Bergstrom", "Castellan", "Dragovic", "Eriksen",  "Falkner",
                       "Grauberg", "Hollis",    "Ivanov",    "Jansen",   "Kowalski", "Lindqvist",
                       "Moreau",   "Novak",     "Oberlin",   "Petrov",   "Quimby",   "Rasmussen",
                       "Sorensen", "Tikhonov",  "Ulanov",    "Vasquez",  "Weiss",    "Xanthos",
                       "Yamamoto", "Zeller",    "Arnesen",   "Brandt",   "Calloway", "Duarte",
                       "Engberg",  "Fontaine"};
const char* kCity[] = {"Arlburg",  "Bellmont", "Cresthaven", "Dunharrow", "Eastvale", "Fernwick",
                       "Grimsby",  "Halloway", "Ironfield",  "Jettstrom", "Kingsmere", "Larkspur",
                       "Mirefall", "Northgate", "Oakmund",   "Pellworth", "Quarryton", "Ridgeway",
                       "Stonebrook", "Thornfield", "Umberton", "Vexford", "Westmoor", "Yarrowdale",
                       "Zephyrine", "Ashcombe", "Briarton",  "Coldwater", "Drayfield", "Elmsworth",
                       "Foxgrove", "Glenmoor"};
const char* kOrg[] = {"Apex Dynamics",     "Blue Harbor Group", "Cinder Labs",
                      "Dorian Industries", "Everline Council",  "Fathom Institute",
                      "Gildart Union",     "Helix Bureau",      "Ionwave Partners",
                      "Juniper Assembly",  "Keystone Forum",    "Lumen Collective",
                      "Meridian Trust",    "Norbright Agency",  "Obsidian Works",
                      "Pinnacle Syndicate", "Quorum Society",   "Riverstone Board",
                      "Solstice Network",  "Tidewater Guild",   "Umbra Foundation",
                      "Vantage Alliance",  "Westwind Chamber",  "Zenith Consortium"};
const char* kVerb[] = {"announced", "unveiled",  "halted",    "expanded",  "approved",
                       "condemned", "launched",  "suspended", "restored",  "inspected",
                       "acquired",  "dismantled", "financed", "relocated", "audited",
                       "endorsed",  "rejected",  "postponed", "celebrated", "surveyed",
                       "renovated", "organized", "disputed",  "commissioned"};
const char* kObject[] = {"water treatment plant", "railway terminal",   "grain cooperative",
                         "research observatory",  "harbor expansion",   "textile works",
                         "irrigation canal",      "power substation",   "heritage archive",
                         "bridge retrofit",       "glass foundry",      "mountain tramway",
                         "vaccine depot",         "timber reserve",     "solar array",
                         "flood barrier",         "customs office",     "printing house",
                         "fish hatchery",         "telegraph line",     "stone quarry",
                         "opera pavilion",        "weather station",    "mill complex"};
const char* kAdj[] = {"ambitious", "controversial", "long-delayed", "historic",
                      "modernized", "abandoned",    "celebrated",   "disputed",
                      "newly built", "aging",       "experimental", "landmark",
                      "regional",  "oversized",     "restored",     "prominent"};
const char* kMonth[] = {"January", "February", "March",     "April",   "May",      "June",
                        "July",    "August",   "September", "October", "November", "December"};
const char* kUnit[] = {"tonnes",   "hectares", "crates",  "barrels", "shipments",
                       "carriages", "pallets", "bushels", "cisterns", "convoys"};

template <size_t N>
const char* pick(Rng& rng, const char* (&pool)[N]) {
  return pool[rng.below(N)];
}

// Entities are drawn once per document and reused across its sentences, the
// way a news item keeps referring to the same people and places. That gives
// the language model a reason to attend far back in the context.
struct DocCast {
  const char* first;
  const char* last;
  const char* city;
  const char* org;

  explicit DocCast(Rng& rng)
      : first(pick(rng, kFirst)),
        last(pick(rng, kLast)),
        city(pick(rng, kCity)),
        org(pick(rng, kOrg)) {}
};

std::string make_sentence(Rng& rng, const DocCast& cast) {
  std::ostringstream s;
  switch (rng.below(6)) {
    case 0:
      s << "On " << (1 + rng.below(28)) << " " << pick(rng, kMonth) << " "
        << (1990 + rng.below(41)) << ", " << cast.first << " " << cast.last << " "
        << pick(rng, kVerb) << " the " << pick(rng, kAdj) << " " << pick(rng, kObject) << " in "
        << cast.city << ". ";
      break;
    case 1:
      s << cast.org << " " << pick(rng, kVerb) << " " << (1 + rng.below(999)) << " "
        << pick(rng, kUnit) << " for the " << pick(rng, kObject) << " near " << cast.city
        << ". ";
      break;
    case 2:
      s << "Officials in " << cast.city << " said " << cast.first << " " << cast.last << " "
        << pick(rng, kVerb) << " the " << pick(rng, kObject) << ". ";
      break;
    case 3:
      s << "The " << pick(rng, kAdj) << " " << pick(rng, kObject) << " in " << cast.city
        << " was " << pick(rng, kVerb) << " by " << cast.org << ". ";
      break;
    case 4:
      s << cast.first << " " << cast.last << " of " << cast.org << " " << pick(rng, kVerb)
        << " plans for " << (1 + rng.below(999)) << " " << pick(rng, kUnit) << ". ";
      break;
    default:
      s << "Reports from " << cast.city << " confirm " << cast.org << " " << pick(rng, kVerb)
        << " the " << pick(rng, kAdj) << " " << pick(rng, kObject) << ". ";
      break;
  }
  return s.str();
}

std::string make_doc(Rng& rng, int length, double noise_rate) {
  const DocCast cast(rng);
  std::string doc;
  while (static_cast<int>(doc.size()) < length) doc += make_sentence(rng, cast);
  doc.resize(static_cast<size_t>(length));
  if (noise_rate > 0.0) {
    for (auto& c : doc) {
      if (rng.uniform() < noise_rate) c = static_cast<char>(32 + rng.below(95));
    }
  }
  return doc;
}

// ------------------------------------------------------------ iso dates

bool valid_iso_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  for (size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u}) {
    if (s[i] < '0' || s[i] > '9') return false;
  }
  const int month = (s[5] - '0') * 10 + (s[6] - '0');
  const int day = (s[8] - '0') * 10 + (s[9] - '0');
  return month >= 1 && month <= 12 && day >= 1 && day <= 31;
}

std::string require_iso_date(const std::string& s, const std::string& what) {
  if (!valid_iso_date(s)) {
    fail(ErrorClass::domain_error, what + ": not an ISO-8601 date: '" + s + "'");
  }
  return s;
}

}  // namespace

BenchmarkSplit generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
  if (spec.docs_per_class < 1) {
    fail(ErrorClass::config_invalid, "synthetic corpus: docs_per_class must be >= 1");
  }
  if (spec.doc_length < 8) {
    fail(ErrorClass::config_invalid, "synthetic corpus: doc_length must be >= 8");
  }
  if (spec.noise_rate < 0.0 || spec.noise_rate >= 1.0) {
    fail(ErrorClass::config_invalid, "synthetic corpus: noise_rate must be in [0, 1)");
  }

  Rng rng(derive_seed(spec.seed, "synthetic_corpus"));
  std::set<std::string> seen;
  auto draw_unique = [&]() {
    for (int attempt = 0; attempt < 100; ++attempt) {
      std::string doc = make_doc(rng, spec.doc_length, spec.noise_rate);
      if (seen.insert(doc).second) return doc;
    }
    fail(ErrorClass::internal_error, "synthetic corpus: duplicate documents persist; "
                                     "increase entropy (doc_length or pools)");
  };

  BenchmarkSplit split;
  // One generator stream for both pools keeps them distributionally identical.
  for (int i = 0; i < spec.docs_per_class; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "syn-m-%04d", i);
    split.members.push_back({draw_unique(), 1, std::nullopt, id});
  }
  for (int i = 0; i < spec.docs_per_class; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "syn-n-%04d", i);
    split.non_members.push_back({draw_unique(), 0, std::nullopt, id});
  }
  reset_eval_full(split);
  return split;
}

std::vector<std::string> generate_heldout_docs(const SyntheticCorpusSpec& spec, int count,
                                               uint64_t stream_offset) {
  Rng rng(derive_seed(spec.seed, "synthetic_heldout", stream_offset));
  std::vector<std::string> docs;
  docs.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) docs.push_back(make_doc(rng, spec.doc_length, spec.noise_rate));
  return docs;
}

std::vector<TextRecord> load_jsonl(const std::string& path, bool require_label) {
  const std::string content = read_file(path);
  std::vector<TextRecord> records;
  std::istringstream in(content);
  std::string line;
  size_t line_no = 0;
  std::string stem = path;
  if (const size_t slash = stem.find_last_of('/'); slash != std::string::npos) {
    stem = stem.substr(slash + 1);
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj = json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) {
      fail(ErrorClass::domain_error,
           path + ": malformed JSON at line " + std::to_string(line_no));
    }
    TextRecord rec;
    if (!obj.contains("input") || !obj["input"].is_string()) {
      fail(ErrorClass::domain_error,
           path + ": line " + std::to_string(line_no) + " missing string field 'input'");
    }
    rec.text = obj["input"].get<std::string>();
    if (rec.text.empty()) {
      fail(ErrorClass::domain_error, path + ": line " + std::to_string(line_no) + " empty text");
    }
    if (obj.contains("label")) {
      if (!obj["label"].is_number_integer()) {
        fail(ErrorClass::domain_error,
             path + ": line " + std::to_string(line_no) + " label must be an integer");
      }
      const int label = obj["label"].get<int>();
      if (label != 0 && label != 1) {
        fail(ErrorClass::domain_error, path + ": line " + std::to_string(line_no) +
                                           " unknown label value " + std::to_string(label));
      }
      rec.label = label;
    } else if (require_label) {
      fail(ErrorClass::domain_error,
           path + ": line " + std::to_string(line_no) + " missing field 'label'");
    }
    if (obj.contains("timestamp")) {
      if (!obj["timestamp"].is_string()) {
        fail(ErrorClass::domain_error,
             path + ": line " + std::to_string(line_no) + " timestamp must be a string");
      }
      rec.timestamp = require_iso_date(obj["timestamp"].get<std::string>(),
                                       path + ": line " + std::to_string(line_no));
    }
    rec.id = stem + ":" + std::to_string(line_no);
    records.push_back(std::move(rec));
  }
  return records;
}

void save_jsonl(const std::vector<TextRecord>& records, const std::string& path) {
  std::ostringstream out;
  for (const auto& rec : records) {
    json obj;
    obj["input"] = rec.text;
    obj["label"] = rec.label;
    if (rec.timestamp) obj["timestamp"] = *rec.timestamp;
    out << obj.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

CutoffResult split_by_cutoff(const std::vector<TextRecord>& records,
                             const std::string& cutoff_date,
                             const std::string& member_creation_bound) {
  require_iso_date(cutoff_date, "cutoff_date");
  require_iso_date(member_creation_bound, "member_creation_bound");
  std::string missing;
  for (const auto& rec : records) {
    if (!rec.timestamp) missing += missing.empty() ? rec.id : ", " + rec.id;
  }
  if (!missing.empty()) {
    fail(ErrorClass::domain_error, "split_by_cutoff: records missing timestamps: " + missing);
  }

  CutoffResult result;
  for (const auto& rec : records) {
    TextRecord labeled = rec;
    // ISO-8601 dates order lexicographically; bounds themselves are excluded.
    if (*rec.timestamp < member_creation_bound) {
      labeled.label = 1;
      result.split.members.push_back(std::move(labeled));
    } else if (*rec.timestamp > cutoff_date) {
      labeled.label = 0;
      result.split.non_members.push_back(std::move(labeled));
    } else {
      ++result.excluded;
    }
  }
  reset_eval_full(result.split);
  return result;
}

void sample_tuning_set(BenchmarkSplit& split, int n_member, int n_non_member, uint64_t seed) {
  if (n_member < 0 || n_non_member < 0) {
    fail(ErrorClass::config_invalid, "sample_tuning_set: negative counts");
  }
  if (static_cast<size_t>(n_member) > split.members.size() ||
      static_cast<size_t>(n_non_member) > split.non_members.size()) {
    fail(ErrorClass::domain_error,
         "sample_tuning_set: pool too small: need " + std::to_string(n_member) + "/" +
             std::to_string(n_non_member) + " from " + std::to_string(split.members.size()) +
             "/" + std::to_string(split.non_members.size()));
  }
  Rng rng(derive_seed(seed, "tuning_sample"));
  auto draw = [&](size_t pool, size_t n, std::vector<size_t>& tuning, std::vector<size_t>& eval) {
    tuning = rng.sample_without_replacement(pool, n);
    std::sort(tuning.begin(), tuning.end());
    eval.clear();
    size_t t = 0;
    for (size_t i = 0; i < pool; ++i) {
      if (t < tuning.size() && tuning[t] == i) {
        ++t;
      } else {
        eval.push_back(i);
      }
    }
  };
  draw(split.members.size(), static_cast<size_t>(n_member), split.tuning_member_idx,
       split.eval_member_idx);
  draw(split.non_members.size(), static_cast<size_t>(n_non_member), split.tuning_non_member_idx,
       split.eval_non_member_idx);
}

void cap_eval_set(BenchmarkSplit& split, int per_class, uint64_t seed) {
  if (per_class <= 0) fail(ErrorClass::config_invalid, "cap_eval_set: per_class must be > 0");
  Rng rng(derive_seed(seed, "eval_cap"));
  auto cap = [&](std::vector<size_t>& eval) {
    if (eval.size() <= static_cast<size_t>(per_class)) return;
    auto chosen = rng.sample_without_replacement(eval.size(), static_cast<size_t>(per_class));
    std::sort(chosen.begin(), chosen.end());
    std::vector<size_t> capped;
    capped.reserve(chosen.size());
    for (size_t c : chosen) capped.push_back(eval[c]);
    eval = std::move(capped);
  };
  cap(split.eval_member_idx);
  cap(split.eval_non_member_idx);
}

}  // namespace mia
