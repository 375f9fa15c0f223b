#include "mia/checkpoint.hpp"

#include <cstring>

#include <nlohmann/json.hpp>

#include "mia/common.hpp"

namespace mia {

using nlohmann::json;

namespace {

constexpr char kModelMagic[8] = {'M', 'I', 'A', 'C', 'K', 'P', 'T', '1'};
constexpr char kPromptMagic[8] = {'M', 'I', 'A', 'P', 'R', 'M', 'T', '1'};

// Parameter blobs are stored as raw IEEE-754 doubles, little-endian. The
// workbench targets little-endian hosts; a byte-order check guards the rest.
static_assert(sizeof(double) == 8);

std::string pack_doubles(const std::vector<double>& v) {
  std::string out(v.size() * 8, '\0');
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

void unpack_doubles(std::string_view bytes, std::vector<double>& out) {
  if (bytes.size() != out.size() * 8) {
    fail(ErrorClass::io_error, "checkpoint blob size mismatch");
  }
  std::memcpy(out.data(), bytes.data(), bytes.size());
}

std::string with_header(const char magic[8], const json& header, const std::string& blob) {
  const std::string h = header.dump();
  std::string out;
  out.reserve(8 + 8 + h.size() + blob.size());
  out.append(magic, 8);
  uint64_t hlen = h.size();
  char lenbuf[8];
  std::memcpy(lenbuf, &hlen, 8);
  out.append(lenbuf, 8);
  out += h;
  out += blob;
  return out;
}

json parse_header(const std::string& bytes, const char magic[8], std::string_view what,
                  size_t& blob_offset) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), magic, 8) != 0) {
    fail(ErrorClass::io_error, std::string(what) + ": bad magic or truncated file");
  }
  uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (16 + hlen > bytes.size()) {
    fail(ErrorClass::io_error, std::string(what) + ": truncated header");
  }
  json header = json::parse(bytes.substr(16, hlen), nullptr, false);
  if (header.is_discarded()) {
    fail(ErrorClass::io_error, std::string(what) + ": unparsable header");
  }
  blob_offset = 16 + hlen;
  return header;
}

}  // namespace

void save_checkpoint(const TransformerLM& model, const std::string& path) {
  const auto& cfg = model.config();
  json header;
  header["config"] = {{"d_model", cfg.d_model},
                      {"n_layers", cfg.n_layers},
                      {"n_heads", cfg.n_heads},
                      {"context_length", cfg.context_length},
                      {"seed", cfg.seed}};
  json manifest = json::array();
  std::string blob;
  const auto& params = model.parameters();
  const auto& names = model.parameter_names();
  for (size_t i = 0; i < params.size(); ++i) {
    manifest.push_back({{"name", names[i]}, {"shape", params[i].shape()}});
    blob += pack_doubles(params[i].values());
  }
  header["params"] = std::move(manifest);
  write_file_atomic(path, with_header(kModelMagic, header, blob));
}

TransformerLM load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  size_t offset = 0;
  json header = parse_header(bytes, kModelMagic, "checkpoint " + path, offset);

  ModelConfig cfg;
  const auto& jc = header.at("config");
  cfg.d_model = jc.at("d_model").get<int64_t>();
  cfg.n_layers = jc.at("n_layers").get<int64_t>();
  cfg.n_heads = jc.at("n_heads").get<int64_t>();
  cfg.context_length = jc.at("context_length").get<int64_t>();
  cfg.seed = jc.at("seed").get<uint64_t>();

  TransformerLM model(cfg);
  auto& params = model.parameters();
  const auto& names = model.parameter_names();
  const auto& manifest = header.at("params");
  if (manifest.size() != params.size()) {
    fail(ErrorClass::io_error, "checkpoint " + path + ": manifest has " +
                                   std::to_string(manifest.size()) + " entries, model needs " +
                                   std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    if (entry.at("name").get<std::string>() != names[i]) {
      fail(ErrorClass::io_error, "checkpoint " + path + ": parameter order mismatch at " +
                                     names[i]);
    }
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != params[i].shape()) {
      fail(ErrorClass::io_error,
           "checkpoint " + path + ": shape mismatch for " + names[i] + ": file " +
               shape_str(shape) + " vs model " + shape_str(params[i].shape()));
    }
    const size_t n = params[i].values().size() * 8;
    if (offset + n > bytes.size()) {
      fail(ErrorClass::io_error, "checkpoint " + path + ": truncated blob");
    }
    unpack_doubles(std::string_view(bytes).substr(offset, n), params[i].values());
    offset += n;
  }
  if (offset != bytes.size()) {
    fail(ErrorClass::io_error, "checkpoint " + path + ": trailing bytes");
  }
  return model;
}

void save_prompt(const PromptArtifact& artifact, const std::string& path) {
  json header;
  header["mode"] = artifact.mode;
  header["n_p"] = artifact.prompt.length();
  header["d_model"] = artifact.d_model;
  header["seed"] = artifact.seed;
  header["config_hash"] = artifact.config_hash;
  std::string blob;
  if (artifact.prompt.length() > 0) blob = pack_doubles(artifact.prompt.embeddings.values());
  write_file_atomic(path, with_header(kPromptMagic, header, blob));
}

PromptArtifact load_prompt(const std::string& path) {
  const std::string bytes = read_file(path);
  size_t offset = 0;
  json header = parse_header(bytes, kPromptMagic, "prompt artifact " + path, offset);

  PromptArtifact artifact;
  artifact.mode = header.at("mode").get<std::string>();
  artifact.seed = header.at("seed").get<uint64_t>();
  artifact.config_hash = header.at("config_hash").get<uint64_t>();
  artifact.d_model = header.at("d_model").get<int64_t>();
  const int64_t n_p = header.at("n_p").get<int64_t>();
  artifact.prompt = SoftPrompt::zeros(n_p, artifact.d_model);
  if (n_p > 0) {
    const size_t n = artifact.prompt.embeddings.values().size() * 8;
    if (offset + n != bytes.size()) {
      fail(ErrorClass::io_error, "prompt artifact " + path + ": blob size mismatch");
    }
    unpack_doubles(std::string_view(bytes).substr(offset, n),
                   artifact.prompt.embeddings.values());
  }
  return artifact;
}

}  // namespace mia
