#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mia/common.hpp"
#include "mia/config.hpp"

using namespace mia;
namespace fs = std::filesystem;

namespace {

#ifndef MIABENCH_BIN
#error "MIABENCH_BIN must point at the CLI binary"
#endif

struct RunResult {
  int exit_code;
  std::string stderr_text;
};

RunResult run_cli(const std::string& args) {
  const std::string err_path = "/tmp/mia_cli_stderr.txt";
  const std::string cmd =
      std::string(MIABENCH_BIN) + " " + args + " >/dev/null 2>" + err_path;
  const int rc = std::system(cmd.c_str());
  std::ifstream err(err_path);
  std::string text((std::istreambuf_iterator<char>(err)), std::istreambuf_iterator<char>());
  return {WEXITSTATUS(rc), text};
}

std::string write_config(const std::string& dir) {
  nlohmann::json j = {
      {"seed", 7},
      {"out_dir", dir + "/run"},
      {"dataset",
       {{"docs_per_class", 24}, {"doc_length", 48}, {"tuning_members", 6},
        {"tuning_non_members", 6}, {"eval_per_class", 16}, {"heldout_docs", 8}}},
      {"model",
       {{"d_model", 32}, {"n_layers", 1}, {"n_heads", 2}, {"context_length", 160},
        {"train_epochs", 3}, {"aligned", {{"enabled", false}}}, {"train_smaller_ref", false}}},
      {"attack", {{"epochs", 2}, {"batch_size", 8}}},
      {"evaluation", {{"methods", {"ppl", "tuned_unaligned"}}}},
  };
  const std::string path = dir + "/config.json";
  write_file_atomic(path, j.dump(2));
  return path;
}

}  // namespace

TEST_CASE("full small pipeline succeeds and is byte-deterministic") {
  const std::string dir = "/tmp/mia_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg = write_config(dir);

  CHECK(run_cli("gen-data --config " + cfg).exit_code == 0);
  CHECK(run_cli("train-lm --config " + cfg).exit_code == 0);
  CHECK(run_cli("tune-attack --config " + cfg).exit_code == 0);
  CHECK(run_cli("evaluate --config " + cfg).exit_code == 0);

  auto report = nlohmann::json::parse(read_file(dir + "/run/report.json"));
  CHECK(report["methods"].size() == 2);
  CHECK(report["methods"].contains("ppl"));
  CHECK(report["metadata"]["config"]["seed"] == 7);

  SUBCASE("rerunning a subcommand reproduces primary artifacts byte for byte") {
    const uint64_t model_hash = fnv1a64_file(dir + "/run/model.ckpt");
    const uint64_t prompt_hash = fnv1a64_file(dir + "/run/prompt_unaligned.bin");
    const std::string dataset = read_file(dir + "/run/dataset.jsonl");
    CHECK(run_cli("gen-data --config " + cfg).exit_code == 0);
    CHECK(run_cli("train-lm --config " + cfg).exit_code == 0);
    CHECK(run_cli("tune-attack --config " + cfg).exit_code == 0);
    CHECK(read_file(dir + "/run/dataset.jsonl") == dataset);
    CHECK(fnv1a64_file(dir + "/run/model.ckpt") == model_hash);
    CHECK(fnv1a64_file(dir + "/run/prompt_unaligned.bin") == prompt_hash);

    const auto before = nlohmann::json::parse(read_file(dir + "/run/report.json"));
    CHECK(run_cli("evaluate --config " + cfg).exit_code == 0);
    auto after = nlohmann::json::parse(read_file(dir + "/run/report.json"));
    // identical modulo timing
    auto a = before, b = after;
    a["metadata"].erase("timing");
    b["metadata"].erase("timing");
    CHECK(a == b);
  }
}

TEST_CASE("evaluate on a missing checkpoint reports the error class") {
  const std::string dir = "/tmp/mia_cli_missing";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg = write_config(dir);
  CHECK(run_cli("gen-data --config " + cfg).exit_code == 0);
  RunResult r = run_cli("evaluate --config " + cfg);
  CHECK(r.exit_code != 0);
  CHECK(r.stderr_text.find("error_class=missing_artifact") != std::string::npos);
}

TEST_CASE("unknown config keys are rejected with the offending path") {
  const std::string dir = "/tmp/mia_cli_badcfg";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_file_atomic(dir + "/bad.json", R"({"seed": 1, "attack": {"learning_rate": 0.1}})");
  RunResult r = run_cli("gen-data --config " + dir + "/bad.json");
  CHECK(r.exit_code != 0);
  CHECK(r.stderr_text.find("error_class=config_invalid") != std::string::npos);
  CHECK(r.stderr_text.find("attack.learning_rate") != std::string::npos);
}

TEST_CASE("dotted overrides reach nested keys and bad paths fail") {
  RunConfig cfg;
  cfg.apply_override("attack.lr=0.01");
  CHECK(cfg.attack.lr == 0.01);
  cfg.apply_override("model.aligned.enabled=false");
  CHECK_FALSE(cfg.model.aligned.enabled);
  cfg.apply_override("template.system_text=Short.");
  CHECK(cfg.chat_template.system_text == "Short.");
  CHECK_THROWS_AS(cfg.apply_override("attack.nope=1"), Error);
  CHECK_THROWS_AS(cfg.apply_override("no-equals-sign"), Error);
}

TEST_CASE("split-cutoff labels a timestamped file and reports counts") {
  const std::string dir = "/tmp/mia_cli_cutoff";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_file_atomic(dir + "/in.jsonl",
                    "{\"input\":\"old article\",\"timestamp\":\"2016-05-01\"}\n"
                    "{\"input\":\"new event\",\"timestamp\":\"2024-05-01\"}\n"
                    "{\"input\":\"middle\",\"timestamp\":\"2020-01-01\"}\n");
  RunResult r = run_cli("split-cutoff --input " + dir + "/in.jsonl --output " + dir +
                        "/out.jsonl");
  CHECK(r.exit_code == 0);
  auto labeled = load_jsonl(dir + "/out.jsonl");
  REQUIRE(labeled.size() == 2);
  CHECK(labeled[0].label == 1);
  CHECK(labeled[0].text == "old article");
  CHECK(labeled[1].label == 0);
}
