#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "mia/common.hpp"
#include "mia/datasets.hpp"
#include "mia/defense.hpp"
#include "mia/model.hpp"
#include "mia/rng.hpp"
#include "mia/tuner.hpp"

using namespace mia;

namespace {

ContrastiveBatch batch_from_values(const std::vector<double>& members,
                                   const std::vector<double>& non_members) {
  ContrastiveBatch b;
  for (double v : members) b.member_losses.push_back(Tensor::scalar(v));
  for (double v : non_members) b.non_member_losses.push_back(Tensor::scalar(v));
  return b;
}

struct Fixture {
  BenchmarkSplit split;
  TransformerLM model;
  ChatTemplate tmpl;
  std::vector<std::string> heldout;

  Fixture() {
    SyntheticCorpusSpec spec{.seed = 61, .docs_per_class = 24, .doc_length = 72,
                             .noise_rate = 0.01};
    split = generate_synthetic_corpus(spec);
    ModelConfig cfg{.d_model = 32, .n_layers = 2, .n_heads = 2, .context_length = 200,
                    .seed = 61};
    TrainConfig tc{.epochs = 20, .batch_size = 12, .lr = 1.5e-3, .seed = 61, .max_tokens = 72};
    model = train_lm(split.member_texts(), cfg, tc);
    sample_tuning_set(split, 12, 12, 61);
    heldout = generate_heldout_docs(spec, 12);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("equal-loss batches are the defense fixed point") {
  for (size_t n : {2, 4, 8}) {
    ContrastiveBatch b =
        batch_from_values(std::vector<double>(n, 2.2), std::vector<double>(n, 2.2));
    CHECK(defense_loss_unaligned(b, 10.0, DistanceMode::absolute).item() < 1e-9);
    ContrastiveBatch b2 =
        batch_from_values(std::vector<double>(n, 2.2), std::vector<double>(n, 2.2));
    CHECK(defense_loss_unaligned(b2, 10.0, DistanceMode::paper).item() < 1e-9);
  }
}

TEST_CASE("defense loss equals |L_ctr - log 3| on the enumeration fixture") {
  // anchors all evaluate to 1.0418064945218681; |1.0418... + log(1/3)|
  ContrastiveBatch b = batch_from_values({1.0, 1.0}, {3.0, 3.0});
  const double v = defense_loss_unaligned(b, 10.0, DistanceMode::absolute).item();
  CHECK(std::fabs(v - 0.05680579414624165) < 1e-10);
}

TEST_CASE("defense loss is non-negative on random batches") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> lm(4), ln(4);
    for (auto& v : lm) v = rng.uniform(0.0, 8.0);
    for (auto& v : ln) v = rng.uniform(0.0, 8.0);
    ContrastiveBatch b = batch_from_values(lm, ln);
    CHECK(defense_loss_unaligned(b, 10.0, DistanceMode::absolute).item() >= 0.0);
  }
}

TEST_CASE("aligned defense loss matches its closed forms") {
  const auto& f = fixture();
  // A fresh model is uniform: P(YES)+P(NO) = 2/263, so the loss is
  // -log(261/263), frozen below.
  TransformerLM uniform(ModelConfig{.d_model = 32, .n_layers = 1, .n_heads = 2,
                                    .context_length = 200, .seed = 3});
  const double v = defense_loss_aligned(uniform, f.tmpl, "abc").item();
  CHECK(v == doctest::Approx(0.007633624855071095).epsilon(1e-9));

  SUBCASE("loss shrinks as P(others) grows") {
    // -log P(others) is monotone: 0.5 -> log 2, 1.0 -> 0.
    CHECK(-std::log(0.5) == doctest::Approx(0.69314718055994529).epsilon(1e-15));
  }
  SUBCASE("gradient through the softmax passes finite differences") {
    TransformerLM model = f.model.clone();
    auto params = model.last_block_parameters();
    Tensor bias = params[params.size() - 2];  // final norm bias, 32 elements
    bias.set_requires_grad(true);
    const std::string text = f.split.members[0].text.substr(0, 32);
    {
      Tape tape;
      tape.backward(defense_loss_aligned(model, f.tmpl, text));
    }
    auto rep = mia::testing::fd_compare(
        {bias}, [&]() { return defense_loss_aligned(model, f.tmpl, text).item(); });
    INFO("worst: ", rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("zero-epoch defense leaves the model unchanged with zero utility delta") {
  const auto& f = fixture();
  DefenseConfig cfg;
  cfg.epochs = 0;
  DefenseResult r = apply_defense(f.model, f.split, f.heldout, f.tmpl, cfg);
  for (size_t i = 0; i < f.model.parameters().size(); ++i) {
    REQUIRE(r.model.parameters()[i].values() == f.model.parameters()[i].values());
  }
  CHECK(r.utility.relative_increase == 0.0);
  CHECK_FALSE(r.utility.flagged);
}

TEST_CASE("defense is deterministic in its seed and does not touch the input model") {
  const auto& f = fixture();
  std::vector<std::vector<double>> before;
  for (const auto& p : f.model.parameters()) before.push_back(p.values());

  DefenseConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 21;
  DefenseResult a = apply_defense(f.model, f.split, f.heldout, f.tmpl, cfg);
  DefenseResult b = apply_defense(f.model, f.split, f.heldout, f.tmpl, cfg);
  for (size_t i = 0; i < a.model.parameters().size(); ++i) {
    REQUIRE(a.model.parameters()[i].values() == b.model.parameters()[i].values());
  }
  for (size_t i = 0; i < before.size(); ++i) {
    REQUIRE(f.model.parameters()[i].values() == before[i]);
  }
}

TEST_CASE("last-block restriction freezes the lower layers") {
  const auto& f = fixture();
  DefenseConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.last_block_only = true;
  DefenseResult r = apply_defense(f.model, f.split, f.heldout, f.tmpl, cfg);
  const auto& names = f.model.parameter_names();
  bool some_changed = false;
  for (size_t i = 0; i < names.size(); ++i) {
    const bool frozen = names[i].rfind("layer1.", 0) != 0 && names[i].rfind("lnf", 0) != 0 &&
                        names[i] != "w_out";
    if (frozen) {
      REQUIRE(r.model.parameters()[i].values() == f.model.parameters()[i].values());
    } else if (r.model.parameters()[i].values() != f.model.parameters()[i].values()) {
      some_changed = true;
    }
  }
  CHECK(some_changed);
}

TEST_CASE("aligned defense drains answer mass at the answer slot") {
  const auto& f = fixture();
  // Make the answer slot meaningful first: align the base model so it puts
  // real mass on YES/NO, then defend and watch the mass drop.
  TransformerLM aligned = f.model.clone();
  align_model_for_detection(aligned, f.heldout, f.tmpl,
                            {.epochs = 3, .batch_size = 8, .lr = 1e-3, .seed = 4});
  double mass_before = 0.0;
  for (int i = 0; i < 8; ++i) {
    auto d = answer_distribution(aligned, nullptr, f.tmpl, f.split.members[i].text);
    mass_before += d.p_yes + d.p_no;
  }
  DefenseConfig cfg;
  cfg.mode = DefenseMode::aligned_defense;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  DefenseResult r = apply_defense(aligned, f.split, f.heldout, f.tmpl, cfg);
  double mass_after = 0.0;
  for (int i = 0; i < 8; ++i) {
    auto d = answer_distribution(r.model, nullptr, f.tmpl, f.split.members[i].text);
    mass_after += d.p_yes + d.p_no;
  }
  CHECK(mass_after < mass_before);
}
