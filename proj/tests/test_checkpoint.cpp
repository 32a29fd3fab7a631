#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sinkattn/checkpoint.hpp"
#include "sinkattn/config.hpp"
#include "sinkattn/rng.hpp"

using namespace sinkattn;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 24;
  c.seed = 41;
  return c;
}

std::string temp_path(const char* name) {
  return (fs::temp_directory_path() / name).string();
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (int& v : t) v = static_cast<int>(rng.next_below(vocab));
  return t;
}

}  // namespace

TEST_SUITE_BEGIN("checkpoint");

TEST_CASE("save, load, save is byte-identical") {
  DecoderModel m = init_model(tiny_config());
  const std::string p1 = temp_path("ck_roundtrip_1.bin");
  const std::string p2 = temp_path("ck_roundtrip_2.bin");
  save_checkpoint(p1, m);
  LoadedCheckpoint loaded = load_checkpoint(p1);
  save_checkpoint(p2, loaded.model);
  CHECK(read_file(p1) == read_file(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("loading under a mismatched config fails loudly") {
  DecoderModel m = init_model(tiny_config());
  const std::string path = temp_path("ck_mismatch.bin");
  save_checkpoint(path, m);
  ModelConfig other = tiny_config();
  other.n_layers = 1;
  CHECK_THROWS_AS(load_checkpoint(path, other), ConfigError);
  CHECK_NOTHROW(load_checkpoint(path, tiny_config()));
  std::remove(path.c_str());
}

TEST_CASE("missing file raises an i/o error") {
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/checkpoint.bin"), IoError);
}

TEST_CASE("adapters round-trip in the same container") {
  DecoderModel m = init_model(tiny_config());
  TrainabilityPolicy policy;
  policy.embeddings = false;
  attach_lora(m, "qv", 4, 16.0, policy, 5);
  Rng rng(6);
  for (auto& layer : m.layers) {
    for (double& v : layer.wq.adapter->b.vec()) v = 0.25 * rng.next_normal();
  }
  const std::string path = temp_path("ck_lora.bin");
  save_checkpoint(path, m);
  LoadedCheckpoint loaded = load_checkpoint(path);
  REQUIRE(has_lora(loaded.model));
  CHECK(loaded.model.layers[0].wq.adapter->rank == 4);
  CHECK(loaded.model.layers[0].wq.adapter->alpha == 16.0);
  CHECK_FALSE(loaded.model.layers[0].wk.adapter.has_value());
  CHECK_FALSE(loaded.model.embedding.requires_grad());
  CHECK(loaded.model.final_norm.requires_grad());
  // float32 storage is exactly reproduced on a second load
  LoadedCheckpoint again = load_checkpoint(path);
  CHECK(again.model.layers[1].wq.adapter->b.vec() == loaded.model.layers[1].wq.adapter->b.vec());
  std::remove(path.c_str());
}

TEST_CASE("optimizer state resumes training close to an uninterrupted run") {
  const auto run_losses = [](std::size_t from, std::size_t to, DecoderModel& m, AdamState& opt) {
    std::vector<double> losses;
    for (std::size_t s = from; s < to; ++s) {
      std::vector<std::vector<int>> batch = {random_tokens(24, 32, 900 + s)};
      losses.push_back(train_step(m, batch, AttnMode::full_causal(2), opt, 1e-3));
    }
    return losses;
  };

  DecoderModel uninterrupted = init_model(tiny_config());
  AdamState opt_a;
  run_losses(0, 5, uninterrupted, opt_a);
  const std::vector<double> tail = run_losses(5, 10, uninterrupted, opt_a);

  DecoderModel first = init_model(tiny_config());
  AdamState opt_b;
  run_losses(0, 5, first, opt_b);
  const std::string path = temp_path("ck_resume.bin");
  save_checkpoint(path, first, &opt_b);
  LoadedCheckpoint resumed = load_checkpoint(path);
  REQUIRE(resumed.has_optimizer);
  CHECK(resumed.opt.step == 5);
  const std::vector<double> resumed_tail = run_losses(5, 10, resumed.model, resumed.opt);

  // float32 quantization at the save point bounds the divergence
  for (std::size_t i = 0; i < tail.size(); ++i) {
    CHECK(std::abs(tail[i] - resumed_tail[i]) < 1e-3 * (1.0 + std::abs(tail[i])));
  }
  std::remove(path.c_str());
}

TEST_CASE("experiment config round-trips through json unchanged") {
  ExperimentConfig cfg;
  cfg.model = tiny_config();
  cfg.attn = AttnMode::roll_based(8);
  cfg.training.steps = 12;
  cfg.training.data.kind = "copy_task";
  cfg.out_dir = "results";
  const std::string dumped = experiment_config_to_json(cfg).dump(2);
  const ExperimentConfig parsed = experiment_config_from_json(nlohmann::json::parse(dumped));
  CHECK(experiment_config_to_json(parsed).dump(2) == dumped);
}

TEST_CASE("partial configs resolve with defaults, bad configs throw") {
  const auto cfg = experiment_config_from_json(nlohmann::json::parse(R"({
    "model": {"vocab_size": 64, "d_model": 32, "n_heads": 4, "n_layers": 1, "d_ff": 32},
    "attn": {"kind": "mask", "pattern": {"kind": "sink_fixed", "group_size": 16, "num_sink": 4}}
  })"));
  CHECK(cfg.model.vocab_size == 64);
  CHECK(cfg.training.steps == 200);  // defaulted
  CHECK(cfg.attn.heads.pattern_per_half.first.kind == PatternKind::SinkFixed);

  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(
                      R"({"model": {"n_heads": 3}})")),
                  ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(
                      R"({"attn": {"kind": "warp"}})")),
                  ConfigError);
  CHECK_THROWS_AS(
      experiment_config_from_json(nlohmann::json::parse(R"({"eval": {"stride": 0}})")),
      ConfigError);
}

TEST_CASE("pattern specs and policies parse by name") {
  PatternSpec spec;
  spec.kind = PatternKind::Stride;
  spec.stride = 3;
  spec.group_size = 2;
  CHECK(pattern_spec_from_json(pattern_spec_to_json(spec)) == spec);
  CHECK_THROWS_AS(pattern_kind_from_name("diagonal"), ConfigError);
  CHECK(policy_kind_from_name("h2o") == PolicyKind::H2O);
  CHECK_THROWS_AS(policy_kind_from_name("lru"), ConfigError);
}

TEST_SUITE_END();
