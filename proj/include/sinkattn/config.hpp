#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "sinkattn/kvcache.hpp"
#include "sinkattn/masks.hpp"
#include "sinkattn/model.hpp"

namespace sinkattn {

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json pattern_spec_to_json(const PatternSpec& s);
PatternSpec pattern_spec_from_json(const nlohmann::json& j);

nlohmann::json attn_mode_to_json(const AttnMode& m);
AttnMode attn_mode_from_json(const nlohmann::json& j, std::size_t n_heads);

// Where training/eval tokens come from.
struct DataSpec {
  std::string kind = "synthetic";  // synthetic | file | copy_task
  std::uint64_t seed = 1;
  std::size_t bytes = 1 << 18;     // synthetic corpus size
  std::string path;                // file
  std::size_t prefix_len = 16;     // copy_task
  std::size_t filler_len = 48;     // copy_task

  bool operator==(const DataSpec&) const = default;
};

struct TrainingConfig {
  std::size_t steps = 200;
  double lr = 3e-4;
  std::size_t warmup = 20;
  std::size_t batch = 1;
  std::size_t seq_len = 128;
  std::uint64_t seed = 0;
  DataSpec data;
  bool lora_enabled = false;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  std::string lora_targets = "qkvo";
  bool train_embeddings = true;
  bool train_norms = true;

  bool operator==(const TrainingConfig&) const = default;
};

struct EvalConfig {
  std::vector<std::size_t> context_lengths = {128};
  std::size_t stride = 64;

  bool operator==(const EvalConfig&) const = default;
};

struct PasskeyConfig {
  std::vector<std::size_t> m_values = {0, 1, 2};
  std::vector<std::size_t> n_values = {0, 1, 2};
  std::size_t trials = 5;
  std::uint64_t seed = 7;

  bool operator==(const PasskeyConfig&) const = default;
};

struct KvBenchConfig {
  std::vector<std::string> policies = {"full", "local", "h2o", "sink"};
  std::vector<std::size_t> budgets_pct = {50, 75, 100};
  std::size_t num_sink = 4;
  double recent_frac = 0.5;  // H2O: share of the budget kept as recents
  std::size_t n_prompts = 4;
  std::size_t gen_len = 16;
  DataSpec prompts{.kind = "copy_task", .seed = 11};

  bool operator==(const KvBenchConfig&) const = default;
};

struct ExperimentConfig {
  ModelConfig model;
  AttnMode attn = AttnMode::full_causal(8);
  TrainingConfig training;
  EvalConfig eval;
  PasskeyConfig passkey;
  KvBenchConfig kv_bench;
  std::string out_dir = "out";

  void validate() const;
};

nlohmann::json experiment_config_to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

ExperimentConfig load_experiment_config(const std::string& path);

// Token supply for training/eval per the data spec (byte tokens for text
// kinds, synthetic ids for copy_task).
std::vector<int> load_tokens(const DataSpec& data, std::size_t vocab_size);

}  // namespace sinkattn
