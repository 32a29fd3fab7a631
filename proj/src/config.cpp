#include "sinkattn/config.hpp"

#include <fstream>

#include "sinkattn/data.hpp"
#include "sinkattn/eval.hpp"

namespace sinkattn {

using nlohmann::json;

json model_config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_layers", c.n_layers},
              {"d_ff", c.d_ff},
              {"max_positions", c.max_positions},
              {"rope_theta", c.rope_theta},
              {"pos_interp_factor", c.pos_interp_factor},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig d;
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_positions = j.value("max_positions", d.max_positions);
  c.rope_theta = j.value("rope_theta", d.rope_theta);
  c.pos_interp_factor = j.value("pos_interp_factor", d.pos_interp_factor);
  c.seed = j.value("seed", d.seed);
  c.validate();
  return c;
}

json pattern_spec_to_json(const PatternSpec& s) {
  return json{{"kind", pattern_kind_name(s.kind)}, {"group_size", s.group_size},
              {"num_sink", s.num_sink},           {"stride", s.stride},
              {"random_k", s.random_k},           {"seed", s.seed}};
}

PatternSpec pattern_spec_from_json(const json& j) {
  PatternSpec s;
  s.kind = pattern_kind_from_name(j.value("kind", std::string("full_causal")));
  s.group_size = j.value("group_size", s.group_size);
  s.num_sink = j.value("num_sink", s.num_sink);
  s.stride = j.value("stride", s.stride);
  s.random_k = j.value("random_k", s.random_k);
  s.seed = j.value("seed", s.seed);
  return s;
}

json attn_mode_to_json(const AttnMode& m) {
  if (m.kind == AttnMode::Kind::RollBased) {
    return json{{"kind", "roll"}, {"group_size", m.group_size}};
  }
  json j{{"kind", "mask"}, {"pattern", pattern_spec_to_json(m.heads.pattern_per_half.first)}};
  if (!(m.heads.pattern_per_half.first == m.heads.pattern_per_half.second)) {
    j["pattern_second_half"] = pattern_spec_to_json(m.heads.pattern_per_half.second);
  }
  return j;
}

AttnMode attn_mode_from_json(const json& j, std::size_t n_heads) {
  const std::string kind = j.value("kind", std::string("mask"));
  if (kind == "roll") {
    const std::size_t w = j.value("group_size", std::size_t{0});
    if (w == 0) throw ConfigError("attn mode: roll mode needs group_size");
    return AttnMode::roll_based(w);
  }
  if (kind != "mask") throw ConfigError("attn mode: kind must be 'mask' or 'roll'");
  PatternSpec first;
  if (j.contains("pattern")) first = pattern_spec_from_json(j.at("pattern"));
  if (j.contains("pattern_second_half")) {
    return AttnMode::mask_based(HeadGroupAssignment::split(
        n_heads, first, pattern_spec_from_json(j.at("pattern_second_half"))));
  }
  return AttnMode::mask_based(first, n_heads);
}

namespace {

json data_spec_to_json(const DataSpec& d) {
  return json{{"kind", d.kind},           {"seed", d.seed},
              {"bytes", d.bytes},         {"path", d.path},
              {"prefix_len", d.prefix_len}, {"filler_len", d.filler_len}};
}

DataSpec data_spec_from_json(const json& j) {
  DataSpec def;
  DataSpec d;
  d.kind = j.value("kind", def.kind);
  d.seed = j.value("seed", def.seed);
  d.bytes = j.value("bytes", def.bytes);
  d.path = j.value("path", def.path);
  d.prefix_len = j.value("prefix_len", def.prefix_len);
  d.filler_len = j.value("filler_len", def.filler_len);
  if (d.kind != "synthetic" && d.kind != "file" && d.kind != "copy_task") {
    throw ConfigError("data spec: unknown kind '" + d.kind + "'");
  }
  return d;
}

json training_to_json(const TrainingConfig& t) {
  return json{{"steps", t.steps},
              {"lr", t.lr},
              {"warmup", t.warmup},
              {"batch", t.batch},
              {"seq_len", t.seq_len},
              {"seed", t.seed},
              {"data", data_spec_to_json(t.data)},
              {"lora", json{{"enabled", t.lora_enabled},
                            {"rank", t.lora_rank},
                            {"alpha", t.lora_alpha},
                            {"targets", t.lora_targets},
                            {"train_embeddings", t.train_embeddings},
                            {"train_norms", t.train_norms}}}};
}

TrainingConfig training_from_json(const json& j) {
  TrainingConfig def;
  TrainingConfig t;
  t.steps = j.value("steps", def.steps);
  t.lr = j.value("lr", def.lr);
  t.warmup = j.value("warmup", def.warmup);
  t.batch = j.value("batch", def.batch);
  t.seq_len = j.value("seq_len", def.seq_len);
  t.seed = j.value("seed", def.seed);
  if (j.contains("data")) t.data = data_spec_from_json(j.at("data"));
  if (j.contains("lora")) {
    const json& lj = j.at("lora");
    t.lora_enabled = lj.value("enabled", def.lora_enabled);
    t.lora_rank = lj.value("rank", def.lora_rank);
    t.lora_alpha = lj.value("alpha", def.lora_alpha);
    t.lora_targets = lj.value("targets", def.lora_targets);
    t.train_embeddings = lj.value("train_embeddings", def.train_embeddings);
    t.train_norms = lj.value("train_norms", def.train_norms);
  }
  return t;
}

json eval_to_json(const EvalConfig& e) {
  return json{{"context_lengths", e.context_lengths}, {"stride", e.stride}};
}

EvalConfig eval_from_json(const json& j) {
  EvalConfig def;
  EvalConfig e;
  e.context_lengths = j.value("context_lengths", def.context_lengths);
  e.stride = j.value("stride", def.stride);
  return e;
}

json passkey_to_json(const PasskeyConfig& p) {
  return json{{"m_values", p.m_values},
              {"n_values", p.n_values},
              {"trials", p.trials},
              {"seed", p.seed}};
}

PasskeyConfig passkey_from_json(const json& j) {
  PasskeyConfig def;
  PasskeyConfig p;
  p.m_values = j.value("m_values", def.m_values);
  p.n_values = j.value("n_values", def.n_values);
  p.trials = j.value("trials", def.trials);
  p.seed = j.value("seed", def.seed);
  return p;
}

json kv_bench_to_json(const KvBenchConfig& k) {
  return json{{"policies", k.policies},   {"budgets_pct", k.budgets_pct},
              {"num_sink", k.num_sink},   {"recent_frac", k.recent_frac},
              {"n_prompts", k.n_prompts}, {"gen_len", k.gen_len},
              {"prompts", data_spec_to_json(k.prompts)}};
}

KvBenchConfig kv_bench_from_json(const json& j) {
  KvBenchConfig def;
  KvBenchConfig k;
  k.policies = j.value("policies", def.policies);
  k.budgets_pct = j.value("budgets_pct", def.budgets_pct);
  k.num_sink = j.value("num_sink", def.num_sink);
  k.recent_frac = j.value("recent_frac", def.recent_frac);
  k.n_prompts = j.value("n_prompts", def.n_prompts);
  k.gen_len = j.value("gen_len", def.gen_len);
  if (j.contains("prompts")) k.prompts = data_spec_from_json(j.at("prompts"));
  for (const std::string& p : k.policies) policy_kind_from_name(p);
  return k;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (training.batch == 0) throw ConfigError("training: batch must be >= 1");
  if (training.seq_len < 2) throw ConfigError("training: seq_len must be >= 2");
  if (training.lr <= 0.0) throw ConfigError("training: lr must be positive");
  if (eval.stride == 0) throw ConfigError("eval: stride must be >= 1");
  for (std::size_t c : eval.context_lengths) {
    if (eval.stride > c) throw ConfigError("eval: stride exceeds a context length");
  }
  if (attn.kind == AttnMode::Kind::MaskBased) attn.heads.validate();
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

json experiment_config_to_json(const ExperimentConfig& c) {
  return json{{"model", model_config_to_json(c.model)},
              {"attn", attn_mode_to_json(c.attn)},
              {"training", training_to_json(c.training)},
              {"eval", eval_to_json(c.eval)},
              {"passkey", passkey_to_json(c.passkey)},
              {"kv_bench", kv_bench_to_json(c.kv_bench)},
              {"out_dir", c.out_dir}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  c.attn = j.contains("attn") ? attn_mode_from_json(j.at("attn"), c.model.n_heads)
                              : AttnMode::full_causal(c.model.n_heads);
  if (j.contains("training")) c.training = training_from_json(j.at("training"));
  if (j.contains("eval")) c.eval = eval_from_json(j.at("eval"));
  if (j.contains("passkey")) c.passkey = passkey_from_json(j.at("passkey"));
  if (j.contains("kv_bench")) c.kv_bench = kv_bench_from_json(j.at("kv_bench"));
  c.out_dir = j.value("out_dir", c.out_dir);
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return experiment_config_from_json(j);
}

std::vector<int> load_tokens(const DataSpec& data, std::size_t vocab_size) {
  if (data.kind == "synthetic") {
    return encode_bytes(generate_corpus_text(data.seed, data.bytes));
  }
  if (data.kind == "file") {
    std::ifstream is(data.path, std::ios::binary);
    if (!is) throw IoError("data: cannot open '" + data.path + "'");
    std::string text{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
    return encode_bytes(text);
  }
  if (data.kind == "copy_task") {
    return make_copy_sequence(data.seed, data.prefix_len, data.filler_len, vocab_size);
  }
  throw ConfigError("data: unknown kind '" + data.kind + "'");
}

}  // namespace sinkattn
