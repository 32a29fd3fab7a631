#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sinkattn/model.hpp"

namespace sinkattn {

enum class PolicyKind : int { Full, Local, H2O, Sink };

std::string policy_kind_name(PolicyKind k);
PolicyKind policy_kind_from_name(const std::string& name);

struct EvictionPolicy {
  PolicyKind kind = PolicyKind::Full;
  std::size_t budget = 0;    // H2O total / Local window / Sink window
  std::size_t recent = 0;    // H2O: most-recent entries kept unconditionally
  std::size_t num_sink = 0;  // Sink: leading positions pinned in cache

  static EvictionPolicy full();
  static EvictionPolicy local(std::size_t window);
  static EvictionPolicy h2o(std::size_t budget, std::size_t recent);
  static EvictionPolicy sink(std::size_t g, std::size_t window);

  void validate() const;

  bool operator==(const EvictionPolicy&) const = default;
};

struct KVEntry {
  std::vector<double> key;    // head_dim, rotary-encoded at original position
  std::vector<double> value;  // head_dim
  std::size_t position = 0;
  double cumulative_score = 0.0;  // attention probability mass received so far
};

struct KVCache {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t head_dim = 0;
  EvictionPolicy policy;
  std::vector<std::vector<std::vector<KVEntry>>> entries;  // [layer][head]
  std::size_t next_position = 0;
  std::size_t evicted_count = 0;

  std::size_t size() const;  // total entries over all layers and heads
};

KVCache make_cache(const ModelConfig& config, EvictionPolicy policy);

// Applies the policy to one head's entry list; returns the evicted original
// positions in ascending order. H2O keeps the `recent` newest entries
// unconditionally, then the highest cumulative_score among the rest with
// ties resolved toward the earlier position.
std::vector<std::size_t> evict_entries(std::vector<KVEntry>& entries, const EvictionPolicy& policy);

// Runs eviction over every layer/head; returns all evicted positions.
std::vector<std::size_t> evict(KVCache& cache, const EvictionPolicy& policy);

// Appends the token's K/V rows, attends the new query against the cache
// with full causal visibility, accumulates this step's attention
// probabilities into the entries, evicts once, and returns the logits [V].
std::vector<double> decode_step(const DecoderModel& model, KVCache& cache, int token);

struct CacheStats {
  std::size_t size = 0;
  double retained_score_mass = 0.0;
  std::size_t evicted_count = 0;
};

CacheStats cache_stats(const KVCache& cache);

// Feeds the prompt, then greedily samples n_new tokens. Returns only the
// generated continuation.
std::vector<int> greedy_generate(const DecoderModel& model, KVCache& cache,
                                 const std::vector<int>& prompt, std::size_t n_new);

}  // namespace sinkattn
