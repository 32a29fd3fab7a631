#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "sinkattn/kvcache.hpp"
#include "sinkattn/rng.hpp"

using namespace sinkattn;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 24;
  c.max_positions = 2048;
  c.seed = 21;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (int& v : t) v = static_cast<int>(rng.next_below(vocab));
  return t;
}

std::vector<KVEntry> trace_entries(const std::vector<std::size_t>& positions,
                                   const std::vector<double>& scores) {
  std::vector<KVEntry> out;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    KVEntry e;
    e.key = {0.0};
    e.value = {0.0};
    e.position = positions[i];
    e.cumulative_score = scores[i];
    out.push_back(e);
  }
  return out;
}

std::vector<std::size_t> positions_of(const std::vector<KVEntry>& entries) {
  std::vector<std::size_t> p;
  for (const auto& e : entries) p.push_back(e.position);
  return p;
}

// Exhaustive best keep-set for H2O's non-recent region: maximize total
// cumulative score; among ties prefer the lexicographically earliest
// position set.
std::vector<std::size_t> exhaustive_h2o_keep(const std::vector<KVEntry>& entries,
                                             std::size_t recent, std::size_t heavy_keep) {
  const std::size_t non_recent = entries.size() - recent;
  std::vector<std::size_t> best;
  double best_score = -1.0;
  for (std::uint64_t mask = 0; mask < (1ull << non_recent); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcountll(mask)) != heavy_keep) continue;
    double score = 0.0;
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < non_recent; ++i) {
      if (mask & (1ull << i)) {
        score += entries[i].cumulative_score;
        picked.push_back(entries[i].position);
      }
    }
    if (score > best_score + 1e-12 ||
        (std::abs(score - best_score) <= 1e-12 && picked < best)) {
      best_score = score;
      best = picked;
    }
  }
  return best;
}

}  // namespace

TEST_SUITE_BEGIN("kvcache");

TEST_CASE("full-policy decode reproduces the batch forward") {
  DecoderModel m = init_model(tiny_config());
  const auto tokens = random_tokens(16, m.config.vocab_size, 3);
  Tensor batch = forward(m, tokens, AttnMode::full_causal(m.config.n_heads));
  KVCache cache = make_cache(m.config, EvictionPolicy::full());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto logits = decode_step(m, cache, tokens[t]);
    for (std::size_t j = 0; j < logits.size(); ++j) {
      CHECK(std::abs(logits[j] - batch.data()[t * m.config.vocab_size + j]) < 1e-10);
    }
  }
}

TEST_CASE("the first decoded token attends only to itself") {
  DecoderModel m = init_model(tiny_config());
  KVCache cache = make_cache(m.config, EvictionPolicy::full());
  decode_step(m, cache, 5);
  for (const auto& layer : cache.entries) {
    for (const auto& head : layer) {
      REQUIRE(head.size() == 1);
      CHECK(head[0].cumulative_score == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("h2o with a budget above the length is bit-equal to full") {
  DecoderModel m = init_model(tiny_config());
  const auto tokens = random_tokens(20, m.config.vocab_size, 4);
  KVCache full = make_cache(m.config, EvictionPolicy::full());
  KVCache h2o = make_cache(m.config, EvictionPolicy::h2o(64, 4));
  for (int tok : tokens) {
    const auto a = decode_step(m, full, tok);
    const auto b = decode_step(m, h2o, tok);
    CHECK(a == b);
  }
  for (std::size_t l = 0; l < full.entries.size(); ++l) {
    for (std::size_t h = 0; h < full.entries[l].size(); ++h) {
      REQUIRE(full.entries[l][h].size() == h2o.entries[l][h].size());
      for (std::size_t e = 0; e < full.entries[l][h].size(); ++e) {
        CHECK(full.entries[l][h][e].key == h2o.entries[l][h][e].key);
        CHECK(full.entries[l][h][e].cumulative_score == h2o.entries[l][h][e].cumulative_score);
      }
    }
  }
}

TEST_CASE("h2o eviction follows the documented trace") {
  auto entries = trace_entries({0, 1, 2, 3}, {5.0, 0.1, 2.0, 0.7});
  const auto evicted = evict_entries(entries, EvictionPolicy::h2o(3, 1));
  CHECK(evicted == std::vector<std::size_t>{1});
  CHECK(positions_of(entries) == std::vector<std::size_t>{0, 2, 3});

  // cache_stats view of the same trace
  KVCache cache;
  cache.n_layers = 1;
  cache.n_heads = 1;
  cache.head_dim = 1;
  cache.entries = {{entries}};
  cache.evicted_count = evicted.size();
  const CacheStats st = cache_stats(cache);
  CHECK(st.size == 3);
  CHECK(st.retained_score_mass == doctest::Approx(7.7).epsilon(1e-12));
  CHECK(st.evicted_count == 1);
}

TEST_CASE("h2o breaks ties toward the earlier position") {
  auto entries = trace_entries({0, 1, 2}, {1.0, 1.0, 9.9});
  const auto evicted = evict_entries(entries, EvictionPolicy::h2o(2, 1));
  CHECK(evicted == std::vector<std::size_t>{1});
  CHECK(positions_of(entries) == std::vector<std::size_t>{0, 2});
}

TEST_CASE("eviction below budget is a no-op") {
  auto entries = trace_entries({0, 1}, {1.0, 2.0});
  CHECK(evict_entries(entries, EvictionPolicy::h2o(3, 1)).empty());
  CHECK(evict_entries(entries, EvictionPolicy::local(2)).empty());
  CHECK(evict_entries(entries, EvictionPolicy::sink(1, 2)).empty());
  CHECK(evict_entries(entries, EvictionPolicy::full()).empty());
  CHECK(entries.size() == 2);
}

TEST_CASE("local keeps the most recent window") {
  auto entries = trace_entries({0, 1, 2, 3, 4}, {9, 9, 1, 1, 1});
  const auto evicted = evict_entries(entries, EvictionPolicy::local(2));
  CHECK(evicted == std::vector<std::size_t>{0, 1, 2});
  CHECK(positions_of(entries) == std::vector<std::size_t>{3, 4});
}

TEST_CASE("sink keeps the pinned positions plus recents") {
  auto entries = trace_entries({0, 1, 2, 3, 4, 5}, {0, 0, 0, 0, 0, 0});
  const auto evicted = evict_entries(entries, EvictionPolicy::sink(2, 4));
  CHECK(evicted == std::vector<std::size_t>{2, 3});
  CHECK(positions_of(entries) == std::vector<std::size_t>{0, 1, 4, 5});
}

TEST_CASE("policy invariants are validated") {
  CHECK_THROWS_AS(EvictionPolicy::h2o(4, 4), ConfigError);
  CHECK_THROWS_AS(EvictionPolicy::h2o(4, 0), ConfigError);
  CHECK_THROWS_AS(EvictionPolicy::sink(4, 4), ConfigError);
  CHECK_THROWS_AS(EvictionPolicy::local(0), ConfigError);
}

TEST_CASE("budget compliance over a long random decode") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 1;
  DecoderModel m = init_model(cfg);
  const auto tokens = random_tokens(1000, cfg.vocab_size, 5);
  for (const EvictionPolicy policy :
       {EvictionPolicy::local(24), EvictionPolicy::h2o(32, 8), EvictionPolicy::sink(4, 24)}) {
    KVCache cache = make_cache(cfg, policy);
    for (int tok : tokens) {
      decode_step(m, cache, tok);
      for (const auto& layer : cache.entries) {
        for (const auto& head : layer) CHECK(head.size() <= policy.budget);
      }
    }
    if (policy.kind == PolicyKind::Sink) {
      for (const auto& head : cache.entries[0]) {
        for (std::size_t g = 0; g < policy.num_sink; ++g) {
          CHECK(std::any_of(head.begin(), head.end(),
                            [&](const KVEntry& e) { return e.position == g; }));
        }
      }
    }
  }
}

TEST_CASE("h2o greedy keep-set matches the exhaustive oracle") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 4 + rng.next_below(9);  // up to 12 entries
    std::vector<std::size_t> positions(n);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      positions[i] = i;
      // coarse grid makes ties common
      scores[i] = static_cast<double>(rng.next_below(4));
    }
    const std::size_t recent = 1 + rng.next_below(2);
    const std::size_t budget = recent + 1 + rng.next_below(n - recent);
    if (budget >= n) continue;
    auto entries = trace_entries(positions, scores);
    const auto expect = exhaustive_h2o_keep(entries, recent, budget - recent);
    evict_entries(entries, EvictionPolicy::h2o(budget, recent));
    std::vector<std::size_t> kept_non_recent;
    for (const auto& e : entries) {
      if (e.position + recent < n) kept_non_recent.push_back(e.position);
    }
    CHECK(kept_non_recent == expect);
  }
}

TEST_CASE("identical traces evict identically") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 1;
  DecoderModel m = init_model(cfg);
  const auto tokens = random_tokens(120, cfg.vocab_size, 7);
  auto run = [&]() {
    KVCache cache = make_cache(cfg, EvictionPolicy::h2o(24, 6));
    std::vector<double> last;
    for (int tok : tokens) last = decode_step(m, cache, tok);
    return std::make_pair(last, positions_of(cache.entries[0][0]));
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("cache stats of an empty cache are zero") {
  KVCache cache = make_cache(tiny_config(), EvictionPolicy::full());
  const CacheStats st = cache_stats(cache);
  CHECK(st.size == 0);
  CHECK(st.retained_score_mass == 0.0);
  CHECK(st.evicted_count == 0);
}

TEST_CASE("decode rejects a cache built for another model") {
  DecoderModel m = init_model(tiny_config());
  ModelConfig other = tiny_config();
  other.n_layers = 1;
  KVCache cache = make_cache(other, EvictionPolicy::full());
  CHECK_THROWS_AS(decode_step(m, cache, 0), StateError);
}

TEST_SUITE_END();
