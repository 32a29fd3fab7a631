#include "sinkattn/kvcache.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sinkattn {

std::string policy_kind_name(PolicyKind k) {
  switch (k) {
    case PolicyKind::Full: return "full";
    case PolicyKind::Local: return "local";
    case PolicyKind::H2O: return "h2o";
    case PolicyKind::Sink: return "sink";
  }
  throw ConfigError("unknown policy kind");
}

PolicyKind policy_kind_from_name(const std::string& name) {
  if (name == "full") return PolicyKind::Full;
  if (name == "local") return PolicyKind::Local;
  if (name == "h2o") return PolicyKind::H2O;
  if (name == "sink") return PolicyKind::Sink;
  throw ConfigError("unknown eviction policy '" + name + "'");
}

EvictionPolicy EvictionPolicy::full() { return {}; }

EvictionPolicy EvictionPolicy::local(std::size_t window) {
  EvictionPolicy p;
  p.kind = PolicyKind::Local;
  p.budget = window;
  p.validate();
  return p;
}

EvictionPolicy EvictionPolicy::h2o(std::size_t budget, std::size_t recent) {
  EvictionPolicy p;
  p.kind = PolicyKind::H2O;
  p.budget = budget;
  p.recent = recent;
  p.validate();
  return p;
}

EvictionPolicy EvictionPolicy::sink(std::size_t g, std::size_t window) {
  EvictionPolicy p;
  p.kind = PolicyKind::Sink;
  p.budget = window;
  p.num_sink = g;
  p.validate();
  return p;
}

void EvictionPolicy::validate() const {
  switch (kind) {
    case PolicyKind::Full:
      break;
    case PolicyKind::Local:
      if (budget == 0) throw ConfigError("local policy: window must be >= 1");
      break;
    case PolicyKind::H2O:
      if (recent >= budget) {
        throw ConfigError("h2o policy: recent " + std::to_string(recent) +
                          " must be below budget " + std::to_string(budget));
      }
      if (recent == 0) throw ConfigError("h2o policy: recent must be >= 1");
      break;
    case PolicyKind::Sink:
      if (num_sink >= budget) {
        throw ConfigError("sink policy: sink count " + std::to_string(num_sink) +
                          " must be below window budget " + std::to_string(budget));
      }
      break;
  }
}

std::size_t KVCache::size() const {
  std::size_t n = 0;
  for (const auto& layer : entries) {
    for (const auto& head : layer) n += head.size();
  }
  return n;
}

KVCache make_cache(const ModelConfig& config, EvictionPolicy policy) {
  config.validate();
  policy.validate();
  KVCache c;
  c.n_layers = config.n_layers;
  c.n_heads = config.n_heads;
  c.head_dim = config.head_dim();
  c.policy = policy;
  c.entries.assign(c.n_layers, std::vector<std::vector<KVEntry>>(c.n_heads));
  return c;
}

std::vector<std::size_t> evict_entries(std::vector<KVEntry>& entries,
                                       const EvictionPolicy& policy) {
  policy.validate();
  const std::size_t n = entries.size();
  std::vector<char> keep(n, 1);
  switch (policy.kind) {
    case PolicyKind::Full:
      return {};
    case PolicyKind::Local: {
      if (n <= policy.budget) return {};
      for (std::size_t i = 0; i + policy.budget < n; ++i) keep[i] = 0;
      break;
    }
    case PolicyKind::Sink: {
      if (n <= policy.budget) return {};
      const std::size_t recent_keep = policy.budget - policy.num_sink;
      for (std::size_t i = 0; i < n; ++i) {
        const bool is_sink = entries[i].position < policy.num_sink;
        const bool is_recent = i + recent_keep >= n;
        keep[i] = (is_sink || is_recent) ? 1 : 0;
      }
      break;
    }
    case PolicyKind::H2O: {
      if (n <= policy.budget) return {};
      const std::size_t first_recent = n - policy.recent;
      std::vector<std::size_t> rest;
      rest.reserve(first_recent);
      for (std::size_t i = 0; i < first_recent; ++i) rest.push_back(i);
      // highest cumulative score wins; tie keeps the earlier position
      std::sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) {
        if (entries[a].cumulative_score != entries[b].cumulative_score) {
          return entries[a].cumulative_score > entries[b].cumulative_score;
        }
        return entries[a].position < entries[b].position;
      });
      const std::size_t heavy_keep = policy.budget - policy.recent;
      for (std::size_t r = 0; r < rest.size(); ++r) keep[rest[r]] = r < heavy_keep ? 1 : 0;
      break;
    }
  }
  std::vector<std::size_t> evicted;
  std::vector<KVEntry> kept;
  kept.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) {
      kept.push_back(std::move(entries[i]));
    } else {
      evicted.push_back(entries[i].position);
    }
  }
  entries = std::move(kept);
  std::sort(evicted.begin(), evicted.end());
  return evicted;
}

std::vector<std::size_t> evict(KVCache& cache, const EvictionPolicy& policy) {
  std::vector<std::size_t> all;
  for (auto& layer : cache.entries) {
    for (auto& head : layer) {
      auto e = evict_entries(head, policy);
      cache.evicted_count += e.size();
      all.insert(all.end(), e.begin(), e.end());
    }
  }
  return all;
}

namespace {

// Row-vector apply mirroring Linear::apply on a [1, d] tensor.
Tensor apply_linear_row(const Linear& lin, const Tensor& x) { return lin.apply(x, nullptr); }

}  // namespace

std::vector<double> decode_step(const DecoderModel& model, KVCache& cache, int token) {
  const ModelConfig& cfg = model.config;
  if (cache.n_layers != cfg.n_layers || cache.n_heads != cfg.n_heads ||
      cache.head_dim != cfg.head_dim()) {
    throw StateError("decode_step: cache was built for a different model shape");
  }
  const std::size_t pos = cache.next_position;
  const double limit = static_cast<double>(cfg.max_positions) * cfg.pos_interp_factor;
  if (static_cast<double>(pos + 1) > limit) {
    throw ConfigError("decode_step: position " + std::to_string(pos) +
                      " exceeds max_positions * pos_interp_factor");
  }
  const std::size_t hd = cfg.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::vector<std::size_t> pos_vec = {pos};

  Tensor x = embedding_lookup(model.embedding, {token});
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerWeights& layer = model.layers[l];
    Tensor attn_in = rmsnorm(x, layer.attn_norm);
    Tensor q = apply_linear_row(layer.wq, attn_in);
    Tensor k = apply_linear_row(layer.wk, attn_in);
    Tensor v = apply_linear_row(layer.wv, attn_in);

    std::vector<Tensor> ctx_heads;
    ctx_heads.reserve(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      Tensor qh = rope(slice_cols(q, h * hd, hd), pos_vec, cfg.rope_theta, cfg.pos_interp_factor);
      Tensor kh = rope(slice_cols(k, h * hd, hd), pos_vec, cfg.rope_theta, cfg.pos_interp_factor);
      Tensor vh = slice_cols(v, h * hd, hd);

      auto& head_entries = cache.entries[l][h];
      KVEntry entry;
      entry.key.assign(kh.data(), kh.data() + hd);
      entry.value.assign(vh.data(), vh.data() + hd);
      entry.position = pos;
      head_entries.push_back(std::move(entry));

      const std::size_t count = head_entries.size();
      Tensor scores = Tensor::zeros({1, count});
      for (std::size_t e = 0; e < count; ++e) {
        double acc = 0.0;
        const double* key = head_entries[e].key.data();
        for (std::size_t p = 0; p < hd; ++p) acc += qh.data()[p] * key[p];
        scores.data()[e] = acc * inv_sqrt_d;
      }
      Tensor probs = softmax_rows(scores);
      Tensor ctx = Tensor::zeros({1, hd});
      for (std::size_t e = 0; e < count; ++e) {
        const double p = probs.data()[e];
        head_entries[e].cumulative_score += p;
        const double* val = head_entries[e].value.data();
        for (std::size_t j = 0; j < hd; ++j) ctx.data()[j] += p * val[j];
      }
      check_finite(ctx, "decode_step");
      ctx_heads.push_back(ctx);

      cache.evicted_count += evict_entries(head_entries, cache.policy).size();
    }
    Tensor merged = concat_cols(ctx_heads);
    x = add(x, apply_linear_row(layer.wo, merged));
    Tensor ffn_in = rmsnorm(x, layer.ffn_norm);
    Tensor gate = silu(matmul(ffn_in, layer.w_gate));
    Tensor up = matmul(ffn_in, layer.w_up);
    x = add(x, matmul(mul(gate, up), layer.w_down));
  }
  x = rmsnorm(x, model.final_norm);
  Tensor logits = matmul(x, model.lm_head);
  cache.next_position = pos + 1;
  return logits.vec();
}

CacheStats cache_stats(const KVCache& cache) {
  CacheStats s;
  s.evicted_count = cache.evicted_count;
  for (const auto& layer : cache.entries) {
    for (const auto& head : layer) {
      s.size += head.size();
      for (const auto& e : head) s.retained_score_mass += e.cumulative_score;
    }
  }
  return s;
}

std::vector<int> greedy_generate(const DecoderModel& model, KVCache& cache,
                                 const std::vector<int>& prompt, std::size_t n_new) {
  if (prompt.empty()) throw ConfigError("greedy_generate: empty prompt");
  std::vector<double> logits;
  for (int t : prompt) logits = decode_step(model, cache, t);
  std::vector<int> out;
  out.reserve(n_new);
  for (std::size_t i = 0; i < n_new; ++i) {
    const std::size_t best =
        std::distance(logits.begin(), std::max_element(logits.begin(), logits.end()));
    out.push_back(static_cast<int>(best));
    if (i + 1 < n_new) logits = decode_step(model, cache, out.back());
  }
  return out;
}

}  // namespace sinkattn
