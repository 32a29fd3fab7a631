#include "sinkattn/lora.hpp"

#include <array>

#include "sinkattn/model.hpp"
#include "sinkattn/rng.hpp"

namespace sinkattn {

namespace {

std::array<Linear*, 4> layer_targets(LayerWeights& layer) {
  return {&layer.wq, &layer.wk, &layer.wv, &layer.wo};
}

Linear* pick_target(LayerWeights& layer, char c) {
  switch (c) {
    case 'q': return &layer.wq;
    case 'k': return &layer.wk;
    case 'v': return &layer.wv;
    case 'o': return &layer.wo;
    default:
      throw ConfigError(std::string("attach_lora: unknown target '") + c + "' (expected q/k/v/o)");
  }
}

}  // namespace

void attach_lora(DecoderModel& model, const std::string& targets, std::size_t rank, double alpha,
                 const TrainabilityPolicy& policy, std::uint64_t seed) {
  if (rank == 0) throw ConfigError("attach_lora: rank must be >= 1");
  if (targets.empty()) throw ConfigError("attach_lora: no targets");
  Rng rng(mix64(seed, 0x6c6f7261ULL));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (char c : targets) {
      Linear* lin = pick_target(model.layers[l], c);
      if (lin->adapter) throw StateError("attach_lora: target already has an adapter");
      LoraAdapter ad;
      ad.rank = rank;
      ad.alpha = alpha;
      const std::size_t d_in = lin->w.dim(0), d_out = lin->w.dim(1);
      std::vector<double> a(d_in * rank);
      for (double& x : a) x = 0.02 * rng.next_normal();
      ad.a = Tensor::from_data({d_in, rank}, std::move(a), true);
      ad.b = Tensor::zeros({rank, d_out}, true);
      lin->adapter = std::move(ad);
    }
  }
  // freeze base weights; embeddings/norms per policy
  for (auto& layer : model.layers) {
    for (Linear* lin : layer_targets(layer)) lin->w.set_requires_grad(false);
    layer.w_gate.set_requires_grad(false);
    layer.w_up.set_requires_grad(false);
    layer.w_down.set_requires_grad(false);
    layer.attn_norm.set_requires_grad(policy.norms);
    layer.ffn_norm.set_requires_grad(policy.norms);
  }
  model.embedding.set_requires_grad(policy.embeddings);
  model.final_norm.set_requires_grad(policy.norms);
  model.lm_head.set_requires_grad(false);
}

void merge_lora(DecoderModel& model) {
  if (!has_lora(model)) throw StateError("merge_lora: no adapters attached");
  for (auto& layer : model.layers) {
    for (Linear* lin : layer_targets(layer)) {
      if (!lin->adapter) continue;
      const LoraAdapter& ad = *lin->adapter;
      Tensor delta = matmul(ad.a, ad.b);  // [d_in, d_out]
      const double s = ad.scaling();
      double* w = lin->w.data();
      for (std::size_t i = 0; i < lin->w.numel(); ++i) w[i] += s * delta.data()[i];
      lin->adapter.reset();
    }
  }
  for (auto& [name, t] : model.named_parameters()) {
    Tensor p = t;
    p.set_requires_grad(true);
  }
}

bool has_lora(const DecoderModel& model) {
  for (const auto& layer : model.layers) {
    if (layer.wq.adapter || layer.wk.adapter || layer.wv.adapter || layer.wo.adapter) return true;
  }
  return false;
}

std::size_t trainable_parameter_count(const DecoderModel& model) {
  std::size_t n = 0;
  for (const auto& [name, t] : model.named_parameters()) {
    if (t.requires_grad()) n += t.numel();
  }
  return n;
}

}  // namespace sinkattn
