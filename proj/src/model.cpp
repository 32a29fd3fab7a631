#include "sinkattn/model.hpp"

#include <cmath>

#include "sinkattn/rng.hpp"

namespace sinkattn {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("model: n_heads " + std::to_string(n_heads) + " must divide d_model " +
                      std::to_string(d_model));
  }
  if (n_heads % 2 != 0) throw ConfigError("model: n_heads must be even");
  if (head_dim() % 2 != 0) throw ConfigError("model: head_dim must be even for rotary encoding");
  if (n_layers == 0) throw ConfigError("model: n_layers must be >= 1");
  if (d_ff == 0) throw ConfigError("model: d_ff must be >= 1");
  if (max_positions == 0) throw ConfigError("model: max_positions must be >= 1");
  if (pos_interp_factor < 1.0) throw ConfigError("model: pos_interp_factor must be >= 1");
  if (rope_theta <= 0.0) throw ConfigError("model: rope_theta must be positive");
}

Tensor Linear::apply(const Tensor& x, Tape* tape) const {
  Tensor out = matmul(x, w, tape);
  if (adapter) {
    Tensor delta = matmul(matmul(x, adapter->a, tape), adapter->b, tape);
    out = add(out, scale(delta, adapter->scaling(), tape), tape);
  }
  return out;
}

namespace {

Tensor draw_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
  std::vector<double> data(rows * cols);
  for (double& v : data) v = std_dev * rng.next_normal();
  return Tensor::from_data({rows, cols}, std::move(data), true);
}

void push_linear(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name,
                 const Linear& lin) {
  out.emplace_back(name + ".w", lin.w);
  if (lin.adapter) {
    out.emplace_back(name + ".lora.a", lin.adapter->a);
    out.emplace_back(name + ".lora.b", lin.adapter->b);
  }
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> DecoderModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    push_linear(out, p + "wq", layers[l].wq);
    push_linear(out, p + "wk", layers[l].wk);
    push_linear(out, p + "wv", layers[l].wv);
    push_linear(out, p + "wo", layers[l].wo);
    out.emplace_back(p + "attn_norm", layers[l].attn_norm);
    out.emplace_back(p + "ffn_norm", layers[l].ffn_norm);
    out.emplace_back(p + "w_gate", layers[l].w_gate);
    out.emplace_back(p + "w_up", layers[l].w_up);
    out.emplace_back(p + "w_down", layers[l].w_down);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("lm_head", lm_head);
  return out;
}

std::vector<Tensor> DecoderModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t DecoderModel::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named_parameters()) {
    if (name.find(".lora.") == std::string::npos) n += t.numel();
  }
  return n;
}

void DecoderModel::zero_grads() const {
  for (auto& [name, t] : named_parameters()) {
    Tensor p = t;
    if (p.requires_grad()) p.zero_grad();
  }
}

AttnMode AttnMode::mask_based(HeadGroupAssignment assignment) {
  AttnMode m;
  m.kind = Kind::MaskBased;
  m.heads = std::move(assignment);
  return m;
}

AttnMode AttnMode::mask_based(PatternSpec spec, std::size_t n_heads) {
  return mask_based(HeadGroupAssignment::uniform(n_heads, spec));
}

AttnMode AttnMode::roll_based(std::size_t w) {
  AttnMode m;
  m.kind = Kind::RollBased;
  m.group_size = w;
  return m;
}

AttnMode AttnMode::full_causal(std::size_t n_heads) {
  PatternSpec spec;
  spec.kind = PatternKind::FullCausal;
  return mask_based(spec, n_heads);
}

DecoderModel init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(mix64(config.seed, 0x6d6f64656cULL));
  DecoderModel m;
  m.config = config;
  const std::size_t d = config.d_model, v = config.vocab_size, f = config.d_ff;
  m.embedding = draw_matrix(rng, v, d, 0.02);
  m.layers.resize(config.n_layers);
  for (auto& layer : m.layers) {
    layer.wq.w = draw_matrix(rng, d, d, 0.02);
    layer.wk.w = draw_matrix(rng, d, d, 0.02);
    layer.wv.w = draw_matrix(rng, d, d, 0.02);
    layer.wo.w = draw_matrix(rng, d, d, 0.02);
    layer.attn_norm = Tensor::full({d}, 1.0, true);
    layer.ffn_norm = Tensor::full({d}, 1.0, true);
    layer.w_gate = draw_matrix(rng, d, f, 0.02);
    layer.w_up = draw_matrix(rng, d, f, 0.02);
    layer.w_down = draw_matrix(rng, f, d, 0.02);
  }
  m.final_norm = Tensor::full({d}, 1.0, true);
  m.lm_head = draw_matrix(rng, d, v, 0.02);
  return m;
}

namespace {

Tensor grouped_causal_attention(const Tensor& qh, const Tensor& kh, const Tensor& vh,
                                std::size_t w, const AttentionMask& causal_w, double inv_sqrt_d,
                                Tape* tape) {
  const std::size_t n = qh.dim(0);
  std::vector<Tensor> ctx;
  ctx.reserve(n / w);
  for (std::size_t a = 0; a < n; a += w) {
    Tensor qg = slice_rows(qh, a, w, tape);
    Tensor kg = slice_rows(kh, a, w, tape);
    Tensor vg = slice_rows(vh, a, w, tape);
    Tensor scores = scale(matmul_nt(qg, kg, tape), inv_sqrt_d, tape);
    Tensor probs = softmax_rows(scores, causal_w.data(), tape);
    ctx.push_back(matmul(probs, vg, tape));
  }
  return concat_rows(ctx, tape);
}

}  // namespace

Tensor attention_block(const LayerWeights& layer, const Tensor& x_normed, const ModelConfig& config,
                       const AttnMode& mode, const std::vector<std::size_t>& positions, Tape* tape,
                       const std::vector<AttentionMask>* mask_override,
                       std::vector<Tensor>* prob_sink) {
  const std::size_t n = x_normed.dim(0);
  const std::size_t heads = config.n_heads;
  const std::size_t hd = config.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor q = layer.wq.apply(x_normed, tape);
  Tensor k = layer.wk.apply(x_normed, tape);
  Tensor v = layer.wv.apply(x_normed, tape);

  std::vector<AttentionMask> masks;
  if (mode.kind == AttnMode::Kind::MaskBased && mask_override == nullptr) {
    masks = mode.heads.build_masks(n);
  }
  const std::vector<AttentionMask>* head_masks = mask_override ? mask_override : &masks;

  AttentionMask causal_w;
  std::size_t w = 0;
  if (mode.kind == AttnMode::Kind::RollBased) {
    w = mode.group_size;
    if (w == 0 || n % w != 0 || w % 2 != 0) {
      throw ConfigError("attention: roll group size " + std::to_string(w) +
                        " must be even and divide N = " + std::to_string(n));
    }
    if (heads % 2 != 0) throw ConfigError("attention: roll mode needs an even head count");
    causal_w = build_full_causal(w);
  } else if (head_masks->size() != heads) {
    throw ConfigError("attention: need one mask per head");
  }

  std::vector<Tensor> ctx_heads;
  ctx_heads.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = rope(slice_cols(q, h * hd, hd, tape), positions, config.rope_theta,
                     config.pos_interp_factor, tape);
    Tensor kh = rope(slice_cols(k, h * hd, hd, tape), positions, config.rope_theta,
                     config.pos_interp_factor, tape);
    Tensor vh = slice_cols(v, h * hd, hd, tape);

    if (mode.kind == AttnMode::Kind::RollBased) {
      const bool shifted = h >= heads / 2;
      if (shifted) {
        qh = roll_rows(qh, static_cast<std::ptrdiff_t>(w / 2), tape);
        kh = roll_rows(kh, static_cast<std::ptrdiff_t>(w / 2), tape);
        vh = roll_rows(vh, static_cast<std::ptrdiff_t>(w / 2), tape);
      }
      Tensor ctx = grouped_causal_attention(qh, kh, vh, w, causal_w, inv_sqrt_d, tape);
      if (shifted) ctx = roll_rows(ctx, -static_cast<std::ptrdiff_t>(w / 2), tape);
      ctx_heads.push_back(ctx);
    } else {
      const AttentionMask& mask = (*head_masks)[h];
      if (mask.n != n) throw ConfigError("attention: mask size does not match sequence length");
      Tensor scores = scale(matmul_nt(qh, kh, tape), inv_sqrt_d, tape);
      Tensor probs = softmax_rows(scores, mask.data(), tape);
      if (prob_sink) prob_sink->push_back(probs);
      ctx_heads.push_back(matmul(probs, vh, tape));
    }
  }
  Tensor merged = concat_cols(ctx_heads, tape);
  return layer.wo.apply(merged, tape);
}

Tensor forward(const DecoderModel& model, const std::vector<int>& tokens, const AttnMode& mode,
               Tape* tape, AttnProbes* probes) {
  const ModelConfig& cfg = model.config;
  const std::size_t n = tokens.size();
  if (n == 0) throw ConfigError("forward: empty token sequence");
  const double limit = static_cast<double>(cfg.max_positions) * cfg.pos_interp_factor;
  if (static_cast<double>(n) > limit) {
    throw ConfigError("forward: sequence length " + std::to_string(n) +
                      " exceeds max_positions * pos_interp_factor");
  }
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;

  std::vector<AttentionMask> masks;
  const std::vector<AttentionMask>* mask_ptr = nullptr;
  if (mode.kind == AttnMode::Kind::MaskBased) {
    masks = mode.heads.build_masks(n);
    mask_ptr = &masks;
  }
  if (probes) probes->probs.assign(model.layers.size(), {});

  Tensor x = embedding_lookup(model.embedding, tokens, tape);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerWeights& layer = model.layers[l];
    Tensor attn_in = rmsnorm(x, layer.attn_norm, tape);
    Tensor attn_out = attention_block(layer, attn_in, cfg, mode, positions, tape, mask_ptr,
                                      probes ? &probes->probs[l] : nullptr);
    x = add(x, attn_out, tape);
    Tensor ffn_in = rmsnorm(x, layer.ffn_norm, tape);
    Tensor gate = silu(matmul(ffn_in, layer.w_gate, tape), tape);
    Tensor up = matmul(ffn_in, layer.w_up, tape);
    Tensor ffn_out = matmul(mul(gate, up, tape), layer.w_down, tape);
    x = add(x, ffn_out, tape);
  }
  x = rmsnorm(x, model.final_norm, tape);
  return matmul(x, model.lm_head, tape);
}

double warmup_lr(double base_lr, std::size_t step, std::size_t warmup_steps) {
  if (warmup_steps == 0 || step + 1 >= warmup_steps) return base_lr;
  return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

double train_step(DecoderModel& model, const std::vector<std::vector<int>>& batch,
                  const AttnMode& mode, AdamState& opt, double lr) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw ConfigError("train_step: sequences must have length >= 2");
  }
  model.zero_grads();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& seq : batch) {
    Tape tape;
    Tensor logits = forward(model, seq, mode, &tape);
    Tensor preds = slice_rows(logits, 0, seq.size() - 1, &tape);
    std::vector<int> targets(seq.begin() + 1, seq.end());
    Tensor loss = cross_entropy(preds, targets, &tape);
    total += loss.item();
    backward(scale(loss, inv_b, &tape), tape);
  }

  opt.step += 1;
  const double t = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(kAdamBeta1, t);
  const double bc2 = 1.0 - std::pow(kAdamBeta2, t);
  for (auto& [name, param] : model.named_parameters()) {
    Tensor p = param;
    if (!p.requires_grad()) continue;
    auto& slot = opt.slots[name];
    if (slot.m.size() != p.numel()) {
      slot.m.assign(p.numel(), 0.0);
      slot.v.assign(p.numel(), 0.0);
    }
    double* w = p.data();
    const double* g = p.grad();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      slot.m[i] = kAdamBeta1 * slot.m[i] + (1.0 - kAdamBeta1) * g[i];
      slot.v[i] = kAdamBeta2 * slot.v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
      if (!std::isfinite(w[i])) throw NumericalError("train_step: non-finite weight after update");
    }
  }
  return total * inv_b;
}

}  // namespace sinkattn
