#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sinkattn/lora.hpp"
#include "sinkattn/masks.hpp"
#include "sinkattn/tensor.hpp"

namespace sinkattn {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 128;
  std::size_t n_heads = 8;
  std::size_t n_layers = 4;
  std::size_t d_ff = 256;
  std::size_t max_positions = 512;
  double rope_theta = 10000.0;
  double pos_interp_factor = 1.0;  // positions are divided by this
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Projection with an optional low-rank adapter riding on it.
struct Linear {
  Tensor w;  // [d_in, d_out]
  std::optional<LoraAdapter> adapter;

  Tensor apply(const Tensor& x, Tape* tape) const;
};

struct LayerWeights {
  Linear wq, wk, wv, wo;        // [d, d]
  Tensor attn_norm, ffn_norm;   // [d]
  Tensor w_gate, w_up, w_down;  // [d, d_ff], [d, d_ff], [d_ff, d]
};

struct DecoderModel {
  ModelConfig config;
  Tensor embedding;  // [V, d]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d]
  Tensor lm_head;     // [d, V]

  // Stable name -> tensor walk over every parameter, adapters included.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;  // base parameters, adapters excluded
  void zero_grads() const;
};

// How the attention layer is executed.
struct AttnMode {
  enum class Kind { MaskBased, RollBased };
  Kind kind = Kind::MaskBased;
  HeadGroupAssignment heads;   // MaskBased
  std::size_t group_size = 0;  // RollBased w

  static AttnMode mask_based(HeadGroupAssignment assignment);
  static AttnMode mask_based(PatternSpec spec, std::size_t n_heads);
  static AttnMode roll_based(std::size_t w);
  static AttnMode full_causal(std::size_t n_heads);
};

// Optional capture of per-layer, per-head attention probability matrices
// ([N,N], original token order) from a mask-based forward pass.
struct AttnProbes {
  std::vector<std::vector<Tensor>> probs;  // [layer][head]
};

DecoderModel init_model(const ModelConfig& config);

// Full-sequence forward, batch size 1: tokens -> logits [N, V].
Tensor forward(const DecoderModel& model, const std::vector<int>& tokens, const AttnMode& mode,
               Tape* tape = nullptr, AttnProbes* probes = nullptr);

// One attention block on pre-normed input [N, d]: projections, rope, masked
// or rolled attention, output projection. Exposed for equivalence tests.
Tensor attention_block(const LayerWeights& layer, const Tensor& x_normed, const ModelConfig& config,
                       const AttnMode& mode, const std::vector<std::size_t>& positions,
                       Tape* tape = nullptr,
                       const std::vector<AttentionMask>* mask_override = nullptr,
                       std::vector<Tensor>* prob_sink = nullptr);

struct AdamState {
  struct Moments {
    std::vector<double> m, v;
  };
  std::size_t step = 0;
  std::unordered_map<std::string, Moments> slots;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.95;
inline constexpr double kAdamEps = 1e-8;
inline constexpr double kPretrainLr = 3e-4;
inline constexpr double kFineTuneLr = 2e-5;
inline constexpr std::size_t kWarmupSteps = 20;

// Next-token loss over the batch (targets are each sequence shifted by one),
// one AdamW update (weight decay 0) of every grad-carrying parameter.
// Returns the pre-update mean loss.
double train_step(DecoderModel& model, const std::vector<std::vector<int>>& batch,
                  const AttnMode& mode, AdamState& opt, double lr);

double warmup_lr(double base_lr, std::size_t step, std::size_t warmup_steps);

}  // namespace sinkattn
