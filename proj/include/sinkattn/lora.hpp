#pragma once

#include <string>
#include <vector>

#include "sinkattn/tensor.hpp"

namespace sinkattn {

struct DecoderModel;

// Low-rank delta on a base projection W[d_in, d_out]:
//   x * W + (alpha/r) * (x * a) * b
// a[d_in, r] starts normal(0, 0.02), b[r, d_out] starts zero, so a freshly
// attached adapter is an exact no-op.
struct LoraAdapter {
  std::size_t rank = 0;
  double alpha = 0.0;
  Tensor a;  // input side
  Tensor b;  // output side

  double scaling() const { return alpha / static_cast<double>(rank); }
};

// Which parameter groups receive gradients during adapted training. Base
// projection weights are always frozen while a policy is applied.
struct TrainabilityPolicy {
  bool embeddings = true;
  bool norms = true;
};

inline constexpr const char* kLoraAllTargets = "qkvo";

// Attaches zero-initialized adapters to the named projections of every
// layer (targets is a subset of "qkvo") and freezes everything the policy
// excludes. Throws ConfigError on an unknown target letter.
void attach_lora(DecoderModel& model, const std::string& targets, std::size_t rank, double alpha,
                 const TrainabilityPolicy& policy, std::uint64_t seed);

// Folds every adapter into its base weight (W += scaling * a * b), removes
// the adapters and re-enables grads on all parameters. Throws StateError if
// no adapters are attached.
void merge_lora(DecoderModel& model);

bool has_lora(const DecoderModel& model);

// Number of scalars that currently receive gradients.
std::size_t trainable_parameter_count(const DecoderModel& model);

}  // namespace sinkattn
