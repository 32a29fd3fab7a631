#pragma once

#include <optional>
#include <string>

#include "sinkattn/lora.hpp"
#include "sinkattn/model.hpp"

namespace sinkattn {

// Container layout: u64 little-endian header length, header JSON, then the
// payload of concatenated little-endian float32 arrays in manifest order.
// The header carries the model config, a named manifest (name, shape, byte
// offset, section base|lora|optimizer) and the format version. Weights pass
// through float32 on disk; the float64 -> float32 -> float64 round trip is
// lossy once and byte-stable afterwards.

struct LoadedCheckpoint {
  DecoderModel model;
  AdamState opt;
  bool has_optimizer = false;
};

void save_checkpoint(const std::string& path, const DecoderModel& model,
                     const AdamState* opt = nullptr);

// Rebuilds the model (and adapters, if any were attached) from the file.
// When expected_config is given a header mismatch raises ConfigError.
LoadedCheckpoint load_checkpoint(const std::string& path,
                                 const std::optional<ModelConfig>& expected_config = std::nullopt);

}  // namespace sinkattn
