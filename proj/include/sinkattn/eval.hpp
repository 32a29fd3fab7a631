#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sinkattn/model.hpp"

namespace sinkattn {

// Byte-level tokenizer: token id == byte value.
std::vector<int> encode_bytes(std::string_view text);
std::string decode_bytes(const std::vector<int>& tokens);

struct PplReport {
  std::size_t context_length = 0;
  std::size_t stride = 0;
  double nll = 0.0;
  std::size_t token_count = 0;
  double perplexity = 1.0;

  std::string to_json_line() const;
};

// Sliding-window perplexity: windows of context_len advance by stride and
// only each window's last `stride` target positions are scored, so no token
// is counted twice. Evaluation attends with `mode` (full causal by default,
// matching inference-time attention).
PplReport perplexity(const DecoderModel& model, const std::vector<int>& stream,
                     std::size_t context_len, std::size_t stride,
                     const std::optional<AttnMode>& mode = std::nullopt);

struct PasskeyDoc {
  std::string text;
  std::vector<int> tokens;
  int passkey = 0;  // in [10000, 99999]
  std::size_t m_fillers = 0;
  std::size_t n_fillers = 0;
  std::size_t key_offset = 0;  // char index of the key block
};

// Filler x M, key block, filler x N, question stem; key drawn from seed.
PasskeyDoc passkey_gen(std::size_t m, std::size_t n, std::uint64_t seed);
// Same document with a caller-chosen key.
PasskeyDoc passkey_doc_with_key(std::size_t m, std::size_t n, int passkey);

// True iff the first run of exactly five digits in the generated
// continuation equals the document's passkey.
bool passkey_score(const std::string& generated, const PasskeyDoc& doc);

// Rule-based reference retriever: reads the answer straight out of the
// prompt text. Returns the digits found after the first "passkey is".
std::optional<int> oracle_retrieve(const std::string& prompt_text);

struct SinkMassReport {
  std::vector<std::vector<double>> per_layer_head;  // [layer][head]
  double aggregate = 0.0;
};

// Mean attention probability mass that queries at positions >= g put on key
// positions < g, under full causal attention.
SinkMassReport sink_mass(const DecoderModel& model, const std::vector<int>& tokens, std::size_t g);

}  // namespace sinkattn
