#include "sinkattn/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "sinkattn/rng.hpp"

namespace sinkattn {

std::vector<int> encode_bytes(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int>(c));
  return out;
}

std::string decode_bytes(const std::vector<int>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || t > 255) throw IndexError("decode_bytes: token " + std::to_string(t));
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

std::string PplReport::to_json_line() const {
  std::ostringstream os;
  os.precision(12);
  os << "{\"context_length\":" << context_length << ",\"stride\":" << stride << ",\"nll\":" << nll
     << ",\"token_count\":" << token_count << ",\"perplexity\":" << perplexity << "}";
  return os.str();
}

PplReport perplexity(const DecoderModel& model, const std::vector<int>& stream,
                     std::size_t context_len, std::size_t stride,
                     const std::optional<AttnMode>& mode) {
  if (stride == 0 || stride > context_len) {
    throw ConfigError("perplexity: stride must be in [1, context_len]");
  }
  if (stream.size() <= context_len) {
    throw ConfigError("perplexity: stream of " + std::to_string(stream.size()) +
                      " tokens is not longer than one window of " + std::to_string(context_len));
  }
  const AttnMode attn = mode ? *mode : AttnMode::full_causal(model.config.n_heads);
  PplReport report;
  report.context_length = context_len;
  report.stride = stride;
  const std::size_t v = model.config.vocab_size;

  for (std::size_t start = 0; start + context_len <= stream.size(); start += stride) {
    std::vector<int> window(stream.begin() + start, stream.begin() + start + context_len);
    Tensor logits = forward(model, window, attn);
    const std::size_t scored = std::min(stride, context_len - 1);
    for (std::size_t t = context_len - scored; t < context_len; ++t) {
      const double* row = logits.data() + (t - 1) * v;
      double m = row[0];
      for (std::size_t j = 1; j < v; ++j) m = std::max(m, row[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - m);
      report.nll += (m + std::log(z)) - row[window[t]];
      report.token_count += 1;
    }
  }
  report.perplexity = std::exp(report.nll / static_cast<double>(report.token_count));
  return report;
}

namespace {

constexpr const char* kFiller =
    "The flowers are blooming. The trees are tall. The river flows. Just keep going. "
    "Onward and upward. ";
constexpr const char* kQuestion = "What is the passkey? The passkey is";

std::string key_block(int passkey) {
  const std::string k = std::to_string(passkey);
  return "Critical Note: The passkey is " + k + ". Remember this number. " + k +
         " is the passkey. ";
}

}  // namespace

PasskeyDoc passkey_doc_with_key(std::size_t m, std::size_t n, int passkey) {
  if (passkey < 10000 || passkey > 99999) {
    throw ConfigError("passkey must be a five-digit integer, got " + std::to_string(passkey));
  }
  PasskeyDoc doc;
  doc.passkey = passkey;
  doc.m_fillers = m;
  doc.n_fillers = n;
  std::string text;
  for (std::size_t i = 0; i < m; ++i) text += kFiller;
  doc.key_offset = text.size();
  text += key_block(passkey);
  for (std::size_t i = 0; i < n; ++i) text += kFiller;
  text += kQuestion;
  doc.text = std::move(text);
  doc.tokens = encode_bytes(doc.text);
  return doc;
}

PasskeyDoc passkey_gen(std::size_t m, std::size_t n, std::uint64_t seed) {
  Rng rng(mix64(seed, 0x7061737365ULL));
  const int passkey = 10000 + static_cast<int>(rng.next_below(90000));
  return passkey_doc_with_key(m, n, passkey);
}

namespace {

// First maximal digit run of length exactly five, parsed as an int.
std::optional<int> first_five_digit_run(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    if (std::isdigit(static_cast<unsigned char>(s[i]))) {
      std::size_t j = i;
      while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
      if (j - i == 5) return std::stoi(std::string(s.substr(i, 5)));
      i = j;
    } else {
      ++i;
    }
  }
  return std::nullopt;
}

}  // namespace

bool passkey_score(const std::string& generated, const PasskeyDoc& doc) {
  const auto found = first_five_digit_run(generated);
  return found.has_value() && *found == doc.passkey;
}

std::optional<int> oracle_retrieve(const std::string& prompt_text) {
  const std::string anchor = "passkey is ";
  std::size_t at = prompt_text.find(anchor);
  while (at != std::string::npos) {
    const std::size_t digits = at + anchor.size();
    if (digits < prompt_text.size() &&
        std::isdigit(static_cast<unsigned char>(prompt_text[digits]))) {
      return first_five_digit_run(std::string_view(prompt_text).substr(digits));
    }
    at = prompt_text.find(anchor, at + 1);
  }
  return std::nullopt;
}

SinkMassReport sink_mass(const DecoderModel& model, const std::vector<int>& tokens,
                         std::size_t g) {
  const std::size_t n = tokens.size();
  if (g >= n) throw ConfigError("sink_mass: g must be below the sequence length");
  SinkMassReport report;
  if (g == 0) {
    report.per_layer_head.assign(model.config.n_layers,
                                 std::vector<double>(model.config.n_heads, 0.0));
    return report;
  }
  AttnProbes probes;
  forward(model, tokens, AttnMode::full_causal(model.config.n_heads), nullptr, &probes);
  double total = 0.0;
  std::size_t cells = 0;
  report.per_layer_head.resize(probes.probs.size());
  for (std::size_t l = 0; l < probes.probs.size(); ++l) {
    report.per_layer_head[l].resize(probes.probs[l].size());
    for (std::size_t h = 0; h < probes.probs[l].size(); ++h) {
      const Tensor& p = probes.probs[l][h];
      double acc = 0.0;
      for (std::size_t q = g; q < n; ++q) {
        for (std::size_t j = 0; j < g; ++j) acc += p.data()[q * n + j];
      }
      const double mass = acc / static_cast<double>(n - g);
      report.per_layer_head[l][h] = mass;
      total += mass;
      cells += 1;
    }
  }
  report.aggregate = cells ? total / static_cast<double>(cells) : 0.0;
  return report;
}

}  // namespace sinkattn
