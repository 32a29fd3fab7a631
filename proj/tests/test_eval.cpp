#include <doctest.h>

#include <cmath>

#include "sinkattn/data.hpp"
#include "sinkattn/eval.hpp"
#include "sinkattn/rng.hpp"

using namespace sinkattn;

namespace {

ModelConfig tiny_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 24;
  c.max_positions = 512;
  c.seed = 31;
  return c;
}

DecoderModel uniform_model(std::size_t vocab) {
  DecoderModel m = init_model(tiny_config(vocab));
  for (auto& [name, t] : m.named_parameters()) {
    Tensor p = t;
    std::fill(p.vec().begin(), p.vec().end(), 0.0);
  }
  return m;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (int& v : t) v = static_cast<int>(rng.next_below(vocab));
  return t;
}

// Naive chunked evaluation: split the stream into disjoint context-length
// chunks and score every in-chunk target.
double chunked_nll(const DecoderModel& m, const std::vector<int>& stream, std::size_t context,
                   std::size_t* count) {
  double nll = 0.0;
  *count = 0;
  const AttnMode mode = AttnMode::full_causal(m.config.n_heads);
  for (std::size_t start = 0; start + context <= stream.size(); start += context) {
    std::vector<int> window(stream.begin() + start, stream.begin() + start + context);
    Tensor logits = forward(m, window, mode);
    const std::size_t v = m.config.vocab_size;
    for (std::size_t t = 1; t < context; ++t) {
      const double* row = logits.data() + (t - 1) * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
      nll += (mx + std::log(z)) - row[window[t]];
      ++*count;
    }
  }
  return nll;
}

}  // namespace

TEST_SUITE_BEGIN("eval");

TEST_CASE("uniform model perplexity equals the vocab size") {
  for (std::size_t vocab : {16, 64}) {
    DecoderModel m = uniform_model(vocab);
    const auto stream = random_tokens(200, vocab, 1);
    for (auto [context, stride] : {std::pair<std::size_t, std::size_t>{32, 32},
                                   {32, 16},
                                   {64, 8}}) {
      const PplReport r = perplexity(m, stream, context, stride);
      CHECK(std::abs(r.perplexity - static_cast<double>(vocab)) < 1e-9);
      CHECK(r.perplexity == doctest::Approx(std::exp(r.nll / double(r.token_count))));
      CHECK(r.perplexity >= 1.0);
    }
  }
}

TEST_CASE("stride equal to context length matches naive chunked evaluation") {
  DecoderModel m = init_model(tiny_config(32));
  const auto stream = random_tokens(300, 32, 2);
  const PplReport r = perplexity(m, stream, 64, 64);
  std::size_t count = 0;
  const double expect = chunked_nll(m, stream, 64, &count);
  CHECK(r.token_count == count);
  CHECK(std::abs(r.nll - expect) < 1e-12 * std::max(1.0, std::abs(expect)));
}

TEST_CASE("sliding windows score each token at most once") {
  DecoderModel m = uniform_model(16);
  const auto stream = random_tokens(100, 16, 3);
  const PplReport r = perplexity(m, stream, 40, 10);
  // windows at 0,10,...,60 -> 7 windows x 10 scored targets
  CHECK(r.token_count == 70);
}

TEST_CASE("perplexity validates its inputs") {
  DecoderModel m = uniform_model(16);
  const auto stream = random_tokens(64, 16, 4);
  CHECK_THROWS_AS(perplexity(m, stream, 64, 64), ConfigError);   // not longer than one window
  CHECK_THROWS_AS(perplexity(m, stream, 32, 40), ConfigError);   // stride > context
  CHECK_THROWS_AS(perplexity(m, stream, 32, 0), ConfigError);
}

TEST_CASE("overfit model reaches perplexity near one") {
  ModelConfig cfg = tiny_config(32);
  cfg.n_layers = 2;
  DecoderModel m = init_model(cfg);
  AdamState opt;
  // short repeating pattern is memorizable
  std::vector<int> pattern;
  for (int rep = 0; rep < 16; ++rep) {
    for (int c = 0; c < 8; ++c) pattern.push_back(c + 2);
  }
  const AttnMode mode = AttnMode::full_causal(cfg.n_heads);
  std::vector<std::vector<int>> batch = {std::vector<int>(pattern.begin(), pattern.begin() + 64)};
  for (int s = 0; s < 400; ++s) train_step(m, batch, mode, opt, warmup_lr(3e-3, s, 20));
  const PplReport r = perplexity(m, pattern, 64, 64);
  CHECK(r.perplexity < 1.1);
}

TEST_CASE("passkey document structure") {
  const PasskeyDoc bare = passkey_doc_with_key(0, 0, 84729);
  CHECK(bare.text ==
        "Critical Note: The passkey is 84729. Remember this number. 84729 is the passkey. "
        "What is the passkey? The passkey is");
  CHECK(bare.text.find("The passkey is 84729") != std::string::npos);

  const PasskeyDoc doc = passkey_doc_with_key(2, 1, 84729);
  CHECK(doc.text.find("Critical Note") == doc.key_offset);
  CHECK(doc.text.find("Critical Note", doc.key_offset + 1) == std::string::npos);
  CHECK(doc.text.rfind("What is the passkey? The passkey is") ==
        doc.text.size() - std::string("What is the passkey? The passkey is").size());
  CHECK(doc.tokens == encode_bytes(doc.text));
  CHECK_THROWS_AS(passkey_doc_with_key(0, 0, 1234), ConfigError);
}

TEST_CASE("passkey generation is deterministic and in range") {
  const PasskeyDoc a = passkey_gen(3, 2, 99);
  const PasskeyDoc b = passkey_gen(3, 2, 99);
  CHECK(a.text == b.text);
  CHECK(a.passkey == b.passkey);
  CHECK(a.passkey >= 10000);
  CHECK(a.passkey <= 99999);
  CHECK(passkey_gen(3, 2, 100).passkey != a.passkey);
}

TEST_CASE("passkey scoring reads the first five-digit run") {
  const PasskeyDoc doc = passkey_doc_with_key(1, 1, 84729);
  CHECK(passkey_score("The passkey is 84729.", doc));
  CHECK(passkey_score(" 84729", doc));
  CHECK_FALSE(passkey_score("no digits here", doc));
  CHECK_FALSE(passkey_score("123456 84729", doc));  // six-digit run is not a passkey
  CHECK_FALSE(passkey_score("12345", doc));
  CHECK(passkey_score("1234 84729", doc));  // four-digit run skipped
}

TEST_CASE("oracle retriever resolves every generated document") {
  std::size_t hits = 0, total = 0;
  for (std::size_t m = 0; m <= 8; ++m) {
    for (std::size_t n = 0; n <= 8; ++n) {
      const PasskeyDoc doc = passkey_gen(m, n, 1000 + m * 17 + n);
      const auto got = oracle_retrieve(doc.text);
      hits += (got && *got == doc.passkey) ? 1 : 0;
      ++total;
    }
  }
  CHECK(hits == total);
}

TEST_CASE("sink mass of a uniform-attention model has a closed form") {
  ModelConfig cfg = tiny_config(16);
  DecoderModel m = init_model(cfg);
  // zeroed q/k projections make every causal row uniform
  std::fill(m.layers[0].wq.w.vec().begin(), m.layers[0].wq.w.vec().end(), 0.0);
  std::fill(m.layers[0].wk.w.vec().begin(), m.layers[0].wk.w.vec().end(), 0.0);
  const std::size_t n = 16, g = 4;
  const auto tokens = random_tokens(n, 16, 5);
  const SinkMassReport r = sink_mass(m, tokens, g);
  double expect = 0.0;
  for (std::size_t q = g; q < n; ++q) expect += static_cast<double>(g) / double(q + 1);
  expect /= static_cast<double>(n - g);
  for (const auto& layer : r.per_layer_head) {
    for (double mass : layer) CHECK(mass == doctest::Approx(expect).epsilon(1e-10));
  }
  CHECK(r.aggregate == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("sink mass bounds and edge cases") {
  DecoderModel m = init_model(tiny_config(16));
  const auto tokens = random_tokens(12, 16, 6);
  CHECK(sink_mass(m, tokens, 0).aggregate == 0.0);
  const SinkMassReport r = sink_mass(m, tokens, 3);
  for (const auto& layer : r.per_layer_head) {
    for (double mass : layer) {
      CHECK(mass >= 0.0);
      CHECK(mass <= 1.0);
    }
  }
  CHECK_THROWS_AS(sink_mass(m, tokens, 12), ConfigError);
}

TEST_CASE("byte tokenizer round trip") {
  const std::string text = "Hello, bytes\n\x7f";
  CHECK(decode_bytes(encode_bytes(text)) == text);
  CHECK_THROWS_AS(decode_bytes({300}), IndexError);
}

TEST_CASE("synthetic corpus is deterministic ascii") {
  const std::string a = generate_corpus_text(5, 4096);
  const std::string b = generate_corpus_text(5, 4096);
  CHECK(a == b);
  CHECK(a.size() >= 4096);
  for (unsigned char c : a) CHECK(c < 128);
  CHECK(generate_corpus_text(6, 4096) != a);
}

TEST_CASE("copy sequences echo their prefix") {
  const auto seq = make_copy_sequence(3, 16, 48, 64);
  REQUIRE(seq.size() == 80);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(seq[i] == seq[64 + i]);
    CHECK(seq[i] >= 3);
    CHECK(seq[i] < 64);
  }
  for (std::size_t i = 16; i < 64; ++i) CHECK(seq[i] == 1);
  CHECK(make_copy_sequence(3, 16, 48, 64) == seq);
  CHECK(make_copy_sequence(4, 16, 48, 64) != seq);
}

TEST_SUITE_END();
