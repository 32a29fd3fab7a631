#include "sinkattn/data.hpp"

#include <algorithm>

#include "sinkattn/errors.hpp"
#include "sinkattn/rng.hpp"

namespace sinkattn {

namespace {

constexpr std::size_t kLexiconSize = 160;
constexpr std::size_t kTopicSize = 14;

std::vector<std::string> build_lexicon(Rng& rng) {
  std::vector<std::string> words;
  words.reserve(kLexiconSize);
  while (words.size() < kLexiconSize) {
    const std::size_t len = 2 + rng.next_below(6);
    std::string w;
    for (std::size_t i = 0; i < len; ++i) {
      w.push_back(static_cast<char>('a' + rng.next_below(26)));
    }
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(std::move(w));
  }
  return words;
}

// Skewed index: low indices dominate, roughly Zipf-like.
std::size_t skewed_index(Rng& rng, std::size_t size) {
  const double u = rng.next_double();
  return static_cast<std::size_t>(u * u * static_cast<double>(size));
}

}  // namespace

std::string generate_corpus_text(std::uint64_t seed, std::size_t min_bytes) {
  Rng rng(mix64(seed, 0x636f72707573ULL));
  const std::vector<std::string> lexicon = build_lexicon(rng);
  std::string text;
  text.reserve(min_bytes + 4096);
  while (text.size() < min_bytes) {
    // per-document topic pool
    std::vector<std::size_t> topic;
    while (topic.size() < kTopicSize) {
      const std::size_t idx = rng.next_below(lexicon.size());
      if (std::find(topic.begin(), topic.end(), idx) == topic.end()) topic.push_back(idx);
    }
    const std::size_t sentences = 40 + rng.next_below(41);
    for (std::size_t s = 0; s < sentences; ++s) {
      const std::size_t words = 4 + rng.next_below(6);
      for (std::size_t wi = 0; wi < words; ++wi) {
        const bool from_topic = rng.next_double() < 0.85;
        const std::string& word = from_topic
                                      ? lexicon[topic[skewed_index(rng, topic.size())]]
                                      : lexicon[rng.next_below(lexicon.size())];
        text += word;
        text.push_back(wi + 1 == words ? '.' : ' ');
      }
      text.push_back(' ');
    }
    text.push_back('\n');
  }
  return text;
}

std::vector<int> make_copy_sequence(std::uint64_t seed, std::size_t prefix_len,
                                    std::size_t filler_len, std::size_t vocab) {
  if (vocab < 4) throw ConfigError("make_copy_sequence: vocab must be >= 4");
  if (prefix_len == 0) throw ConfigError("make_copy_sequence: prefix_len must be >= 1");
  Rng rng(mix64(seed, 0x636f7079ULL));
  std::vector<int> prefix(prefix_len);
  for (int& t : prefix) t = 3 + static_cast<int>(rng.next_below(vocab - 3));
  std::vector<int> seq;
  seq.reserve(2 * prefix_len + filler_len);
  seq.insert(seq.end(), prefix.begin(), prefix.end());
  seq.insert(seq.end(), filler_len, 1);
  seq.insert(seq.end(), prefix.begin(), prefix.end());
  return seq;
}

}  // namespace sinkattn
