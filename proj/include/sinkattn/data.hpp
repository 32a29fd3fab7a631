#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sinkattn {

// Deterministic synthetic byte-level text: documents built from a seeded
// lexicon, each document drawing most of its words from a small per-document
// topic pool so that earlier context stays predictive across long ranges.
// Returns at least min_bytes of ASCII text.
std::string generate_corpus_text(std::uint64_t seed, std::size_t min_bytes);

// Prefix-echo sequence: random prefix, constant filler, prefix repeated.
// Token 1 is the filler, prefix tokens are drawn from [3, vocab).
std::vector<int> make_copy_sequence(std::uint64_t seed, std::size_t prefix_len,
                                    std::size_t filler_len, std::size_t vocab);

}  // namespace sinkattn
