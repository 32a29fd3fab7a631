#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "sinkattn/tensor.hpp"

namespace sinkattn {

// Boolean attend-adjacency: allowed(i, j) iff query position i may attend to
// key position j. Immutable once built; freely shareable.
struct AttentionMask {
  std::size_t n = 0;
  std::vector<std::uint8_t> allowed;  // n*n row-major

  AttentionMask() = default;
  explicit AttentionMask(std::size_t n_) : n(n_), allowed(n_ * n_, 0) {}

  bool at(std::size_t i, std::size_t j) const { return allowed[i * n + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { allowed[i * n + j] = v ? 1 : 0; }
  const std::uint8_t* row(std::size_t i) const { return allowed.data() + i * n; }
  const std::uint8_t* data() const { return allowed.data(); }

  bool operator==(const AttentionMask&) const = default;
};

enum class PatternKind : int {
  FullCausal,
  Group,
  ShiftedGroup,
  SinkFixed,
  SparseFixed,
  Stride,
  Random,
};

std::string pattern_kind_name(PatternKind k);
PatternKind pattern_kind_from_name(const std::string& name);

// Declarative attention-pattern description. Parameters not used by `kind`
// are ignored; all validation happens when a mask is built for a concrete n.
struct PatternSpec {
  PatternKind kind = PatternKind::FullCausal;
  std::size_t group_size = 0;  // w
  std::size_t num_sink = 0;    // g
  std::size_t stride = 0;      // s
  std::size_t random_k = 0;    // edges per row
  std::uint64_t seed = 0;

  bool operator==(const PatternSpec&) const = default;
};

AttentionMask build_full_causal(std::size_t n);
AttentionMask build_group(std::size_t n, std::size_t w);
AttentionMask build_shifted_group(std::size_t n, std::size_t w);
AttentionMask build_sink_fixed(std::size_t n, std::size_t w, std::size_t g);
AttentionMask build_sparse_fixed(std::size_t n, std::size_t w, std::size_t g);
AttentionMask build_stride(std::size_t n, std::size_t s, std::size_t w);
AttentionMask build_random(std::size_t n, std::size_t k, std::uint64_t seed);

AttentionMask build_mask(const PatternSpec& spec, std::size_t n);

std::size_t nnz(const AttentionMask& mask);

// Per-half head patterns: heads [0, H/2) use `first`, heads [H/2, H) use
// `second`. H may be odd only when both halves are identical.
struct HeadGroupAssignment {
  std::size_t n_heads = 0;
  std::pair<PatternSpec, PatternSpec> pattern_per_half;

  static HeadGroupAssignment uniform(std::size_t n_heads, PatternSpec spec);
  static HeadGroupAssignment split(std::size_t n_heads, PatternSpec first, PatternSpec second);

  void validate() const;
  std::vector<AttentionMask> build_masks(std::size_t n) const;  // one per head

  bool operator==(const HeadGroupAssignment&) const = default;
};

// Roll-for-grouped-attention on x[B,N,H,D]: heads [H/2, H) get their token
// axis rolled by -w/2, so out[b,t,h,:] = x[b,(t+w/2) mod N,h,:]. Heads below
// H/2 are copied untouched. sr_unshift is the exact inverse (+w/2 roll).
Tensor sr_shift(const Tensor& x, std::size_t w, Tape* tape = nullptr);
Tensor sr_unshift(const Tensor& x, std::size_t w, Tape* tape = nullptr);

// Per-head masks on ORIGINAL token indices realized by the
// sr_shift -> grouped-causal-attend -> sr_unshift pipeline: heads below H/2
// get build_group(n, w); the rest get the group mask conjugated by the roll,
// allowed[i][j] = group[(i+w/2) mod n][(j+w/2) mod n], i.e. causality taken
// in rolled coordinates exactly as the pipeline computes it.
std::vector<AttentionMask> roll_mask_oracle(std::size_t n, std::size_t w, std::size_t n_heads);

// Plain-text PGM (P2, allowed = 0 ink on 255 background) and CSV edge list.
void write_mask_pgm(const AttentionMask& mask, std::ostream& os);
void write_mask_csv(const AttentionMask& mask, std::ostream& os);

}  // namespace sinkattn
