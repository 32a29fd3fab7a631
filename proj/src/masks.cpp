#include "sinkattn/masks.hpp"

#include <algorithm>
#include <unordered_set>

#include "sinkattn/rng.hpp"

namespace sinkattn {

namespace {

void require_divides(std::size_t w, std::size_t n, const char* who) {
  if (w == 0 || n % w != 0) {
    throw ConfigError(std::string(who) + ": group size " + std::to_string(w) +
                      " must divide sequence length " + std::to_string(n));
  }
}

void intersect_causal(AttentionMask& m) {
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = i + 1; j < m.n; ++j) m.set(i, j, false);
  }
}

}  // namespace

std::string pattern_kind_name(PatternKind k) {
  switch (k) {
    case PatternKind::FullCausal: return "full_causal";
    case PatternKind::Group: return "group";
    case PatternKind::ShiftedGroup: return "shifted_group";
    case PatternKind::SinkFixed: return "sink_fixed";
    case PatternKind::SparseFixed: return "sparse_fixed";
    case PatternKind::Stride: return "stride";
    case PatternKind::Random: return "random";
  }
  throw ConfigError("unknown pattern kind");
}

PatternKind pattern_kind_from_name(const std::string& name) {
  if (name == "full_causal") return PatternKind::FullCausal;
  if (name == "group") return PatternKind::Group;
  if (name == "shifted_group") return PatternKind::ShiftedGroup;
  if (name == "sink_fixed") return PatternKind::SinkFixed;
  if (name == "sparse_fixed") return PatternKind::SparseFixed;
  if (name == "stride") return PatternKind::Stride;
  if (name == "random") return PatternKind::Random;
  throw ConfigError("unknown pattern kind '" + name + "'");
}

AttentionMask build_full_causal(std::size_t n) {
  if (n == 0) throw ConfigError("build_full_causal: n must be >= 1");
  AttentionMask m(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

AttentionMask build_group(std::size_t n, std::size_t w) {
  require_divides(w, n, "build_group");
  AttentionMask m(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t g0 = (i / w) * w;
    for (std::size_t j = g0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

AttentionMask build_shifted_group(std::size_t n, std::size_t w) {
  require_divides(w, n, "build_shifted_group");
  if (w % 2 != 0) {
    throw ConfigError("build_shifted_group: group size must be even, got " + std::to_string(w));
  }
  const std::size_t s = w / 2;
  AttentionMask m(n);
  // same rolled group, then causal in original coordinates
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t gi = ((i + n - s) % n) / w;
    for (std::size_t j = 0; j <= i; ++j) {
      if (((j + n - s) % n) / w == gi) m.set(i, j, true);
    }
  }
  return m;
}

AttentionMask build_sink_fixed(std::size_t n, std::size_t w, std::size_t g) {
  require_divides(w, n, "build_sink_fixed");
  if (g >= w) {
    throw ConfigError("build_sink_fixed: sink count " + std::to_string(g) +
                      " must be below group size " + std::to_string(w));
  }
  AttentionMask m = build_group(n, w);
  for (std::size_t i = 0; i < g; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      m.set(i, j, true);  // sink rows global
      m.set(j, i, true);  // sink columns global
    }
  }
  intersect_causal(m);
  return m;
}

AttentionMask build_sparse_fixed(std::size_t n, std::size_t w, std::size_t g) {
  require_divides(w, n, "build_sparse_fixed");
  AttentionMask m = build_group(n, w);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t gi = i / w;
    for (std::size_t gp = 0; gp < gi; ++gp) {
      const std::size_t end = (gp + 1) * w;
      for (std::size_t j = end - std::min(g, w); j < end; ++j) m.set(i, j, true);
    }
  }
  intersect_causal(m);
  return m;
}

AttentionMask build_stride(std::size_t n, std::size_t s, std::size_t w) {
  if (n == 0) throw ConfigError("build_stride: n must be >= 1");
  if (s == 0) throw ConfigError("build_stride: stride must be >= 1");
  AttentionMask m(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const std::size_t back = i - j;
      if (back < w || back % s == 0) m.set(i, j, true);
    }
  }
  return m;
}

AttentionMask build_random(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (n == 0) throw ConfigError("build_random: n must be >= 1");
  if (k == 0) throw ConfigError("build_random: k must be >= 1");
  AttentionMask m(n);
  for (std::size_t i = 0; i < n; ++i) {
    m.set(i, i, true);
    const std::size_t want = std::min<std::size_t>(k, i);
    if (want == i) {
      for (std::size_t j = 0; j < i; ++j) m.set(i, j, true);
      continue;
    }
    std::unordered_set<std::size_t> picked;
    std::uint64_t counter = 0;
    while (picked.size() < want) {
      const std::size_t j = mix64(seed, static_cast<std::uint64_t>(i), counter++) % i;
      if (picked.insert(j).second) m.set(i, j, true);
    }
  }
  return m;
}

AttentionMask build_mask(const PatternSpec& spec, std::size_t n) {
  switch (spec.kind) {
    case PatternKind::FullCausal: return build_full_causal(n);
    case PatternKind::Group: return build_group(n, spec.group_size);
    case PatternKind::ShiftedGroup: return build_shifted_group(n, spec.group_size);
    case PatternKind::SinkFixed: return build_sink_fixed(n, spec.group_size, spec.num_sink);
    case PatternKind::SparseFixed: return build_sparse_fixed(n, spec.group_size, spec.num_sink);
    case PatternKind::Stride: return build_stride(n, spec.stride, spec.group_size);
    case PatternKind::Random: return build_random(n, spec.random_k, spec.seed);
  }
  throw ConfigError("build_mask: unknown pattern kind");
}

std::size_t nnz(const AttentionMask& mask) {
  std::size_t c = 0;
  for (std::uint8_t v : mask.allowed) c += (v != 0);
  return c;
}

HeadGroupAssignment HeadGroupAssignment::uniform(std::size_t n_heads, PatternSpec spec) {
  HeadGroupAssignment a;
  a.n_heads = n_heads;
  a.pattern_per_half = {spec, spec};
  a.validate();
  return a;
}

HeadGroupAssignment HeadGroupAssignment::split(std::size_t n_heads, PatternSpec first,
                                               PatternSpec second) {
  HeadGroupAssignment a;
  a.n_heads = n_heads;
  a.pattern_per_half = {std::move(first), std::move(second)};
  a.validate();
  return a;
}

void HeadGroupAssignment::validate() const {
  if (n_heads == 0) throw ConfigError("HeadGroupAssignment: n_heads must be >= 1");
  if (!(pattern_per_half.first == pattern_per_half.second) && n_heads % 2 != 0) {
    throw ConfigError("HeadGroupAssignment: n_heads must be even when the two halves differ");
  }
}

std::vector<AttentionMask> HeadGroupAssignment::build_masks(std::size_t n) const {
  validate();
  const AttentionMask first = build_mask(pattern_per_half.first, n);
  const AttentionMask second = pattern_per_half.first == pattern_per_half.second
                                   ? first
                                   : build_mask(pattern_per_half.second, n);
  std::vector<AttentionMask> out;
  out.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    out.push_back(h < n_heads / 2 ? first : second);
  }
  return out;
}

namespace {

Tensor sr_roll(const Tensor& x, std::size_t w, bool inverse, Tape* tape, const char* op) {
  if (x.ndim() != 4) throw ConfigError(std::string(op) + ": tensor must be [B,N,H,D]");
  const std::size_t B = x.dim(0), N = x.dim(1), H = x.dim(2), D = x.dim(3);
  if (w == 0 || N % w != 0) {
    throw ConfigError(std::string(op) + ": group size " + std::to_string(w) +
                      " must divide N = " + std::to_string(N));
  }
  if (w % 2 != 0) throw ConfigError(std::string(op) + ": group size must be even");
  if (H % 2 != 0) throw ConfigError(std::string(op) + ": head count must be even");

  const std::size_t s = inverse ? (N - w / 2 % N) % N : w / 2;
  const bool rg = tape != nullptr && x.requires_grad();
  Tensor out = Tensor::zeros(x.shape(), rg);
  const std::size_t row = H * D;
  for (std::size_t b = 0; b < B; ++b) {
    const double* xb = x.data() + b * N * row;
    double* ob = out.data() + b * N * row;
    for (std::size_t t = 0; t < N; ++t) {
      const std::size_t src = (t + s) % N;
      // first half heads untouched, second half from the rolled source row
      std::copy(xb + t * row, xb + t * row + (H / 2) * D, ob + t * row);
      std::copy(xb + src * row + (H / 2) * D, xb + src * row + row, ob + t * row + (H / 2) * D);
    }
  }
  if (rg) {
    Tensor tx = x, to = out;
    tape->record([tx, to, s, B, N, H, D]() mutable {
      const std::size_t row = H * D;
      for (std::size_t b = 0; b < B; ++b) {
        double* gx = tx.grad() + b * N * row;
        const double* go = to.grad() + b * N * row;
        for (std::size_t t = 0; t < N; ++t) {
          const std::size_t src = (t + s) % N;
          for (std::size_t c = 0; c < (H / 2) * D; ++c) gx[t * row + c] += go[t * row + c];
          for (std::size_t c = (H / 2) * D; c < row; ++c) gx[src * row + c] += go[t * row + c];
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor sr_shift(const Tensor& x, std::size_t w, Tape* tape) {
  return sr_roll(x, w, false, tape, "sr_shift");
}

Tensor sr_unshift(const Tensor& x, std::size_t w, Tape* tape) {
  return sr_roll(x, w, true, tape, "sr_unshift");
}

std::vector<AttentionMask> roll_mask_oracle(std::size_t n, std::size_t w, std::size_t n_heads) {
  if (n_heads == 0 || n_heads % 2 != 0) {
    throw ConfigError("roll_mask_oracle: head count must be even and positive");
  }
  const AttentionMask group = build_group(n, w);
  if (w % 2 != 0) throw ConfigError("roll_mask_oracle: group size must be even");
  const std::size_t s = w / 2;
  AttentionMask conjugated(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      conjugated.set(i, j, group.at((i + s) % n, (j + s) % n));
    }
  }
  std::vector<AttentionMask> out;
  out.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    out.push_back(h < n_heads / 2 ? group : conjugated);
  }
  return out;
}

void write_mask_pgm(const AttentionMask& mask, std::ostream& os) {
  os << "P2\n" << mask.n << " " << mask.n << "\n255\n";
  for (std::size_t i = 0; i < mask.n; ++i) {
    for (std::size_t j = 0; j < mask.n; ++j) {
      os << (mask.at(i, j) ? 0 : 255);
      os << (j + 1 == mask.n ? '\n' : ' ');
    }
  }
}

void write_mask_csv(const AttentionMask& mask, std::ostream& os) {
  os << "i,j\n";
  for (std::size_t i = 0; i < mask.n; ++i) {
    for (std::size_t j = 0; j < mask.n; ++j) {
      if (mask.at(i, j)) os << i << "," << j << "\n";
    }
  }
}

}  // namespace sinkattn
