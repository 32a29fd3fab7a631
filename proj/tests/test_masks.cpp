#include <doctest.h>

#include <set>
#include <sstream>

#include "sinkattn/masks.hpp"
#include "sinkattn/rng.hpp"

using namespace sinkattn;

namespace {

std::string row_string(const AttentionMask& m, std::size_t i) {
  std::string s;
  for (std::size_t j = 0; j < m.n; ++j) s.push_back(m.at(i, j) ? '1' : '0');
  return s;
}

std::set<std::size_t> row_set(const AttentionMask& m, std::size_t i) {
  std::set<std::size_t> s;
  for (std::size_t j = 0; j < m.n; ++j) {
    if (m.at(i, j)) s.insert(j);
  }
  return s;
}

void check_causal_and_self(const AttentionMask& m) {
  for (std::size_t i = 0; i < m.n; ++i) {
    CHECK(m.at(i, i));
    for (std::size_t j = i + 1; j < m.n; ++j) CHECK_FALSE(m.at(i, j));
  }
}

Tensor random_bnhd(std::size_t b, std::size_t n, std::size_t h, std::size_t d,
                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> data(b * n * h * d);
  for (double& v : data) v = rng.next_normal();
  return Tensor::from_data({b, n, h, d}, std::move(data));
}

}  // namespace

TEST_SUITE_BEGIN("masks");

TEST_CASE("full causal enumerated") {
  AttentionMask m = build_full_causal(3);
  CHECK(row_string(m, 0) == "100");
  CHECK(row_string(m, 1) == "110");
  CHECK(row_string(m, 2) == "111");
  CHECK(row_string(build_full_causal(1), 0) == "1");
  for (std::size_t n = 1; n <= 64; ++n) {
    CHECK(nnz(build_full_causal(n)) == n * (n + 1) / 2);
  }
}

TEST_CASE("group enumerated") {
  AttentionMask m = build_group(4, 2);
  CHECK(row_string(m, 0) == "1000");
  CHECK(row_string(m, 1) == "1100");
  CHECK(row_string(m, 2) == "0010");
  CHECK(row_string(m, 3) == "0011");
  CHECK(build_group(6, 6) == build_full_causal(6));
  CHECK(nnz(build_group(8, 4)) == 20);
  CHECK_THROWS_AS(build_group(8, 3), ConfigError);
}

TEST_CASE("shifted group wraps one group across the ends") {
  AttentionMask m = build_shifted_group(8, 4);
  // rolled groups on original indices: {2,3,4,5} and {6,7,0,1}
  CHECK(row_set(m, 0) == std::set<std::size_t>{0});
  CHECK(row_set(m, 1) == std::set<std::size_t>{0, 1});
  CHECK(row_set(m, 2) == std::set<std::size_t>{2});
  CHECK(row_set(m, 5) == std::set<std::size_t>{2, 3, 4, 5});
  CHECK(row_set(m, 6) == std::set<std::size_t>{6});
  CHECK(row_set(m, 7) == std::set<std::size_t>{6, 7});
  CHECK(build_shifted_group(8, 8) == build_full_causal(8));
  CHECK_THROWS_AS(build_shifted_group(9, 3), ConfigError);  // odd group size
}

TEST_CASE("sink fixed enumerated and degenerate") {
  CHECK(build_sink_fixed(8, 4, 0) == build_group(8, 4));
  AttentionMask m = build_sink_fixed(4, 2, 1);
  CHECK(row_string(m, 0) == "1000");
  CHECK(row_string(m, 1) == "1100");
  CHECK(row_string(m, 2) == "1010");
  CHECK(row_string(m, 3) == "1011");
  CHECK_THROWS_AS(build_sink_fixed(4, 2, 2), ConfigError);
}

TEST_CASE("sparse fixed attends the tails of preceding groups") {
  CHECK(build_sparse_fixed(8, 4, 0) == build_group(8, 4));
  AttentionMask m = build_sparse_fixed(8, 4, 1);
  CHECK(row_set(m, 5) == std::set<std::size_t>{3, 4, 5});
  CHECK(row_set(m, 4) == std::set<std::size_t>{3, 4});
  check_causal_and_self(m);
}

TEST_CASE("stride pattern") {
  CHECK(build_stride(8, 1, 2) == build_full_causal(8));
  AttentionMask m = build_stride(8, 4, 2);
  CHECK(row_set(m, 7) == std::set<std::size_t>{3, 6, 7});
  check_causal_and_self(m);
}

TEST_CASE("random pattern saturates and reproduces") {
  CHECK(build_random(6, 6, 9) == build_full_causal(6));
  CHECK(build_random(6, 99, 9) == build_full_causal(6));
  AttentionMask a = build_random(8, 2, 42);
  AttentionMask b = build_random(8, 2, 42);
  CHECK(a == b);
  CHECK(row_set(a, 0) == std::set<std::size_t>{0});
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(row_set(a, i).size() == std::min<std::size_t>(2, i) + 1);
  }
}

TEST_CASE("every builder is causal with self edges for n up to 64") {
  for (std::size_t n = 1; n <= 64; ++n) {
    check_causal_and_self(build_full_causal(n));
    check_causal_and_self(build_stride(n, 3, 2));
    check_causal_and_self(build_random(n, 3, n));
    for (std::size_t w = 1; w <= n; ++w) {
      if (n % w != 0) continue;
      check_causal_and_self(build_group(n, w));
      if (w % 2 == 0) check_causal_and_self(build_shifted_group(n, w));
      for (std::size_t g = 0; g < std::min<std::size_t>(w, 5); ++g) {
        check_causal_and_self(build_sink_fixed(n, w, g));
        check_causal_and_self(build_sparse_fixed(n, w, g));
      }
    }
  }
}

TEST_CASE("sink fixed sparsity bound") {
  for (std::size_t n : {8, 16, 32, 64}) {
    for (std::size_t w : {4, 8}) {
      if (n % w != 0) continue;
      for (std::size_t g = 0; g < w; ++g) {
        CHECK(nnz(build_sink_fixed(n, w, g)) <= n * w + 2 * g * n);
      }
    }
  }
}

TEST_CASE("nnz spot values") {
  CHECK(nnz(build_full_causal(4)) == 10);
  CHECK(nnz(build_group(4, 2)) == 6);
  CHECK(nnz(build_sink_fixed(4, 2, 1)) == 7);
}

TEST_CASE("pattern spec dispatch validates") {
  PatternSpec spec;
  spec.kind = PatternKind::SinkFixed;
  spec.group_size = 4;
  spec.num_sink = 2;
  CHECK(build_mask(spec, 8) == build_sink_fixed(8, 4, 2));
  spec.group_size = 3;
  CHECK_THROWS_AS(build_mask(spec, 8), ConfigError);
}

TEST_CASE("head group assignment splits the heads") {
  PatternSpec group;
  group.kind = PatternKind::Group;
  group.group_size = 2;
  PatternSpec shifted;
  shifted.kind = PatternKind::ShiftedGroup;
  shifted.group_size = 2;
  auto masks = HeadGroupAssignment::split(4, group, shifted).build_masks(4);
  REQUIRE(masks.size() == 4);
  CHECK(masks[0] == build_group(4, 2));
  CHECK(masks[1] == build_group(4, 2));
  CHECK(masks[2] == build_shifted_group(4, 2));
  CHECK(masks[3] == build_shifted_group(4, 2));
  CHECK_THROWS_AS(HeadGroupAssignment::split(3, group, shifted), ConfigError);
  CHECK_NOTHROW(HeadGroupAssignment::uniform(3, group));
}

TEST_CASE("sr_shift rolls only the second half of the heads") {
  Tensor x = random_bnhd(1, 4, 2, 3, 31);
  Tensor y = sr_shift(x, 2);
  // head 0 untouched
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(y.data()[(t * 2 + 0) * 3 + c] == x.data()[(t * 2 + 0) * 3 + c]);
    }
  }
  // head 1 sees token order 1,2,3,0
  for (std::size_t t = 0; t < 4; ++t) {
    const std::size_t src = (t + 1) % 4;
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(y.data()[(t * 2 + 1) * 3 + c] == x.data()[(src * 2 + 1) * 3 + c]);
    }
  }
}

TEST_CASE("sr_unshift rolls the opposite way") {
  Tensor x = random_bnhd(1, 4, 2, 3, 32);
  Tensor y = sr_unshift(x, 2);
  // head 1 sees token order 3,0,1,2
  for (std::size_t t = 0; t < 4; ++t) {
    const std::size_t src = (t + 3) % 4;
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(y.data()[(t * 2 + 1) * 3 + c] == x.data()[(src * 2 + 1) * 3 + c]);
    }
  }
}

TEST_CASE("sr_unshift inverts sr_shift bit-exactly") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Tensor x = random_bnhd(2, 8, 4, 5, seed);
    Tensor back = sr_unshift(sr_shift(x, 4), 4);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
  }
  Tensor z = Tensor::zeros({1, 4, 2, 2});
  Tensor rolled = sr_shift(z, 2);
  for (std::size_t i = 0; i < z.numel(); ++i) CHECK(rolled.data()[i] == 0.0);
}

TEST_CASE("sr_shift validates its preconditions") {
  Tensor x = random_bnhd(1, 6, 2, 2, 5);
  CHECK_THROWS_AS(sr_shift(x, 4), ConfigError);   // w does not divide N
  CHECK_THROWS_AS(sr_shift(x, 3), ConfigError);   // odd w
  Tensor odd_heads = random_bnhd(1, 4, 3, 2, 6);
  CHECK_THROWS_AS(sr_shift(odd_heads, 2), ConfigError);
}

TEST_CASE("roll mask oracle conjugates the group mask") {
  auto masks = roll_mask_oracle(8, 4, 4);
  REQUIRE(masks.size() == 4);
  const AttentionMask group = build_group(8, 4);
  CHECK(masks[0] == group);
  CHECK(masks[1] == group);
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(masks[2].at(i, j) == group.at((i + 2) % 8, (j + 2) % 8));
    }
  }
  CHECK(masks[2] == masks[3]);
}

TEST_CASE("mask dump formats") {
  AttentionMask m = build_sink_fixed(8, 4, 2);
  std::ostringstream pgm;
  write_mask_pgm(m, pgm);
  const std::string s = pgm.str();
  CHECK(s.rfind("P2\n8 8\n255\n", 0) == 0);
  // two solid leading columns: every row starts "0 0 "
  std::istringstream in(s);
  std::string line;
  for (int skip = 0; skip < 3; ++skip) std::getline(in, line);
  for (int i = 0; i < 8; ++i) {
    std::getline(in, line);
    CHECK(line.rfind("0 0 ", 0) == 0);
  }
  std::ostringstream pgm2;
  write_mask_pgm(build_sink_fixed(8, 4, 2), pgm2);
  CHECK(pgm.str() == pgm2.str());

  std::ostringstream csv;
  write_mask_csv(build_full_causal(2), csv);
  CHECK(csv.str() == "i,j\n0,0\n1,0\n1,1\n");
}

TEST_SUITE_END();
