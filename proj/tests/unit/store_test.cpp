#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "cotrr/store.hpp"
#include "test_support.hpp"

namespace cotrr {
namespace {

using testing::TempDir;

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("id_" + std::to_string(i + 1));
  return ids;
}

std::vector<float> basis(std::size_t n) {
  std::vector<float> v(n * n, 0.0f);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0f;
  return v;
}

StoreError::Code load_error(const std::filesystem::path& p) {
  try {
    load_store(p);
  } catch (const StoreError& e) {
    return e.code();
  }
  ADD_FAILURE() << "load_store succeeded unexpectedly";
  return StoreError::Code::io;
}

std::string header(std::uint32_t count, std::uint32_t dim) {
  std::string h(kStoreMagic, 8);
  for (std::uint32_t v : {count, dim}) {
    for (int b = 0; b < 4; ++b) h.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
  }
  return h;
}

std::string floats(const std::vector<float>& v) {
  std::string out;
  for (float f : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
  return out;
}

TEST(StoreFormat, WriteIsBitExact) {
  TempDir dir;
  const std::vector<float> v{1.0f, -2.5f, 0.0f, 3.25f, 0.5f, 0.5f};
  write_store(dir / "s.bin", {"a", "b"}, v, 3);
  EXPECT_EQ(testing::read_file(dir / "s.bin"), header(2, 3) + floats(v));
  EXPECT_EQ(testing::read_file(dir / "s.bin.ids"), "a\nb\n");
  EXPECT_EQ(sidecar_path(dir / "s.bin"), dir / "s.bin.ids");
}

TEST(StoreFormat, LoadsWellFormedFile) {
  TempDir dir;
  std::vector<float> v{1, 2, 3, 4, 0, 0, 0, 2, -1, 0, 0, 0};
  write_store(dir / "s.bin", {"x", "y", "z"}, v, 4);
  const auto s = load_store(dir / "s.bin");
  EXPECT_EQ(s.size(), 3u);
  EXPECT_EQ(s.dim(), 4u);
  EXPECT_EQ(s.ids(), (std::vector<std::string>{"x", "y", "z"}));
  for (std::size_t r = 0; r < 3; ++r) {
    double n = 0;
    for (float f : s.row(r)) n += static_cast<double>(f) * f;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
  EXPECT_EQ(s.index_of("z"), 2u);
  EXPECT_THROW(s.index_of("nope"), std::out_of_range);
}

TEST(StoreFormat, AcceptsSidecarWithTrailingNewline) {
  TempDir dir;
  testing::write_file(dir / "s.bin", header(2, 1) + floats({1.0f, 2.0f}));
  testing::write_file(dir / "s.bin.ids", "a\nb\n");
  EXPECT_EQ(load_store(dir / "s.bin").size(), 2u);
}

TEST(StoreFormat, DistinctErrors) {
  TempDir dir;
  const auto p = dir / "s.bin";
  const auto ids = dir / "s.bin.ids";
  testing::write_file(ids, "a\nb\nc");

  testing::write_file(p, "CTRREMB2" + header(3, 4).substr(8) + floats(std::vector<float>(12, 1.0f)));
  EXPECT_EQ(load_error(p), StoreError::Code::bad_magic);

  testing::write_file(p, header(0, 4));
  EXPECT_EQ(load_error(p), StoreError::Code::empty_shape);
  testing::write_file(p, header(3, 0));
  EXPECT_EQ(load_error(p), StoreError::Code::empty_shape);

  testing::write_file(p, header(3, 4) + floats(std::vector<float>(11, 1.0f)));
  EXPECT_EQ(load_error(p), StoreError::Code::truncated_payload);

  testing::write_file(p, header(3, 4) + floats(std::vector<float>(13, 1.0f)));
  EXPECT_EQ(load_error(p), StoreError::Code::trailing_bytes);

  testing::write_file(p, header(3, 4) + floats(std::vector<float>(12, 1.0f)));
  testing::write_file(ids, "a\nb\na");
  EXPECT_EQ(load_error(p), StoreError::Code::duplicate_id);

  testing::write_file(ids, "a\nb");
  EXPECT_EQ(load_error(p), StoreError::Code::id_count_mismatch);

  testing::write_file(ids, "a\nb\nc\n\n");
  EXPECT_NE(load_error(p), StoreError::Code::io);

  testing::write_file(ids, "a\n\nc");
  EXPECT_EQ(load_error(p), StoreError::Code::empty_id);

  std::vector<float> v(12, 1.0f);
  std::fill(v.begin() + 4, v.begin() + 8, 0.0f);
  testing::write_file(p, header(3, 4) + floats(v));
  testing::write_file(ids, "a\nb\nc");
  EXPECT_EQ(load_error(p), StoreError::Code::zero_norm_row);

  EXPECT_EQ(load_error(dir / "missing.bin"), StoreError::Code::io);
}

TEST(StoreFormat, MissingSidecarIsAnError) {
  TempDir dir;
  testing::write_file(dir / "s.bin", header(1, 1) + floats({1.0f}));
  EXPECT_EQ(load_error(dir / "s.bin"), StoreError::Code::io);
}

TEST(TopK, BasisQuery) {
  const EmbeddingStore s(make_ids(4), basis(4), 4);
  const std::vector<float> q{0, 1, 0, 0};
  const auto r = s.top_k(q, 1);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].id, "id_2");
  EXPECT_EQ(r[0].initial_rank, 1);
  EXPECT_DOUBLE_EQ(r[0].score, 1.0);
}

TEST(TopK, TieBreaksByRowIndex) {
  const EmbeddingStore s(make_ids(2), basis(2), 2);
  const std::vector<float> q{3, 3};
  const auto r = s.top_k(q, 2);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].id, "id_1");
  EXPECT_EQ(r[1].id, "id_2");
  EXPECT_NEAR(r[0].score, 0.70711, 1e-5);
  EXPECT_NEAR(r[1].score, 0.70711, 1e-5);
}

TEST(TopK, Errors) {
  const EmbeddingStore s(make_ids(3), basis(3), 3);
  const std::vector<float> wrong_dim{1, 0};
  const std::vector<float> zero{0, 0, 0};
  const std::vector<float> ok{1, 0, 0};
  try {
    s.top_k(wrong_dim, 1);
    FAIL();
  } catch (const StoreError& e) {
    EXPECT_EQ(e.code(), StoreError::Code::dimension_mismatch);
  }
  try {
    s.top_k(zero, 1);
    FAIL();
  } catch (const StoreError& e) {
    EXPECT_EQ(e.code(), StoreError::Code::zero_norm_query);
  }
  try {
    s.top_k(ok, 0);
    FAIL();
  } catch (const StoreError& e) {
    EXPECT_EQ(e.code(), StoreError::Code::invalid_k);
  }
  EXPECT_EQ(s.top_k(ok, 10).size(), 3u);
}

TEST(TopK, ConstructorRejectsBadInput) {
  EXPECT_THROW(EmbeddingStore({"a", "a"}, basis(2), 2), StoreError);
  EXPECT_THROW(EmbeddingStore({"a"}, basis(2), 2), StoreError);
  EXPECT_THROW(EmbeddingStore({"a", "b"}, std::vector<float>(4, 0.0f), 2), StoreError);
}

// Full-sort oracle over the store's normalized rows.
std::vector<std::string> brute_force(const EmbeddingStore& s, const std::vector<float>& q) {
  double qn = 0;
  for (float f : q) qn += static_cast<double>(f) * static_cast<double>(f);
  qn = std::sqrt(qn);
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t r = 0; r < s.size(); ++r) {
    double dot = 0;
    const auto row = s.row(r);
    for (std::size_t d = 0; d < s.dim(); ++d) dot += (static_cast<double>(q[d]) / qn) * static_cast<double>(row[d]);
    scored.emplace_back(dot, r);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::string> out;
  for (const auto& [score, r] : scored) out.push_back(s.ids()[r]);
  return out;
}

TEST(TopK, MatchesBruteForceWithDuplicates) {
  std::mt19937_64 rng(11);
  std::normal_distribution<float> g;
  const std::size_t n = 1000, dim = 64;
  std::vector<float> v(n * dim);
  for (auto& x : v) x = g(rng);
  // Plant exact duplicates so ties occur.
  for (std::size_t r = 0; r < 50; ++r) std::copy_n(v.begin() + r * dim, dim, v.begin() + (500 + r) * dim);
  const EmbeddingStore s(make_ids(n), v, dim);
  for (int qi = 0; qi < 50; ++qi) {
    std::vector<float> q(dim);
    if (qi % 5 == 0) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(qi * dim), dim, q.begin());
    } else {
      for (auto& x : q) x = g(rng);
    }
    const auto expected = brute_force(s, q);
    const auto got = s.top_k(q, 70);
    ASSERT_EQ(got.size(), 70u);
    for (std::size_t i = 0; i < got.size(); ++i) {
      ASSERT_EQ(got[i].id, expected[i]) << "query " << qi << " position " << i;
      EXPECT_EQ(got[i].initial_rank, static_cast<int>(i + 1));
      if (i > 0) EXPECT_LE(got[i].score, got[i - 1].score);
    }
  }
}

TEST(TopK, PrefixAndScaleProperties) {
  std::mt19937_64 rng(12);
  std::normal_distribution<float> g;
  const std::size_t n = 300, dim = 16;
  std::vector<float> v(n * dim);
  for (auto& x : v) x = g(rng);
  const EmbeddingStore s(make_ids(n), v, dim);
  for (int qi = 0; qi < 20; ++qi) {
    std::vector<float> q(dim);
    for (auto& x : q) x = g(rng);
    const auto big = s.top_k(q, 50);
    for (std::size_t k : {1u, 5u, 10u, 49u}) {
      const auto small = s.top_k(q, k);
      for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(small[i].id, big[i].id);
    }
    std::vector<float> scaled = q;
    for (auto& x : scaled) x *= 37.5f;
    const auto again = s.top_k(scaled, 50);
    for (std::size_t i = 0; i < 50; ++i) {
      EXPECT_EQ(again[i].id, big[i].id);
      EXPECT_NEAR(again[i].score, big[i].score, 1e-6);
    }
  }
}

TEST(TopK, RoundTripThroughDisk) {
  TempDir dir;
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g;
  std::vector<float> v(40 * 8);
  for (auto& x : v) x = g(rng);
  write_store(dir / "r.bin", make_ids(40), v, 8);
  const auto loaded = load_store(dir / "r.bin");
  const EmbeddingStore direct(make_ids(40), v, 8);
  for (std::size_t r = 0; r < 40; ++r) {
    const auto a = loaded.row(r);
    const auto b = direct.row(r);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

}  // namespace
}  // namespace cotrr
