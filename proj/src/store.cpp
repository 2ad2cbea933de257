#include "cotrr/store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>

namespace cotrr {

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

float read_f32_le(const unsigned char* p) {
  return std::bit_cast<float>(read_u32_le(p));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StoreError(StoreError::Code::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> read_ids(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<std::string> ids;
  if (text.empty()) return ids;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ids.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return ids;
}

double norm_of(std::span<const float> v) {
  double sum = 0.0;
  for (float x : v) sum += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(sum);
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  std::filesystem::path ids = path;
  ids += ".ids";
  return ids;
}

EmbeddingStore::EmbeddingStore(std::vector<std::string> ids, std::vector<float> vectors, std::size_t dim)
    : ids_(std::move(ids)), vectors_(std::move(vectors)), dim_(dim) {
  if (dim_ == 0 || ids_.empty()) {
    throw StoreError(StoreError::Code::empty_shape, "store must have at least one row and a positive dim");
  }
  if (vectors_.size() != ids_.size() * dim_) {
    throw StoreError(StoreError::Code::id_count_mismatch,
                     "id count " + std::to_string(ids_.size()) + " does not match row count " +
                         std::to_string(vectors_.size() / dim_));
  }
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i].empty()) {
      throw StoreError(StoreError::Code::empty_id, "empty id at line " + std::to_string(i + 1));
    }
    if (!index_.emplace(ids_[i], i).second) {
      throw StoreError(StoreError::Code::duplicate_id, "duplicate id '" + ids_[i] + "'");
    }
  }
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    std::span<float> v(vectors_.data() + r * dim_, dim_);
    const double n = norm_of(v);
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw StoreError(StoreError::Code::zero_norm_row, "row " + std::to_string(r) + " ('" + ids_[r] +
                                                            "') has zero or non-finite norm");
    }
    for (float& x : v) x = static_cast<float>(static_cast<double>(x) / n);
  }
}

std::span<const float> EmbeddingStore::row(std::size_t index) const {
  if (index >= ids_.size()) throw std::out_of_range("row index out of range");
  return {vectors_.data() + index * dim_, dim_};
}

std::size_t EmbeddingStore::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("unknown id '" + id + "'");
  return it->second;
}

CandidateList EmbeddingStore::top_k(std::span<const float> query, std::size_t k) const {
  if (k == 0) throw StoreError(StoreError::Code::invalid_k, "k must be positive");
  if (query.size() != dim_) {
    throw StoreError(StoreError::Code::dimension_mismatch,
                     "query dim " + std::to_string(query.size()) + " != store dim " + std::to_string(dim_));
  }
  const double qn = norm_of(query);
  if (!(qn > 0.0) || !std::isfinite(qn)) {
    throw StoreError(StoreError::Code::zero_norm_query, "query vector has zero or non-finite norm");
  }
  std::vector<double> q(dim_);
  for (std::size_t d = 0; d < dim_; ++d) q[d] = static_cast<double>(query[d]) / qn;

  const std::size_t n = ids_.size();
  std::vector<double> scores(n);
  for (std::size_t r = 0; r < n; ++r) {
    const float* v = vectors_.data() + r * dim_;
    double s = 0.0;
    for (std::size_t d = 0; d < dim_; ++d) s += q[d] * static_cast<double>(v[d]);
    scores[r] = s;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t take = std::min(k, n);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });

  CandidateList out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    out.push_back({ids_[order[i]], static_cast<int>(i + 1), scores[order[i]]});
  }
  return out;
}

EmbeddingStore load_store(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kStoreMagic, sizeof(kStoreMagic)) != 0) {
    throw StoreError(StoreError::Code::bad_magic, path.string() + ": missing CTRREMB1 magic");
  }
  const std::uint32_t count = read_u32_le(p + 8);
  const std::uint32_t dim = read_u32_le(p + 12);
  if (count == 0 || dim == 0) {
    throw StoreError(StoreError::Code::empty_shape, path.string() + ": count and dim must be positive");
  }
  const std::uint64_t expected = 16 + std::uint64_t{count} * dim * 4;
  if (bytes.size() < expected) {
    throw StoreError(StoreError::Code::truncated_payload,
                     path.string() + ": truncated payload (" + std::to_string(bytes.size()) + " of " +
                         std::to_string(expected) + " bytes)");
  }
  if (bytes.size() > expected) {
    throw StoreError(StoreError::Code::trailing_bytes, path.string() + ": " +
                                                           std::to_string(bytes.size() - expected) +
                                                           " trailing bytes after payload");
  }

  std::vector<std::string> ids = read_ids(sidecar_path(path));
  if (ids.size() != count) {
    throw StoreError(StoreError::Code::id_count_mismatch,
                     sidecar_path(path).string() + ": " + std::to_string(ids.size()) + " ids for " +
                         std::to_string(count) + " rows");
  }

  std::vector<float> vectors(std::size_t{count} * dim);
  for (std::size_t i = 0; i < vectors.size(); ++i) vectors[i] = read_f32_le(p + 16 + 4 * i);
  return EmbeddingStore(std::move(ids), std::move(vectors), dim);
}

void write_store(const std::filesystem::path& path, const std::vector<std::string>& ids,
                 std::span<const float> vectors, std::size_t dim) {
  if (dim == 0 || vectors.size() != ids.size() * dim) {
    throw std::invalid_argument("write_store: vectors must be ids.size() x dim");
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StoreError(StoreError::Code::io, "cannot write " + path.string());
    out.write(kStoreMagic, sizeof(kStoreMagic));
    write_u32_le(out, static_cast<std::uint32_t>(ids.size()));
    write_u32_le(out, static_cast<std::uint32_t>(dim));
    for (float x : vectors) write_u32_le(out, std::bit_cast<std::uint32_t>(x));
  }
  std::ofstream side(sidecar_path(path), std::ios::binary | std::ios::trunc);
  if (!side) throw StoreError(StoreError::Code::io, "cannot write " + sidecar_path(path).string());
  for (const auto& id : ids) side << id << '\n';
}

}  // namespace cotrr
