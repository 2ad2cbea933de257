#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cotrr {

inline constexpr char kStoreMagic[8] = {'C', 'T', 'R', 'R', 'E', 'M', 'B', '1'};

class StoreError : public std::runtime_error {
 public:
  enum class Code {
    io,
    bad_magic,
    empty_shape,
    truncated_payload,
    trailing_bytes,
    duplicate_id,
    id_count_mismatch,
    empty_id,
    zero_norm_row,
    dimension_mismatch,
    zero_norm_query,
    invalid_k,
  };

  StoreError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

struct Candidate {
  std::string id;
  int initial_rank = 0;  // 1-based
  double score = 0.0;
};

using CandidateList = std::vector<Candidate>;

/// Immutable id-indexed matrix of L2-normalized embeddings.
///
/// Rows are normalized once at construction; `top_k` is a pure dot-product scan
/// and is safe to call from any number of threads.
class EmbeddingStore {
 public:
  EmbeddingStore(std::vector<std::string> ids, std::vector<float> vectors, std::size_t dim);

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::span<const float> row(std::size_t index) const;
  bool contains(const std::string& id) const { return index_.count(id) > 0; }
  // Throws std::out_of_range for unknown ids.
  std::size_t index_of(const std::string& id) const;

  /// Exact cosine top-k. Scores are accumulated in double; ties go to the lower row index.
  CandidateList top_k(std::span<const float> query, std::size_t k) const;

 private:
  std::vector<std::string> ids_;
  std::vector<float> vectors_;
  std::size_t dim_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Reads a `CTRREMB1` vector file plus its `<path>.ids` sidecar.
EmbeddingStore load_store(const std::filesystem::path& path);

/// Writes the vector file and sidecar exactly as `load_store` expects. Vectors are written as given.
void write_store(const std::filesystem::path& path, const std::vector<std::string>& ids,
                 std::span<const float> vectors, std::size_t dim);

std::filesystem::path sidecar_path(const std::filesystem::path& path);

}  // namespace cotrr
