#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotrr/mock_backend.hpp"
#include "cotrr/pipeline.hpp"
#include "cotrr/store.hpp"

namespace cotrr {

enum class Task { tir, cir, chat };

std::string_view to_string(Task task);
std::optional<Task> parse_task(std::string_view text);

/// One line of a canonical JSON-lines manifest.
struct ManifestRecord {
  int line = 0;
  std::string query_id;
  Task task = Task::tir;

  std::string text;                   // tir
  std::string reference_image;        // cir: image id, resolved against the image root
  std::string manipulation_text;      // cir
  std::string caption;                // chat
  std::vector<DialogueTurn> dialogue;  // chat

  std::vector<std::string> ground_truth;
  std::optional<std::vector<std::string>> subset;
  std::optional<std::vector<std::string>> candidates;
  std::optional<std::vector<std::vector<std::string>>> round_candidates;  // chat, one list per round
  std::optional<std::vector<std::string>> round_queries;                  // chat, precomputed reformulations

  std::map<std::string, OracleLabel> oracle_labels;  // test fixtures only
};

struct ManifestIssue {
  int line = 0;
  std::string message;
};

class ManifestError : public std::runtime_error {
 public:
  explicit ManifestError(std::vector<ManifestIssue> issues);
  const std::vector<ManifestIssue>& issues() const noexcept { return issues_; }

 private:
  std::vector<ManifestIssue> issues_;
};

struct ManifestReadResult {
  std::vector<ManifestRecord> records;
  std::vector<ManifestIssue> issues;
};

/// Parses every line, collecting issues instead of stopping at the first one.
/// When `corpus` is given, ground-truth, subset and candidate ids must exist in it.
ManifestReadResult read_manifest(std::istream& in, const EmbeddingStore* corpus = nullptr);
ManifestReadResult read_manifest(const std::filesystem::path& path, const EmbeddingStore* corpus = nullptr);

/// Throws ManifestError listing every issue.
std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path, const EmbeddingStore* corpus = nullptr);

/// Text query for dialogue round t: the precomputed reformulation when present, otherwise the
/// caption followed by the first t question/answer pairs.
TextQuery chat_query_for_round(const ManifestRecord& record, std::size_t round);

/// Pipeline query for tir and cir records.
Query query_for(const ManifestRecord& record, const ImageResolver& images);

}  // namespace cotrr
