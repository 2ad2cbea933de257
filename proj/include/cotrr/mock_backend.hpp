#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cotrr/backend.hpp"

namespace cotrr {

/// Hidden fixture label for one (query, candidate) pair.
struct OracleLabel {
  int relevance = 0;
  int met = 0;  // components satisfied, out of `OracleKnowledge::component_total`
};

/// What the oracle mock "knows": labels keyed by query text, and which candidate each
/// transmitted image is (by digest of the re-encoded bytes).
struct OracleKnowledge {
  std::map<std::string, std::map<std::string, OracleLabel>> labels;
  std::unordered_map<std::string, std::string> image_ids;
  int component_total = 5;

  void add_image(const std::string& candidate_id, const ImagePart& image);
};

enum class MockKind { oracle, scripted, noisy, truncating, malformed };

std::optional<MockKind> parse_mock_kind(std::string_view text);
std::string_view to_string(MockKind kind);

struct ScriptStep {
  std::string text;
  int http_status = 0;  // nonzero: fail with this status instead of replying
};

struct MockOptions {
  int swaps = 3;                          // noisy: random transpositions applied to the oracle ranking
  std::optional<int> truncate_suffix;     // truncating: ids dropped; seed-chosen in [1, K] when unset
  std::vector<ScriptStep> script;         // scripted: replies in order
};

/// Deterministic fake endpoints. Every kind except `scripted` answers as a pure function of
/// (seed, request), so results do not depend on call order or concurrency.
BackendPtr make_mock_backend(MockKind kind, std::uint64_t seed, std::shared_ptr<const OracleKnowledge> knowledge,
                             MockOptions options = {});

/// Stage a pipeline request belongs to, judged from its first user message.
enum class PromptStage { deconstruct, evaluate, rank, unknown };
PromptStage detect_stage(const ChatRequest& request);

}  // namespace cotrr
