#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cotrr/backend.hpp"
#include "cotrr/image_codec.hpp"
#include "cotrr/prompts.hpp"
#include "cotrr/structured_reply.hpp"

namespace cotrr {

// ---------------------------------------------------------------- queries

struct TextQuery {
  std::string text;
};

struct ComposedQuery {
  std::filesystem::path reference_image;
  std::string manipulation_text;
};

struct DialogueTurn {
  std::string question;
  std::string answer;
};

struct DialogueQuery {
  std::string caption;
  std::vector<DialogueTurn> turns;
};

using Query = std::variant<TextQuery, ComposedQuery, DialogueQuery>;

// Throws std::invalid_argument when the active variant is incomplete.
void validate_query(const Query& query);

// ------------------------------------------------------- stage artifacts

inline const std::vector<std::string>& default_component_names() {
  static const std::vector<std::string> names{"primary_subject", "activity", "key_details", "environment",
                                              "ambiance"};
  return names;
}

struct Component {
  std::string name;
  std::string description;
};

struct SemanticDecomposition {
  std::vector<Component> components;
  // Set when the decomposition is the raw-query fallback rather than a parsed model reply.
  bool degraded = false;
};

/// The single pseudo-component used when evaluation runs against the raw query.
SemanticDecomposition raw_query_decomposition(const std::string& query_text);

enum class Judgment { no_match = 0, weak_match, partial_match, good_match, excellent_match };
enum class Verdict { met, partially_met, unmet };

std::string_view to_string(Judgment j);
std::string_view display_label(Judgment j);  // "partial match"
std::optional<Judgment> parse_judgment(std::string_view text);
std::string_view to_string(Verdict v);
std::optional<Verdict> parse_verdict(std::string_view text);

/// Mapping used by oracle mocks: fraction of met components to an ordinal judgment.
Judgment judgment_for_met_fraction(double fraction);

struct ComponentNote {
  std::string name;
  Verdict verdict = Verdict::unmet;
  std::string rationale;
};

struct CandidateEvaluation {
  std::string candidate_id;
  Judgment overall = Judgment::no_match;
  std::vector<ComponentNote> notes;
  bool degraded = false;
  std::string failure;  // why the evaluation is degraded
};

enum class Placement { model, repaired };

struct RankedList {
  std::vector<std::string> ids;
  std::vector<Placement> provenance;

  std::size_t repaired_count() const;
};

enum class Mode { R, RD, RE, RDE };

std::string_view to_string(Mode mode);  // "R", "R+D", "R+E", "R+D+E"
std::optional<Mode> parse_mode(std::string_view text);
bool uses_deconstruction(Mode mode);
bool uses_evaluation(Mode mode);

/// One backend round trip, as written to the transcript.
struct CallRecord {
  std::string stage;  // deconstruct | evaluate | rank, with a ":repair" suffix for re-prompts
  int candidate_index = -1;  // 0-based, evaluation calls only
  std::string request_digest;
  std::string response_digest;
  std::string parse_status;  // ok | parse_error | backend_error
  std::string detail;
  int attempts = 0;
  bool from_cache = false;
};

using CallLog = std::vector<CallRecord>;

// ------------------------------------------------------------- parsers

Parsed<SemanticDecomposition> parse_decomposition(std::string_view reply,
                                                  const std::vector<std::string>& component_names);
Parsed<CandidateEvaluation> parse_evaluation(std::string_view reply, const SemanticDecomposition& decomposition,
                                             const std::string& candidate_id);
/// 1-based indices in the order the model listed them. Entries that carry no index are skipped.
Parsed<std::vector<long long>> parse_ranking(std::string_view reply);

// ------------------------------------------------------------ pipeline

struct PipelineOptions {
  std::string model = "gemini-2.5-pro";
  double temperature = 0.0;
  int parallelism = 8;
  bool attach_thumbnails = false;
  std::vector<std::string> component_names = default_component_names();
  const PromptSet* prompts = &PromptSet::builtin();
  ImageEncoding encoding;
};

struct CandidateImage {
  std::string id;
  std::filesystem::path image;
};

class DeconstructionError : public std::runtime_error {
 public:
  DeconstructionError(const std::string& what, std::string raw_reply)
      : std::runtime_error(what), raw_reply_(std::move(raw_reply)) {}
  const std::string& raw_reply() const noexcept { return raw_reply_; }

 private:
  std::string raw_reply_;
};

/// One call (plus at most one repair re-prompt). Text and composed queries only.
SemanticDecomposition deconstruct(const Query& query, ChatBackend& backend, const PipelineOptions& options = {},
                                  CallLog* log = nullptr);

/// Falls back to a degraded no_match record when the reply cannot be parsed.
/// Throws ImageError for unreadable images and BackendError once retries are exhausted.
CandidateEvaluation evaluate_candidate(const std::filesystem::path& candidate_image,
                                       const std::string& candidate_id, const SemanticDecomposition& decomposition,
                                       ChatBackend& backend, const PipelineOptions& options = {},
                                       CallLog* log = nullptr);

struct ListwiseOutcome {
  RankedList ranking;
  bool fallback = false;  // initial order returned
  std::string error;
};

/// Text-only listwise call over the evaluations; always returns a permutation of their ids.
ListwiseOutcome rank_listwise(const std::vector<CandidateEvaluation>& evaluations, ChatBackend& backend,
                              const PipelineOptions& options = {}, CallLog* log = nullptr,
                              const std::vector<CandidateImage>* thumbnails = nullptr);

/// Total: the result is always a permutation of `original_order`.
RankedList repair_permutation(const std::vector<std::string>& model_order,
                              const std::vector<std::string>& original_order);

/// Stage outputs from an earlier pass over an overlapping candidate set.
struct PriorArtifacts {
  std::optional<SemanticDecomposition> decomposition;
  std::map<std::string, CandidateEvaluation> evaluations;
};

struct RerankResult {
  RankedList ranking;
  std::optional<SemanticDecomposition> decomposition;
  std::vector<CandidateEvaluation> evaluations;  // initial-candidate order
  CallLog transcript;
  std::size_t degraded_evaluations = 0;
  bool decomposition_degraded = false;
  bool ranking_fallback = false;
  std::vector<std::string> errors;
};

/// Re-ranks `candidates` (initial-retrieval order) with the stages enabled by `mode`.
/// Backend and parse failures degrade instead of throwing; unreadable images and
/// invalid queries throw.
RerankResult rerank(const Query& query, const std::vector<CandidateImage>& candidates, ChatBackend& backend,
                    Mode mode, const PipelineOptions& options = {}, const PriorArtifacts* prior = nullptr);

/// Text sent to the model for the raw (non-deconstructed) query.
std::string raw_query_text(const Query& query);

}  // namespace cotrr
