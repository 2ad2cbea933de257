#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotrr/backend.hpp"
#include "cotrr/manifest.hpp"
#include "cotrr/pipeline.hpp"
#include "cotrr/store.hpp"

namespace cotrr {

struct MetricSpec {
  std::string metric;  // R | mAP | R_subs | Hits
  std::size_t k = 1;

  std::string key() const { return metric + "@" + std::to_string(k); }
};

// Parses "R@1,mAP@5,Hits@10".
std::vector<MetricSpec> parse_metric_list(const std::string& text);

struct TaskProfile {
  std::string name;
  Task task = Task::tir;
  std::size_t k_rerank = 20;
  std::optional<std::size_t> k_subset;
  std::vector<MetricSpec> metrics;
  std::string backbone;
  std::size_t depth = 0;  // initial ranking depth from the store; 0 means max(k_rerank, 50)

  std::size_t effective_depth() const;
};

/// flickr30k, mscoco, cirr, circo, visdial. Throws std::invalid_argument for unknown names.
TaskProfile profile_by_name(const std::string& name);
std::vector<std::string> profile_names();

/// `reranked_prefix` followed by the untouched tail of `full_initial`.
/// Throws std::invalid_argument unless the prefix permutes the initial top-K.
std::vector<std::string> splice_ranking(const std::vector<std::string>& full_initial,
                                        const std::vector<std::string>& reranked_prefix);

/// Oracle knowledge from the fixture labels embedded in the manifest.
std::shared_ptr<OracleKnowledge> oracle_knowledge_from(const std::vector<ManifestRecord>& records,
                                                       const ImageResolver& images,
                                                       const ImageEncoding& encoding = {});

struct RunInputs {
  std::vector<ManifestRecord> records;
  TaskProfile profile;
  const EmbeddingStore* corpus = nullptr;
  const EmbeddingStore* query_embeddings = nullptr;
  ImageResolver images;
  ChatBackend* backend = nullptr;
  Mode mode = Mode::RDE;
  PipelineOptions pipeline;
  int parallelism = 8;
  double failure_threshold = 0.10;
  nlohmann::json config_echo = nlohmann::json::object();
};

struct RunResult {
  nlohmann::json report;
  std::vector<nlohmann::json> per_query;
  std::vector<nlohmann::json> transcript;
  std::string chart_csv;
  std::size_t failed = 0;
  bool aborted = false;
};

/// Initial retrieval, re-ranking, splicing and scoring for every record.
RunResult run(const RunInputs& inputs);

/// Writes report.json, per_query.jsonl, transcript.jsonl and chart.csv under `dir`.
void write_run(const RunResult& result, const std::filesystem::path& dir);

/// Recomputes aggregates from persisted per-query records (mean per key).
nlohmann::json aggregates_from(const std::vector<nlohmann::json>& per_query);

}  // namespace cotrr
