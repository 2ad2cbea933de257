#include "cotrr/harness.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <tuple>
#include <sstream>
#include <unordered_set>

#include "cotrr/metrics.hpp"
#include "cotrr/parallel.hpp"

namespace cotrr {

namespace {

struct RecordOutcome {
  nlohmann::json per_query;
  std::vector<nlohmann::json> transcript;
  bool failed = false;
  std::size_t degraded_evaluations = 0;
  std::size_t repaired_ids = 0;
  std::size_t ranking_fallbacks = 0;
  std::size_t decomposition_fallbacks = 0;
  std::size_t subset_absent = 0;
};

std::vector<std::string> ids_of(const CandidateList& list) {
  std::vector<std::string> out;
  out.reserve(list.size());
  for (const auto& c : list) out.push_back(c.id);
  return out;
}

class RecordRunner {
 public:
  RecordRunner(const RunInputs& in, const ManifestRecord& record) : in_(in), record_(record) {}

  RecordOutcome run() {
    out_.per_query = {{"query_id", record_.query_id}, {"line", record_.line}};
    try {
      if (record_.task == Task::chat) {
        run_dialogue();
      } else {
        run_single();
      }
      out_.per_query["status"] = "ok";
    } catch (const std::exception& e) {
      out_.failed = true;
      out_.per_query["status"] = "failed";
      out_.per_query["error"] = e.what();
      out_.per_query.erase("values");
    }
    return std::move(out_);
  }

 private:
  std::vector<std::string> initial_ranking(std::optional<std::size_t> round) const {
    if (round && record_.round_candidates) return (*record_.round_candidates)[*round];
    if (!round && record_.candidates) return *record_.candidates;
    if (in_.corpus == nullptr || in_.query_embeddings == nullptr) {
      throw std::invalid_argument("no precomputed candidates and no embedding store for '" + record_.query_id + "'");
    }
    std::string key = record_.query_id;
    if (round) {
      const std::string per_round = record_.query_id + "#" + std::to_string(*round);
      if (in_.query_embeddings->contains(per_round)) key = per_round;
    }
    if (!in_.query_embeddings->contains(key)) {
      throw std::invalid_argument("no query embedding for '" + key + "'");
    }
    const auto q = in_.query_embeddings->row(in_.query_embeddings->index_of(key));
    return ids_of(in_.corpus->top_k(q, in_.profile.effective_depth()));
  }

  std::vector<CandidateImage> images_for(const std::vector<std::string>& ids, std::size_t count) const {
    std::vector<CandidateImage> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back({ids[i], in_.images.path_for(ids[i])});
    return out;
  }

  std::size_t rerank_depth(const std::vector<std::string>& initial) const {
    const std::size_t k = in_.profile.k_rerank;
    const bool precomputed = record_.candidates || record_.round_candidates;
    if (initial.size() < k && precomputed) {
      throw std::invalid_argument("precomputed candidate list has " + std::to_string(initial.size()) +
                                  " ids, fewer than k_rerank=" + std::to_string(k));
    }
    return std::min(k, initial.size());
  }

  void absorb(const RerankResult& r, const std::string& pass, std::optional<std::size_t> round) {
    for (const auto& rec : r.transcript) {
      nlohmann::json j = {{"query_id", record_.query_id},
                          {"pass", pass},
                          {"stage", rec.stage},
                          {"request_digest", rec.request_digest},
                          {"response_digest", rec.response_digest},
                          {"parse_status", rec.parse_status},
                          {"attempts", rec.attempts},
                          {"from_cache", rec.from_cache}};
      if (round) j["round"] = *round;
      if (rec.candidate_index >= 0) j["candidate_index"] = rec.candidate_index;
      if (!rec.detail.empty()) j["detail"] = rec.detail;
      out_.transcript.push_back(std::move(j));
    }
    out_.degraded_evaluations += r.degraded_evaluations;
    out_.repaired_ids += r.ranking.repaired_count();
    out_.ranking_fallbacks += r.ranking_fallback ? 1 : 0;
    out_.decomposition_fallbacks += r.decomposition_degraded ? 1 : 0;
  }

  static nlohmann::json stage_summary(const RerankResult& r, const std::vector<std::string>& initial_prefix) {
    nlohmann::json provenance = nlohmann::json::array();
    for (auto p : r.ranking.provenance) provenance.push_back(p == Placement::model ? "model" : "repaired");
    nlohmann::json errors = nlohmann::json::array();
    for (const auto& e : r.errors) errors.push_back(e);
    nlohmann::json judgments = nlohmann::json::array();
    for (const auto& ev : r.evaluations) judgments.push_back(to_string(ev.overall));
    return {{"initial", initial_prefix},
            {"reranked", r.ranking.ids},
            {"provenance", provenance},
            {"judgments", judgments},
            {"degraded_evaluations", r.degraded_evaluations},
            {"decomposition_degraded", r.decomposition_degraded},
            {"ranking_fallback", r.ranking_fallback},
            {"errors", errors}};
  }

  void run_single() {
    const Query query = query_for(record_, in_.images);
    const std::vector<std::string> initial = initial_ranking(std::nullopt);
    const std::size_t k = rerank_depth(initial);
    const auto candidates = images_for(initial, k);

    const RerankResult result = rerank(query, candidates, *in_.backend, in_.mode, in_.pipeline);
    absorb(result, "main", std::nullopt);
    const std::vector<std::string> ranked = splice_ranking(initial, result.ranking.ids);

    const IdSet gts(record_.ground_truth.begin(), record_.ground_truth.end());
    nlohmann::json values = nlohmann::json::object();
    nlohmann::json stages = stage_summary(result, {initial.begin(), initial.begin() + static_cast<std::ptrdiff_t>(k)});

    for (const auto& m : in_.profile.metrics) {
      if (m.metric == "R") values[m.key()] = static_cast<double>(recall_at_k(ranked, gts, m.k));
      if (m.metric == "mAP") values[m.key()] = map_at_k(ranked, gts, m.k);
    }

    const bool wants_subset = std::any_of(in_.profile.metrics.begin(), in_.profile.metrics.end(),
                                          [](const MetricSpec& m) { return m.metric == "R_subs"; });
    if (wants_subset && record_.subset) {
      const SubsetRanking filtered = restrict_to_subset(ranked, *record_.subset);
      out_.subset_absent += filtered.absent;
      std::vector<std::string> subset_ranked = filtered.ids;
      if (in_.profile.k_subset) {
        const std::size_t ks = std::min(*in_.profile.k_subset, filtered.ids.size());
        PriorArtifacts prior;
        if (result.decomposition && !result.decomposition_degraded) prior.decomposition = result.decomposition;
        for (const auto& ev : result.evaluations) {
          if (!ev.degraded) prior.evaluations.emplace(ev.candidate_id, ev);
        }
        const RerankResult sub =
            rerank(query, images_for(filtered.ids, ks), *in_.backend, in_.mode, in_.pipeline, &prior);
        absorb(sub, "subset", std::nullopt);
        subset_ranked = splice_ranking(filtered.ids, sub.ranking.ids);
        stages["subset"] = stage_summary(sub, {filtered.ids.begin(), filtered.ids.begin() + static_cast<std::ptrdiff_t>(ks)});
      }
      stages["subset_absent"] = filtered.absent;
      for (const auto& m : in_.profile.metrics) {
        if (m.metric == "R_subs") {
          values[m.key()] = static_cast<double>(recall_subset_at_k(subset_ranked, *record_.subset, gts, m.k));
        }
      }
    }
    out_.per_query["values"] = std::move(values);
    out_.per_query["stages"] = std::move(stages);
  }

  void run_dialogue() {
    const IdSet gts(record_.ground_truth.begin(), record_.ground_truth.end());
    std::vector<int> ranks;
    nlohmann::json rounds = nlohmann::json::array();
    for (std::size_t t = 0; t <= record_.dialogue.size(); ++t) {
      const TextQuery query = chat_query_for_round(record_, t);
      const std::vector<std::string> initial = initial_ranking(t);
      const std::size_t k = rerank_depth(initial);
      const RerankResult result = rerank(query, images_for(initial, k), *in_.backend, in_.mode, in_.pipeline);
      absorb(result, "main", t);
      const std::vector<std::string> ranked = splice_ranking(initial, result.ranking.ids);
      int rank = static_cast<int>(ranked.size()) + 1;
      for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (gts.count(ranked[i])) {
          rank = static_cast<int>(i) + 1;
          break;
        }
      }
      ranks.push_back(rank);
      rounds.push_back(stage_summary(result, {initial.begin(), initial.begin() + static_cast<std::ptrdiff_t>(k)}));
    }

    nlohmann::json values = nlohmann::json::object();
    for (const auto& m : in_.profile.metrics) {
      if (m.metric != "Hits") continue;
      for (bool cumulative : {true, false}) {
        const HitsCurve curve = hits_at_k({ranks}, m.k, cumulative);
        const std::string name = cumulative ? "Hits" : "Hits_noncumulative";
        for (std::size_t t = 0; t < curve.per_round.size(); ++t) {
          values[name + "@" + std::to_string(m.k) + "@round" + std::to_string(t)] = curve.per_round[t];
        }
      }
    }
    out_.per_query["round_ranks"] = ranks;
    out_.per_query["values"] = std::move(values);
    out_.per_query["stages"] = std::move(rounds);
  }

  const RunInputs& in_;
  const ManifestRecord& record_;
  RecordOutcome out_;
};

std::string chart_csv(const nlohmann::json& aggregates) {
  // Keys look like "Hits@10@round3" / "Hits_noncumulative@10@round3".
  struct Row {
    std::size_t round;
    std::string variant;
    std::size_t k;
    double value;
  };
  std::vector<Row> rows;
  for (auto it = aggregates.begin(); it != aggregates.end(); ++it) {
    const std::string& key = it.key();
    const auto at1 = key.find('@');
    const auto at2 = key.find("@round");
    if (at1 == std::string::npos || at2 == std::string::npos || at2 <= at1) continue;
    const std::string metric = key.substr(0, at1);
    if (metric != "Hits" && metric != "Hits_noncumulative") continue;
    rows.push_back({std::stoul(key.substr(at2 + 6)), metric == "Hits" ? "cumulative" : "noncumulative",
                    std::stoul(key.substr(at1 + 1, at2 - at1 - 1)), it.value().get<double>()});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return std::tie(a.variant, a.k, a.round) < std::tie(b.variant, b.k, b.round);
  });
  std::string out = "round,variant,k,value\n";
  for (const auto& r : rows) {
    out += std::to_string(r.round) + "," + r.variant + "," + std::to_string(r.k) + "," +
           nlohmann::json(r.value).dump() + "\n";
  }
  return out;
}

}  // namespace

std::vector<MetricSpec> parse_metric_list(const std::string& text) {
  std::vector<MetricSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    if (item.empty()) continue;
    const auto at = item.find('@');
    if (at == std::string::npos) throw std::invalid_argument("metric '" + item + "' must look like NAME@k");
    MetricSpec m{item.substr(0, at), 0};
    if (m.metric != "R" && m.metric != "mAP" && m.metric != "R_subs" && m.metric != "Hits") {
      throw std::invalid_argument("unknown metric '" + m.metric + "'");
    }
    try {
      const long long k = std::stoll(item.substr(at + 1));
      if (k < 1) throw std::invalid_argument("k");
      m.k = static_cast<std::size_t>(k);
    } catch (const std::exception&) {
      throw std::invalid_argument("metric '" + item + "' needs a positive k");
    }
    out.push_back(m);
  }
  if (out.empty()) throw std::invalid_argument("empty metric list");
  return out;
}

std::size_t TaskProfile::effective_depth() const {
  return depth > 0 ? std::max(depth, k_rerank) : std::max<std::size_t>(k_rerank, 50);
}

std::vector<std::string> profile_names() { return {"flickr30k", "mscoco", "cirr", "circo", "visdial"}; }

TaskProfile profile_by_name(const std::string& name) {
  TaskProfile p;
  p.name = name;
  if (name == "flickr30k" || name == "mscoco") {
    p.task = Task::tir;
    p.k_rerank = 20;
    p.metrics = parse_metric_list("R@1,R@5,R@10");
  } else if (name == "cirr") {
    p.task = Task::cir;
    p.k_rerank = 15;
    p.k_subset = 3;
    p.metrics = parse_metric_list("R@1,R@5,R@10,R@50,R_subs@1,R_subs@2,R_subs@3");
  } else if (name == "circo") {
    p.task = Task::cir;
    p.k_rerank = 70;
    p.metrics = parse_metric_list("mAP@5,mAP@10,mAP@25,mAP@50");
  } else if (name == "visdial") {
    p.task = Task::chat;
    p.k_rerank = 20;
    p.metrics = parse_metric_list("Hits@10");
  } else {
    throw std::invalid_argument("unknown profile '" + name + "'");
  }
  return p;
}

std::vector<std::string> splice_ranking(const std::vector<std::string>& full_initial,
                                        const std::vector<std::string>& reranked_prefix) {
  const std::size_t k = reranked_prefix.size();
  if (k > full_initial.size()) throw std::invalid_argument("splice: prefix longer than the initial ranking");
  std::multiset<std::string> expected(full_initial.begin(), full_initial.begin() + static_cast<std::ptrdiff_t>(k));
  std::multiset<std::string> got(reranked_prefix.begin(), reranked_prefix.end());
  if (expected != got) throw std::invalid_argument("splice: prefix is not a permutation of the initial top-K");
  std::vector<std::string> out = reranked_prefix;
  out.insert(out.end(), full_initial.begin() + static_cast<std::ptrdiff_t>(k), full_initial.end());
  return out;
}

std::shared_ptr<OracleKnowledge> oracle_knowledge_from(const std::vector<ManifestRecord>& records,
                                                       const ImageResolver& images, const ImageEncoding& encoding) {
  auto knowledge = std::make_shared<OracleKnowledge>();
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (r.oracle_labels.empty()) continue;
    std::vector<std::string> texts;
    if (r.task == Task::tir) texts.push_back(r.text);
    if (r.task == Task::cir) texts.push_back(r.manipulation_text);
    if (r.task == Task::chat) {
      for (std::size_t t = 0; t <= r.dialogue.size(); ++t) texts.push_back(chat_query_for_round(r, t).text);
    }
    for (const auto& text : texts) {
      auto& labels = knowledge->labels[text];
      for (const auto& [id, label] : r.oracle_labels) labels[id] = label;
    }
    for (const auto& [id, label] : r.oracle_labels) ids.insert(id);
  }
  for (const auto& id : ids) {
    try {
      knowledge->add_image(id, load_image_for_transmission(images.path_for(id), encoding));
    } catch (const ImageError&) {
      // Candidates without an image can never be identified; they rank as unlabeled.
    }
  }
  return knowledge;
}

nlohmann::json aggregates_from(const std::vector<nlohmann::json>& per_query) {
  std::map<std::string, std::vector<double>> columns;
  for (const auto& q : per_query) {
    if (q.value("status", "") != "ok" || !q.contains("values")) continue;
    for (auto it = q["values"].begin(); it != q["values"].end(); ++it) {
      columns[it.key()].push_back(it.value().get<double>());
    }
  }
  nlohmann::json out = nlohmann::json::object();
  for (auto& [key, values] : columns) out[key] = mean_of(std::move(values));
  return out;
}

RunResult run(const RunInputs& in) {
  if (in.backend == nullptr) throw std::invalid_argument("run: no backend");
  std::vector<RecordOutcome> outcomes(in.records.size());
  parallel_for(in.records.size(), in.parallelism,
               [&](std::size_t i) { outcomes[i] = RecordRunner(in, in.records[i]).run(); });

  RunResult result;
  nlohmann::json failures = nlohmann::json::array();
  std::size_t degraded = 0, repaired = 0, rank_fallbacks = 0, decomp_fallbacks = 0, subset_absent = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    auto& o = outcomes[i];
    if (o.failed) {
      ++result.failed;
      failures.push_back({{"query_id", in.records[i].query_id},
                          {"line", in.records[i].line},
                          {"error", o.per_query.value("error", "")}});
    }
    degraded += o.degraded_evaluations;
    repaired += o.repaired_ids;
    rank_fallbacks += o.ranking_fallbacks;
    decomp_fallbacks += o.decomposition_fallbacks;
    subset_absent += o.subset_absent;
    for (auto& t : o.transcript) result.transcript.push_back(std::move(t));
    result.per_query.push_back(std::move(o.per_query));
  }
  const double fail_fraction =
      in.records.empty() ? 0.0 : static_cast<double>(result.failed) / static_cast<double>(in.records.size());
  result.aborted = fail_fraction > in.failure_threshold;

  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& m : in.profile.metrics) metrics.push_back(m.key());
  nlohmann::json profile = {{"name", in.profile.name},
                            {"task", to_string(in.profile.task)},
                            {"k_rerank", in.profile.k_rerank},
                            {"depth", in.profile.effective_depth()},
                            {"metrics", metrics},
                            {"backbone", in.profile.backbone}};
  profile["k_subset"] = in.profile.k_subset ? nlohmann::json(*in.profile.k_subset) : nlohmann::json();

  nlohmann::json notes = nlohmann::json::array();
  if (in.profile.k_subset) {
    notes.push_back("subset re-ranking ranks the top k_subset subset members again, reusing their existing "
                    "evaluations; candidates outside the main re-ranked prefix are evaluated fresh");
  }
  if (in.profile.task == Task::chat) {
    notes.push_back("Hits@k keys are cumulative over rounds; Hits_noncumulative@k keys score each round alone");
  }

  nlohmann::json& report = result.report;
  report["config"] = in.config_echo;
  report["profile"] = profile;
  report["mode"] = to_string(in.mode);
  report["model"] = in.pipeline.model;
  report["temperature"] = in.pipeline.temperature;
  report["prompt_version"] = in.pipeline.prompts->version;
  report["aggregates"] = aggregates_from(result.per_query);
  report["counters"] = {{"queries", in.records.size()},
                        {"scored", in.records.size() - result.failed},
                        {"failed", result.failed},
                        {"backend_calls", result.transcript.size()},
                        {"degraded_evaluations", degraded},
                        {"repaired_ids", repaired},
                        {"ranking_fallbacks", rank_fallbacks},
                        {"decomposition_fallbacks", decomp_fallbacks},
                        {"subset_absent_ids", subset_absent}};
  report["failures"] = failures;
  report["aborted"] = result.aborted;
  report["notes"] = notes;
  report["per_query"] = result.per_query;
  result.chart_csv = chart_csv(report["aggregates"]);
  return result;
}

void write_run(const RunResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << content;
  };
  constexpr auto kReplace = nlohmann::json::error_handler_t::replace;
  write("report.json", result.report.dump(2, ' ', false, kReplace) + "\n");
  std::string lines;
  for (const auto& q : result.per_query) lines += q.dump(-1, ' ', false, kReplace) + "\n";
  write("per_query.jsonl", lines);
  lines.clear();
  for (const auto& t : result.transcript) lines += t.dump(-1, ' ', false, kReplace) + "\n";
  write("transcript.jsonl", lines);
  write("chart.csv", result.chart_csv);
}

}  // namespace cotrr
