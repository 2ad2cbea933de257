#include <algorithm>
#include <numeric>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "cotrr/backend_layers.hpp"
#include "cotrr/image_codec.hpp"
#include "cotrr/pipeline.hpp"
#include "test_support.hpp"

namespace cotrr {
namespace {

using testing::make_oracle_scenario;

BackendPtr scripted(std::vector<std::string> replies) {
  MockOptions o;
  for (auto& r : replies) o.script.push_back({std::move(r), 0});
  return make_mock_backend(MockKind::scripted, 0, nullptr, o);
}

const char* kCannedDecomposition = R"(```json
{"primary_subject": "two young men", "activity": "playing basketball",
 "key_details": "one defending the other and attempting to make a basket",
 "environment": "indoor", "ambiance": "under bright light"}
```)";

std::size_t image_parts(const ChatRequest& r) {
  std::size_t n = 0;
  for (const auto& m : r.messages) {
    for (const auto& p : m.parts) n += std::holds_alternative<ImagePart>(p) ? 1 : 0;
  }
  return n;
}

TEST(Deconstruct, TextQuerySendsTextOnly) {
  RecordingBackend rec(scripted({kCannedDecomposition}));
  CallLog log;
  const auto d = deconstruct(TextQuery{"two young men playing basketball indoors under bright light, one defending the "
                                       "other and attempting to make a basket"},
                             rec, {}, &log);
  ASSERT_EQ(d.components.size(), 5u);
  EXPECT_EQ(d.components[0].description, "two young men");
  EXPECT_EQ(d.components[4].description, "under bright light");
  ASSERT_EQ(rec.call_count(), 1u);
  const auto req = rec.requests()[0];
  EXPECT_EQ(req.temperature, 0.0);
  EXPECT_EQ(image_parts(req), 0u);
  EXPECT_NE(joined_text(req).find("two young men playing basketball"), std::string::npos);
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].stage, "deconstruct");
  EXPECT_EQ(log[0].parse_status, "ok");
}

TEST(Deconstruct, ComposedQuerySendsReferenceImage) {
  RecordingBackend rec(scripted({kCannedDecomposition}));
  deconstruct(ComposedQuery{testing::fixture_image(1), "make it a black and white photo"}, rec);
  const auto req = rec.requests()[0];
  EXPECT_EQ(image_parts(req), 1u);
  EXPECT_NE(joined_text(req).find("make it a black and white photo"), std::string::npos);
}

TEST(Deconstruct, RepairThenFailCarriesRawReply) {
  RecordingBackend rec(scripted({"no json at all", "still nothing"}));
  CallLog log;
  try {
    deconstruct(TextQuery{"a cat"}, rec, {}, &log);
    FAIL();
  } catch (const DeconstructionError& e) {
    EXPECT_EQ(e.raw_reply(), "still nothing");
  }
  ASSERT_EQ(rec.call_count(), 2u);
  const auto repair = rec.requests()[1];
  EXPECT_EQ(repair.messages.size(), 3u);
  EXPECT_NE(joined_text(repair).find("no json at all"), std::string::npos);
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log[1].stage, "deconstruct:repair");
  EXPECT_EQ(log[1].parse_status, "parse_error");
}

TEST(Deconstruct, RepairSucceeds) {
  RecordingBackend rec(scripted({"oops", kCannedDecomposition}));
  const auto d = deconstruct(TextQuery{"a cat"}, rec);
  EXPECT_EQ(d.components[1].description, "playing basketball");
}

TEST(Deconstruct, BackendErrorPropagates) {
  MockOptions o;
  o.script = {{"", 400}};
  auto b = make_mock_backend(MockKind::scripted, 0, nullptr, o);
  EXPECT_THROW(deconstruct(TextQuery{"a cat"}, *b), BackendError);
}

SemanticDecomposition decomposition_for(const std::string& query) {
  SemanticDecomposition d;
  for (const auto& n : default_component_names()) d.components.push_back({n, n + " of \"" + query + "\""});
  return d;
}

TEST(Evaluate, OracleFullyRelevantIsExcellent) {
  auto s = make_oracle_scenario("q full", {3, 1}, {5, 3});
  auto b = make_mock_backend(MockKind::oracle, 1, s.knowledge);
  const auto ev = evaluate_candidate(s.candidates[0].image, "cand0", decomposition_for("q full"), *b);
  EXPECT_EQ(ev.overall, Judgment::excellent_match);
  EXPECT_FALSE(ev.degraded);
  for (const auto& n : ev.notes) EXPECT_EQ(n.verdict, Verdict::met);
  const auto partial = evaluate_candidate(s.candidates[1].image, "cand1", decomposition_for("q full"), *b);
  EXPECT_EQ(partial.overall, Judgment::partial_match);
}

TEST(Evaluate, SendsOneImageAndComponents) {
  auto s = make_oracle_scenario("q send", {1});
  RecordingBackend rec(make_mock_backend(MockKind::oracle, 1, s.knowledge));
  evaluate_candidate(s.candidates[0].image, "cand0", decomposition_for("q send"), rec);
  ASSERT_EQ(rec.call_count(), 1u);
  EXPECT_EQ(image_parts(rec.requests()[0]), 1u);
  EXPECT_NE(joined_text(rec.requests()[0]).find("- key_details: "), std::string::npos);
}

TEST(Evaluate, UnparseableReplyDegrades) {
  auto b = scripted({"I think it matches", "really, it matches"});
  const auto ev = evaluate_candidate(testing::fixture_image(0), "c", decomposition_for("q"), *b);
  EXPECT_TRUE(ev.degraded);
  EXPECT_EQ(ev.overall, Judgment::no_match);
  EXPECT_EQ(ev.notes.size(), 5u);
}

TEST(Evaluate, UnreadableImageThrows) {
  testing::TempDir dir;
  testing::write_file(dir / "bad.png", "not an image");
  auto b = scripted({});
  EXPECT_THROW(evaluate_candidate(dir / "bad.png", "c", decomposition_for("q"), *b), ImageError);
  EXPECT_THROW(evaluate_candidate(dir / "missing.png", "c", decomposition_for("q"), *b), ImageError);
}

std::vector<CandidateEvaluation> oracle_evaluations(const testing::OracleScenario& s, ChatBackend& b) {
  std::vector<CandidateEvaluation> evs;
  for (const auto& c : s.candidates) evs.push_back(evaluate_candidate(c.image, c.id, decomposition_for(s.query), b));
  return evs;
}

TEST(RankListwise, FullySatisfyingCandidateFirst) {
  auto s = make_oracle_scenario("q fourth", {1, 1, 0, 3, 2}, {3, 2, 1, 5, 4});
  auto b = make_mock_backend(MockKind::oracle, 1, s.knowledge);
  const auto evs = oracle_evaluations(s, *b);
  EXPECT_EQ(evs[3].overall, Judgment::excellent_match);
  const auto out = rank_listwise(evs, *b);
  EXPECT_FALSE(out.fallback);
  EXPECT_EQ(out.ranking.ids.front(), "cand3");
}

TEST(RankListwise, TextOnlyByDefaultThumbnailsOnRequest) {
  auto s = make_oracle_scenario("q thumbs", {0, 1, 2});
  auto oracle = make_mock_backend(MockKind::oracle, 1, s.knowledge);
  const auto evs = oracle_evaluations(s, *oracle);
  RecordingBackend rec(oracle);
  rank_listwise(evs, rec, {}, nullptr, &s.candidates);
  EXPECT_EQ(image_parts(rec.requests()[0]), 0u);
  EXPECT_NE(joined_text(rec.requests()[0]).find("[3] overall judgment:"), std::string::npos);
  PipelineOptions opts;
  opts.attach_thumbnails = true;
  rank_listwise(evs, rec, opts, nullptr, &s.candidates);
  EXPECT_EQ(image_parts(rec.requests()[1]), 3u);
}

TEST(RankListwise, SingleCandidate) {
  auto s = make_oracle_scenario("q single", {0});
  auto b = make_mock_backend(MockKind::oracle, 1, s.knowledge);
  const auto out = rank_listwise(oracle_evaluations(s, *b), *b);
  EXPECT_EQ(out.ranking.ids, (std::vector<std::string>{"cand0"}));
}

TEST(RankListwise, FallbackOnBackendError) {
  auto s = make_oracle_scenario("q fail", {0, 1});
  auto oracle = make_mock_backend(MockKind::oracle, 1, s.knowledge);
  const auto evs = oracle_evaluations(s, *oracle);
  MockOptions o;
  o.script = {{"", 401}};
  auto failing = make_mock_backend(MockKind::scripted, 0, nullptr, o);
  const auto out = rank_listwise(evs, *failing);
  EXPECT_TRUE(out.fallback);
  EXPECT_FALSE(out.error.empty());
  EXPECT_EQ(out.ranking.ids, (std::vector<std::string>{"cand0", "cand1"}));
  EXPECT_EQ(out.ranking.repaired_count(), 2u);
}

std::vector<int> shuffled_labels(std::size_t k, std::uint64_t seed) {
  std::vector<int> labels(k);
  std::iota(labels.begin(), labels.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

std::vector<std::string> sorted_by_label(const testing::OracleScenario& s, const std::vector<int>& labels) {
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return labels[a] > labels[b]; });
  std::vector<std::string> ids;
  for (auto i : order) ids.push_back(s.candidates[i].id);
  return ids;
}

TEST(Rerank, OracleSortsShuffledLabelsInEveryMode) {
  for (std::size_t k : {3u, 15u, 20u, 70u}) {
    const auto labels = shuffled_labels(k, k);
    auto s = make_oracle_scenario("labels query " + std::to_string(k), labels);
    auto b = make_mock_backend(MockKind::oracle, 3, s.knowledge);
    const auto expected = sorted_by_label(s, labels);
    for (Mode m : {Mode::R, Mode::RD, Mode::RE, Mode::RDE}) {
      const auto r = rerank(TextQuery{s.query}, s.candidates, *b, m);
      EXPECT_EQ(r.ranking.ids, expected) << "K=" << k << " mode " << to_string(m);
      EXPECT_EQ(r.ranking.repaired_count(), 0u);
    }
  }
}

TEST(Rerank, StageCallCounts) {
  const std::size_t k = 6;
  auto s = make_oracle_scenario("count query", shuffled_labels(k, 1));
  auto oracle = make_mock_backend(MockKind::oracle, 3, s.knowledge);
  const std::vector<std::pair<Mode, std::size_t>> expected{{Mode::R, 1}, {Mode::RD, 2}, {Mode::RE, k + 1}, {Mode::RDE, k + 2}};
  for (const auto& [mode, calls] : expected) {
    RecordingBackend rec(oracle);
    const auto r = rerank(TextQuery{s.query}, s.candidates, rec, mode);
    EXPECT_EQ(rec.call_count(), calls) << to_string(mode);
    EXPECT_EQ(r.transcript.size(), calls);
    for (const auto& req : rec.requests()) EXPECT_TRUE(check_conformance(req).empty());
  }
}

TEST(Rerank, TruncatingRepairsDroppedIds) {
  auto s = make_oracle_scenario("trunc query", shuffled_labels(15, 9));
  MockOptions o;
  o.truncate_suffix = 4;
  auto b = make_mock_backend(MockKind::truncating, 1, s.knowledge, o);
  const auto r = rerank(TextQuery{s.query}, s.candidates, *b, Mode::RDE);
  EXPECT_TRUE(testing::is_permutation_of(r.ranking.ids, testing::ids_of(s.candidates)));
  EXPECT_EQ(r.ranking.repaired_count(), 4u);
}

TEST(Rerank, MalformedFallsBackToInitialOrder) {
  auto s = make_oracle_scenario("malformed query", shuffled_labels(15, 2));
  auto b = make_mock_backend(MockKind::malformed, 5, nullptr);
  const auto r = rerank(TextQuery{s.query}, s.candidates, *b, Mode::RDE);
  EXPECT_EQ(r.ranking.ids, testing::ids_of(s.candidates));
  EXPECT_EQ(r.ranking.repaired_count(), 15u);
  EXPECT_TRUE(r.ranking_fallback);
  EXPECT_TRUE(r.decomposition_degraded);
  EXPECT_EQ(r.degraded_evaluations, 15u);
  std::size_t repairs = 0;
  for (const auto& rec : r.transcript) repairs += rec.stage.find(":repair") != std::string::npos ? 1 : 0;
  EXPECT_GT(repairs, 0u);
}

class JitteryBackend final : public ChatBackend {
 public:
  JitteryBackend(BackendPtr inner, std::uint64_t seed) : inner_(std::move(inner)), rng_(seed) {}
  ChatResponse chat(const ChatRequest& r) override {
    int delay;
    {
      std::lock_guard lock(mutex_);
      delay = static_cast<int>(rng_() % 4);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(delay));
    return inner_->chat(r);
  }

 private:
  BackendPtr inner_;
  std::mutex mutex_;
  std::mt19937_64 rng_;
};

TEST(Rerank, EvaluationCompletionOrderDoesNotMatter) {
  auto s = make_oracle_scenario("order query", {2, 2, 1, 2, 0, 1, 2, 1, 0, 2}, {4, 4, 3, 4, 0, 3, 4, 3, 0, 4});
  auto oracle = make_mock_backend(MockKind::noisy, 4, s.knowledge);
  PipelineOptions serial;
  serial.parallelism = 1;
  const auto base = rerank(TextQuery{s.query}, s.candidates, *oracle, Mode::RDE, serial);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    JitteryBackend jittery(oracle, seed);
    PipelineOptions wide;
    wide.parallelism = 8;
    const auto r = rerank(TextQuery{s.query}, s.candidates, jittery, Mode::RDE, wide);
    EXPECT_EQ(r.ranking.ids, base.ranking.ids);
    ASSERT_EQ(r.transcript.size(), base.transcript.size());
    for (std::size_t i = 0; i < r.transcript.size(); ++i) {
      EXPECT_EQ(r.transcript[i].request_digest, base.transcript[i].request_digest);
    }
  }
}

TEST(Rerank, PriorEvaluationsAreReused) {
  auto s = make_oracle_scenario("prior query", {0, 2, 1, 3});
  auto oracle = make_mock_backend(MockKind::oracle, 1, s.knowledge);
  const auto first = rerank(TextQuery{s.query}, s.candidates, *oracle, Mode::RDE);
  PriorArtifacts prior;
  prior.decomposition = first.decomposition;
  for (const auto& ev : first.evaluations) prior.evaluations.emplace(ev.candidate_id, ev);
  RecordingBackend rec(oracle);
  std::vector<CandidateImage> subset{s.candidates[2], s.candidates[0], s.candidates[3]};
  const auto r = rerank(TextQuery{s.query}, subset, rec, Mode::RDE, {}, &prior);
  EXPECT_EQ(rec.call_count(), 1u);
  EXPECT_EQ(r.ranking.ids, (std::vector<std::string>{"cand3", "cand2", "cand0"}));
}

TEST(Rerank, ComposedQueryCarriesReferenceImage) {
  auto s = make_oracle_scenario("change the dog to a cat", {0, 1, 2}, {}, 10);
  RecordingBackend rec(make_mock_backend(MockKind::oracle, 1, s.knowledge));
  const ComposedQuery q{testing::fixture_image(0), s.query};
  auto r = rerank(q, s.candidates, rec, Mode::R);
  EXPECT_EQ(image_parts(rec.requests()[0]), 4u);
  EXPECT_EQ(r.ranking.ids.front(), "cand2");
  r = rerank(q, s.candidates, rec, Mode::RE);
  EXPECT_EQ(image_parts(rec.requests()[1]), 2u);  // reference + candidate
  r = rerank(q, s.candidates, rec, Mode::RDE);
  EXPECT_EQ(r.ranking.ids.front(), "cand2");
}

TEST(Rerank, DialogueIsFlattened) {
  DialogueQuery d{"a dog", {{"is it outside?", "yes"}}};
  EXPECT_EQ(raw_query_text(d), "a dog. Q: is it outside? A: yes");
  auto s = make_oracle_scenario(raw_query_text(d), {0, 2, 1});
  auto b = make_mock_backend(MockKind::oracle, 1, s.knowledge);
  const auto r = rerank(d, s.candidates, *b, Mode::RDE);
  EXPECT_EQ(r.ranking.ids, (std::vector<std::string>{"cand1", "cand2", "cand0"}));
}

TEST(Rerank, RejectsInvalidInput) {
  auto s = make_oracle_scenario("q", {0, 1});
  auto b = make_mock_backend(MockKind::oracle, 1, s.knowledge);
  EXPECT_THROW(rerank(TextQuery{""}, s.candidates, *b, Mode::R), std::invalid_argument);
  EXPECT_THROW(rerank(ComposedQuery{testing::fixture_image(0), ""}, s.candidates, *b, Mode::R), std::invalid_argument);
  EXPECT_THROW(rerank(TextQuery{"q"}, {}, *b, Mode::R), std::invalid_argument);
  auto dup = s.candidates;
  dup[1].id = dup[0].id;
  EXPECT_THROW(rerank(TextQuery{"q"}, dup, *b, Mode::R), std::invalid_argument);
}

TEST(Prompts, RenderOnlyKnownPlaceholders) {
  EXPECT_EQ(render_template("{query_text} and {other} {k}", {{"query_text", "{k}"}, {"k", "3"}}), "{k} and {other} 3");
  const auto& p = PromptSet::builtin();
  EXPECT_FALSE(p.version.empty());
  for (const std::string* t : {&p.deconstruct_text, &p.evaluate, &p.rank, &p.rank_images_query, &p.repair}) {
    EXPECT_FALSE(t->empty());
  }
  EXPECT_NE(p.deconstruct_text.find("{query_text}"), std::string::npos);
  EXPECT_NE(p.evaluate.find("{components}"), std::string::npos);
  EXPECT_NE(p.rank.find("{evaluations}"), std::string::npos);
}

TEST(Prompts, LoadFromDirectoryMatchesBuiltin) {
  const auto dir = testing::fixture_dir().parent_path().parent_path().parent_path() / "prompts" / "v1";
  const auto loaded = PromptSet::load(dir);
  const auto& builtin = PromptSet::builtin();
  EXPECT_EQ(loaded.version, builtin.version);
  EXPECT_EQ(loaded.rank, builtin.rank);
  EXPECT_EQ(loaded.evaluate, builtin.evaluate);
  testing::TempDir empty;
  EXPECT_ANY_THROW(PromptSet::load(empty.path()));
}

}  // namespace
}  // namespace cotrr
