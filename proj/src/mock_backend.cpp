#include "cotrr/mock_backend.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>

#include "cotrr/digest.hpp"

namespace cotrr {

namespace {

const Message* first_user_message(const ChatRequest& request) {
  for (const auto& m : request.messages) {
    if (m.role == Role::user) return &m;
  }
  return nullptr;
}

std::string message_text(const Message& m) {
  std::string out;
  for (const auto& part : m.parts) {
    if (const auto* t = std::get_if<TextPart>(&part)) {
      out += t->text;
      out += '\n';
    }
  }
  return out;
}

std::string fenced(const nlohmann::json& j) { return "```json\n" + j.dump() + "\n```"; }

std::uint64_t request_seed(std::uint64_t seed, const ChatRequest& request) {
  const std::string key = cache_key(request);
  return seed ^ std::stoull(key.substr(0, 16), nullptr, 16);
}

class OracleBackend : public ChatBackend {
 public:
  explicit OracleBackend(std::shared_ptr<const OracleKnowledge> knowledge) : knowledge_(std::move(knowledge)) {
    if (!knowledge_) knowledge_ = std::make_shared<OracleKnowledge>();
  }

  ChatResponse chat(const ChatRequest& request) override { return {answer(request), false, 1}; }

  std::string answer(const ChatRequest& request) const {
    switch (detect_stage(request)) {
      case PromptStage::deconstruct:
        return deconstruct(request);
      case PromptStage::evaluate:
        return evaluate(request);
      case PromptStage::rank:
        return fenced({{"ranking", rank_order(request)}});
      case PromptStage::unknown:
        break;
    }
    return "I can only answer re-ranking prompts.";
  }

  // Best-first 1-based indices for a ranking request.
  std::vector<int> rank_order(const ChatRequest& request) const {
    const Message* user = first_user_message(request);
    if (user == nullptr) return {};
    const std::string text = message_text(*user);

    std::vector<std::pair<int, int>> scored;  // (index, relevance)
    static const std::regex block(R"(^\[(\d+)\] overall judgment:)");
    static const std::regex marker(R"(oracle:relevance=(-?\d+))");
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      std::smatch m;
      if (std::regex_search(line, m, block)) {
        scored.emplace_back(std::stoi(m[1].str()), -1);
      } else if (!scored.empty() && std::regex_search(line, m, marker)) {
        scored.back().second = std::stoi(m[1].str());
      }
    }
    if (scored.empty()) {
      const auto* labels = labels_for(text);
      for (std::size_t i = 0; i + 1 < user->parts.size(); ++i) {
        const auto* t = std::get_if<TextPart>(&user->parts[i]);
        const auto* img = std::get_if<ImagePart>(&user->parts[i + 1]);
        if (t == nullptr || img == nullptr || t->text.size() < 3 || t->text.front() != '[' || t->text.back() != ']') {
          continue;
        }
        const int index = std::atoi(t->text.c_str() + 1);
        scored.emplace_back(index, label_of(labels, candidate_of(*img)).relevance);
      }
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    std::vector<int> order;
    for (const auto& [index, relevance] : scored) order.push_back(index);
    return order;
  }

 private:
  const std::map<std::string, OracleLabel>* labels_for(const std::string& text) const {
    const std::map<std::string, OracleLabel>* best = nullptr;
    std::size_t best_len = 0;
    for (const auto& [query, labels] : knowledge_->labels) {
      if (query.size() > best_len && text.find(query) != std::string::npos) {
        best = &labels;
        best_len = query.size();
      }
    }
    return best;
  }

  std::string candidate_of(const ImagePart& image) const {
    auto it = knowledge_->image_ids.find(sha256_hex(image.bytes));
    return it == knowledge_->image_ids.end() ? std::string() : it->second;
  }

  static OracleLabel label_of(const std::map<std::string, OracleLabel>* labels, const std::string& id) {
    if (labels == nullptr || id.empty()) return {};
    auto it = labels->find(id);
    return it == labels->end() ? OracleLabel{} : it->second;
  }

  std::string identified_query(const std::string& text) const {
    std::string best;
    for (const auto& [query, labels] : knowledge_->labels) {
      if (query.size() > best.size() && text.find(query) != std::string::npos) best = query;
    }
    return best;
  }

  std::string deconstruct(const ChatRequest& request) const {
    const Message* user = first_user_message(request);
    const std::string query = identified_query(user ? message_text(*user) : std::string());
    nlohmann::json out = nlohmann::json::object();
    for (const char* name : {"primary_subject", "activity", "key_details", "environment", "ambiance"}) {
      out[name] = query.empty() ? std::string("unspecified") : std::string(name) + " of \"" + query + "\"";
    }
    return "Decomposition follows.\n" + fenced(out);
  }

  std::string evaluate(const ChatRequest& request) const {
    const Message* user = first_user_message(request);
    const std::string text = user ? message_text(*user) : std::string();

    std::vector<std::string> components;
    static const std::regex component_line(R"(^- ([A-Za-z_]+): )");
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      std::smatch m;
      if (std::regex_search(line, m, component_line)) components.push_back(m[1].str());
    }

    std::string candidate;
    if (user != nullptr) {
      for (auto it = user->parts.rbegin(); it != user->parts.rend(); ++it) {
        if (const auto* img = std::get_if<ImagePart>(&*it)) {
          candidate = candidate_of(*img);
          break;
        }
      }
    }
    const OracleLabel label = label_of(labels_for(text), candidate);
    const int total = std::max(1, knowledge_->component_total);
    const double fraction = std::clamp(label.met, 0, total) / static_cast<double>(total);
    const auto met_here = static_cast<std::size_t>(std::floor(fraction * components.size() + 1e-9));

    static constexpr const char* kLabels[] = {"no match", "weak match", "partial match", "good match",
                                              "excellent match"};
    nlohmann::json notes = nlohmann::json::array();
    for (std::size_t i = 0; i < components.size(); ++i) {
      std::string rationale = i < met_here ? "clearly present" : "not present";
      if (i == 0) rationale += "; oracle:relevance=" + std::to_string(label.relevance);
      notes.push_back({{"name", components[i]}, {"verdict", i < met_here ? "met" : "unmet"}, {"rationale", rationale}});
    }
    const int level = fraction >= 1.0 ? 4 : fraction >= 0.8 ? 3 : fraction >= 0.5 ? 2 : fraction > 0.0 ? 1 : 0;
    return fenced({{"overall", kLabels[level]}, {"components", notes}});
  }

  std::shared_ptr<const OracleKnowledge> knowledge_;
};

class NoisyBackend final : public ChatBackend {
 public:
  NoisyBackend(std::shared_ptr<const OracleKnowledge> k, std::uint64_t seed, int swaps)
      : oracle_(std::move(k)), seed_(seed), swaps_(std::max(0, swaps)) {}

  ChatResponse chat(const ChatRequest& request) override {
    if (detect_stage(request) != PromptStage::rank) return oracle_.chat(request);
    std::vector<int> order = oracle_.rank_order(request);
    std::mt19937_64 rng(request_seed(seed_, request));
    if (order.size() > 1) {
      std::uniform_int_distribution<std::size_t> pick(0, order.size() - 1);
      for (int s = 0; s < swaps_; ++s) std::swap(order[pick(rng)], order[pick(rng)]);
    }
    return {fenced({{"ranking", order}}), false, 1};
  }

 private:
  OracleBackend oracle_;
  std::uint64_t seed_;
  int swaps_;
};

class TruncatingBackend final : public ChatBackend {
 public:
  TruncatingBackend(std::shared_ptr<const OracleKnowledge> k, std::uint64_t seed, std::optional<int> suffix)
      : oracle_(std::move(k)), seed_(seed), suffix_(suffix) {}

  ChatResponse chat(const ChatRequest& request) override {
    if (detect_stage(request) != PromptStage::rank) return oracle_.chat(request);
    std::vector<int> order = oracle_.rank_order(request);
    std::size_t drop = 0;
    if (suffix_) {
      drop = static_cast<std::size_t>(std::max(0, *suffix_));
    } else if (!order.empty()) {
      std::mt19937_64 rng(request_seed(seed_, request));
      drop = std::uniform_int_distribution<std::size_t>(1, order.size())(rng);
    }
    order.resize(order.size() - std::min(drop, order.size()));
    return {fenced({{"ranking", order}}), false, 1};
  }

 private:
  OracleBackend oracle_;
  std::uint64_t seed_;
  std::optional<int> suffix_;
};

class MalformedBackend final : public ChatBackend {
 public:
  explicit MalformedBackend(std::uint64_t seed) : seed_(seed) {}

  ChatResponse chat(const ChatRequest& request) override {
    static const char* kReplies[] = {
        "I'm sorry, I can't produce JSON for this request.",
        "```json\n{\"ranking\": [1, 2\n```",
        "{\"result\": \"see the analysis above\"}",
        "```json\n[\"not\", \"an\", \"object\"]\n```",
        "{ overall: excellent, components: ??? }",
        "{\"ranking\": \"1,2,3\", \"overall\": 7, \"primary_subject\": null}",
    };
    std::mt19937_64 rng(request_seed(seed_, request));
    const auto i = std::uniform_int_distribution<std::size_t>(0, std::size(kReplies) - 1)(rng);
    return {kReplies[i], false, 1};
  }

 private:
  std::uint64_t seed_;
};

class ScriptedBackend final : public ChatBackend {
 public:
  explicit ScriptedBackend(std::vector<ScriptStep> script) : script_(std::move(script)) {}

  ChatResponse chat(const ChatRequest&) override {
    ScriptStep step;
    {
      std::lock_guard lock(mutex_);
      if (next_ >= script_.size()) {
        throw BackendError(BackendError::Kind::script_exhausted,
                           "scripted backend exhausted after " + std::to_string(script_.size()) + " replies");
      }
      step = script_[next_++];
    }
    if (step.http_status != 0) {
      const bool transient = step.http_status == 429 || step.http_status >= 500;
      throw BackendError(transient ? BackendError::Kind::transient : BackendError::Kind::permanent,
                         "scripted HTTP " + std::to_string(step.http_status), step.http_status);
    }
    return {step.text, false, 1};
  }

 private:
  std::mutex mutex_;
  std::vector<ScriptStep> script_;
  std::size_t next_ = 0;
};

}  // namespace

void OracleKnowledge::add_image(const std::string& candidate_id, const ImagePart& image) {
  image_ids[sha256_hex(image.bytes)] = candidate_id;
}

std::optional<MockKind> parse_mock_kind(std::string_view text) {
  for (MockKind k : {MockKind::oracle, MockKind::scripted, MockKind::noisy, MockKind::truncating, MockKind::malformed}) {
    if (text == to_string(k)) return k;
  }
  return std::nullopt;
}

std::string_view to_string(MockKind kind) {
  switch (kind) {
    case MockKind::oracle:
      return "oracle";
    case MockKind::scripted:
      return "scripted";
    case MockKind::noisy:
      return "noisy";
    case MockKind::truncating:
      return "truncating";
    case MockKind::malformed:
      return "malformed";
  }
  return "oracle";
}

PromptStage detect_stage(const ChatRequest& request) {
  const Message* user = first_user_message(request);
  if (user == nullptr || user->parts.empty()) return PromptStage::unknown;
  const auto* first = std::get_if<TextPart>(&user->parts.front());
  if (first == nullptr) return PromptStage::unknown;
  if (first->text.find("\"ranking\"") != std::string::npos) return PromptStage::rank;
  if (first->text.find("\"overall\"") != std::string::npos) return PromptStage::evaluate;
  if (first->text.find("\"primary_subject\"") != std::string::npos) return PromptStage::deconstruct;
  return PromptStage::unknown;
}

BackendPtr make_mock_backend(MockKind kind, std::uint64_t seed, std::shared_ptr<const OracleKnowledge> knowledge,
                             MockOptions options) {
  switch (kind) {
    case MockKind::oracle:
      return std::make_shared<OracleBackend>(std::move(knowledge));
    case MockKind::scripted:
      return std::make_shared<ScriptedBackend>(std::move(options.script));
    case MockKind::noisy:
      return std::make_shared<NoisyBackend>(std::move(knowledge), seed, options.swaps);
    case MockKind::truncating:
      return std::make_shared<TruncatingBackend>(std::move(knowledge), seed, options.truncate_suffix);
    case MockKind::malformed:
      return std::make_shared<MalformedBackend>(seed);
  }
  throw std::invalid_argument("unknown mock kind");
}

}  // namespace cotrr
