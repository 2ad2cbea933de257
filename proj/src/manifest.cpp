#include "cotrr/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace cotrr {

namespace {

std::string summarize(const std::vector<ManifestIssue>& issues) {
  std::ostringstream os;
  os << issues.size() << " manifest issue(s)";
  for (std::size_t i = 0; i < issues.size() && i < 5; ++i) os << "; line " << issues[i].line << ": " << issues[i].message;
  return os.str();
}

struct FieldReader {
  const nlohmann::json& obj;
  std::vector<std::string>& problems;

  std::optional<std::string> string(const char* key, bool required) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
      if (required) problems.push_back(std::string("missing required field '") + key + "'");
      return std::nullopt;
    }
    if (!it->is_string()) {
      problems.push_back(std::string("field '") + key + "' must be a string");
      return std::nullopt;
    }
    if (required && it->get_ref<const std::string&>().empty()) {
      problems.push_back(std::string("field '") + key + "' is empty");
      return std::nullopt;
    }
    return it->get<std::string>();
  }

  std::optional<std::vector<std::string>> ids(const nlohmann::json& value, const std::string& what) {
    if (!value.is_array()) {
      problems.push_back(what + " must be an array of ids");
      return std::nullopt;
    }
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& v : value) {
      if (!v.is_string() || v.get_ref<const std::string&>().empty()) {
        problems.push_back(what + " contains a non-string or empty id");
        return std::nullopt;
      }
      if (!seen.insert(v.get<std::string>()).second) {
        problems.push_back(what + " repeats id '" + v.get<std::string>() + "'");
        return std::nullopt;
      }
      out.push_back(v.get<std::string>());
    }
    return out;
  }

  std::optional<std::vector<std::string>> id_list(const char* key, bool required) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
      if (required) problems.push_back(std::string("missing required field '") + key + "'");
      return std::nullopt;
    }
    auto out = ids(*it, std::string("field '") + key + "'");
    if (out && required && out->empty()) {
      problems.push_back(std::string("field '") + key + "' is empty");
      return std::nullopt;
    }
    return out;
  }
};

std::optional<ManifestRecord> parse_record(const std::string& line_text, int line_no, const EmbeddingStore* corpus,
                                           std::vector<std::string>& problems) {
  const auto obj = nlohmann::json::parse(line_text, nullptr, false);
  if (obj.is_discarded()) {
    problems.emplace_back("malformed JSON");
    return std::nullopt;
  }
  if (!obj.is_object()) {
    problems.emplace_back("record is not a JSON object");
    return std::nullopt;
  }
  FieldReader f{obj, problems};
  ManifestRecord r;
  r.line = line_no;
  r.query_id = f.string("query_id", true).value_or("");

  const auto task = f.string("task", true);
  if (!task) return std::nullopt;
  const auto parsed_task = parse_task(*task);
  if (!parsed_task) {
    problems.push_back("unknown task tag '" + *task + "'");
    return std::nullopt;
  }
  r.task = *parsed_task;

  switch (r.task) {
    case Task::tir:
      r.text = f.string("text", true).value_or("");
      break;
    case Task::cir:
      r.reference_image = f.string("reference_image", true).value_or("");
      r.manipulation_text = f.string("manipulation_text", true).value_or("");
      break;
    case Task::chat: {
      r.caption = f.string("caption", true).value_or("");
      auto it = obj.find("dialogue");
      if (it == obj.end() || !it->is_array()) {
        problems.emplace_back("missing required field 'dialogue'");
        break;
      }
      for (const auto& turn : *it) {
        if (turn.is_object() && turn.contains("question") && turn.contains("answer") &&
            turn["question"].is_string() && turn["answer"].is_string()) {
          r.dialogue.push_back({turn["question"].get<std::string>(), turn["answer"].get<std::string>()});
        } else if (turn.is_array() && turn.size() == 2 && turn[0].is_string() && turn[1].is_string()) {
          r.dialogue.push_back({turn[0].get<std::string>(), turn[1].get<std::string>()});
        } else {
          problems.emplace_back("dialogue turns must be {question, answer} objects");
          break;
        }
      }
      break;
    }
  }

  if (auto gt = f.id_list("ground_truth", true)) r.ground_truth = std::move(*gt);
  r.subset = f.id_list("subset", false);
  if (r.subset) {
    const std::set<std::string> gts(r.ground_truth.begin(), r.ground_truth.end());
    bool any = false;
    for (const auto& id : *r.subset) any = any || gts.count(id) > 0;
    if (r.subset->empty() || !any) problems.emplace_back("subset must contain at least one ground-truth id");
  }
  r.candidates = f.id_list("candidates", false);
  if (r.candidates && r.candidates->empty()) problems.emplace_back("field 'candidates' is empty");

  if (auto it = obj.find("round_candidates"); it != obj.end() && !it->is_null()) {
    if (r.task != Task::chat || !it->is_array()) {
      problems.emplace_back("'round_candidates' is only valid on chat records, as an array of id lists");
    } else {
      std::vector<std::vector<std::string>> rounds;
      for (const auto& list : *it) {
        auto ids = f.ids(list, "round_candidates entry");
        if (!ids) break;
        rounds.push_back(std::move(*ids));
      }
      if (rounds.size() != r.dialogue.size() + 1) {
        problems.push_back("'round_candidates' needs " + std::to_string(r.dialogue.size() + 1) + " lists");
      }
      r.round_candidates = std::move(rounds);
    }
  }
  if (auto it = obj.find("round_queries"); it != obj.end() && !it->is_null()) {
    if (r.task != Task::chat || !it->is_array()) {
      problems.emplace_back("'round_queries' is only valid on chat records, as an array of strings");
    } else {
      std::vector<std::string> queries;
      for (const auto& q : *it) {
        if (!q.is_string()) {
          problems.emplace_back("'round_queries' entries must be strings");
          break;
        }
        queries.push_back(q.get<std::string>());
      }
      if (queries.size() != r.dialogue.size() + 1) {
        problems.push_back("'round_queries' needs " + std::to_string(r.dialogue.size() + 1) + " entries");
      }
      r.round_queries = std::move(queries);
    }
  }

  if (auto it = obj.find("oracle_labels"); it != obj.end() && !it->is_null()) {
    if (!it->is_object()) {
      problems.emplace_back("'oracle_labels' must be an object");
    } else {
      for (auto l = it->begin(); l != it->end(); ++l) {
        OracleLabel label;
        if (l->is_number_integer()) {
          label.relevance = l->get<int>();
        } else if (l->is_object() && l->contains("relevance") && (*l)["relevance"].is_number_integer()) {
          label.relevance = (*l)["relevance"].get<int>();
          if (l->contains("met") && (*l)["met"].is_number_integer()) label.met = (*l)["met"].get<int>();
        } else {
          problems.push_back("bad oracle label for '" + l.key() + "'");
          continue;
        }
        r.oracle_labels[l.key()] = label;
      }
    }
  }

  if (corpus != nullptr) {
    auto check = [&](const std::vector<std::string>& ids, const char* what) {
      for (const auto& id : ids) {
        if (!corpus->contains(id)) problems.push_back(std::string(what) + " id '" + id + "' is not in the corpus");
      }
    };
    check(r.ground_truth, "ground-truth");
    if (r.subset) check(*r.subset, "subset");
    if (r.candidates) check(*r.candidates, "candidate");
  }
  return r;
}

}  // namespace

std::string_view to_string(Task task) {
  switch (task) {
    case Task::tir:
      return "tir";
    case Task::cir:
      return "cir";
    case Task::chat:
      return "chat";
  }
  return "tir";
}

std::optional<Task> parse_task(std::string_view text) {
  if (text == "tir") return Task::tir;
  if (text == "cir") return Task::cir;
  if (text == "chat") return Task::chat;
  return std::nullopt;
}

ManifestError::ManifestError(std::vector<ManifestIssue> issues)
    : std::runtime_error(summarize(issues)), issues_(std::move(issues)) {}

ManifestReadResult read_manifest(std::istream& in, const EmbeddingStore* corpus) {
  ManifestReadResult result;
  std::set<std::string> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> problems;
    auto record = parse_record(line, line_no, corpus, problems);
    if (record && !record->query_id.empty() && !ids.insert(record->query_id).second) {
      problems.push_back("duplicate query_id '" + record->query_id + "'");
    }
    for (auto& p : problems) result.issues.push_back({line_no, std::move(p)});
    if (record && problems.empty()) result.records.push_back(std::move(*record));
  }
  return result;
}

ManifestReadResult read_manifest(const std::filesystem::path& path, const EmbeddingStore* corpus) {
  std::ifstream in(path);
  if (!in) return {{}, {{0, "cannot open manifest " + path.string()}}};
  return read_manifest(in, corpus);
}

std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path, const EmbeddingStore* corpus) {
  auto result = read_manifest(path, corpus);
  if (!result.issues.empty()) throw ManifestError(std::move(result.issues));
  return std::move(result.records);
}

TextQuery chat_query_for_round(const ManifestRecord& record, std::size_t round) {
  if (record.task != Task::chat) throw std::invalid_argument("record '" + record.query_id + "' is not a chat record");
  if (round > record.dialogue.size()) {
    throw std::out_of_range("round " + std::to_string(round) + " out of range for '" + record.query_id + "' with " +
                            std::to_string(record.dialogue.size()) + " turns");
  }
  if (record.round_queries && round < record.round_queries->size()) return {(*record.round_queries)[round]};
  std::string text = record.caption;
  for (std::size_t t = 0; t < round; ++t) {
    text += ". Q: " + record.dialogue[t].question + " A: " + record.dialogue[t].answer;
  }
  return {text};
}

Query query_for(const ManifestRecord& record, const ImageResolver& images) {
  switch (record.task) {
    case Task::tir:
      return TextQuery{record.text};
    case Task::cir:
      return ComposedQuery{images.path_for(record.reference_image), record.manipulation_text};
    case Task::chat:
      return DialogueQuery{record.caption, record.dialogue};
  }
  throw std::logic_error("unknown task");
}

}  // namespace cotrr
