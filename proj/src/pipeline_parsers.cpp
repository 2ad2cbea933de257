#include <algorithm>
#include <array>
#include <cctype>
#include <set>

#include "cotrr/pipeline.hpp"

namespace cotrr {

namespace {

constexpr std::array<std::string_view, 5> kJudgmentNames{"no_match", "weak_match", "partial_match", "good_match",
                                                          "excellent_match"};
constexpr std::array<std::string_view, 5> kJudgmentLabels{"no match", "weak match", "partial match", "good match",
                                                           "excellent match"};

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Finds `name` among object keys after label normalization ("Primary Subject" == "primary_subject").
const nlohmann::json* find_key(const nlohmann::json& obj, const std::string& name) {
  if (!obj.is_object()) return nullptr;
  if (auto it = obj.find(name); it != obj.end()) return &*it;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (normalize_label(it.key()) == name) return &*it;
  }
  return nullptr;
}

}  // namespace

std::string_view to_string(Judgment j) { return kJudgmentNames[static_cast<std::size_t>(j)]; }

std::string_view display_label(Judgment j) { return kJudgmentLabels[static_cast<std::size_t>(j)]; }

std::optional<Judgment> parse_judgment(std::string_view text) {
  const std::string key = normalize_label(text);
  for (std::size_t i = 0; i < kJudgmentNames.size(); ++i) {
    if (key == kJudgmentNames[i]) return static_cast<Judgment>(i);
  }
  return std::nullopt;
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::met:
      return "met";
    case Verdict::partially_met:
      return "partially_met";
    case Verdict::unmet:
      return "unmet";
  }
  return "unmet";
}

std::optional<Verdict> parse_verdict(std::string_view text) {
  const std::string key = normalize_label(text);
  if (key == "met" || key == "yes" || key == "satisfied") return Verdict::met;
  if (key == "partially_met" || key == "partial" || key == "partially" || key == "partially_satisfied") {
    return Verdict::partially_met;
  }
  if (key == "unmet" || key == "not_met" || key == "no" || key == "unsatisfied" || key == "not_satisfied") {
    return Verdict::unmet;
  }
  return std::nullopt;
}

Judgment judgment_for_met_fraction(double fraction) {
  if (fraction >= 1.0) return Judgment::excellent_match;
  if (fraction >= 0.8) return Judgment::good_match;
  if (fraction >= 0.5) return Judgment::partial_match;
  if (fraction > 0.0) return Judgment::weak_match;
  return Judgment::no_match;
}

SemanticDecomposition raw_query_decomposition(const std::string& query_text) {
  return {{{"query", query_text}}, true};
}

std::size_t RankedList::repaired_count() const {
  return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), Placement::repaired));
}

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::R:
      return "R";
    case Mode::RD:
      return "R+D";
    case Mode::RE:
      return "R+E";
    case Mode::RDE:
      return "R+D+E";
  }
  return "R+D+E";
}

std::optional<Mode> parse_mode(std::string_view text) {
  for (Mode m : {Mode::R, Mode::RD, Mode::RE, Mode::RDE}) {
    if (text == to_string(m)) return m;
  }
  return std::nullopt;
}

bool uses_deconstruction(Mode mode) { return mode == Mode::RD || mode == Mode::RDE; }
bool uses_evaluation(Mode mode) { return mode == Mode::RE || mode == Mode::RDE; }

Parsed<SemanticDecomposition> parse_decomposition(std::string_view reply,
                                                  const std::vector<std::string>& component_names) {
  auto extracted = extract_json_object(reply);
  if (!ok(extracted)) return std::get<ParseError>(extracted);
  const auto& root = std::get<nlohmann::json>(extracted);
  const nlohmann::json* obj = &root;
  if (const auto* nested = find_key(root, "components"); nested && nested->is_object()) obj = nested;

  SemanticDecomposition d;
  for (const auto& name : component_names) {
    const auto* value = find_key(*obj, name);
    if (value == nullptr) return ParseError{"missing component '" + name + "'"};
    if (!value->is_string()) return ParseError{"component '" + name + "' is not a string"};
    std::string description = trim(value->get_ref<const std::string&>());
    if (description.empty()) return ParseError{"component '" + name + "' is empty"};
    d.components.push_back({name, std::move(description)});
  }
  return d;
}

Parsed<CandidateEvaluation> parse_evaluation(std::string_view reply, const SemanticDecomposition& decomposition,
                                             const std::string& candidate_id) {
  auto extracted = extract_json_object(reply);
  if (!ok(extracted)) return std::get<ParseError>(extracted);
  const auto& root = std::get<nlohmann::json>(extracted);

  const auto* overall = find_key(root, "overall");
  if (overall == nullptr || !overall->is_string()) return ParseError{"missing string field 'overall'"};
  auto judgment = parse_judgment(overall->get_ref<const std::string&>());
  if (!judgment) return ParseError{"unknown overall judgment '" + overall->get<std::string>() + "'"};

  const auto* components = find_key(root, "components");
  if (components == nullptr || !(components->is_array() || components->is_object())) {
    return ParseError{"missing 'components' array"};
  }

  // name -> (verdict, rationale); first occurrence wins.
  std::map<std::string, ComponentNote> by_name;
  auto take = [&](const std::string& raw_name, const nlohmann::json& entry) -> std::optional<ParseError> {
    const std::string name = normalize_label(raw_name);
    if (by_name.count(name)) return std::nullopt;
    const nlohmann::json* verdict = entry.is_object() ? find_key(entry, "verdict") : &entry;
    if (verdict == nullptr || !verdict->is_string()) return ParseError{"component '" + name + "' has no verdict"};
    auto v = parse_verdict(verdict->get_ref<const std::string&>());
    if (!v) return ParseError{"component '" + name + "' has unknown verdict '" + verdict->get<std::string>() + "'"};
    std::string rationale;
    if (entry.is_object()) {
      if (const auto* r = find_key(entry, "rationale"); r && r->is_string()) rationale = trim(r->get<std::string>());
    }
    by_name.emplace(name, ComponentNote{name, *v, std::move(rationale)});
    return std::nullopt;
  };

  if (components->is_array()) {
    for (const auto& entry : *components) {
      if (!entry.is_object()) return ParseError{"component entry is not an object"};
      const auto* name = find_key(entry, "name");
      if (name == nullptr || !name->is_string()) return ParseError{"component entry without a name"};
      if (auto err = take(name->get<std::string>(), entry)) return *err;
    }
  } else {
    for (auto it = components->begin(); it != components->end(); ++it) {
      if (auto err = take(it.key(), it.value())) return *err;
    }
  }

  CandidateEvaluation ev;
  ev.candidate_id = candidate_id;
  ev.overall = *judgment;
  bool any_unmet = false;
  for (const auto& c : decomposition.components) {
    auto it = by_name.find(c.name);
    if (it == by_name.end()) return ParseError{"no verdict for component '" + c.name + "'"};
    any_unmet = any_unmet || it->second.verdict == Verdict::unmet;
    ev.notes.push_back(it->second);
  }
  // An excellent match cannot leave a component unmet; keep the verdicts, cap the judgment.
  if (ev.overall == Judgment::excellent_match && any_unmet) ev.overall = Judgment::good_match;
  return ev;
}

Parsed<std::vector<long long>> parse_ranking(std::string_view reply) {
  auto extracted = extract_json_object(reply);
  if (!ok(extracted)) return std::get<ParseError>(extracted);
  const auto* ranking = find_key(std::get<nlohmann::json>(extracted), "ranking");
  if (ranking == nullptr || !ranking->is_array()) return ParseError{"missing 'ranking' array"};

  std::vector<long long> out;
  for (const auto& entry : *ranking) {
    if (entry.is_number_integer()) {
      out.push_back(entry.get<long long>());
    } else if (entry.is_number_float()) {
      const double v = entry.get<double>();
      if (v >= 1.0 && v <= 1e9 && v == static_cast<double>(static_cast<long long>(v))) {
        out.push_back(static_cast<long long>(v));
      }
    } else if (entry.is_string()) {
      // Accept "3", "[3]", "I3", "candidate 3".
      const auto& s = entry.get_ref<const std::string&>();
      auto first = std::find_if(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
      if (first == s.end()) continue;
      long long v = 0;
      int digits = 0;
      for (auto it = first; it != s.end() && std::isdigit(static_cast<unsigned char>(*it)) && digits < 12;
           ++it, ++digits) {
        v = v * 10 + (*it - '0');
      }
      out.push_back(v);
    }
  }
  return out;
}

}  // namespace cotrr
