#include "cotrr/structured_reply.hpp"

#include <cctype>

namespace cotrr {

std::optional<std::string_view> last_fenced_block(std::string_view reply) {
  std::optional<std::string_view> last;
  std::size_t pos = 0;
  while (true) {
    const auto open = reply.find("```", pos);
    if (open == std::string_view::npos) break;
    // Skip the info string ("json") up to the end of the fence line.
    auto content_start = reply.find('\n', open + 3);
    if (content_start == std::string_view::npos) break;
    ++content_start;
    const auto close = reply.find("```", content_start);
    if (close == std::string_view::npos) break;
    last = reply.substr(content_start, close - content_start);
    pos = close + 3;
  }
  return last;
}

std::optional<std::string_view> longest_brace_span(std::string_view reply) {
  std::vector<std::size_t> open;
  bool in_string = false;
  bool escaped = false;
  std::size_t best_start = 0;
  std::size_t best_len = 0;
  for (std::size_t i = 0; i < reply.size(); ++i) {
    const char c = reply[i];
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"' && !open.empty()) {
      in_string = true;
    } else if (c == '{') {
      open.push_back(i);
    } else if (c == '}' && !open.empty()) {
      const std::size_t start = open.back();
      open.pop_back();
      const std::size_t len = i - start + 1;
      if (len > best_len) {
        best_start = start;
        best_len = len;
      }
    }
  }
  if (best_len == 0) return std::nullopt;
  return reply.substr(best_start, best_len);
}

Parsed<nlohmann::json> extract_json_object(std::string_view reply) {
  auto try_parse = [](std::string_view text) -> std::optional<nlohmann::json> {
    auto j = nlohmann::json::parse(text.begin(), text.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    return j;
  };
  if (auto fenced = last_fenced_block(reply)) {
    if (auto j = try_parse(*fenced)) return *j;
    if (auto span = longest_brace_span(*fenced)) {
      if (auto j = try_parse(*span)) return *j;
    }
  }
  if (auto span = longest_brace_span(reply)) {
    if (auto j = try_parse(*span)) return *j;
    return ParseError{"no parseable JSON object (brace-balanced span is not valid JSON)"};
  }
  return ParseError{"no JSON object found in reply"};
}

std::string normalize_label(std::string_view label) {
  std::string out;
  out.reserve(label.size());
  for (char c : label) {
    const auto u = static_cast<unsigned char>(c);
    if (c == ' ' || c == '-' || c == '_') {
      if (!out.empty() && out.back() != '_') out.push_back('_');
    } else if (!std::isspace(u)) {
      out.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

}  // namespace cotrr
