#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace cotrr {

struct ParseError {
  std::string message;
};

template <class T>
using Parsed = std::variant<T, ParseError>;

template <class T>
bool ok(const Parsed<T>& p) {
  return std::holds_alternative<T>(p);
}

/// Content of the last complete ``` fenced block, if any.
std::optional<std::string_view> last_fenced_block(std::string_view reply);

/// Longest brace-balanced `{...}` span; braces inside JSON strings are ignored.
std::optional<std::string_view> longest_brace_span(std::string_view reply);

/// Locates and parses the JSON object in a model reply. Never throws.
Parsed<nlohmann::json> extract_json_object(std::string_view reply);

/// Lower-cases and maps spaces and hyphens to underscores ("Partial match" -> "partial_match").
std::string normalize_label(std::string_view label);

}  // namespace cotrr
