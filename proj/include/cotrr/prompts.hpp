#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace cotrr {

/// Versioned prompt templates. Placeholders are `{query_text}`, `{manipulation_text}`,
/// `{components}`, `{evaluations}`, `{k}` and `{error}`; any other brace text is literal.
struct PromptSet {
  std::string version;
  std::string system;
  std::string deconstruct_text;
  std::string deconstruct_composed;
  std::string evaluate;
  std::string evaluate_query;
  std::string evaluate_composed_query;
  std::string rank;
  std::string rank_images_query;
  std::string rank_images_composed_query;
  std::string rank_images_components;
  std::string repair;

  /// Templates compiled into the binary.
  static const PromptSet& builtin();
  /// Reads `<name>.txt` for every template from `dir`; the version is the directory name.
  static PromptSet load(const std::filesystem::path& dir);
};

/// Single left-to-right pass; substituted values are never re-expanded.
std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& values);

}  // namespace cotrr
