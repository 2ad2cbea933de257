#include "cotrr/prompts.hpp"

#include <fstream>
#include <iterator>
#include <stdexcept>

#include "prompts_embedded.hpp"

namespace cotrr {

namespace {

std::string read_template(const std::filesystem::path& dir, const char* name) {
  const auto path = dir / (std::string(name) + ".txt");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing prompt template " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <class Fetch>
PromptSet assemble(std::string version, Fetch fetch) {
  PromptSet p;
  p.version = std::move(version);
  p.system = fetch("system");
  p.deconstruct_text = fetch("deconstruct_text");
  p.deconstruct_composed = fetch("deconstruct_composed");
  p.evaluate = fetch("evaluate");
  p.evaluate_query = fetch("evaluate_query");
  p.evaluate_composed_query = fetch("evaluate_composed_query");
  p.rank = fetch("rank");
  p.rank_images_query = fetch("rank_images_query");
  p.rank_images_composed_query = fetch("rank_images_composed_query");
  p.rank_images_components = fetch("rank_images_components");
  p.repair = fetch("repair");
  return p;
}

}  // namespace

const PromptSet& PromptSet::builtin() {
  static const PromptSet set = assemble(embedded_prompts::kVersion, [](const char* name) {
    const auto& all = embedded_prompts::templates();
    auto it = all.find(name);
    if (it == all.end()) throw std::logic_error(std::string("prompt not embedded: ") + name);
    return it->second;
  });
  return set;
}

PromptSet PromptSet::load(const std::filesystem::path& dir) {
  return assemble(dir.filename().string(), [&](const char* name) { return read_template(dir, name); });
}

std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i + 1);
      if (close != std::string::npos) {
        auto it = values.find(tmpl.substr(i + 1, close - i - 1));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(tmpl[i++]);
  }
  return out;
}

}  // namespace cotrr
