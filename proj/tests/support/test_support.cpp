#include "test_support.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <unistd.h>

#include "cotrr/image_codec.hpp"

namespace cotrr::testing {

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("cotrr-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::filesystem::path fixture_dir() { return COTRR_FIXTURE_DIR; }

std::string fixture_image_id(std::size_t index) {
  std::string n = std::to_string(index);
  return "img" + std::string(4 - std::min<std::size_t>(4, n.size()), '0') + n;
}

std::filesystem::path fixture_image(std::size_t index) {
  return fixture_dir() / "images" / (fixture_image_id(index) + ".png");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

OracleScenario make_oracle_scenario(const std::string& query, const std::vector<int>& relevance, std::vector<int> met,
                                    std::size_t first_image) {
  OracleScenario s;
  s.query = query;
  s.knowledge = std::make_shared<OracleKnowledge>();
  const int top = relevance.empty() ? 0 : *std::max_element(relevance.begin(), relevance.end());
  auto& labels = s.knowledge->labels[query];
  for (std::size_t i = 0; i < relevance.size(); ++i) {
    const std::string id = "cand" + std::to_string(i);
    const auto path = fixture_image(first_image + i);
    s.candidates.push_back({id, path});
    OracleLabel label;
    label.relevance = relevance[i];
    label.met = i < met.size() ? met[i] : (relevance[i] == top ? 5 : std::clamp(relevance[i], 0, 4));
    labels[id] = label;
    s.knowledge->add_image(id, load_image_for_transmission(path));
  }
  return s;
}

std::vector<std::string> ids_of(const std::vector<CandidateImage>& candidates) {
  std::vector<std::string> out;
  for (const auto& c : candidates) out.push_back(c.id);
  return out;
}

bool is_permutation_of(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return a.size() == b.size() && std::is_permutation(a.begin(), a.end(), b.begin());
}

namespace {
bool member(const std::vector<std::string>& set, const std::string& id) {
  for (const auto& s : set) {
    if (s == id) return true;
  }
  return false;
}
}  // namespace

int oracle_recall(const std::vector<std::string>& ranked, const std::vector<std::string>& gts, std::size_t k) {
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) {
    if (member(gts, ranked[i])) return 1;
  }
  return 0;
}

double oracle_map(const std::vector<std::string>& ranked, const std::vector<std::string>& gts, std::size_t k) {
  double sum = 0.0;
  for (std::size_t i = 1; i <= k && i <= ranked.size(); ++i) {
    if (!member(gts, ranked[i - 1])) continue;
    std::size_t hits = 0;
    for (std::size_t j = 1; j <= i; ++j) hits += member(gts, ranked[j - 1]) ? 1 : 0;
    sum += static_cast<double>(hits) / static_cast<double>(i);
  }
  return sum / static_cast<double>(std::min(k, gts.size()));
}

int oracle_recall_subset(const std::vector<std::string>& ranked, const std::vector<std::string>& subset,
                         const std::vector<std::string>& gts, std::size_t k) {
  std::vector<std::string> filtered;
  for (const auto& id : ranked) {
    if (member(subset, id)) filtered.push_back(id);
  }
  for (const auto& id : subset) {
    if (!member(filtered, id)) filtered.push_back(id);
  }
  return oracle_recall(filtered, gts, k);
}

std::vector<double> oracle_hits(const std::vector<std::vector<int>>& ranks, std::size_t k, bool cumulative) {
  std::size_t rounds = 0;
  for (const auto& r : ranks) rounds = std::max(rounds, r.size());
  std::vector<double> out;
  for (std::size_t t = 0; t < rounds; ++t) {
    std::size_t count = 0;
    for (const auto& r : ranks) {
      bool hit = false;
      for (std::size_t u = 0; u <= t; ++u) {
        if (!cumulative && u != t) continue;
        const int rank = r[std::min(u, r.size() - 1)];
        if (rank >= 1 && static_cast<std::size_t>(rank) <= k) hit = true;
      }
      count += hit ? 1 : 0;
    }
    out.push_back(static_cast<double>(count) / static_cast<double>(ranks.size()));
  }
  return out;
}

std::vector<std::string> random_ids(std::mt19937_64& rng, std::size_t count, std::size_t universe) {
  std::set<std::size_t> picked;
  std::vector<std::string> out;
  while (out.size() < count) {
    const std::size_t n = rng() % universe;
    if (picked.insert(n).second) out.push_back("id" + std::to_string(n));
  }
  return out;
}

}  // namespace cotrr::testing
