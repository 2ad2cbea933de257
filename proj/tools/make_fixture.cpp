// Generates the synthetic text-to-image fixture used by the end-to-end tests:
// random corpus/query embeddings, one small random image per corpus id, and a
// manifest whose planted ground truths sit inside each query's initial top 20.
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "cotrr/store.hpp"

namespace {

constexpr std::size_t kImages = 600;
constexpr std::size_t kQueries = 200;
constexpr std::size_t kDim = 32;
constexpr std::size_t kLabeled = 20;

const char* const kSubjects[] = {"a red kite", "two dogs", "an old man", "a small boat", "three children",
                                 "a cyclist", "a street vendor", "a brown horse"};
const char* const kScenes[] = {"on a beach", "in a park", "near a river", "on a busy street", "in the snow",
                               "inside a market"};

std::string padded(std::size_t n, int width) {
  std::string s = std::to_string(n);
  return std::string(static_cast<std::size_t>(width) - s.size(), '0') + s;
}

// Box-Muller over raw engine output so the fixture does not depend on the
// standard library's distribution implementations.
double gaussian(std::mt19937_64& rng) {
  const double u1 = (static_cast<double>(rng() >> 11) + 1.0) / 9007199254740993.0;
  const double u2 = static_cast<double>(rng() >> 11) / 9007199254740992.0;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixture <output-dir>\n";
    return 2;
  }
  const std::filesystem::path dir = argv[1];
  std::filesystem::create_directories(dir / "images");
  std::mt19937_64 rng(20240611);

  std::vector<std::string> image_ids;
  std::vector<float> image_vecs;
  for (std::size_t i = 0; i < kImages; ++i) {
    image_ids.push_back("img" + padded(i, 4));
    for (std::size_t d = 0; d < kDim; ++d) image_vecs.push_back(static_cast<float>(gaussian(rng)));
    cv::Mat pixels(8, 8, CV_8UC3);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        const auto v = rng();
        pixels.at<cv::Vec3b>(y, x) = cv::Vec3b(v & 0xff, (v >> 8) & 0xff, (v >> 16) & 0xff);
      }
    }
    cv::imwrite((dir / "images" / (image_ids.back() + ".png")).string(), pixels);
  }
  cotrr::write_store(dir / "images.bin", image_ids, image_vecs, kDim);

  std::vector<std::string> query_ids;
  std::vector<float> query_vecs;
  for (std::size_t q = 0; q < kQueries; ++q) {
    query_ids.push_back("q" + padded(q, 3));
    for (std::size_t d = 0; d < kDim; ++d) query_vecs.push_back(static_cast<float>(gaussian(rng)));
  }
  cotrr::write_store(dir / "queries.bin", query_ids, query_vecs, kDim);

  const cotrr::EmbeddingStore corpus = cotrr::load_store(dir / "images.bin");
  const cotrr::EmbeddingStore queries = cotrr::load_store(dir / "queries.bin");
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary | std::ios::trunc);
  std::size_t initial_hits = 0;
  for (std::size_t q = 0; q < kQueries; ++q) {
    const auto initial = corpus.top_k(queries.row(q), kLabeled);
    // Two of every five queries keep a ground truth at rank 1; the rest start lower.
    const bool gt_first = q % 5 < 2;
    const std::size_t n_gt = 1 + rng() % 3;
    std::vector<std::size_t> positions;
    if (gt_first) positions.push_back(0);
    while (positions.size() < n_gt) {
      const std::size_t p = 1 + rng() % (kLabeled - 1);
      if (std::find(positions.begin(), positions.end(), p) == positions.end()) positions.push_back(p);
    }
    initial_hits += gt_first ? 1 : 0;

    nlohmann::json gts = nlohmann::json::array();
    nlohmann::json labels = nlohmann::json::object();
    for (std::size_t p = 0; p < kLabeled; ++p) {
      const bool is_gt = std::find(positions.begin(), positions.end(), p) != positions.end();
      if (is_gt) {
        gts.push_back(initial[p].id);
        labels[initial[p].id] = {{"relevance", 3}, {"met", 5}};
      } else {
        labels[initial[p].id] = {{"relevance", static_cast<int>(rng() % 3)}, {"met", static_cast<int>(rng() % 5)}};
      }
    }
    const std::string text = "synthetic query " + padded(q, 4) + ": " + kSubjects[q % 8] + " " + kScenes[q % 6];
    nlohmann::json record = {{"query_id", query_ids[q]},
                             {"task", "tir"},
                             {"text", text},
                             {"ground_truth", gts},
                             {"oracle_labels", labels}};
    manifest << record.dump() << "\n";
  }
  std::cout << "wrote " << kQueries << " queries over " << kImages << " images to " << dir.string()
            << " (initial R@1 = " << static_cast<double>(initial_hits) / kQueries << ")\n";
  return 0;
}
