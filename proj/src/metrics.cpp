#include "cotrr/metrics.hpp"

#include <algorithm>

namespace cotrr {

namespace {

void require_k(std::size_t k) {
  if (k == 0) throw MetricError("k must be positive");
}

}  // namespace

int recall_at_k(const std::vector<std::string>& ranked, const IdSet& ground_truth, std::size_t k) {
  require_k(k);
  if (ground_truth.empty()) throw MetricError("recall@k: empty ground truth");
  const std::size_t depth = std::min(k, ranked.size());
  for (std::size_t i = 0; i < depth; ++i) {
    if (ground_truth.count(ranked[i])) return 1;
  }
  return 0;
}

double map_at_k(const std::vector<std::string>& ranked, const IdSet& ground_truth, std::size_t k) {
  require_k(k);
  if (ground_truth.empty()) throw MetricError("mAP@k: empty ground truth");
  const std::size_t depth = std::min(k, ranked.size());
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < depth; ++i) {
    if (ground_truth.count(ranked[i])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / static_cast<double>(std::min(k, ground_truth.size()));
}

SubsetRanking restrict_to_subset(const std::vector<std::string>& ranked, const std::vector<std::string>& subset) {
  const IdSet members(subset.begin(), subset.end());
  SubsetRanking out;
  IdSet placed;
  for (const auto& id : ranked) {
    if (members.count(id) && placed.insert(id).second) out.ids.push_back(id);
  }
  for (const auto& id : subset) {
    if (placed.insert(id).second) {
      out.ids.push_back(id);
      ++out.absent;
    }
  }
  return out;
}

int recall_subset_at_k(const std::vector<std::string>& ranked, const std::vector<std::string>& subset,
                       const IdSet& ground_truth, std::size_t k) {
  require_k(k);
  if (subset.empty()) throw MetricError("recall_subset@k: empty subset");
  if (ground_truth.empty()) throw MetricError("recall_subset@k: empty ground truth");
  if (std::none_of(subset.begin(), subset.end(), [&](const auto& id) { return ground_truth.count(id) > 0; })) {
    throw MetricError("recall_subset@k: subset contains no ground-truth id");
  }
  return recall_at_k(restrict_to_subset(ranked, subset).ids, ground_truth, k);
}

HitsCurve hits_at_k(const std::vector<std::vector<int>>& per_round_ranks, std::size_t k, bool cumulative) {
  require_k(k);
  if (per_round_ranks.empty()) throw MetricError("hits@k: no dialogues");
  std::size_t rounds = 0;
  for (const auto& d : per_round_ranks) {
    if (d.empty()) throw MetricError("hits@k: dialogue without rounds");
    for (int r : d) {
      if (r < 1) throw MetricError("hits@k: ranks are 1-based");
    }
    rounds = std::max(rounds, d.size());
  }

  HitsCurve curve;
  curve.per_round.assign(rounds, 0.0);
  std::vector<std::size_t> counts(rounds, 0);
  for (const auto& d : per_round_ranks) {
    if (d.size() < rounds) ++curve.padded_dialogues;
    bool hit_so_far = false;
    for (std::size_t t = 0; t < rounds; ++t) {
      const int rank = t < d.size() ? d[t] : d.back();
      const bool hit = static_cast<std::size_t>(rank) <= k;
      hit_so_far = hit_so_far || hit;
      if (cumulative ? hit_so_far : hit) ++counts[t];
    }
  }
  for (std::size_t t = 0; t < rounds; ++t) {
    curve.per_round[t] = static_cast<double>(counts[t]) / static_cast<double>(per_round_ranks.size());
  }
  return curve;
}

double mean_of(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

}  // namespace cotrr
