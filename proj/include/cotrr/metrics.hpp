#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace cotrr {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using IdSet = std::unordered_set<std::string>;

/// 1 iff a ground-truth id is among the first k ranked ids.
int recall_at_k(const std::vector<std::string>& ranked, const IdSet& ground_truth, std::size_t k);

/// Average precision truncated at k, normalized by min(k, |ground_truth|).
double map_at_k(const std::vector<std::string>& ranked, const IdSet& ground_truth, std::size_t k);

struct SubsetRanking {
  std::vector<std::string> ids;  // subset members in ranked order, absent members appended
  std::size_t absent = 0;        // subset members missing from `ranked`
};

/// Keeps the relative order of subset members in `ranked`; members missing from `ranked`
/// go last in the order `subset` lists them.
SubsetRanking restrict_to_subset(const std::vector<std::string>& ranked, const std::vector<std::string>& subset);

int recall_subset_at_k(const std::vector<std::string>& ranked, const std::vector<std::string>& subset,
                       const IdSet& ground_truth, std::size_t k);

struct HitsCurve {
  std::vector<double> per_round;
  std::size_t padded_dialogues = 0;  // dialogues shorter than the longest, last rank carried forward
};

/// Fraction of dialogues whose target is within the top k at each round. With `cumulative`,
/// a dialogue counts from the first round it hits onwards.
HitsCurve hits_at_k(const std::vector<std::vector<int>>& per_round_ranks, std::size_t k, bool cumulative = true);

/// Order-independent mean: values are summed in sorted order.
double mean_of(std::vector<double> values);

}  // namespace cotrr
