#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdpo/linalg.hpp"

namespace cdpo {

struct Interaction {
  long user = 0;
  long item = 0;
  double ts = 0.0;
  double rating = 1.0;
};

struct InteractionLog {
  std::vector<Interaction> records;
};

enum class Shift { Popularity, Temporal, Exposure, Mixed, Iid };

Shift shift_from_string(const std::string& tag);
std::string shift_to_string(Shift s);

struct SplitSpec {
  Shift shift = Shift::Iid;
  // train/valid/iid-test over the non-OOD remainder
  double train_ratio = 0.7;
  double valid_ratio = 0.1;
  double test_ratio = 0.2;
  double ood_fraction = 0.2;
  double mixed_pop_weight = 0.8;
  double mixed_temp_weight = 0.2;
  int min_interactions = 20;
  // positives filter (rating > threshold); disabled by default
  bool rating_filter = false;
  double rating_threshold = 4.0;

  void validate() const;
};

struct SplitResult {
  InteractionLog train, valid, iid_test, ood_test;
  // Parallel to ood_test.records; 0 = popularity-branch origin, 1 =
  // temporal-branch origin. Only populated for the mixed shift.
  std::vector<int> ood_origin;
  long dropped_users = 0;
};

SplitResult split(const InteractionLog& log, const SplitSpec& spec, std::uint64_t seed);

struct RankedList {
  std::vector<long> items;  // descending score order, no duplicates
  long target = 0;
};

double hr_at_k(const std::vector<RankedList>& lists, int k);
double ndcg_at_k(const std::vector<RankedList>& lists, int k);

enum class RankMetric { HR, NDCG };

// Popularity groups are equal interaction-mass quantiles of the log, head
// first; the metric is computed over the lists whose target falls in each
// group.
Vec group_breakdown(const std::vector<RankedList>& lists, const InteractionLog& log,
                    RankMetric metric, int k, int groups = 5);

// Item -> group id under the same quantile construction (head group = 0).
std::vector<int> popularity_groups(const InteractionLog& log, int groups);

InteractionLog load_interactions_csv(const std::string& path);
void save_interactions_csv(const std::string& path, const InteractionLog& log,
                           const std::vector<int>* origin = nullptr);

// Stable content hash for determinism checks.
std::uint64_t log_digest(const InteractionLog& log);

}  // namespace cdpo
