#pragma once

#include <cstdint>
#include <vector>

#include "cdpo/evalrec.hpp"
#include "cdpo/model.hpp"
#include "cdpo/preference.hpp"
#include "cdpo/trainer.hpp"

// Synthetic confounded recommendation lab.
//
// 40 items, the first 8 "popular" (environment sign +1) and the rest
// "niche" (sign -1). Each user lives in one latent environment e = +-1;
// environment +1 over-exposes popular items (0.38 per-record popular rate
// vs 0.02 in environment -1), so item exposure and the environment feature
// are confounded. Every item has a sibling whose rest-feature pattern
// overlaps it (1.0 on the item coordinate, 0.9 on the sibling), which
// makes sibling discrimination the hard part of ranking.
//
// Half the catalog never appears as a training winner or loser
// ("uncovered": items 4..7 and 24..39); evaluation includes those items,
// so a policy that leans on the environment feature instead of the rest
// features pays on the uniform-exposure OOD set.
namespace cdpo::lab {

constexpr int kItems = 40;
constexpr int kPopular = 8;

int sibling(int item);
bool uncovered(int item);

struct LabConfig {
  int n_users = 1024;
  int per_user = 48;
  int ood_users = 256;
  int ood_per_user = 32;
  int sft_cap = 8192;  // warm-start corpus subsample cap (0 = no cap)
  std::uint64_t seed = 100;
};

// One ranking query: score all items, compare the target with its sibling
// and record the target's rank.
struct LabQuery {
  Context x;
  int target = 0;
  int negative = 0;
  long user = 0;
  double ts = 0.0;
};

struct LabData {
  FeatureSpec spec;
  InteractionLog log;  // the raw interaction stream
  SplitResult parts;   // iid 7:1:2 per user
  std::vector<int> user_env;  // +-1 per user id
  std::vector<PreferenceTriple> triples;  // covered train records
  std::vector<SftExample> sft;            // warm-start corpus (capped subsample)
  std::vector<LabQuery> valid_eval;       // validation records, sibling negatives
  std::vector<LabQuery> id_eval;          // iid test records, sibling negatives
  std::vector<LabQuery> ood_eval;         // fresh users, uniform exposure
};

LabData make_lab(const LabConfig& cfg);

// Frozen operating point for the benchmark runs.
TrainConfig lab_train_config(double lambda, std::uint64_t seed);
ExtractorParams lab_extractor();

struct EvalOutcome {
  double pref_acc = 0.0;  // target beats its sibling
  double ndcg10 = 0.0;    // single-target NDCG@10 over the full catalog
};

EvalOutcome evaluate(const PolicyParams& policy, const std::vector<LabQuery>& queries);

}  // namespace cdpo::lab
