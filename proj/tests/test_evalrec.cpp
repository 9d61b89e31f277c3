#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "cdpo/evalrec.hpp"
#include "cdpo/rng.hpp"

using namespace cdpo;

namespace {

InteractionLog uniform_log(long users, long per_user, long items, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "test-eval-log");
  InteractionLog log;
  for (long u = 0; u < users; ++u)
    for (long t = 0; t < per_user; ++t)
      log.records.push_back({u, rng.index(items), static_cast<double>(t), 1.0});
  return log;
}

RankedList list_with_target_at(int rank, int size) {
  RankedList rl;
  for (int i = 0; i < size; ++i) rl.items.push_back(i);
  rl.target = rank - 1;  // items are already in descending score order
  return rl;
}

}  // namespace

TEST_CASE("shift names round-trip") {
  for (Shift s : {Shift::Popularity, Shift::Temporal, Shift::Exposure, Shift::Mixed, Shift::Iid})
    CHECK(shift_from_string(shift_to_string(s)) == s);
  CHECK_THROWS_AS(shift_from_string("nope"), std::invalid_argument);
}

TEST_CASE("iid split of ten interactions per user is 7/1/2") {
  SplitSpec spec;
  spec.min_interactions = 10;
  const InteractionLog log = uniform_log(3, 10, 50, 2);
  const SplitResult r = split(log, spec, 5);
  CHECK(r.train.records.size() == 21);
  CHECK(r.valid.records.size() == 3);
  CHECK(r.iid_test.records.size() == 6);
  CHECK(r.ood_test.records.size() == 0);
  CHECK(r.dropped_users == 0);
}

TEST_CASE("users below the activity floor are dropped") {
  InteractionLog log = uniform_log(2, 30, 50, 3);
  for (long t = 0; t < 5; ++t) log.records.push_back({99, t % 7, static_cast<double>(t), 1.0});
  SplitSpec spec;
  spec.min_interactions = 20;
  const SplitResult r = split(log, spec, 1);
  CHECK(r.dropped_users == 1);
  const std::size_t kept = r.train.records.size() + r.valid.records.size() +
                           r.iid_test.records.size() + r.ood_test.records.size();
  CHECK(kept == 60);
}

TEST_CASE("temporal shift holds out each user's latest records") {
  SplitSpec spec;
  spec.shift = Shift::Temporal;
  spec.min_interactions = 10;
  const InteractionLog log = uniform_log(1, 10, 50, 7);
  const SplitResult r = split(log, spec, 9);
  REQUIRE(r.ood_test.records.size() == 2);
  double max_rest = 0.0;
  for (const auto& rec : r.train.records) max_rest = std::max(max_rest, rec.ts);
  for (const auto& rec : r.valid.records) max_rest = std::max(max_rest, rec.ts);
  for (const auto& rec : r.iid_test.records) max_rest = std::max(max_rest, rec.ts);
  for (const auto& rec : r.ood_test.records) CHECK(rec.ts > max_rest);
}

TEST_CASE("mixed shift draws origins at exactly eighty twenty") {
  SplitSpec spec;
  spec.shift = Shift::Mixed;
  spec.min_interactions = 10;
  const InteractionLog log = uniform_log(50, 20, 30, 11);
  const SplitResult r = split(log, spec, 13);
  REQUIRE(r.ood_test.records.size() == 200);
  REQUIRE(r.ood_origin.size() == 200);
  long pop = 0;
  for (int o : r.ood_origin) pop += o == 0 ? 1 : 0;
  CHECK(pop == 160);
}

TEST_CASE("split is deterministic in the seed") {
  const InteractionLog log = uniform_log(10, 25, 40, 17);
  SplitSpec spec;
  spec.shift = Shift::Popularity;
  const SplitResult a = split(log, spec, 3);
  const SplitResult b = split(log, spec, 3);
  CHECK(log_digest(a.train) == log_digest(b.train));
  CHECK(log_digest(a.ood_test) == log_digest(b.ood_test));
}

TEST_CASE("hit rate counts targets inside the cutoff") {
  const std::vector<RankedList> lists{list_with_target_at(2, 50), list_with_target_at(15, 50),
                                      list_with_target_at(40, 50)};
  CHECK(hr_at_k(lists, 10) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(hr_at_k(lists, 40) == 1.0);
  CHECK(hr_at_k(lists, 1) == 0.0);
}

TEST_CASE("ndcg at rank two is the frozen discount") {
  const std::vector<RankedList> lists{list_with_target_at(2, 10)};
  CHECK(ndcg_at_k(lists, 10) == doctest::Approx(0.6309297535714575).epsilon(1e-14));
  CHECK(ndcg_at_k({list_with_target_at(1, 10)}, 10) == 1.0);
}

TEST_CASE("metrics match a brute-force scorer") {
  Rng rng = Rng::substream(23, "test-eval-brute");
  std::vector<RankedList> lists;
  for (int i = 0; i < 100; ++i) {
    const int size = 1 + static_cast<int>(rng.index(8));
    RankedList rl;
    std::vector<long> pool(20);
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool);
    rl.items.assign(pool.begin(), pool.begin() + size);
    // Half the targets are present, half absent.
    rl.target = i % 2 == 0 ? rl.items[static_cast<std::size_t>(rng.index(size))] : 777;
    lists.push_back(rl);
  }
  for (int k : {1, 3, 5, 10}) {
    double hits = 0.0, gain = 0.0;
    for (const auto& rl : lists) {
      for (int pos = 0; pos < std::min<int>(k, static_cast<int>(rl.items.size())); ++pos) {
        if (rl.items[static_cast<std::size_t>(pos)] == rl.target) {
          hits += 1.0;
          gain += 1.0 / std::log2(static_cast<double>(pos) + 2.0);
          break;
        }
      }
    }
    CHECK(hr_at_k(lists, k) == hits / static_cast<double>(lists.size()));
    CHECK(ndcg_at_k(lists, k) == gain / static_cast<double>(lists.size()));
  }
}

TEST_CASE("popularity groups are equal interaction mass, head first") {
  InteractionLog log;
  double ts = 0.0;
  auto add = [&](long item, int n) {
    for (int i = 0; i < n; ++i) log.records.push_back({0, item, ts++, 1.0});
  };
  add(7, 6);  // head item: more mass than everything else combined
  add(3, 2);
  add(5, 2);
  // Indexed by raw item id, head group 0.
  const std::vector<int> groups = popularity_groups(log, 2);
  REQUIRE(groups.size() == 8);
  CHECK(groups[7] == 0);
  CHECK(groups[3] == 1);
  CHECK(groups[5] == 1);
  CHECK(groups[0] == -1);  // item never seen

  // group_breakdown scores the same partition.
  RankedList rl;
  rl.items = {7};
  rl.target = 7;
  const Vec v = group_breakdown({rl}, log, RankMetric::HR, 1, 2);
  CHECK(v[0] == 1.0);
  CHECK(v[1] == 0.0);
}

TEST_CASE("group masses recombine to the overall metric") {
  Rng rng = Rng::substream(29, "test-eval-groups");
  const InteractionLog log = uniform_log(20, 30, 25, 31);
  std::vector<RankedList> lists;
  for (int i = 0; i < 60; ++i) {
    std::vector<long> pool(25);
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool);
    RankedList rl;
    rl.items.assign(pool.begin(), pool.begin() + 12);
    rl.target = static_cast<long>(rng.index(25));
    lists.push_back(rl);
  }
  const int k = 5, G = 5;
  const Vec per_group = group_breakdown(lists, log, RankMetric::HR, k, G);
  REQUIRE(per_group.size() == static_cast<std::size_t>(G));
  // Count list membership per group to reweigh.
  const std::vector<int> item_group = popularity_groups(log, G);
  double combined = 0.0;
  for (std::size_t g = 0; g < per_group.size(); ++g) {
    long count = 0;
    for (const auto& rl : lists) {
      REQUIRE(rl.target < static_cast<long>(item_group.size()));
      if (item_group[static_cast<std::size_t>(rl.target)] == static_cast<int>(g)) ++count;
    }
    combined += per_group[g] * static_cast<double>(count);
  }
  CHECK(combined / static_cast<double>(lists.size()) ==
        doctest::Approx(hr_at_k(lists, k)).epsilon(1e-12));
}

TEST_CASE("interaction CSV round-trip preserves the log") {
  const InteractionLog log = uniform_log(5, 12, 30, 37);
  const auto path = std::filesystem::temp_directory_path() / "cdpo_test_log.csv";
  save_interactions_csv(path.string(), log);
  const InteractionLog back = load_interactions_csv(path.string());
  std::filesystem::remove(path);
  CHECK(log_digest(back) == log_digest(log));
}

TEST_CASE("split spec validation rejects bad ratios") {
  SplitSpec spec;
  spec.train_ratio = 0.9;  // 0.9 + 0.1 + 0.2 != 1
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}
