#include "cdpo/evalrec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cdpo/rng.hpp"

namespace cdpo {

Shift shift_from_string(const std::string& tag) {
  if (tag == "popularity") return Shift::Popularity;
  if (tag == "temporal") return Shift::Temporal;
  if (tag == "exposure") return Shift::Exposure;
  if (tag == "mixed") return Shift::Mixed;
  if (tag == "iid") return Shift::Iid;
  throw std::invalid_argument("unknown shift: " + tag);
}

std::string shift_to_string(Shift s) {
  switch (s) {
    case Shift::Popularity: return "popularity";
    case Shift::Temporal: return "temporal";
    case Shift::Exposure: return "exposure";
    case Shift::Mixed: return "mixed";
    case Shift::Iid: return "iid";
  }
  throw std::logic_error("unreachable");
}

void SplitSpec::validate() const {
  if (std::abs(train_ratio + valid_ratio + test_ratio - 1.0) > 1e-9)
    throw std::invalid_argument("SplitSpec: train/valid/test ratios must sum to 1");
  if (ood_fraction <= 0.0 || ood_fraction >= 1.0)
    throw std::invalid_argument("SplitSpec: ood_fraction must lie in (0,1)");
  if (std::abs(mixed_pop_weight + mixed_temp_weight - 1.0) > 1e-9)
    throw std::invalid_argument("SplitSpec: mixed weights must sum to 1");
  if (min_interactions < 1) throw std::invalid_argument("SplitSpec: min_interactions must be >= 1");
}

namespace {

bool record_before(const Interaction& a, const Interaction& b) {
  if (a.user != b.user) return a.user < b.user;
  if (a.ts != b.ts) return a.ts < b.ts;
  return a.item < b.item;
}

void sort_canonical(InteractionLog& log) {
  std::sort(log.records.begin(), log.records.end(), record_before);
}

long round_count(double x) { return static_cast<long>(std::llround(x)); }

}  // namespace

std::vector<int> popularity_groups(const InteractionLog& log, int groups) {
  if (groups < 1) throw std::invalid_argument("popularity_groups: groups must be >= 1");
  std::map<long, long> counts;
  for (const auto& r : log.records) ++counts[r.item];
  if (static_cast<int>(counts.size()) < groups)
    throw std::invalid_argument("popularity_groups: fewer distinct items than groups");

  std::vector<std::pair<long, long>> items(counts.begin(), counts.end());  // (item, count)
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;  // head first
    return a.first < b.first;                              // stable id order
  });

  const double total = static_cast<double>(log.records.size());
  long max_item = 0;
  for (const auto& [item, count] : items) max_item = std::max(max_item, item);
  std::vector<int> by_item(static_cast<std::size_t>(max_item) + 1, -1);

  double cum = 0.0;
  int g = 0;
  for (const auto& [item, count] : items) {
    if (g < groups - 1 && cum >= (static_cast<double>(g) + 1.0) * total / groups) ++g;
    by_item[static_cast<std::size_t>(item)] = g;
    cum += static_cast<double>(count);
  }
  return by_item;
}

namespace {

struct UserRecords {
  long user;
  std::vector<std::size_t> idx;  // into the kept record array, time order
};

// Per-user 7:1:2 of the given indices (already deterministic order).
void ratio_split(const std::vector<std::size_t>& idx, const SplitSpec& spec, Rng& rng,
                 const std::vector<Interaction>& pool, SplitResult& out) {
  std::vector<std::size_t> shuffled = idx;
  rng.shuffle(shuffled);
  const long n = static_cast<long>(shuffled.size());
  long n_tr = round_count(spec.train_ratio * static_cast<double>(n));
  long n_va = round_count(spec.valid_ratio * static_cast<double>(n));
  n_tr = std::min(n_tr, n);
  n_va = std::min(n_va, n - n_tr);
  for (long i = 0; i < n; ++i) {
    const Interaction& r = pool[shuffled[static_cast<std::size_t>(i)]];
    if (i < n_tr) out.train.records.push_back(r);
    else if (i < n_tr + n_va) out.valid.records.push_back(r);
    else out.iid_test.records.push_back(r);
  }
}

// Equal-count-per-group selection used by the popularity shift: aims at a
// flat popularity-group histogram in the OOD partition.
std::vector<std::size_t> popularity_select(const std::vector<Interaction>& pool,
                                           const std::vector<char>& taken, long want,
                                           const std::vector<int>& item_group, int groups,
                                           Rng& rng) {
  std::vector<std::vector<std::size_t>> per_group(static_cast<std::size_t>(groups));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (taken[i]) continue;
    per_group[static_cast<std::size_t>(item_group[static_cast<std::size_t>(pool[i].item)])].push_back(i);
  }
  std::vector<std::size_t> chosen;
  for (int g = 0; g < groups; ++g) {
    long target = want / groups + (g < want % groups ? 1 : 0);
    auto& bucket = per_group[static_cast<std::size_t>(g)];
    rng.shuffle(bucket);
    target = std::min<long>(target, static_cast<long>(bucket.size()));
    chosen.insert(chosen.end(), bucket.begin(), bucket.begin() + target);
  }
  return chosen;
}

// Latest-fraction pool per user among untaken records, then a seeded draw.
std::vector<std::size_t> temporal_select(const std::vector<UserRecords>& users,
                                         const std::vector<char>& taken, double fraction,
                                         long want, Rng& rng) {
  std::vector<std::size_t> candidates;
  for (const auto& u : users) {
    std::vector<std::size_t> remaining;
    for (std::size_t i : u.idx)
      if (!taken[i]) remaining.push_back(i);  // u.idx is already in time order
    const long n_u = round_count(fraction * static_cast<double>(remaining.size()));
    for (long j = 0; j < n_u; ++j)
      candidates.push_back(remaining[remaining.size() - 1 - static_cast<std::size_t>(j)]);
  }
  rng.shuffle(candidates);
  if (want >= 0 && static_cast<long>(candidates.size()) > want) candidates.resize(static_cast<std::size_t>(want));
  return candidates;
}

}  // namespace

SplitResult split(const InteractionLog& log, const SplitSpec& spec, std::uint64_t seed) {
  spec.validate();

  // Filter and group by user.
  std::map<long, std::vector<Interaction>> by_user;
  for (const auto& r : log.records) {
    if (spec.rating_filter && !(r.rating > spec.rating_threshold)) continue;
    by_user[r.user].push_back(r);
  }

  SplitResult out;
  std::vector<Interaction> pool;  // kept records
  std::vector<UserRecords> users;
  for (auto& [uid, recs] : by_user) {
    if (static_cast<long>(recs.size()) < spec.min_interactions) {
      ++out.dropped_users;
      continue;
    }
    std::sort(recs.begin(), recs.end(), record_before);
    UserRecords u;
    u.user = uid;
    for (auto& r : recs) {
      u.idx.push_back(pool.size());
      pool.push_back(r);
    }
    users.push_back(std::move(u));
  }
  if (pool.empty()) throw std::runtime_error("split: no users pass the interaction threshold");

  std::vector<char> taken(pool.size(), 0);
  std::vector<std::size_t> ood_idx;
  std::vector<int> ood_tags;

  const long n_total = static_cast<long>(pool.size());
  const long n_ood = round_count(spec.ood_fraction * static_cast<double>(n_total));

  switch (spec.shift) {
    case Shift::Iid:
      break;  // no distribution shift; the OOD partition stays empty
    case Shift::Temporal: {
      for (const auto& u : users) {
        const long n_u = round_count(spec.ood_fraction * static_cast<double>(u.idx.size()));
        for (long j = 0; j < n_u; ++j)
          ood_idx.push_back(u.idx[u.idx.size() - 1 - static_cast<std::size_t>(j)]);
      }
      break;
    }
    case Shift::Popularity: {
      InteractionLog kept;
      kept.records = pool;
      const std::vector<int> item_group = popularity_groups(kept, 5);
      Rng rng = Rng::substream(seed, "ood-popularity");
      ood_idx = popularity_select(pool, taken, n_ood, item_group, 5, rng);
      break;
    }
    case Shift::Exposure: {
      // Inverse-popularity logging propensity: rare items are over-exposed
      // in the OOD sample. Weighted draw without replacement.
      std::map<long, long> counts;
      for (const auto& r : pool) ++counts[r.item];
      Rng rng = Rng::substream(seed, "ood-exposure");
      std::vector<std::pair<double, std::size_t>> keys;
      keys.reserve(pool.size());
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const double w = 1.0 / static_cast<double>(counts[pool[i].item]);
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        keys.emplace_back(std::log(u) / w, i);
      }
      std::sort(keys.begin(), keys.end(),
                [](const auto& a, const auto& b) { return a.first > b.first; });
      for (long i = 0; i < std::min<long>(n_ood, static_cast<long>(keys.size())); ++i)
        ood_idx.push_back(keys[static_cast<std::size_t>(i)].second);
      break;
    }
    case Shift::Mixed: {
      const long n_pop = round_count(spec.mixed_pop_weight * static_cast<double>(n_ood));
      const long n_temp = n_ood - n_pop;
      InteractionLog kept;
      kept.records = pool;
      const std::vector<int> item_group = popularity_groups(kept, 5);
      Rng rng_pop = Rng::substream(seed, "ood-popularity");
      const auto pop_sel = popularity_select(pool, taken, n_pop, item_group, 5, rng_pop);
      for (std::size_t i : pop_sel) {
        taken[i] = 1;
        ood_idx.push_back(i);
        ood_tags.push_back(0);
      }
      Rng rng_temp = Rng::substream(seed, "ood-temporal");
      const auto temp_sel = temporal_select(users, taken, spec.ood_fraction, n_temp, rng_temp);
      for (std::size_t i : temp_sel) {
        ood_idx.push_back(i);
        ood_tags.push_back(1);
      }
      break;
    }
  }

  for (std::size_t i : ood_idx) taken[i] = 1;

  // Canonical order for the OOD partition, keeping origin tags aligned.
  {
    std::vector<std::size_t> order(ood_idx.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return record_before(pool[ood_idx[a]], pool[ood_idx[b]]);
    });
    for (std::size_t o : order) {
      out.ood_test.records.push_back(pool[ood_idx[o]]);
      if (!ood_tags.empty()) out.ood_origin.push_back(ood_tags[o]);
    }
  }

  // 7:1:2 on what remains, per user.
  for (const auto& u : users) {
    std::vector<std::size_t> remaining;
    for (std::size_t i : u.idx)
      if (!taken[i]) remaining.push_back(i);
    Rng rng = Rng::substream(seed, "ratio-split:" + std::to_string(u.user));
    ratio_split(remaining, spec, rng, pool, out);
  }

  sort_canonical(out.train);
  sort_canonical(out.valid);
  sort_canonical(out.iid_test);
  return out;
}

double hr_at_k(const std::vector<RankedList>& lists, int k) {
  if (lists.empty()) throw std::invalid_argument("hr_at_k: empty input");
  if (k < 1) throw std::invalid_argument("hr_at_k: k must be >= 1");
  std::size_t hits = 0;
  for (const auto& l : lists) {
    const auto it = std::find(l.items.begin(), l.items.end(), l.target);
    if (it != l.items.end() && (it - l.items.begin()) < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(lists.size());
}

double ndcg_at_k(const std::vector<RankedList>& lists, int k) {
  if (lists.empty()) throw std::invalid_argument("ndcg_at_k: empty input");
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  double acc = 0.0;
  for (const auto& l : lists) {
    const auto it = std::find(l.items.begin(), l.items.end(), l.target);
    if (it == l.items.end()) continue;
    const long rank = (it - l.items.begin()) + 1;
    if (rank <= k) acc += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
  }
  return acc / static_cast<double>(lists.size());
}

Vec group_breakdown(const std::vector<RankedList>& lists, const InteractionLog& log,
                    RankMetric metric, int k, int groups) {
  const std::vector<int> by_item = popularity_groups(log, groups);
  std::vector<std::vector<RankedList>> buckets(static_cast<std::size_t>(groups));
  for (const auto& l : lists) {
    if (l.target < 0 || static_cast<std::size_t>(l.target) >= by_item.size() ||
        by_item[static_cast<std::size_t>(l.target)] < 0)
      throw std::invalid_argument("group_breakdown: target item missing from the log");
    buckets[static_cast<std::size_t>(by_item[static_cast<std::size_t>(l.target)])].push_back(l);
  }
  Vec out(static_cast<std::size_t>(groups), 0.0);
  for (int g = 0; g < groups; ++g) {
    if (buckets[static_cast<std::size_t>(g)].empty()) continue;
    out[static_cast<std::size_t>(g)] = metric == RankMetric::HR
                                           ? hr_at_k(buckets[static_cast<std::size_t>(g)], k)
                                           : ndcg_at_k(buckets[static_cast<std::size_t>(g)], k);
  }
  return out;
}

InteractionLog load_interactions_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open interaction file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty interaction file: " + path);
  if (line.rfind("user_id,item_id,timestamp,rating", 0) != 0)
    throw std::runtime_error("bad interaction header in " + path);
  InteractionLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    Interaction r;
    std::getline(row, field, ',');
    r.user = std::stol(field);
    std::getline(row, field, ',');
    r.item = std::stol(field);
    std::getline(row, field, ',');
    r.ts = std::stod(field);
    std::getline(row, field, ',');
    r.rating = std::stod(field);
    log.records.push_back(r);
  }
  return log;
}

void save_interactions_csv(const std::string& path, const InteractionLog& log,
                           const std::vector<int>* origin) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write interaction file: " + path);
  out.precision(17);
  out << "user_id,item_id,timestamp,rating";
  if (origin) out << ",origin";
  out << "\n";
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    out << r.user << "," << r.item << "," << r.ts << "," << r.rating;
    if (origin) out << "," << (*origin)[i];
    out << "\n";
  }
}

std::uint64_t log_digest(const InteractionLog& log) {
  std::uint64_t h = 14695981039346656037ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const unsigned char* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& r : log.records) {
    mix(&r.user, sizeof(r.user));
    mix(&r.item, sizeof(r.item));
    mix(&r.ts, sizeof(r.ts));
    mix(&r.rating, sizeof(r.rating));
  }
  return h;
}

}  // namespace cdpo
