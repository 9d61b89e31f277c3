#include "cdpo/lab.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "cdpo/rng.hpp"

namespace cdpo::lab {

namespace {

constexpr double kPopularRateTilted = 0.38;  // environment +1
constexpr double kNicheEnvPopRate = 0.02;    // environment -1
constexpr double kEnvNoise = 0.05;
constexpr double kRestNoise = 0.02;
constexpr double kSiblingWeight = 0.9;

struct LabRecord {
  long user = 0;
  int item = 0;
  double ts = 0.0;
  int env = 0;  // +-1
  Vec envf;
  Vec restf;
};

Vec rest_features(Rng& rng, int item) {
  Vec rest(kItems);
  for (double& v : rest) v = rng.normal(0.0, kRestNoise);
  rest[static_cast<std::size_t>(item)] += 1.0;
  rest[static_cast<std::size_t>(sibling(item))] += kSiblingWeight;
  return rest;
}

int draw_item(Rng& rng, double popular_rate) {
  const bool popular = rng.uniform() < popular_rate;
  return popular ? static_cast<int>(rng.index(kPopular))
                 : kPopular + static_cast<int>(rng.index(kItems - kPopular));
}

}  // namespace

int sibling(int item) {
  if (item < 4) return item + 8;
  if (item >= 8 && item < 12) return item - 8;
  return item % 2 == 0 ? item + 1 : item - 1;
}

bool uncovered(int item) { return (item >= 4 && item < kPopular) || item >= 24; }

LabData make_lab(const LabConfig& cfg) {
  if (cfg.n_users < 1 || cfg.per_user < 1 || cfg.ood_users < 0 || cfg.ood_per_user < 0)
    throw std::invalid_argument("make_lab: counts must be positive");

  LabData data;
  data.spec.env_dim = 1;
  data.spec.rest_dim = kItems;
  data.spec.action_count = kItems;
  data.spec.action_sign.assign(kItems, -1.0);
  for (int y = 0; y < kPopular; ++y) data.spec.action_sign[static_cast<std::size_t>(y)] = 1.0;

  // Interaction stream: one latent environment per user, exposure tilted
  // toward popular items in environment +1.
  Rng env_rng = Rng::substream(cfg.seed, "lab-env");
  Rng item_rng = Rng::substream(cfg.seed, "lab-items");
  Rng feat_rng = Rng::substream(cfg.seed, "lab-features");

  data.user_env.resize(static_cast<std::size_t>(cfg.n_users));
  std::vector<LabRecord> records;
  records.reserve(static_cast<std::size_t>(cfg.n_users) * static_cast<std::size_t>(cfg.per_user));
  for (int u = 0; u < cfg.n_users; ++u) {
    const int e = env_rng.index(2) == 1 ? 1 : -1;
    data.user_env[static_cast<std::size_t>(u)] = e;
    for (int t = 0; t < cfg.per_user; ++t) {
      LabRecord rec;
      rec.user = u;
      rec.ts = t;
      rec.env = e;
      rec.item = draw_item(item_rng, e == 1 ? kPopularRateTilted : kNicheEnvPopRate);
      rec.envf = Vec{static_cast<double>(e) + feat_rng.normal(0.0, kEnvNoise)};
      rec.restf = rest_features(feat_rng, rec.item);
      records.push_back(std::move(rec));
      data.log.records.push_back(
          {records.back().user, records.back().item, records.back().ts, 1.0});
    }
  }

  SplitSpec split_spec;  // iid 7:1:2, no OOD partition
  split_spec.shift = Shift::Iid;
  data.parts = split(data.log, split_spec, cfg.seed);

  // Re-associate split records with their synthesized features; (user, ts)
  // is unique by construction.
  std::map<std::pair<long, double>, const LabRecord*> by_key;
  for (const auto& r : records) by_key[{r.user, r.ts}] = &r;
  auto lookup = [&by_key](const Interaction& r) -> const LabRecord& {
    const auto it = by_key.find({r.user, r.ts});
    if (it == by_key.end()) throw std::logic_error("make_lab: split record lost its features");
    return *it->second;
  };

  // Warm-start corpus: the train partition, capped by an item-stratified
  // subsample (equal quota per item). Stratification keeps full-batch warm
  // steps cheap without adding per-item frequency noise to the learned
  // levels, which would blur the cross-environment statistic later.
  std::vector<SftExample> sft_full;
  sft_full.reserve(data.parts.train.records.size());
  for (const auto& r : data.parts.train.records) {
    const LabRecord& rec = lookup(r);
    sft_full.push_back({Context{rec.envf, rec.restf}, rec.item});
  }
  if (cfg.sft_cap > 0 && static_cast<int>(sft_full.size()) > cfg.sft_cap) {
    std::vector<std::vector<std::size_t>> by_item(kItems);
    for (std::size_t i = 0; i < sft_full.size(); ++i)
      by_item[static_cast<std::size_t>(sft_full[i].y)].push_back(i);
    Rng sft_rng = Rng::substream(cfg.seed, "lab-sft-sample");
    const int quota = cfg.sft_cap / kItems;
    for (auto& bucket : by_item) {
      sft_rng.shuffle(bucket);
      const int take = std::min<int>(quota, static_cast<int>(bucket.size()));
      for (int i = 0; i < take; ++i) data.sft.push_back(sft_full[bucket[static_cast<std::size_t>(i)]]);
    }
  } else {
    data.sft = std::move(sft_full);
  }

  // Preference triples: covered train records only; the loser is a
  // different covered item of the same class (popular vs niche), so the
  // environment feature carries no signal about the label.
  std::vector<int> covered_popular, covered_niche;
  for (int y = 0; y < kItems; ++y) {
    if (uncovered(y)) continue;
    (y < kPopular ? covered_popular : covered_niche).push_back(y);
  }
  Rng neg_rng = Rng::substream(cfg.seed, "lab-negatives");
  for (const auto& r : data.parts.train.records) {
    const LabRecord& rec = lookup(r);
    if (uncovered(rec.item)) continue;
    const std::vector<int>& pool = rec.item < kPopular ? covered_popular : covered_niche;
    int y_l = rec.item;
    while (y_l == rec.item) y_l = pool[neg_rng.index(pool.size())];
    PreferenceTriple t;
    t.x = Context{rec.envf, rec.restf};
    t.y_w = rec.item;
    t.y_l = y_l;
    t.env_label = rec.env == 1 ? 1 : 0;
    t.ts = rec.ts;
    data.triples.push_back(std::move(t));
  }

  // In-distribution ranking queries: iid-test records with fresh feature
  // presentations and the sibling as the hard negative.
  Rng id_rng = Rng::substream(cfg.seed, "lab-eval-features");
  for (const auto& r : data.parts.iid_test.records) {
    const LabRecord& rec = lookup(r);
    LabQuery q;
    q.x.env_features = Vec{static_cast<double>(rec.env) + id_rng.normal(0.0, kEnvNoise)};
    q.x.rest_features = rest_features(id_rng, rec.item);
    q.target = rec.item;
    q.negative = sibling(rec.item);
    q.user = rec.user;
    q.ts = rec.ts;
    data.id_eval.push_back(std::move(q));
  }

  Rng valid_rng = Rng::substream(cfg.seed, "lab-valid-features");
  for (const auto& r : data.parts.valid.records) {
    const LabRecord& rec = lookup(r);
    LabQuery q;
    q.x.env_features = Vec{static_cast<double>(rec.env) + valid_rng.normal(0.0, kEnvNoise)};
    q.x.rest_features = rest_features(valid_rng, rec.item);
    q.target = rec.item;
    q.negative = sibling(rec.item);
    q.user = rec.user;
    q.ts = rec.ts;
    data.valid_eval.push_back(std::move(q));
  }

  // OOD queries: fresh users, uniform item exposure (popular rate 8/40),
  // same environment marginal. The exposure tilt is gone, so performance
  // here measures what survives the shift.
  Rng ood_rng = Rng::substream(cfg.seed, "lab-ood");
  for (int u = 0; u < cfg.ood_users; ++u) {
    const int e = ood_rng.index(2) == 1 ? 1 : -1;
    for (int t = 0; t < cfg.ood_per_user; ++t) {
      const int item = draw_item(ood_rng, static_cast<double>(kPopular) / kItems);
      LabQuery q;
      q.x.env_features = Vec{static_cast<double>(e) + ood_rng.normal(0.0, kEnvNoise)};
      q.x.rest_features = rest_features(ood_rng, item);
      q.target = item;
      q.negative = sibling(item);
      q.user = cfg.n_users + u;
      q.ts = t;
      data.ood_eval.push_back(std::move(q));
    }
  }

  return data;
}

TrainConfig lab_train_config(double lambda, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.dpo.beta = 2.0;
  cfg.lambda = lambda;
  cfg.eta = 0.0075;
  cfg.epochs = 10;
  cfg.iterations = 4;
  cfg.batch_size = 256;
  cfg.dbscan = DbscanConfig{0.0, 0};  // per-batch auto eps / min_pts
  cfg.kernel.bandwidth = 0.09;
  cfg.kernel.rule = KernelConfig::BandwidthRule::Fixed;
  cfg.kernel.sqrt_penalty = false;
  cfg.seed = seed;
  cfg.warm_start_steps = 800;
  cfg.warm_start_lr = 0.2;
  cfg.probe_size = 512;
  return cfg;
}

ExtractorParams lab_extractor() {
  ExtractorParams ex;
  // Project onto the environment coordinate with enough gain that the two
  // latent environments separate cleanly in the clustering space.
  ex.W_g = Mat{Vec(1 + kItems, 0.0)};
  ex.W_g[0][0] = 4.0;
  ex.b_g = Vec{0.0};
  return ex;
}

EvalOutcome evaluate(const PolicyParams& policy, const std::vector<LabQuery>& queries) {
  if (queries.empty()) throw std::invalid_argument("evaluate: no queries");
  EvalOutcome out;
  for (const auto& q : queries) {
    const Vec s = action_scores(policy, q.x);
    if (s[static_cast<std::size_t>(q.target)] > s[static_cast<std::size_t>(q.negative)])
      out.pref_acc += 1.0;
    int rank = 1;
    for (int y = 0; y < static_cast<int>(s.size()); ++y)
      if (s[static_cast<std::size_t>(y)] > s[static_cast<std::size_t>(q.target)]) ++rank;
    if (rank <= 10) out.ndcg10 += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
  }
  out.pref_acc /= static_cast<double>(queries.size());
  out.ndcg10 /= static_cast<double>(queries.size());
  return out;
}

}  // namespace cdpo::lab
