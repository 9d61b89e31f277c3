#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <tuple>
#include <vector>

#include "cdpo/divergence.hpp"
#include "cdpo/environments.hpp"
#include "cdpo/model.hpp"
#include "cdpo/preference.hpp"

namespace cdpo {

struct TrainConfig {
  DpoConfig dpo;        // beta
  double lambda = 0.0;  // weight of the cross-environment penalty
  double eta = 0.0075;
  int epochs = 10;
  int batch_size = 256;
  int iterations = 4;  // outer rounds; total passes = iterations * epochs
  // eps <= 0 or min_pts <= 0 selects per-batch defaults: eps = half the
  // median pairwise distance, min_pts = max(4, batch/20).
  DbscanConfig dbscan{0.0, 0};
  KernelConfig kernel;
  std::uint64_t seed = 0;
  bool dump_envs = false;
  std::string dump_path;

  // Supervised warm start that produces the frozen reference; 0 disables
  // it (the no-warm-start ablation).
  int warm_start_steps = 800;
  double warm_start_lr = 0.2;

  // Held-out probe for the accuracy column of the run records.
  int probe_size = 512;

  // Statistic compared across environments: the winning action's log
  // probability (default) or the raw hidden representation. The hidden
  // variant is diagnostic: its values are treated as constants w.r.t. the
  // policy, so only the extractor receives penalty gradient.
  bool compare_hidden = false;

  double soft_assign_scale = 1.0;

  void validate() const;
};

struct RunRecord {
  long step = 0;
  double dpo_loss = 0.0;
  double mmd_penalty = 0.0;
  double total_loss = 0.0;  // dpo_loss + lambda * mmd_penalty
  int K_discovered = 0;     // 0 means the all-noise fallback fired
  Vec env_prior;
  Vec w_E;
  double preference_accuracy = 0.0;
  // max_i |sum_k p_ik - 1| for the step's soft assignment
  double assign_row_dev = 0.0;
};

// Per-batch environment discovery state. K counts DBSCAN clusters; the
// all-noise fallback keeps training alive with a single uniform
// environment and K = 0 recorded.
struct EnvState {
  SoftAssignment assign;
  int K = 0;
  Mat points;  // extracted batch points, one row per sample
  Vec prior;
  Mat aggregates;  // per-environment weighted mean of the extracted points
  double eps_used = 0.0;
  int min_pts_used = 0;
};

EnvState discover_envs(const std::vector<Vec>& hidden, const ExtractorParams& ex,
                       const TrainConfig& cfg);

// Loss decomposition on one batch with a fixed assignment.
// Returns (total, dpo_part, mmd_part); total = dpo + lambda * mmd.
std::tuple<double, double, double> causal_dpo_loss(const std::vector<PreferenceTriple>& batch,
                                                   const PolicyParams& policy,
                                                   const ReferencePolicy& ref,
                                                   const SoftAssignment& envstate,
                                                   const TrainConfig& cfg);

// One descent step: discovery, loss, combined gradient, single update of
// the policy (and extractor, when lambda > 0). Centers act as constants;
// membership gradients reach W_g and b_g through the distance softmax.
RunRecord train_step(const std::vector<PreferenceTriple>& batch, PolicyParams& policy,
                     const ReferencePolicy& ref, ExtractorParams& ex, const TrainConfig& cfg,
                     long step_index, const std::vector<PreferenceTriple>& probe,
                     EnvState* env_out = nullptr);

struct SftExample {
  Context x;
  int y = 0;
};

struct TrainResult {
  PolicyParams policy;
  ReferencePolicy reference;
  ExtractorParams extractor;
  std::vector<RunRecord> records;
};

// Called after every epoch with the epoch index (0-based, global across
// outer rounds) and the step count so far. The result argument carries the
// live policy, reference, and extractor.
using EpochCallback = std::function<void(int epoch, long step, const TrainResult& state)>;

// Mid-run state for continuing an interrupted schedule. A resumed run
// replays the remaining epochs exactly as the uninterrupted one would
// have: shuffles are keyed by the global epoch index, not by history.
struct ResumeState {
  PolicyParams policy;
  ReferencePolicy reference;
  ExtractorParams extractor;
  long step = 0;       // steps already taken
  int next_epoch = 0;  // global epoch index to run next
};

// Full run: probe carve-out, init, warm start, frozen reference, then
// iterations x epochs passes of sequential batches (remainder dropped).
// Deterministic given cfg.seed. warm_corpus == nullptr warms on the
// dataset's winning responses instead. A non-null resume skips init and
// warm start and continues from the stored state.
TrainResult train(const std::vector<PreferenceTriple>& dataset, const FeatureSpec& spec,
                  PolicyFamily family, const ExtractorParams& extractor_init,
                  const TrainConfig& cfg, const std::vector<SftExample>* warm_corpus = nullptr,
                  const EpochCallback& on_epoch = nullptr, const ResumeState* resume = nullptr);

// Plain-DPO baseline sharing the schedule, probe, init, and warm start of
// train() but with no environment machinery at all. A lambda = 0 train()
// run must match it bit for bit on the policy trajectory.
TrainResult train_plain_dpo(const std::vector<PreferenceTriple>& dataset, const FeatureSpec& spec,
                            PolicyFamily family, const TrainConfig& cfg,
                            const std::vector<SftExample>* warm_corpus = nullptr,
                            const EpochCallback& on_epoch = nullptr);

}  // namespace cdpo
