#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cdpo/lab.hpp"
#include "cdpo/rng.hpp"
#include "cdpo/trainer.hpp"

using namespace cdpo;

namespace {

// Small confounded corpus in the lab format: fast enough for unit tests
// while still exercising clustering, the penalty, and the warm start.
lab::LabData small_lab(std::uint64_t seed) {
  lab::LabConfig cfg;
  cfg.n_users = 48;
  cfg.per_user = 48;
  cfg.ood_users = 16;
  cfg.ood_per_user = 8;
  cfg.sft_cap = 1024;
  cfg.seed = seed;
  return lab::make_lab(cfg);
}

TrainConfig small_config(double lambda, std::uint64_t seed) {
  TrainConfig cfg = lab::lab_train_config(lambda, seed);
  cfg.epochs = 2;
  cfg.iterations = 2;
  cfg.batch_size = 128;
  cfg.warm_start_steps = 60;
  cfg.probe_size = 128;
  return cfg;
}

bool same_params(const PolicyParams& a, const PolicyParams& b) {
  if (param_count(a) != param_count(b)) return false;
  for (std::size_t i = 0; i < param_count(a); ++i)
    if (get_param(a, i) != get_param(b, i)) return false;
  return true;
}

}  // namespace

TEST_CASE("environment discovery on a separated batch") {
  Rng rng = Rng::substream(2, "test-trainer-disc");
  std::vector<Vec> hidden;
  for (int i = 0; i < 64; ++i) {
    const double e = i % 2 == 0 ? 1.0 : -1.0;
    hidden.push_back({e + 0.05 * rng.normal(), 0.1 * rng.normal()});
  }
  ExtractorParams ex;
  ex.W_g = {{4.0, 0.0}};
  ex.b_g = {0.0};
  TrainConfig cfg = small_config(1.0, 2);
  const EnvState st = discover_envs(hidden, ex, cfg);
  CHECK(st.K == 2);
  REQUIRE(st.assign.probs.size() == hidden.size());
  for (const Vec& row : st.assign.probs) {
    double sum = 0.0;
    for (double v : row) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
  REQUIRE(st.prior.size() == 2);
  CHECK(st.prior[0] == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("loss decomposition is exact") {
  const lab::LabData d = small_lab(7);
  const TrainConfig cfg = small_config(0.5, 7);
  const PolicyParams policy = init_policy(d.spec, PolicyFamily::LogLinear, 7);
  const ReferencePolicy ref = freeze_reference(policy);
  std::vector<Vec> hidden;
  std::vector<PreferenceTriple> batch(d.triples.begin(), d.triples.begin() + 128);
  for (const auto& t : batch) hidden.push_back(hidden_repr(policy, t.x));
  const EnvState st = discover_envs(hidden, lab::lab_extractor(), cfg);
  const auto [total, dpo, mmd] = causal_dpo_loss(batch, policy, ref, st.assign, cfg);
  CHECK(total == doctest::Approx(dpo + cfg.lambda * mmd).epsilon(1e-12));
  CHECK(mmd >= 0.0);
}

TEST_CASE("run records decompose and stay stochastic-row clean") {
  const lab::LabData d = small_lab(11);
  TrainConfig cfg = small_config(1.0, 11);
  const TrainResult res = train(d.triples, d.spec, PolicyFamily::LogLinear,
                                lab::lab_extractor(), cfg, &d.sft);
  REQUIRE(!res.records.empty());
  long expect_step = 0;
  for (const auto& r : res.records) {
    CHECK(r.step == expect_step++);
    CHECK(r.total_loss ==
          doctest::Approx(r.dpo_loss + cfg.lambda * r.mmd_penalty).epsilon(1e-9));
    CHECK(r.assign_row_dev <= 1e-9);
    CHECK(r.preference_accuracy >= 0.0);
    CHECK(r.preference_accuracy <= 1.0);
  }
}

TEST_CASE("training is seed-deterministic") {
  const lab::LabData d = small_lab(3);
  const TrainConfig cfg = small_config(1.0, 3);
  const TrainResult a =
      train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), cfg, &d.sft);
  const TrainResult b =
      train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), cfg, &d.sft);
  CHECK(same_params(a.policy, b.policy));
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].dpo_loss == b.records[i].dpo_loss);
    CHECK(a.records[i].mmd_penalty == b.records[i].mmd_penalty);
  }
}

TEST_CASE("zero-penalty run matches the dedicated plain path bit for bit") {
  const lab::LabData d = small_lab(5);
  const TrainConfig cfg = small_config(0.0, 5);
  const TrainResult a =
      train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), cfg, &d.sft);
  const TrainResult b = train_plain_dpo(d.triples, d.spec, PolicyFamily::LogLinear, cfg, &d.sft);
  CHECK(same_params(a.policy, b.policy));
  CHECK(same_params(a.reference.params, b.reference.params));
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].step == b.records[i].step);
    CHECK(a.records[i].dpo_loss == b.records[i].dpo_loss);
    CHECK(a.records[i].preference_accuracy == b.records[i].preference_accuracy);
    CHECK(a.records[i].w_E == b.records[i].w_E);
  }
}

TEST_CASE("no pass means no update") {
  const lab::LabData d = small_lab(9);
  TrainConfig cfg = small_config(1.0, 9);
  cfg.epochs = 0;
  const TrainResult res =
      train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), cfg, &d.sft);
  CHECK(res.records.empty());
  // The policy never moves off the frozen reference.
  CHECK(same_params(res.policy, res.reference.params));
}

TEST_CASE("step count follows the schedule") {
  const lab::LabData d = small_lab(13);
  TrainConfig cfg = small_config(1.0, 13);
  const TrainResult res =
      train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), cfg, &d.sft);
  const long usable = static_cast<long>(d.triples.size()) - cfg.probe_size;
  const long per_epoch = usable / cfg.batch_size;
  CHECK(static_cast<long>(res.records.size()) ==
        per_epoch * cfg.epochs * cfg.iterations);
}

TEST_CASE("checkpoint resume replays the rest of the run exactly") {
  const lab::LabData d = small_lab(17);
  const TrainConfig cfg = small_config(1.0, 17);
  const TrainResult full =
      train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), cfg, &d.sft);

  ResumeState snap;
  bool captured = false;
  const EpochCallback capture = [&](int epoch, long step, const TrainResult& state) {
    if (epoch == 1) {
      snap.policy = state.policy;
      snap.reference = state.reference;
      snap.extractor = state.extractor;
      snap.step = step;
      snap.next_epoch = epoch + 1;
      captured = true;
    }
  };
  train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), cfg, &d.sft, capture);
  REQUIRE(captured);

  const TrainResult rest = train(d.triples, d.spec, PolicyFamily::LogLinear,
                                 lab::lab_extractor(), cfg, &d.sft, nullptr, &snap);
  CHECK(same_params(rest.policy, full.policy));
  REQUIRE(!rest.records.empty());
  CHECK(rest.records.front().step == snap.step);
  CHECK(rest.records.back().step == full.records.back().step);
  CHECK(rest.records.back().dpo_loss == full.records.back().dpo_loss);
}

TEST_CASE("skipping the warm start changes the reference") {
  const lab::LabData d = small_lab(19);
  TrainConfig warm = small_config(1.0, 19);
  TrainConfig cold = warm;
  cold.warm_start_steps = 0;
  const TrainResult a =
      train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), warm, &d.sft);
  const TrainResult b =
      train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), cold, &d.sft);
  CHECK(!same_params(a.reference.params, b.reference.params));
}

TEST_CASE("hidden-statistic variant trains and logs finite penalties") {
  const lab::LabData d = small_lab(23);
  TrainConfig cfg = small_config(1.0, 23);
  cfg.compare_hidden = true;
  cfg.epochs = 1;
  cfg.iterations = 1;
  const TrainResult res =
      train(d.triples, d.spec, PolicyFamily::LogLinear, lab::lab_extractor(), cfg, &d.sft);
  REQUIRE(!res.records.empty());
  for (const auto& r : res.records) {
    CHECK(std::isfinite(r.mmd_penalty));
    CHECK(r.mmd_penalty >= 0.0);
  }
}
