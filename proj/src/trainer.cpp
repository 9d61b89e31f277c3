#include "cdpo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "cdpo/rng.hpp"

namespace cdpo {

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
  if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size must be >= 2");
  if (!(eta > 0.0)) throw std::invalid_argument("TrainConfig: eta must be positive");
  if (epochs < 0 || iterations < 0)
    throw std::invalid_argument("TrainConfig: epochs and iterations must be >= 0");
  if (!(dpo.beta > 0.0)) throw std::invalid_argument("TrainConfig: beta must be positive");
  if (warm_start_steps < 0) throw std::invalid_argument("TrainConfig: warm_start_steps must be >= 0");
  if (!(warm_start_lr > 0.0)) throw std::invalid_argument("TrainConfig: warm_start_lr must be positive");
  if (probe_size < 0) throw std::invalid_argument("TrainConfig: probe_size must be >= 0");
  if (!(soft_assign_scale > 0.0))
    throw std::invalid_argument("TrainConfig: soft_assign_scale must be positive");
  if (kernel.rule == KernelConfig::BandwidthRule::Fixed && !(kernel.bandwidth > 0.0))
    throw std::invalid_argument("TrainConfig: fixed kernel bandwidth must be positive");
}

namespace {

std::vector<Vec> penalty_values(const std::vector<PreferenceTriple>& batch,
                                const PolicyParams& policy, const TrainConfig& cfg) {
  std::vector<Vec> values;
  values.reserve(batch.size());
  for (const auto& t : batch) {
    if (cfg.compare_hidden) values.push_back(hidden_repr(policy, t.x));
    else values.push_back(Vec{log_prob(policy, t.x, t.y_w)});
  }
  return values;
}

KernelConfig resolve_kernel(const KernelConfig& cfg, const std::vector<Vec>& values) {
  KernelConfig out = cfg;
  if (cfg.rule == KernelConfig::BandwidthRule::MedianHeuristic && values.size() >= 2)
    out.bandwidth = median_bandwidth(values);
  return out;
}

double row_deviation(const Mat& probs) {
  double dev = 0.0;
  for (const auto& row : probs) {
    double s = 0.0;
    for (double v : row) s += v;
    dev = std::max(dev, std::abs(s - 1.0));
  }
  return dev;
}

// d penalty / d z_i through the distance softmax, centers held constant.
Vec membership_chain(const Vec& z, const Mat& ctrs, const Vec& p_row, const Vec& dp_row,
                     double scale) {
  const std::size_t d = z.size();
  const std::size_t K = ctrs.size();
  // Distance direction vectors dD_ik/dz_i = (z - c_k) / D_ik (zero at D=0).
  Mat dir(K, Vec(d, 0.0));
  for (std::size_t k = 0; k < K; ++k) {
    const double dist = euclid(z, ctrs[k]);
    if (dist > 0.0)
      for (std::size_t c = 0; c < d; ++c) dir[k][c] = (z[c] - ctrs[k][c]) / dist;
  }
  Vec srow(d, 0.0);  // sum_j p_ij dD_ij/dz_i
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < d; ++c) srow[c] += p_row[k] * dir[k][c];
  Vec dz(d, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const double coef = dp_row[k] * scale * p_row[k];
    if (coef == 0.0) continue;
    for (std::size_t c = 0; c < d; ++c) dz[c] += coef * (srow[c] - dir[k][c]);
  }
  return dz;
}

void warm_start(PolicyParams& policy, const std::vector<SftExample>& corpus, int steps,
                double lr) {
  if (steps <= 0 || corpus.empty()) return;
  const double inv_n = 1.0 / static_cast<double>(corpus.size());
  for (int s = 0; s < steps; ++s) {
    PolicyGrad g = zero_grad(policy);
    for (const auto& ex : corpus) grad_axpy(g, inv_n, log_prob_grad(policy, ex.x, ex.y));
    apply_update(policy, -lr, g);  // ascent on the mean log-likelihood
  }
}

}  // namespace

EnvState discover_envs(const std::vector<Vec>& hidden, const ExtractorParams& ex,
                       const TrainConfig& cfg) {
  if (hidden.empty()) throw std::invalid_argument("discover_envs: empty batch");
  EnvState st;
  st.points.reserve(hidden.size());
  for (const auto& h : hidden) st.points.push_back(extract(ex, h));

  DbscanConfig db = cfg.dbscan;
  if (db.eps <= 0.0) db.eps = 0.5 * median_bandwidth(st.points);
  if (db.min_pts <= 0)
    db.min_pts = std::max(4, static_cast<int>(hidden.size()) / 20);
  st.eps_used = db.eps;
  st.min_pts_used = db.min_pts;

  const std::vector<int> labels = dbscan(st.points, db);
  int K = 0;
  for (int l : labels) K = std::max(K, l + 1);
  st.K = K;

  if (K == 0) {
    // Every point is noise: keep the step alive with one catch-all
    // environment so the loss stays defined and the penalty vanishes.
    st.assign.probs.assign(st.points.size(), Vec(1, 1.0));
    st.assign.centers.clear();
    st.assign.noise_mask.assign(st.points.size(), 1);
    st.prior = Vec{1.0};
    Vec mean(st.points[0].size(), 0.0);
    for (const auto& z : st.points)
      for (std::size_t c = 0; c < z.size(); ++c) mean[c] += z[c] / static_cast<double>(st.points.size());
    st.aggregates = Mat{mean};
    return st;
  }

  const Mat ctrs = centers(st.points, labels);
  st.assign = soft_assign(st.points, ctrs, cfg.soft_assign_scale);
  for (std::size_t i = 0; i < labels.size(); ++i)
    st.assign.noise_mask[i] = labels[i] == kNoiseLabel ? 1 : 0;
  st.prior = env_prior(st.assign).p_hat;
  st.aggregates.clear();
  for (int k = 0; k < K; ++k) st.aggregates.push_back(aggregate(st.points, st.assign, k));
  return st;
}

std::tuple<double, double, double> causal_dpo_loss(const std::vector<PreferenceTriple>& batch,
                                                   const PolicyParams& policy,
                                                   const ReferencePolicy& ref,
                                                   const SoftAssignment& envstate,
                                                   const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("causal_dpo_loss: empty batch");
  if (envstate.probs.size() != batch.size())
    throw std::invalid_argument("causal_dpo_loss: assignment rows != batch size");
  const double dpo = dpo_loss(batch, policy, ref, cfg.dpo.beta);
  const std::vector<Vec> values = penalty_values(batch, policy, cfg);
  const KernelConfig kcfg = resolve_kernel(cfg.kernel, values);
  const double mmd = batch_env_penalty(values, envstate.probs, kcfg, nullptr, nullptr);
  return {dpo + cfg.lambda * mmd, dpo, mmd};
}

RunRecord train_step(const std::vector<PreferenceTriple>& batch, PolicyParams& policy,
                     const ReferencePolicy& ref, ExtractorParams& ex, const TrainConfig& cfg,
                     long step_index, const std::vector<PreferenceTriple>& probe,
                     EnvState* env_out) {
  if (batch.size() < 2) throw std::invalid_argument("train_step: batch size must be >= 2");

  std::vector<Vec> hidden;
  hidden.reserve(batch.size());
  for (const auto& t : batch) hidden.push_back(hidden_repr(policy, t.x));
  const EnvState env = discover_envs(hidden, ex, cfg);
  if (env_out) *env_out = env;

  const double dpo = dpo_loss(batch, policy, ref, cfg.dpo.beta);
  PolicyGrad g = dpo_grad(batch, policy, ref, cfg.dpo.beta);

  const std::vector<Vec> values = penalty_values(batch, policy, cfg);
  const KernelConfig kcfg = resolve_kernel(cfg.kernel, values);
  std::vector<Vec> d_values;
  Mat d_probs;
  const double mmd = batch_env_penalty(values, env.assign.probs, kcfg, &d_values, &d_probs);

  if (cfg.lambda > 0.0 && env.K >= 2) {
    if (!cfg.compare_hidden) {
      for (std::size_t i = 0; i < batch.size(); ++i) {
        if (d_values[i][0] == 0.0) continue;
        grad_axpy(g, cfg.lambda * d_values[i][0], log_prob_grad(policy, batch[i].x, batch[i].y_w));
      }
    }
    // Membership gradients into the extractor; the policy-side inputs h
    // act as data here.
    Mat gW(ex.W_g.size(), Vec(ex.W_g[0].size(), 0.0));
    Vec gb(ex.b_g.size(), 0.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Vec dz = membership_chain(env.points[i], env.assign.centers, env.assign.probs[i],
                                      d_probs[i], cfg.soft_assign_scale);
      for (std::size_t r = 0; r < gW.size(); ++r) {
        if (dz[r] == 0.0) continue;
        for (std::size_t c = 0; c < gW[r].size(); ++c) gW[r][c] += dz[r] * hidden[i][c];
        gb[r] += dz[r];
      }
    }
    for (std::size_t r = 0; r < gW.size(); ++r) {
      for (std::size_t c = 0; c < gW[r].size(); ++c) ex.W_g[r][c] -= cfg.eta * cfg.lambda * gW[r][c];
      ex.b_g[r] -= cfg.eta * cfg.lambda * gb[r];
    }
  }

  apply_update(policy, cfg.eta, g);

  RunRecord rec;
  rec.step = step_index;
  rec.dpo_loss = dpo;
  rec.mmd_penalty = mmd;
  rec.total_loss = dpo + cfg.lambda * mmd;
  rec.K_discovered = env.K;
  rec.env_prior = env.prior;
  rec.w_E = policy.w_E;
  rec.preference_accuracy = probe.empty() ? 0.0 : preference_accuracy(probe, policy);
  rec.assign_row_dev = row_deviation(env.assign.probs);
  return rec;
}

namespace {

// Shared run skeleton: probe carve-out, init, warm start, epoch schedule.
// The step body is the only difference between the causal and plain paths.
template <typename StepFn>
TrainResult run_schedule(const std::vector<PreferenceTriple>& dataset, const FeatureSpec& spec,
                         PolicyFamily family, const ExtractorParams& extractor_init,
                         const TrainConfig& cfg, const std::vector<SftExample>* warm_corpus,
                         const EpochCallback& on_epoch, const ResumeState* resume,
                         StepFn&& step_fn) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  Rng probe_rng = Rng::substream(cfg.seed, "probe");
  probe_rng.shuffle(order);
  const std::size_t probe_n =
      std::min(static_cast<std::size_t>(std::max(0, cfg.probe_size)), dataset.size() / 2);
  std::vector<PreferenceTriple> probe, pool;
  probe.reserve(probe_n);
  pool.reserve(dataset.size() - probe_n);
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < probe_n ? probe : pool).push_back(dataset[order[i]]);

  const int total_epochs = cfg.iterations * cfg.epochs;
  if (resume && (resume->next_epoch < 0 || resume->next_epoch > total_epochs))
    throw std::invalid_argument("train: resume epoch outside the schedule");

  TrainResult out;
  long step = 0;
  int first_epoch = 0;
  if (resume) {
    out.policy = resume->policy;
    out.reference = resume->reference;
    out.extractor = resume->extractor;
    step = resume->step;
    first_epoch = resume->next_epoch;
  } else {
    out.policy = init_policy(spec, family, cfg.seed);
    out.extractor = extractor_init;

    if (cfg.epochs == 0 || cfg.iterations == 0) {
      out.reference = freeze_reference(out.policy);
      return out;
    }

    std::vector<SftExample> derived;
    const std::vector<SftExample>* corpus = warm_corpus;
    if (!corpus) {
      derived.reserve(pool.size());
      for (const auto& t : pool) derived.push_back({t.x, t.y_w});
      corpus = &derived;
    }
    warm_start(out.policy, *corpus, cfg.warm_start_steps, cfg.warm_start_lr);
    out.reference = freeze_reference(out.policy);
  }

  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  std::vector<PreferenceTriple> batch;
  for (int global_epoch = first_epoch; global_epoch < total_epochs; ++global_epoch) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng sh = Rng::substream(cfg.seed, "shuffle:" + std::to_string(global_epoch));
    sh.shuffle(idx);
    for (std::size_t start = 0; start + B <= idx.size(); start += B) {
      batch.assign(B, PreferenceTriple{});
      for (std::size_t i = 0; i < B; ++i) batch[i] = pool[idx[start + i]];
      out.records.push_back(step_fn(batch, out, step, probe));
      ++step;
    }
    if (on_epoch) on_epoch(global_epoch, step, out);
  }
  return out;
}

}  // namespace

TrainResult train(const std::vector<PreferenceTriple>& dataset, const FeatureSpec& spec,
                  PolicyFamily family, const ExtractorParams& extractor_init,
                  const TrainConfig& cfg, const std::vector<SftExample>* warm_corpus,
                  const EpochCallback& on_epoch, const ResumeState* resume) {
  auto dump = std::make_shared<std::ofstream>();
  if (cfg.dump_envs && !cfg.dump_path.empty()) {
    dump->open(cfg.dump_path);
    if (!*dump) throw std::runtime_error("train: cannot open dump path " + cfg.dump_path);
  }
  return run_schedule(dataset, spec, family, extractor_init, cfg, warm_corpus, on_epoch, resume,
                      [&cfg, dump](const std::vector<PreferenceTriple>& batch, TrainResult& out,
                                   long step, const std::vector<PreferenceTriple>& probe) {
                        EnvState env;
                        RunRecord rec = train_step(batch, out.policy, out.reference,
                                                   out.extractor, cfg, step, probe, &env);
                        if (dump->is_open()) {
                          nlohmann::json line{{"step", step},
                                              {"K", env.K},
                                              {"eps", env.eps_used},
                                              {"min_pts", env.min_pts_used},
                                              {"prior", env.prior},
                                              {"centers", env.assign.centers},
                                              {"aggregates", env.aggregates}};
                          *dump << line.dump() << "\n";
                        }
                        return rec;
                      });
}

TrainResult train_plain_dpo(const std::vector<PreferenceTriple>& dataset, const FeatureSpec& spec,
                            PolicyFamily family, const TrainConfig& cfg,
                            const std::vector<SftExample>* warm_corpus,
                            const EpochCallback& on_epoch) {
  ExtractorParams unused;
  unused.W_g = Mat{Vec(static_cast<std::size_t>(spec.env_dim + spec.rest_dim), 0.0)};
  unused.b_g = Vec(1, 0.0);
  return run_schedule(
      dataset, spec, family, unused, cfg, warm_corpus, on_epoch, nullptr,
      [&cfg](const std::vector<PreferenceTriple>& batch, TrainResult& out, long step,
             const std::vector<PreferenceTriple>& probe) {
        const double dpo = dpo_loss(batch, out.policy, out.reference, cfg.dpo.beta);
        const PolicyGrad g = dpo_grad(batch, out.policy, out.reference, cfg.dpo.beta);
        apply_update(out.policy, cfg.eta, g);
        RunRecord rec;
        rec.step = step;
        rec.dpo_loss = dpo;
        rec.mmd_penalty = 0.0;
        rec.total_loss = dpo;
        rec.K_discovered = 1;
        rec.env_prior = Vec{1.0};
        rec.w_E = out.policy.w_E;
        rec.preference_accuracy = probe.empty() ? 0.0 : preference_accuracy(probe, out.policy);
        rec.assign_row_dev = 0.0;
        return rec;
      });
}

}  // namespace cdpo
