#include "cdpo/causal.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "cdpo/divergence.hpp"
#include "cdpo/preference.hpp"
#include "cdpo/rng.hpp"

namespace cdpo {

int ScmSpec::y_count() const {
  if (y_given_xe.empty() || y_given_xe[0].empty()) return 0;
  return static_cast<int>(y_given_xe[0][0].size());
}

namespace {

void check_row(const Vec& row, const char* what) {
  double s = 0.0;
  for (double v : row) {
    if (v < 0.0 || v > 1.0 || !std::isfinite(v))
      throw std::invalid_argument(std::string("ScmSpec: probability outside [0,1] in ") + what);
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9)
    throw std::invalid_argument(std::string("ScmSpec: row does not sum to 1 in ") + what);
}

int draw_categorical(const Vec& row, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    acc += row[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(row.size()) - 1;
}

}  // namespace

void ScmSpec::validate() const {
  if (env_values.empty()) throw std::invalid_argument("ScmSpec: no environments");
  if (env_prior.size() != env_values.size())
    throw std::invalid_argument("ScmSpec: prior length mismatch");
  check_row(env_prior, "env_prior");
  if (x_given_e.size() != env_values.size())
    throw std::invalid_argument("ScmSpec: x_given_e must have one row per environment");
  const std::size_t nx = x_given_e[0].size();
  for (const auto& row : x_given_e) {
    if (row.size() != nx) throw std::invalid_argument("ScmSpec: ragged x_given_e");
    check_row(row, "x_given_e");
  }
  if (y_given_xe.size() != env_values.size())
    throw std::invalid_argument("ScmSpec: y_given_xe must have one table per environment");
  const std::size_t ny = y_given_xe[0].empty() ? 0 : y_given_xe[0][0].size();
  for (const auto& table : y_given_xe) {
    if (table.size() != nx) throw std::invalid_argument("ScmSpec: y table row count != |X|");
    for (const auto& row : table) {
      if (row.size() != ny) throw std::invalid_argument("ScmSpec: ragged y_given_xe");
      check_row(row, "y_given_xe");
    }
  }
}

std::string ScmSpec::to_json_string() const {
  nlohmann::json j;
  j["env_values"] = env_values;
  j["env_prior"] = env_prior;
  j["x_given_e"] = x_given_e;
  j["y_given_xe"] = y_given_xe;
  return j.dump(2);
}

ScmSpec ScmSpec::from_json_string(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ScmSpec s;
  s.env_values = j.at("env_values").get<Vec>();
  s.env_prior = j.at("env_prior").get<Vec>();
  s.x_given_e = j.at("x_given_e").get<Mat>();
  s.y_given_xe = j.at("y_given_xe").get<std::vector<Mat>>();
  s.validate();
  return s;
}

std::vector<ScmSample> scm_sample(const ScmSpec& spec, std::size_t n, std::uint64_t seed) {
  return scm_sample(spec, n, spec.env_prior, seed);
}

std::vector<ScmSample> scm_sample(const ScmSpec& spec, std::size_t n, const Vec& env_override,
                                  std::uint64_t seed) {
  spec.validate();
  if (env_override.size() != spec.env_values.size())
    throw std::invalid_argument("scm_sample: override prior length mismatch");
  check_row(env_override, "env_override");
  Rng rng = Rng::substream(seed, "scm-sample");
  std::vector<ScmSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ScmSample s;
    s.e = draw_categorical(env_override, rng);
    s.x = draw_categorical(spec.x_given_e[static_cast<std::size_t>(s.e)], rng);
    s.y = draw_categorical(spec.y_given_xe[static_cast<std::size_t>(s.e)][static_cast<std::size_t>(s.x)], rng);
    out.push_back(s);
  }
  return out;
}

Vec interventional_enum(const ScmSpec& spec, int x) {
  spec.validate();
  if (x < 0 || x >= spec.x_count()) throw std::out_of_range("interventional_enum: unknown x");
  Vec p(static_cast<std::size_t>(spec.y_count()), 0.0);
  for (std::size_t e = 0; e < spec.env_values.size(); ++e) {
    const Vec& row = spec.y_given_xe[e][static_cast<std::size_t>(x)];
    for (std::size_t y = 0; y < p.size(); ++y) p[y] += spec.env_prior[e] * row[y];
  }
  return p;
}

Vec backdoor_estimate(const std::vector<Mat>& y_given_xe_hat, const EnvPrior& prior, int x) {
  if (y_given_xe_hat.size() != prior.p_hat.size())
    throw std::invalid_argument("backdoor_estimate: table/prior environment count mismatch");
  if (y_given_xe_hat.empty() || x < 0 ||
      static_cast<std::size_t>(x) >= y_given_xe_hat[0].size())
    throw std::out_of_range("backdoor_estimate: unknown x");
  const std::size_t ny = y_given_xe_hat[0][0].size();
  Vec p(ny, 0.0);
  for (std::size_t e = 0; e < y_given_xe_hat.size(); ++e) {
    const Vec& row = y_given_xe_hat[e][static_cast<std::size_t>(x)];
    if (row.size() != ny) throw std::invalid_argument("backdoor_estimate: ragged table");
    for (std::size_t y = 0; y < ny; ++y) p[y] += prior.p_hat[e] * row[y];
  }
  return p;
}

void estimate_tables(const std::vector<ScmSample>& data, int env_count, int x_count, int y_count,
                     std::vector<Mat>* y_given_xe_hat, EnvPrior* prior) {
  if (data.empty()) throw std::invalid_argument("estimate_tables: no samples");
  std::vector<std::vector<std::vector<std::size_t>>> counts(
      static_cast<std::size_t>(env_count),
      std::vector<std::vector<std::size_t>>(static_cast<std::size_t>(x_count),
                                            std::vector<std::size_t>(static_cast<std::size_t>(y_count), 0)));
  std::vector<std::size_t> env_counts(static_cast<std::size_t>(env_count), 0);
  for (const auto& s : data) {
    ++env_counts[static_cast<std::size_t>(s.e)];
    ++counts[static_cast<std::size_t>(s.e)][static_cast<std::size_t>(s.x)][static_cast<std::size_t>(s.y)];
  }
  if (prior) {
    prior->p_hat.assign(static_cast<std::size_t>(env_count), 0.0);
    for (int e = 0; e < env_count; ++e)
      prior->p_hat[static_cast<std::size_t>(e)] =
          static_cast<double>(env_counts[static_cast<std::size_t>(e)]) / static_cast<double>(data.size());
  }
  if (y_given_xe_hat) {
    y_given_xe_hat->assign(static_cast<std::size_t>(env_count),
                           Mat(static_cast<std::size_t>(x_count), Vec(static_cast<std::size_t>(y_count), 0.0)));
    for (int e = 0; e < env_count; ++e)
      for (int x = 0; x < x_count; ++x) {
        std::size_t row_total = 0;
        for (int y = 0; y < y_count; ++y) row_total += counts[e][x][static_cast<std::size_t>(y)];
        Vec& row = (*y_given_xe_hat)[static_cast<std::size_t>(e)][static_cast<std::size_t>(x)];
        if (row_total == 0) {
          // unobserved cell: fall back to uniform
          for (double& v : row) v = 1.0 / static_cast<double>(y_count);
        } else {
          for (int y = 0; y < y_count; ++y)
            row[static_cast<std::size_t>(y)] =
                static_cast<double>(counts[e][x][static_cast<std::size_t>(y)]) / static_cast<double>(row_total);
        }
      }
  }
}

namespace {

constexpr int kAmpActions = 2;
constexpr std::size_t kAmpDataset = 4000;
constexpr int kAmpWarmSteps = 200;
constexpr double kAmpWarmLr = 0.5;
// Environment feature half-scale: pair margins then move at w_E per unit, so
// the pushback equilibrium w_ref + log(19)/beta is approached but not crossed
// within a few hundred steps and the increase stays strict for the whole run.
constexpr double kAmpEnvScale = 0.5;

struct AmpData {
  std::vector<PreferenceTriple> triples;
  double mean_delta_f = 0.0;  // mean of f_E(y_w) - f_E(y_l) over the data
};

// Confounded preference data: the environment tilts which action wins, so
// p(E|y_w) is skewed away from p(E|y_l) with strength bias in [0,1].
// Rest features are plain noise; the only systematic signal is environmental.
AmpData make_biased_preferences(double bias, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "amp-data");
  AmpData data;
  data.triples.reserve(kAmpDataset);
  double sum_df = 0.0;
  for (std::size_t i = 0; i < kAmpDataset; ++i) {
    const double e = (rng.uniform() < 0.5 ? 1.0 : -1.0) * kAmpEnvScale;
    const bool match = rng.uniform() < 0.5 + 0.5 * bias;
    // action 0 carries sign +1 and action 1 sign -1
    const int y_w = (e > 0.0) == match ? 0 : 1;
    const int y_l = 1 - y_w;
    PreferenceTriple t;
    t.x.env_features = {e};
    t.x.rest_features = {rng.normal(), rng.normal()};
    t.y_w = y_w;
    t.y_l = y_l;
    data.triples.push_back(std::move(t));
    const double sw = y_w == 0 ? 1.0 : -1.0;
    const double sl = y_l == 0 ? 1.0 : -1.0;
    sum_df += (sw - sl) * e;
  }
  data.mean_delta_f = sum_df / static_cast<double>(kAmpDataset);
  return data;
}

}  // namespace

AmplificationResult run_amplification(const AmplificationConfig& cfg) {
  if (cfg.eta <= 0.0) throw std::invalid_argument("run_amplification: eta must be positive");
  if (cfg.steps < 1) throw std::invalid_argument("run_amplification: steps must be >= 1");
  if (cfg.bias_strength < 0.0 || cfg.bias_strength > 1.0)
    throw std::invalid_argument("run_amplification: bias_strength must be in [0,1]");

  const AmpData data = make_biased_preferences(cfg.bias_strength, cfg.seed);

  FeatureSpec spec;
  spec.env_dim = 1;
  spec.rest_dim = kAmpActions;
  spec.action_count = kAmpActions;
  spec.action_sign = {1.0, -1.0};

  // Reference = supervised warm start on the winners, mirroring an
  // SFT-then-preference pipeline; the fresh policy then starts at w_E = 0.
  PolicyParams warm = init_policy(spec, PolicyFamily::LogLinear, cfg.seed);
  for (int step = 0; step < kAmpWarmSteps; ++step) {
    PolicyGrad g = zero_grad(warm);
    const double inv_n = 1.0 / static_cast<double>(data.triples.size());
    for (const auto& t : data.triples)
      grad_axpy(g, inv_n, log_prob_grad(warm, t.x, t.y_w));
    apply_update(warm, -kAmpWarmLr, g);  // ascent
  }
  const ReferencePolicy ref = freeze_reference(warm);

  PolicyParams policy = init_policy(spec, PolicyFamily::LogLinear, cfg.seed);

  AmplificationResult result;
  result.predicted_slope = cfg.eta * cfg.beta * data.mean_delta_f;

  auto snapshot = [&](int step) {
    AmplificationStep s;
    s.step = step;
    s.w_E = policy.w_E[0];
    s.delta_E = policy.w_E[0] - 0.0;
    s.loss = dpo_loss(data.triples, policy, ref, cfg.beta);
    double sig = 0.0;
    for (const auto& t : data.triples) {
      const double dr = reward(policy, ref, t.x, t.y_w, cfg.beta) -
                        reward(policy, ref, t.x, t.y_l, cfg.beta);
      sig += logistic(dr);
    }
    s.mean_sigma = sig / static_cast<double>(data.triples.size());
    result.trajectory.push_back(s);
  };

  snapshot(0);
  for (int step = 1; step <= cfg.steps; ++step) {
    const PolicyGrad g = dpo_grad(data.triples, policy, ref, cfg.beta);
    apply_update(policy, cfg.eta, g);
    snapshot(step);
  }

  if (result.trajectory.size() > 10)
    result.measured_slope = (result.trajectory[10].w_E - result.trajectory[0].w_E) / 10.0;
  return result;
}

namespace {

void check_gen_err_inputs(const PolicyParams& policy, const ScmSpec& a, const ScmSpec& b) {
  a.validate();
  b.validate();
  if (policy.spec.env_dim != 1)
    throw std::invalid_argument("gen_err: policy must have a scalar environment weight");
  if (a.env_values != b.env_values)
    throw std::invalid_argument("gen_err: train/test must share environment values");
  if (a.x_count() != b.x_count() || a.y_count() != b.y_count())
    throw std::invalid_argument("gen_err: train/test must share the X grid and action set");
  if (policy.spec.action_count != a.y_count())
    throw std::invalid_argument("gen_err: policy action count != SCM action count");
  // The bound assumes an invariant mechanism p(Y|X,E); only the environment
  // distribution may shift between train and test.
  for (std::size_t e = 0; e < a.y_given_xe.size(); ++e)
    for (std::size_t x = 0; x < a.y_given_xe[e].size(); ++x)
      for (std::size_t y = 0; y < a.y_given_xe[e][x].size(); ++y)
        if (std::abs(a.y_given_xe[e][x][y] - b.y_given_xe[e][x][y]) > 1e-12)
          throw std::invalid_argument("gen_err: train/test must share p(Y|X,E)");
}

Vec marginal_x(const ScmSpec& spec) {
  Vec px(static_cast<std::size_t>(spec.x_count()), 0.0);
  for (std::size_t e = 0; e < spec.env_values.size(); ++e)
    for (std::size_t x = 0; x < px.size(); ++x)
      px[x] += spec.env_prior[e] * spec.x_given_e[e][x];
  return px;
}

Vec env_posterior(const ScmSpec& spec, int x) {
  Vec post(spec.env_values.size(), 0.0);
  double z = 0.0;
  for (std::size_t e = 0; e < post.size(); ++e) {
    post[e] = spec.env_prior[e] * spec.x_given_e[e][static_cast<std::size_t>(x)];
    z += post[e];
  }
  if (z <= 0.0) throw std::runtime_error("gen_err: context with zero probability under a spec");
  for (double& v : post) v /= z;
  return post;
}

// E[w_E f_E | x] under one spec: environments by posterior, actions by the
// invariant mechanism.
double spurious_term(const PolicyParams& policy, const ScmSpec& spec, int x) {
  const Vec post = env_posterior(spec, x);
  double total = 0.0;
  for (std::size_t e = 0; e < post.size(); ++e) {
    double inner = 0.0;
    const Vec& row = spec.y_given_xe[e][static_cast<std::size_t>(x)];
    for (std::size_t y = 0; y < row.size(); ++y)
      inner += row[y] * policy.spec.action_sign[y] * spec.env_values[e];
    total += post[e] * policy.w_E[0] * inner;
  }
  return total;
}

}  // namespace

double empirical_gen_err(const PolicyParams& policy, const ScmSpec& spec_train,
                         const ScmSpec& spec_test, std::size_t n, std::uint64_t seed) {
  check_gen_err_inputs(policy, spec_train, spec_test);
  if (n == 0) throw std::invalid_argument("empirical_gen_err: n must be positive");
  const Vec px = marginal_x(spec_test);
  Rng rng = Rng::substream(seed, "gen-err");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int x = draw_categorical(px, rng);
    acc += std::abs(spurious_term(policy, spec_test, x) - spurious_term(policy, spec_train, x));
  }
  return acc / static_cast<double>(n);
}

BoundReport gen_err_bound(const PolicyParams& policy, const ScmSpec& spec_train,
                          const ScmSpec& spec_test, double C) {
  check_gen_err_inputs(policy, spec_train, spec_test);
  for (std::size_t y = 0; y < policy.spec.action_sign.size(); ++y)
    for (std::size_t e = 0; e < spec_train.env_values.size(); ++e)
      if (std::abs(policy.spec.action_sign[y] * spec_train.env_values[e]) > C + 1e-12)
        throw std::invalid_argument("gen_err_bound: feature bound C violated on the grid");

  const Vec px = marginal_x(spec_test);
  BoundReport report;
  report.C = C;
  for (int x = 0; x < spec_test.x_count(); ++x) {
    const double w = px[static_cast<std::size_t>(x)];
    if (w <= 0.0) continue;
    report.gen_err +=
        w * std::abs(spurious_term(policy, spec_test, x) - spurious_term(policy, spec_train, x));
    report.tv_mean += w * tv_distance(env_posterior(spec_train, x), env_posterior(spec_test, x));
  }
  report.bound_value = 2.0 * C * std::abs(policy.w_E[0]) * report.tv_mean;
  return report;
}

}  // namespace cdpo
