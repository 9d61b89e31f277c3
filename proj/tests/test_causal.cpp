#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cdpo/causal.hpp"
#include "cdpo/rng.hpp"

using namespace cdpo;

namespace {

ScmSpec toy_scm() {
  ScmSpec s;
  s.env_values = {1.0, -1.0};
  s.env_prior = {0.5, 0.5};
  s.x_given_e = {{0.7, 0.3}, {0.2, 0.8}};
  s.y_given_xe = {{{0.8, 0.2}, {0.5, 0.5}}, {{0.4, 0.6}, {0.1, 0.9}}};
  return s;
}

Vec random_row(Rng& rng, int n, double floor_mass) {
  Vec row;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    row.push_back(-std::log(1.0 - rng.uniform()));
    sum += row.back();
  }
  for (double& v : row) v = (1.0 - floor_mass) * v / sum + floor_mass / n;
  return row;
}

ScmSpec random_scm(Rng& rng, int ne, int nx, int ny, double floor_mass) {
  ScmSpec s;
  for (int e = 0; e < ne; ++e) s.env_values.push_back(rng.uniform(-1.0, 1.0));
  s.env_prior = random_row(rng, ne, floor_mass);
  for (int e = 0; e < ne; ++e) s.x_given_e.push_back(random_row(rng, nx, floor_mass));
  for (int e = 0; e < ne; ++e) {
    Mat m;
    for (int x = 0; x < nx; ++x) m.push_back(random_row(rng, ny, floor_mass));
    s.y_given_xe.push_back(m);
  }
  s.validate();
  return s;
}

PolicyParams env_only_policy(double w, int nx, int ny) {
  PolicyParams p;
  p.spec.env_dim = 1;
  p.spec.rest_dim = nx;
  p.spec.action_count = ny;
  p.spec.fill_default_signs();
  p.w_E = {w};
  p.w_rest = Vec(static_cast<std::size_t>(nx), 0.0);
  return p;
}

}  // namespace

TEST_CASE("validation rejects rows that do not sum to one") {
  ScmSpec s = toy_scm();
  CHECK_NOTHROW(s.validate());
  s.x_given_e[0][0] = 0.9;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("scm JSON round-trip") {
  const ScmSpec s = toy_scm();
  const ScmSpec back = ScmSpec::from_json_string(s.to_json_string());
  CHECK(back.env_values == s.env_values);
  CHECK(back.env_prior == s.env_prior);
  CHECK(back.x_given_e == s.x_given_e);
  CHECK(back.y_given_xe == s.y_given_xe);
}

TEST_CASE("enumeration averages the outcome rows over the prior") {
  ScmSpec s = toy_scm();
  // Uniform prior: p(y | do x) = (row_e0 + row_e1) / 2.
  const Vec p0 = interventional_enum(s, 0);
  CHECK(p0[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(p0[1] == doctest::Approx(0.4).epsilon(1e-15));
  const Vec p1 = interventional_enum(s, 1);
  CHECK(p1[0] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(p1[1] == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("backdoor estimate at the truth equals enumeration") {
  Rng rng = Rng::substream(10, "test-causal-truth");
  for (int rep = 0; rep < 10; ++rep) {
    const ScmSpec s = random_scm(rng, 2 + rep % 3, 1 + rep % 4, 2 + rep % 3, 0.05);
    const EnvPrior prior{s.env_prior};
    for (int x = 0; x < s.x_count(); ++x) {
      const Vec truth = interventional_enum(s, x);
      const Vec est = backdoor_estimate(s.y_given_xe, prior, x);
      REQUIRE(est.size() == truth.size());
      for (std::size_t y = 0; y < truth.size(); ++y)
        CHECK(std::abs(est[y] - truth[y]) <= 1e-15);
    }
  }
}

TEST_CASE("sampling matches the spec marginals") {
  const ScmSpec s = toy_scm();
  const auto data = scm_sample(s, 200000, 13);
  double e0 = 0.0, x0 = 0.0;
  for (const auto& d : data) {
    if (d.e == 0) e0 += 1.0;
    if (d.x == 0) x0 += 1.0;
  }
  e0 /= static_cast<double>(data.size());
  x0 /= static_cast<double>(data.size());
  CHECK(std::abs(e0 - 0.5) < 0.01);
  // p(x=0) = 0.5 * 0.7 + 0.5 * 0.2 = 0.45.
  CHECK(std::abs(x0 - 0.45) < 0.01);
  // Determinism.
  const auto again = scm_sample(s, 50, 13);
  const auto other = scm_sample(s, 50, 14);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < again.size(); ++i) {
    same = same && again[i].e == data[i].e && again[i].x == data[i].x && again[i].y == data[i].y;
    differs = differs || again[i].x != other[i].x || again[i].y != other[i].y;
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("environment override replaces the prior") {
  const ScmSpec s = toy_scm();
  const auto data = scm_sample(s, 4000, Vec{1.0, 0.0}, 21);
  for (const auto& d : data) CHECK(d.e == 0);
}

TEST_CASE("table estimation recovers exact frequencies") {
  // Hand-built sample list over |E|=2, |X|=2, |Y|=2.
  std::vector<ScmSample> data{
      {0, 0, 0}, {0, 0, 0}, {0, 0, 1}, {0, 1, 1}, {1, 0, 0}, {1, 1, 1}, {1, 1, 1}, {1, 1, 0}};
  std::vector<Mat> tables;
  EnvPrior prior;
  estimate_tables(data, 2, 2, 2, &tables, &prior);
  CHECK(prior.p_hat[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(tables[0][0][0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(tables[0][1][1] == 1.0);
  CHECK(tables[1][1][0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("unobserved cells become uniform rows") {
  const std::vector<ScmSample> data{{0, 0, 0}, {0, 0, 1}};
  std::vector<Mat> tables;
  EnvPrior prior;
  estimate_tables(data, 2, 2, 2, &tables, &prior);
  // (e=1, *) and (e=0, x=1) never occur.
  CHECK(tables[0][1] == Vec{0.5, 0.5});
  CHECK(tables[1][0] == Vec{0.5, 0.5});
  CHECK(tables[1][1] == Vec{0.5, 0.5});
}

TEST_CASE("plug-in backdoor estimate approaches enumeration") {
  Rng rng = Rng::substream(31, "test-causal-plugin");
  const ScmSpec s = random_scm(rng, 2, 3, 3, 0.3);
  const auto data = scm_sample(s, 100000, 17);
  std::vector<Mat> tables;
  EnvPrior prior;
  estimate_tables(data, s.env_count(), s.x_count(), s.y_count(), &tables, &prior);
  for (int x = 0; x < s.x_count(); ++x) {
    const Vec truth = interventional_enum(s, x);
    const Vec est = backdoor_estimate(tables, prior, x);
    for (std::size_t y = 0; y < truth.size(); ++y) CHECK(std::abs(est[y] - truth[y]) <= 0.02);
  }
}

TEST_CASE("amplification trajectory shape and determinism") {
  AmplificationConfig cfg;
  cfg.steps = 20;
  cfg.seed = 3;
  const AmplificationResult a = run_amplification(cfg);
  REQUIRE(a.trajectory.size() == 21);
  CHECK(a.trajectory.front().step == 0);
  CHECK(a.trajectory.back().step == 20);
  for (const auto& s : a.trajectory) {
    CHECK(s.delta_E == s.w_E - a.trajectory.front().w_E);
    CHECK(s.mean_sigma > 0.0);
    CHECK(s.mean_sigma < 1.0);
    CHECK(std::isfinite(s.loss));
  }
  CHECK(a.measured_slope == (a.trajectory[10].w_E - a.trajectory[0].w_E) / 10.0);
  const AmplificationResult b = run_amplification(cfg);
  for (std::size_t i = 0; i < a.trajectory.size(); ++i)
    CHECK(b.trajectory[i].w_E == a.trajectory[i].w_E);
}

TEST_CASE("unbiased data does not grow the environment weight") {
  AmplificationConfig cfg;
  cfg.bias_strength = 0.0;
  cfg.steps = 10;
  cfg.seed = 5;
  const AmplificationResult r = run_amplification(cfg);
  CHECK(std::abs(r.trajectory.back().w_E - r.trajectory.front().w_E) < 0.05);
  CHECK(std::abs(r.predicted_slope) < 0.01);
}

TEST_CASE("generalization error vanishes when nothing shifts") {
  Rng rng = Rng::substream(41, "test-causal-zero");
  const ScmSpec s = random_scm(rng, 2, 3, 2, 0.1);
  const PolicyParams p = env_only_policy(1.3, s.x_count(), s.y_count());
  const BoundReport same = gen_err_bound(p, s, s, 1.0);
  CHECK(same.gen_err == 0.0);
  CHECK(same.bound_value == 0.0);

  ScmSpec t = s;
  t.env_prior = random_row(rng, 2, 0.1);
  t.x_given_e = {random_row(rng, 3, 0.1), random_row(rng, 3, 0.1)};
  const PolicyParams flat = env_only_policy(0.0, s.x_count(), s.y_count());
  const BoundReport zero_w = gen_err_bound(flat, s, t, 1.0);
  CHECK(zero_w.gen_err == 0.0);
  CHECK(zero_w.bound_value == 0.0);
}

TEST_CASE("measured generalization error stays inside the bound") {
  Rng rng = Rng::substream(43, "test-causal-bound");
  for (int rep = 0; rep < 10; ++rep) {
    const int nx = 2 + rep % 3;
    const int ny = 2 + rep % 2;
    const ScmSpec train = random_scm(rng, 2, nx, ny, 0.05);
    ScmSpec test = train;
    test.env_prior = random_row(rng, 2, 0.05);
    test.x_given_e.clear();
    for (int e = 0; e < 2; ++e) test.x_given_e.push_back(random_row(rng, nx, 0.05));
    const PolicyParams p = env_only_policy(2.0 * rng.normal(), nx, ny);
    double c = 0.0;
    for (double v : train.env_values) c = std::max(c, std::abs(v));
    const BoundReport rep_out = gen_err_bound(p, train, test, c);
    CHECK(rep_out.gen_err <= rep_out.bound_value + 1e-12);
    CHECK(rep_out.bound_value ==
          doctest::Approx(2.0 * c * std::abs(p.w_E[0]) * rep_out.tv_mean).epsilon(1e-12));
  }
}

TEST_CASE("bound inputs must share the outcome mechanism") {
  Rng rng = Rng::substream(47, "test-causal-mech");
  const ScmSpec train = random_scm(rng, 2, 2, 2, 0.1);
  ScmSpec test = random_scm(rng, 2, 2, 2, 0.1);
  test.env_values = train.env_values;
  const PolicyParams p = env_only_policy(1.0, 2, 2);
  CHECK_THROWS_AS(gen_err_bound(p, train, test, 1.0), std::invalid_argument);
}

TEST_CASE("monte carlo generalization error approaches the exact value") {
  Rng rng = Rng::substream(53, "test-causal-mc");
  const ScmSpec train = random_scm(rng, 2, 3, 2, 0.2);
  ScmSpec test = train;
  test.env_prior = random_row(rng, 2, 0.2);
  test.x_given_e = {random_row(rng, 3, 0.2), random_row(rng, 3, 0.2)};
  const PolicyParams p = env_only_policy(0.8, 3, 2);
  const BoundReport exact = gen_err_bound(p, train, test, 1.0);
  const double mc = empirical_gen_err(p, train, test, 200000, 19);
  CHECK(std::abs(mc - exact.gen_err) < 0.01);
}
