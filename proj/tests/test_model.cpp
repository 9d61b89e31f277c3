#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cdpo/model.hpp"
#include "cdpo/rng.hpp"

using namespace cdpo;

namespace {

PolicyParams random_policy(const FeatureSpec& spec, PolicyFamily family, std::uint64_t seed) {
  PolicyParams p = init_policy(spec, family, seed);
  Rng rng = Rng::substream(seed, "test-policy-jitter");
  for (std::size_t i = 0; i < param_count(p); ++i)
    set_param(p, i, get_param(p, i) + 0.3 * rng.normal());
  return p;
}

Context random_context(const FeatureSpec& spec, Rng& rng) {
  Context x;
  for (int d = 0; d < spec.env_dim; ++d) x.env_features.push_back(rng.normal());
  for (int d = 0; d < spec.rest_dim; ++d) x.rest_features.push_back(rng.normal());
  return x;
}

}  // namespace

TEST_CASE("log-linear log probability matches the closed form") {
  // Scores (1, 0, 0, 0): log p(0) = 1 - ln(e + 3).
  FeatureSpec spec;
  spec.env_dim = 1;
  spec.rest_dim = 1;
  spec.action_count = 4;
  spec.action_sign = {1.0, 0.0, 0.0, 0.0};
  PolicyParams p;
  p.spec = spec;
  p.w_E = {1.0};
  p.w_rest = {0.0};
  Context x;
  x.env_features = {1.0};
  x.rest_features = {0.0};
  CHECK(log_prob(p, x, 0) == doctest::Approx(-0.743668380628679).epsilon(1e-13));

  // All-equal scores: uniform over 4 actions.
  p.w_E = {0.0};
  CHECK(log_prob(p, x, 2) == doctest::Approx(-1.3862943611198906).epsilon(1e-13));
}

TEST_CASE("two-action softmax equals the logistic value") {
  FeatureSpec spec;
  spec.env_dim = 1;
  spec.rest_dim = 1;
  spec.action_count = 2;
  spec.action_sign = {0.0, -1.0};
  PolicyParams p;
  p.spec = spec;
  p.w_E = {1.0};
  p.w_rest = {0.0};
  Context x;
  x.env_features = {1.0};
  x.rest_features = {0.0};
  // Scores (0, -1): p = softmax = (sigma(1), 1 - sigma(1)).
  CHECK(std::exp(log_prob(p, x, 0)) == doctest::Approx(0.7310585786300049).epsilon(1e-13));
  CHECK(std::exp(log_prob(p, x, 1)) == doctest::Approx(0.2689414213699951).epsilon(1e-13));
}

TEST_CASE("log probabilities normalize") {
  Rng rng = Rng::substream(5, "test-model-norm");
  FeatureSpec spec;
  spec.env_dim = 2;
  spec.rest_dim = 3;
  spec.action_count = 7;
  spec.fill_default_signs();
  for (PolicyFamily family : {PolicyFamily::LogLinear, PolicyFamily::ShallowNonlinear}) {
    PolicyParams p = random_policy(spec, family, 11);
    for (int rep = 0; rep < 10; ++rep) {
      const Context x = random_context(spec, rng);
      const Vec lp = log_prob_all(p, x);
      double mass = 0.0;
      for (double v : lp) mass += std::exp(v);
      CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("bias gradient is exactly zero") {
  Rng rng = Rng::substream(6, "test-model-bias");
  FeatureSpec spec;
  spec.env_dim = 1;
  spec.rest_dim = 4;
  spec.action_count = 6;
  spec.fill_default_signs();
  for (PolicyFamily family : {PolicyFamily::LogLinear, PolicyFamily::ShallowNonlinear}) {
    PolicyParams p = random_policy(spec, family, 21);
    for (int rep = 0; rep < 5; ++rep) {
      const Context x = random_context(spec, rng);
      CHECK(log_prob_grad(p, x, rep % spec.action_count).b == 0.0);
    }
  }
}

TEST_CASE("log probability gradients match finite differences") {
  Rng rng = Rng::substream(7, "test-model-fd");
  FeatureSpec spec;
  spec.env_dim = 2;
  spec.rest_dim = 3;
  spec.action_count = 5;
  spec.fill_default_signs();
  const double h = 1e-5;
  for (PolicyFamily family : {PolicyFamily::LogLinear, PolicyFamily::ShallowNonlinear}) {
    for (int probe = 0; probe < 20; ++probe) {
      PolicyParams p = random_policy(spec, family, 100 + static_cast<std::uint64_t>(probe));
      const Context x = random_context(spec, rng);
      const int y = static_cast<int>(rng.index(spec.action_count));
      const Vec g = grad_to_vec(log_prob_grad(p, x, y));
      const std::size_t i = static_cast<std::size_t>(rng.index(static_cast<std::int64_t>(param_count(p))));
      const double v0 = get_param(p, i);
      set_param(p, i, v0 + h);
      const double up = log_prob(p, x, y);
      set_param(p, i, v0 - h);
      const double dn = log_prob(p, x, y);
      set_param(p, i, v0);
      const double fd = (up - dn) / (2.0 * h);
      CHECK(std::abs(g[i] - fd) / std::max({1e-3, std::abs(fd), std::abs(g[i])}) <= 1e-4);
    }
  }
}

TEST_CASE("shallow nonlinear scores follow head * tanh(hidden * u) + b") {
  FeatureSpec spec;
  spec.env_dim = 1;
  spec.rest_dim = 1;
  spec.action_count = 2;
  spec.action_sign = {1.0, -1.0};
  PolicyParams p;
  p.spec = spec;
  p.family = PolicyFamily::ShallowNonlinear;
  p.w_E = {0.0};
  p.w_rest = {0.0};
  p.b = 0.25;
  p.hidden = {{1.0, 0.0}};
  p.head = {{1.0}, {-1.0}};
  Context x;
  x.env_features = {0.5};
  x.rest_features = {0.3};
  const Vec s = action_scores(p, x);
  CHECK(s[0] == doctest::Approx(std::tanh(0.5) + 0.25).epsilon(1e-14));
  CHECK(s[1] == doctest::Approx(-std::tanh(0.5) + 0.25).epsilon(1e-14));
}

TEST_CASE("flat parameter view round-trips") {
  FeatureSpec spec;
  spec.env_dim = 2;
  spec.rest_dim = 2;
  spec.action_count = 4;
  spec.fill_default_signs();
  PolicyParams p = init_policy(spec, PolicyFamily::ShallowNonlinear, 3);
  const std::size_t n = param_count(p);
  CHECK(n > 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = get_param(p, i);
    set_param(p, i, v + 1.0);
    CHECK(get_param(p, i) == v + 1.0);
    set_param(p, i, v);
  }
}

TEST_CASE("policy initialization is seed-deterministic") {
  FeatureSpec spec;
  spec.env_dim = 1;
  spec.rest_dim = 3;
  spec.action_count = 3;
  spec.fill_default_signs();
  const PolicyParams a = init_policy(spec, PolicyFamily::LogLinear, 42);
  const PolicyParams b = init_policy(spec, PolicyFamily::LogLinear, 42);
  const PolicyParams c = init_policy(spec, PolicyFamily::LogLinear, 43);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < param_count(a); ++i) {
    same = same && get_param(a, i) == get_param(b, i);
    differs = differs || get_param(a, i) != get_param(c, i);
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("policy JSON round-trip is exact") {
  FeatureSpec spec;
  spec.env_dim = 2;
  spec.rest_dim = 3;
  spec.action_count = 4;
  spec.fill_default_signs();
  for (PolicyFamily family : {PolicyFamily::LogLinear, PolicyFamily::ShallowNonlinear}) {
    const PolicyParams p = random_policy(spec, family, 77);
    const PolicyParams q = policy_from_json_string(to_json_string(p));
    REQUIRE(param_count(q) == param_count(p));
    for (std::size_t i = 0; i < param_count(p); ++i) CHECK(get_param(q, i) == get_param(p, i));
    CHECK(q.family == p.family);
    CHECK(q.spec.action_sign == p.spec.action_sign);
  }
}

TEST_CASE("frozen reference is a deep copy") {
  FeatureSpec spec;
  spec.env_dim = 1;
  spec.rest_dim = 2;
  spec.action_count = 2;
  spec.fill_default_signs();
  PolicyParams p = init_policy(spec, PolicyFamily::LogLinear, 9);
  const ReferencePolicy ref = freeze_reference(p);
  const double before = ref.params.w_E[0];
  p.w_E[0] += 5.0;
  CHECK(ref.params.w_E[0] == before);
}
