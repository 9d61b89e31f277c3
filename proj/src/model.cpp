#include "cdpo/model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "cdpo/rng.hpp"

namespace cdpo {

void FeatureSpec::validate() const {
  if (env_dim < 1) throw std::invalid_argument("FeatureSpec: env_dim must be >= 1");
  if (rest_dim < 1) throw std::invalid_argument("FeatureSpec: rest_dim must be >= 1");
  if (action_count < 2) throw std::invalid_argument("FeatureSpec: action_count must be >= 2");
  if (!action_sign.empty() && static_cast<int>(action_sign.size()) != action_count)
    throw std::invalid_argument("FeatureSpec: action_sign length mismatch");
}

void FeatureSpec::fill_default_signs() {
  action_sign.assign(static_cast<std::size_t>(action_count), 1.0);
  for (int y = action_count / 2; y < action_count; ++y)
    action_sign[static_cast<std::size_t>(y)] = -1.0;
}

PolicyFamily family_from_string(const std::string& tag) {
  if (tag == "log-linear") return PolicyFamily::LogLinear;
  if (tag == "shallow-nonlinear") return PolicyFamily::ShallowNonlinear;
  throw std::invalid_argument("unknown policy family: " + tag);
}

std::string family_to_string(PolicyFamily f) {
  return f == PolicyFamily::LogLinear ? "log-linear" : "shallow-nonlinear";
}

namespace {

constexpr int kHiddenDim = 8;

void check_context(const PolicyParams& p, const Context& x) {
  if (static_cast<int>(x.env_features.size()) != p.spec.env_dim ||
      static_cast<int>(x.rest_features.size()) != p.spec.rest_dim)
    throw std::invalid_argument("context dimensions do not match feature spec");
}

void check_action(const PolicyParams& p, int y) {
  if (y < 0 || y >= p.spec.action_count)
    throw std::out_of_range("action index out of range");
}

}  // namespace

PolicyParams init_policy(const FeatureSpec& spec_in, PolicyFamily family, std::uint64_t seed) {
  FeatureSpec spec = spec_in;
  if (spec.action_sign.empty()) spec.fill_default_signs();
  spec.validate();

  PolicyParams p;
  p.spec = spec;
  p.family = family;
  // w_E starts at exactly zero so any growth is attributable to training.
  p.w_E.assign(static_cast<std::size_t>(spec.env_dim), 0.0);
  p.w_rest.resize(static_cast<std::size_t>(spec.rest_dim));
  p.b = 0.0;

  Rng rng = Rng::substream(seed, "init-policy");
  for (double& w : p.w_rest) w = 0.01 * rng.normal();

  if (family == PolicyFamily::ShallowNonlinear) {
    const int input_dim = spec.env_dim + spec.rest_dim;
    const double hs = 1.0 / std::sqrt(static_cast<double>(input_dim));
    p.hidden.assign(kHiddenDim, Vec(static_cast<std::size_t>(input_dim)));
    for (auto& row : p.hidden)
      for (double& w : row) w = hs * rng.normal();
    const double os = 1.0 / std::sqrt(static_cast<double>(kHiddenDim));
    p.head.assign(static_cast<std::size_t>(spec.action_count), Vec(kHiddenDim));
    for (auto& row : p.head)
      for (double& w : row) w = os * rng.normal();
  }
  return p;
}

Vec hidden_repr(const PolicyParams& p, const Context& x) {
  check_context(p, x);
  if (p.family == PolicyFamily::LogLinear) {
    Vec h;
    h.reserve(x.env_features.size() + x.rest_features.size());
    h.insert(h.end(), x.env_features.begin(), x.env_features.end());
    h.insert(h.end(), x.rest_features.begin(), x.rest_features.end());
    return h;
  }
  Vec u;
  u.reserve(x.env_features.size() + x.rest_features.size());
  u.insert(u.end(), x.env_features.begin(), x.env_features.end());
  u.insert(u.end(), x.rest_features.begin(), x.rest_features.end());
  Vec h = matvec(p.hidden, u);
  for (double& v : h) v = std::tanh(v);
  return h;
}

Vec action_scores(const PolicyParams& p, const Context& x) {
  check_context(p, x);
  const int A = p.spec.action_count;
  Vec s(static_cast<std::size_t>(A), p.b);
  if (p.family == PolicyFamily::LogLinear) {
    const double env_dot = dot(p.w_E, x.env_features);
    for (int y = 0; y < A; ++y) {
      const std::size_t j = static_cast<std::size_t>(y % p.spec.rest_dim);
      s[static_cast<std::size_t>(y)] += p.spec.action_sign[static_cast<std::size_t>(y)] * env_dot +
                                        p.w_rest[j] * x.rest_features[j];
    }
    return s;
  }
  const Vec h = hidden_repr(p, x);
  for (int y = 0; y < A; ++y)
    s[static_cast<std::size_t>(y)] += dot(p.head[static_cast<std::size_t>(y)], h);
  return s;
}

Vec log_prob_all(const PolicyParams& p, const Context& x) {
  Vec s = action_scores(p, x);
  const double m = *std::max_element(s.begin(), s.end());
  double z = 0.0;
  for (double v : s) z += std::exp(v - m);
  const double lse = m + std::log(z);
  for (double& v : s) v -= lse;
  return s;
}

double log_prob(const PolicyParams& p, const Context& x, int y) {
  check_action(p, y);
  return log_prob_all(p, x)[static_cast<std::size_t>(y)];
}

PolicyGrad zero_grad(const PolicyParams& p) {
  PolicyGrad g;
  g.w_E.assign(p.w_E.size(), 0.0);
  g.w_rest.assign(p.w_rest.size(), 0.0);
  g.b = 0.0;
  if (p.family == PolicyFamily::ShallowNonlinear) {
    g.hidden.assign(p.hidden.size(), Vec(p.hidden.empty() ? 0 : p.hidden[0].size(), 0.0));
    g.head.assign(p.head.size(), Vec(p.head.empty() ? 0 : p.head[0].size(), 0.0));
  }
  return g;
}

PolicyGrad log_prob_grad(const PolicyParams& p, const Context& x, int y) {
  check_action(p, y);
  const Vec lp = log_prob_all(p, x);
  const int A = p.spec.action_count;
  Vec probs(static_cast<std::size_t>(A));
  for (int a = 0; a < A; ++a) probs[static_cast<std::size_t>(a)] = std::exp(lp[static_cast<std::size_t>(a)]);

  PolicyGrad g = zero_grad(p);
  // b shifts every score equally, so the log-softmax gradient is exactly 0.
  g.b = 0.0;

  if (p.family == PolicyFamily::LogLinear) {
    double mean_sign = 0.0;
    for (int a = 0; a < A; ++a) mean_sign += probs[static_cast<std::size_t>(a)] * p.spec.action_sign[static_cast<std::size_t>(a)];
    const double sign_term = p.spec.action_sign[static_cast<std::size_t>(y)] - mean_sign;
    for (int d = 0; d < p.spec.env_dim; ++d)
      g.w_E[static_cast<std::size_t>(d)] = sign_term * x.env_features[static_cast<std::size_t>(d)];

    Vec coord_mass(p.w_rest.size(), 0.0);
    for (int a = 0; a < A; ++a) coord_mass[static_cast<std::size_t>(a % p.spec.rest_dim)] += probs[static_cast<std::size_t>(a)];
    const std::size_t jy = static_cast<std::size_t>(y % p.spec.rest_dim);
    for (std::size_t j = 0; j < p.w_rest.size(); ++j) {
      const double indicator = (j == jy) ? 1.0 : 0.0;
      g.w_rest[j] = x.rest_features[j] * (indicator - coord_mass[j]);
    }
    return g;
  }

  // Shallow-nonlinear backprop. scores = head * h + b, h = tanh(hidden * u).
  Vec u;
  u.reserve(x.env_features.size() + x.rest_features.size());
  u.insert(u.end(), x.env_features.begin(), x.env_features.end());
  u.insert(u.end(), x.rest_features.begin(), x.rest_features.end());
  const Vec h = hidden_repr(p, x);

  for (int a = 0; a < A; ++a) {
    const double coef = ((a == y) ? 1.0 : 0.0) - probs[static_cast<std::size_t>(a)];
    for (std::size_t k = 0; k < h.size(); ++k)
      g.head[static_cast<std::size_t>(a)][k] = coef * h[k];
  }
  for (std::size_t r = 0; r < h.size(); ++r) {
    double gh = p.head[static_cast<std::size_t>(y)][r];
    for (int a = 0; a < A; ++a) gh -= probs[static_cast<std::size_t>(a)] * p.head[static_cast<std::size_t>(a)][r];
    const double pre = gh * (1.0 - h[r] * h[r]);
    for (std::size_t c = 0; c < u.size(); ++c) g.hidden[r][c] = pre * u[c];
  }
  return g;
}

ReferencePolicy freeze_reference(const PolicyParams& p) { return ReferencePolicy{p}; }

std::size_t param_count(const PolicyParams& p) {
  std::size_t n = p.w_E.size() + p.w_rest.size() + 1;
  for (const auto& row : p.hidden) n += row.size();
  for (const auto& row : p.head) n += row.size();
  return n;
}

namespace {

template <typename Params, typename Fn>
auto visit_param(Params& p, std::size_t i, Fn&& fn) {
  if (i < p.w_E.size()) return fn(p.w_E[i]);
  i -= p.w_E.size();
  if (i < p.w_rest.size()) return fn(p.w_rest[i]);
  i -= p.w_rest.size();
  if (i == 0) return fn(p.b);
  i -= 1;
  for (auto& row : p.hidden) {
    if (i < row.size()) return fn(row[i]);
    i -= row.size();
  }
  for (auto& row : p.head) {
    if (i < row.size()) return fn(row[i]);
    i -= row.size();
  }
  throw std::out_of_range("parameter index out of range");
}

}  // namespace

double get_param(const PolicyParams& p, std::size_t i) {
  return visit_param(p, i, [](const double& v) { return v; });
}

void set_param(PolicyParams& p, std::size_t i, double v) {
  visit_param(p, i, [v](double& slot) { slot = v; });
}

Vec grad_to_vec(const PolicyGrad& g) {
  Vec out;
  out.reserve(g.w_E.size() + g.w_rest.size() + 1);
  out.insert(out.end(), g.w_E.begin(), g.w_E.end());
  out.insert(out.end(), g.w_rest.begin(), g.w_rest.end());
  out.push_back(g.b);
  for (const auto& row : g.hidden) out.insert(out.end(), row.begin(), row.end());
  for (const auto& row : g.head) out.insert(out.end(), row.begin(), row.end());
  return out;
}

void grad_axpy(PolicyGrad& acc, double scale, const PolicyGrad& g) {
  for (std::size_t i = 0; i < acc.w_E.size(); ++i) acc.w_E[i] += scale * g.w_E[i];
  for (std::size_t i = 0; i < acc.w_rest.size(); ++i) acc.w_rest[i] += scale * g.w_rest[i];
  acc.b += scale * g.b;
  for (std::size_t r = 0; r < acc.hidden.size(); ++r)
    for (std::size_t c = 0; c < acc.hidden[r].size(); ++c) acc.hidden[r][c] += scale * g.hidden[r][c];
  for (std::size_t r = 0; r < acc.head.size(); ++r)
    for (std::size_t c = 0; c < acc.head[r].size(); ++c) acc.head[r][c] += scale * g.head[r][c];
}

void apply_update(PolicyParams& p, double eta, const PolicyGrad& g) {
  for (std::size_t i = 0; i < p.w_E.size(); ++i) p.w_E[i] -= eta * g.w_E[i];
  for (std::size_t i = 0; i < p.w_rest.size(); ++i) p.w_rest[i] -= eta * g.w_rest[i];
  p.b -= eta * g.b;
  for (std::size_t r = 0; r < p.hidden.size(); ++r)
    for (std::size_t c = 0; c < p.hidden[r].size(); ++c) p.hidden[r][c] -= eta * g.hidden[r][c];
  for (std::size_t r = 0; r < p.head.size(); ++r)
    for (std::size_t c = 0; c < p.head[r].size(); ++c) p.head[r][c] -= eta * g.head[r][c];
}

std::string to_json_string(const PolicyParams& p) {
  nlohmann::json j;
  j["family"] = family_to_string(p.family);
  j["spec"] = {{"env_dim", p.spec.env_dim},
               {"rest_dim", p.spec.rest_dim},
               {"action_count", p.spec.action_count},
               {"action_sign", p.spec.action_sign}};
  j["w_E"] = p.w_E;
  j["w_rest"] = p.w_rest;
  j["b"] = p.b;
  j["hidden"] = p.hidden;
  j["head"] = p.head;
  return j.dump(2);
}

PolicyParams policy_from_json_string(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  PolicyParams p;
  p.family = family_from_string(j.at("family").get<std::string>());
  const auto& s = j.at("spec");
  p.spec.env_dim = s.at("env_dim").get<int>();
  p.spec.rest_dim = s.at("rest_dim").get<int>();
  p.spec.action_count = s.at("action_count").get<int>();
  p.spec.action_sign = s.at("action_sign").get<Vec>();
  p.spec.validate();
  p.w_E = j.at("w_E").get<Vec>();
  p.w_rest = j.at("w_rest").get<Vec>();
  p.b = j.at("b").get<double>();
  p.hidden = j.at("hidden").get<Mat>();
  p.head = j.at("head").get<Mat>();
  return p;
}

}  // namespace cdpo
