#pragma once

#include <cstdint>
#include <string>

#include "cdpo/linalg.hpp"

namespace cdpo {

// Feature geometry of a policy. Action y sees two feature blocks:
//   f_E(y, x)    = action_sign[y] * x.env_features          (env_dim)
//   f_rest(y, x) = x.rest_features masked to coordinate y % rest_dim
// so the log-linear score is
//   s(y) = w_E . f_E(y,x) + w_rest[y % rest_dim] * rest[y % rest_dim] + b.
struct FeatureSpec {
  int env_dim = 1;
  int rest_dim = 1;
  int action_count = 2;
  // Per-action sign applied to the environment block. Defaults to +1 for
  // the first half of the action set and -1 for the second half.
  Vec action_sign;

  void validate() const;
  void fill_default_signs();
};

struct Context {
  Vec env_features;
  Vec rest_features;
};

enum class PolicyFamily { LogLinear, ShallowNonlinear };

PolicyFamily family_from_string(const std::string& tag);
std::string family_to_string(PolicyFamily f);

struct PolicyParams {
  FeatureSpec spec;
  PolicyFamily family = PolicyFamily::LogLinear;
  Vec w_E;     // env_dim
  Vec w_rest;  // rest_dim
  double b = 0.0;
  // Shallow-nonlinear family only: scores = head * tanh(hidden * u) + b
  // with u = concat(env_features, rest_features).
  Mat hidden;  // hidden_dim x (env_dim + rest_dim)
  Mat head;    // action_count x hidden_dim
};

struct ReferencePolicy {
  PolicyParams params;  // deep copy, never mutated after freeze
};

// Gradient container mirroring PolicyParams layout.
struct PolicyGrad {
  Vec w_E;
  Vec w_rest;
  double b = 0.0;
  Mat hidden;
  Mat head;
};

PolicyParams init_policy(const FeatureSpec& spec, PolicyFamily family, std::uint64_t seed);

Vec action_scores(const PolicyParams& p, const Context& x);
Vec log_prob_all(const PolicyParams& p, const Context& x);  // log-softmax over actions
double log_prob(const PolicyParams& p, const Context& x, int y);
PolicyGrad log_prob_grad(const PolicyParams& p, const Context& x, int y);

Vec hidden_repr(const PolicyParams& p, const Context& x);

ReferencePolicy freeze_reference(const PolicyParams& p);

// Flat parameter view shared by the finite-difference checks and the
// gradient-descent update. Order: w_E, w_rest, b, hidden row-major,
// head row-major.
std::size_t param_count(const PolicyParams& p);
double get_param(const PolicyParams& p, std::size_t i);
void set_param(PolicyParams& p, std::size_t i, double v);

PolicyGrad zero_grad(const PolicyParams& p);
Vec grad_to_vec(const PolicyGrad& g);
// acc += scale * g
void grad_axpy(PolicyGrad& acc, double scale, const PolicyGrad& g);
// p -= eta * g
void apply_update(PolicyParams& p, double eta, const PolicyGrad& g);

std::string to_json_string(const PolicyParams& p);
PolicyParams policy_from_json_string(const std::string& text);

}  // namespace cdpo
