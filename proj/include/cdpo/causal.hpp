#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdpo/environments.hpp"
#include "cdpo/linalg.hpp"
#include "cdpo/model.hpp"

namespace cdpo {

// Finite tabular structural causal model: E -> X, X -> Y, E -> Y.
struct ScmSpec {
  Vec env_values;                        // numeric realizations of E
  Vec env_prior;                         // p(E)
  Mat x_given_e;                         // [e][x]
  std::vector<Mat> y_given_xe;           // [e][x][y]

  int env_count() const { return static_cast<int>(env_values.size()); }
  int x_count() const { return x_given_e.empty() ? 0 : static_cast<int>(x_given_e[0].size()); }
  int y_count() const;
  void validate() const;  // every row sums to 1 +- 1e-9

  std::string to_json_string() const;
  static ScmSpec from_json_string(const std::string& text);
};

struct ScmSample {
  int e = 0;  // index into env_values
  int x = 0;
  int y = 0;
};

struct AmplificationConfig {
  double eta = 0.05;
  int steps = 500;
  double beta = 2.0;
  double bias_strength = 0.9;  // 0 = no env/preference coupling, 1 = maximal
  std::uint64_t seed = 0;
};

struct AmplificationStep {
  int step = 0;
  double w_E = 0.0;
  double delta_E = 0.0;  // w_E drift from the start
  double loss = 0.0;
  double mean_sigma = 0.0;  // mean sigmoid of the reward margin
};

struct AmplificationResult {
  std::vector<AmplificationStep> trajectory;
  double predicted_slope = 0.0;  // eta * beta * mean[f_E(y_w) - f_E(y_l)]
  double measured_slope = 0.0;   // (w_E(10) - w_E(0)) / 10
};

struct BoundReport {
  double gen_err = 0.0;
  double bound_value = 0.0;  // 2 C |w_E| E[TV]
  double C = 0.0;
  double tv_mean = 0.0;
};

std::vector<ScmSample> scm_sample(const ScmSpec& spec, std::size_t n, std::uint64_t seed);
// Same, but with the environment prior replaced (e.g. a point mass).
std::vector<ScmSample> scm_sample(const ScmSpec& spec, std::size_t n, const Vec& env_override,
                                  std::uint64_t seed);

// Ground truth p(Y | do(X=x)) by direct summation over the true prior.
Vec interventional_enum(const ScmSpec& spec, int x);

// Backdoor estimator from a per-environment conditional table and an
// environment prior: sum_k prior_k * table[k][x].
Vec backdoor_estimate(const std::vector<Mat>& y_given_xe_hat, const EnvPrior& prior, int x);

// Estimate (tables, prior) from samples by frequency counting; Laplace-free,
// rows with no observations become uniform.
void estimate_tables(const std::vector<ScmSample>& data, int env_count, int x_count, int y_count,
                     std::vector<Mat>* y_given_xe_hat, EnvPrior* prior);

AmplificationResult run_amplification(const AmplificationConfig& cfg);

// Monte Carlo GenErr: E_{p_test(x)} | E_test[w_E f_E | x] - E_train[w_E f_E | x] |
// with the inner conditional expectations computed exactly from the tables.
double empirical_gen_err(const PolicyParams& policy, const ScmSpec& spec_train,
                         const ScmSpec& spec_test, std::size_t n, std::uint64_t seed);

// Both sides of the TV generalization bound by exact enumeration. C must
// dominate |f_E| over the grid (checked).
BoundReport gen_err_bound(const PolicyParams& policy, const ScmSpec& spec_train,
                          const ScmSpec& spec_test, double C);

}  // namespace cdpo
