#pragma once

#include <string>
#include <vector>

#include "cdpo/model.hpp"

namespace cdpo {

struct PreferenceTriple {
  Context x;
  int y_w = 0;
  int y_l = 1;
  int env_label = -1;  // optional ground truth, evaluation only
  double ts = 0.0;     // optional timestamp carried from the interaction log
};

struct DpoConfig {
  double beta = 2.0;
};

double reward(const PolicyParams& policy, const ReferencePolicy& ref, const Context& x, int y,
              double beta);

double dpo_loss(const std::vector<PreferenceTriple>& batch, const PolicyParams& policy,
                const ReferencePolicy& ref, double beta);

PolicyGrad dpo_grad(const std::vector<PreferenceTriple>& batch, const PolicyParams& policy,
                    const ReferencePolicy& ref, double beta);

// Fraction of triples with log pi(y_w|x) strictly greater than log pi(y_l|x);
// ties count as failures.
double preference_accuracy(const std::vector<PreferenceTriple>& batch, const PolicyParams& policy);

// JSON Lines IO: one object per triple with fields
// {env_features, rest_features, y_w, y_l, env_label?, ts?}.
std::vector<PreferenceTriple> load_triples(const std::string& path);
void save_triples(const std::string& path, const std::vector<PreferenceTriple>& triples);

}  // namespace cdpo
