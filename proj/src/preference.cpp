#include "cdpo/preference.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace cdpo {

double reward(const PolicyParams& policy, const ReferencePolicy& ref, const Context& x, int y,
              double beta) {
  if (beta <= 0.0) throw std::invalid_argument("reward: beta must be positive");
  return beta * (log_prob(policy, x, y) - log_prob(ref.params, x, y));
}

namespace {

double reward_margin(const PolicyParams& policy, const ReferencePolicy& ref,
                     const PreferenceTriple& t, double beta) {
  const Vec lp = log_prob_all(policy, t.x);
  const Vec lr = log_prob_all(ref.params, t.x);
  const std::size_t w = static_cast<std::size_t>(t.y_w);
  const std::size_t l = static_cast<std::size_t>(t.y_l);
  if (t.y_w == t.y_l) throw std::invalid_argument("preference triple with y_w == y_l");
  if (t.y_w < 0 || t.y_l < 0 || w >= lp.size() || l >= lp.size())
    throw std::out_of_range("preference triple action out of range");
  return beta * ((lp[w] - lr[w]) - (lp[l] - lr[l]));
}

}  // namespace

double dpo_loss(const std::vector<PreferenceTriple>& batch, const PolicyParams& policy,
                const ReferencePolicy& ref, double beta) {
  if (batch.empty()) throw std::invalid_argument("dpo_loss: empty batch");
  double acc = 0.0;
  for (const auto& t : batch) {
    // -log sigmoid(dr) = softplus(-dr), exact in both tails.
    acc += softplus(-reward_margin(policy, ref, t, beta));
  }
  return acc / static_cast<double>(batch.size());
}

PolicyGrad dpo_grad(const std::vector<PreferenceTriple>& batch, const PolicyParams& policy,
                    const ReferencePolicy& ref, double beta) {
  if (batch.empty()) throw std::invalid_argument("dpo_grad: empty batch");
  PolicyGrad g = zero_grad(policy);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& t : batch) {
    const double dr = reward_margin(policy, ref, t, beta);
    const double weight = logistic(-dr);  // 1 - sigmoid(dr)
    const PolicyGrad gw = log_prob_grad(policy, t.x, t.y_w);
    const PolicyGrad gl = log_prob_grad(policy, t.x, t.y_l);
    grad_axpy(g, -beta * weight * inv_n, gw);
    grad_axpy(g, beta * weight * inv_n, gl);
  }
  return g;
}

double preference_accuracy(const std::vector<PreferenceTriple>& batch,
                           const PolicyParams& policy) {
  if (batch.empty()) throw std::invalid_argument("preference_accuracy: empty batch");
  std::size_t hits = 0;
  for (const auto& t : batch) {
    const Vec lp = log_prob_all(policy, t.x);
    if (lp[static_cast<std::size_t>(t.y_w)] > lp[static_cast<std::size_t>(t.y_l)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(batch.size());
}

std::vector<PreferenceTriple> load_triples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open triple file: " + path);
  std::vector<PreferenceTriple> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    PreferenceTriple t;
    t.x.env_features = j.at("env_features").get<Vec>();
    t.x.rest_features = j.at("rest_features").get<Vec>();
    t.y_w = j.at("y_w").get<int>();
    t.y_l = j.at("y_l").get<int>();
    if (j.contains("env_label")) t.env_label = j.at("env_label").get<int>();
    if (j.contains("ts")) t.ts = j.at("ts").get<double>();
    out.push_back(std::move(t));
  }
  return out;
}

void save_triples(const std::string& path, const std::vector<PreferenceTriple>& triples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write triple file: " + path);
  for (const auto& t : triples) {
    nlohmann::json j;
    j["env_features"] = t.x.env_features;
    j["rest_features"] = t.x.rest_features;
    j["y_w"] = t.y_w;
    j["y_l"] = t.y_l;
    if (t.env_label >= 0) j["env_label"] = t.env_label;
    j["ts"] = t.ts;
    out << j.dump() << "\n";
  }
}

}  // namespace cdpo
