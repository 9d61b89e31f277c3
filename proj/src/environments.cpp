#include "cdpo/environments.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>

namespace cdpo {

void ExtractorParams::validate(std::size_t input_dim) const {
  if (W_g.empty()) throw std::invalid_argument("extractor: empty W_g");
  if (W_g.size() >= input_dim)
    throw std::invalid_argument("extractor: output dim must be smaller than input dim");
  for (const auto& row : W_g)
    if (row.size() != input_dim) throw std::invalid_argument("extractor: W_g column mismatch");
  if (b_g.size() != W_g.size()) throw std::invalid_argument("extractor: b_g length mismatch");
}

Vec extract(const ExtractorParams& g, const Vec& h) {
  Vec z = matvec(g.W_g, h);
  if (g.b_g.size() != z.size()) throw std::invalid_argument("extract: b_g length mismatch");
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += g.b_g[i];
  return z;
}

std::vector<int> dbscan(const std::vector<Vec>& points, const DbscanConfig& cfg) {
  if (points.empty()) throw std::invalid_argument("dbscan: no points");
  if (cfg.eps <= 0.0) throw std::invalid_argument("dbscan: eps must be positive");
  if (cfg.min_pts < 1) throw std::invalid_argument("dbscan: min_pts must be >= 1");

  const std::size_t n = points.size();
  const double eps2 = cfg.eps * cfg.eps;
  auto region = [&](std::size_t i) {
    std::vector<std::size_t> nb;
    for (std::size_t j = 0; j < n; ++j)
      if (sq_dist(points[i], points[j]) <= eps2) nb.push_back(j);  // includes i itself
    return nb;
  };

  std::vector<int> labels(n, kNoiseLabel);
  std::vector<char> visited(n, 0);
  int next_cluster = 0;

  for (std::size_t i = 0; i < n; ++i) {
    if (visited[i]) continue;
    visited[i] = 1;
    auto nb = region(i);
    if (nb.size() < static_cast<std::size_t>(cfg.min_pts)) continue;  // provisional noise

    const int cid = next_cluster++;
    labels[i] = cid;
    std::deque<std::size_t> frontier(nb.begin(), nb.end());
    while (!frontier.empty()) {
      const std::size_t q = frontier.front();
      frontier.pop_front();
      if (labels[q] == kNoiseLabel) labels[q] = cid;  // border point adoption
      if (visited[q]) continue;
      visited[q] = 1;
      labels[q] = cid;
      auto qn = region(q);
      if (qn.size() >= static_cast<std::size_t>(cfg.min_pts))
        frontier.insert(frontier.end(), qn.begin(), qn.end());
    }
  }
  return labels;
}

Mat centers(const std::vector<Vec>& points, const std::vector<int>& labels) {
  if (points.size() != labels.size()) throw std::invalid_argument("centers: size mismatch");
  int k_max = -1;
  for (int l : labels) k_max = std::max(k_max, l);
  if (k_max < 0) throw std::runtime_error("centers: every point is noise, no clusters");

  const std::size_t d = points.empty() ? 0 : points[0].size();
  Mat ctrs(static_cast<std::size_t>(k_max + 1), Vec(d, 0.0));
  std::vector<std::size_t> counts(static_cast<std::size_t>(k_max + 1), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (labels[i] == kNoiseLabel) continue;
    const std::size_t k = static_cast<std::size_t>(labels[i]);
    ++counts[k];
    for (std::size_t c = 0; c < d; ++c) ctrs[k][c] += points[i][c];
  }
  for (std::size_t k = 0; k < ctrs.size(); ++k) {
    if (counts[k] == 0) throw std::runtime_error("centers: empty cluster id");
    for (double& v : ctrs[k]) v /= static_cast<double>(counts[k]);
  }
  return ctrs;
}

SoftAssignment soft_assign(const std::vector<Vec>& points, const Mat& ctrs, double scale) {
  if (ctrs.empty()) throw std::invalid_argument("soft_assign: no centers");
  SoftAssignment out;
  out.centers = ctrs;
  out.noise_mask.assign(points.size(), 0);
  out.probs.assign(points.size(), Vec(ctrs.size(), 0.0));
  for (std::size_t i = 0; i < points.size(); ++i) {
    Vec neg(ctrs.size());
    double m = -1e300;
    for (std::size_t k = 0; k < ctrs.size(); ++k) {
      neg[k] = -scale * euclid(points[i], ctrs[k]);
      m = std::max(m, neg[k]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < ctrs.size(); ++k) {
      out.probs[i][k] = std::exp(neg[k] - m);
      z += out.probs[i][k];
    }
    for (double& v : out.probs[i]) v /= z;
  }
  return out;
}

Vec aggregate(const Mat& batch_vectors, const SoftAssignment& assignment, int k) {
  if (batch_vectors.size() != assignment.probs.size())
    throw std::invalid_argument("aggregate: batch/assignment size mismatch");
  if (k < 0 || assignment.probs.empty() ||
      static_cast<std::size_t>(k) >= assignment.probs[0].size())
    throw std::out_of_range("aggregate: cluster index out of range");
  const std::size_t d = batch_vectors.empty() ? 0 : batch_vectors[0].size();
  Vec num(d, 0.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < batch_vectors.size(); ++i) {
    const double w = assignment.probs[i][static_cast<std::size_t>(k)];
    mass += w;
    for (std::size_t c = 0; c < d; ++c) num[c] += w * batch_vectors[i][c];
  }
  if (mass <= 0.0) throw std::runtime_error("aggregate: zero total mass for cluster");
  for (double& v : num) v /= mass;
  return num;
}

EnvPrior env_prior(const SoftAssignment& assignment) {
  if (assignment.probs.empty()) throw std::invalid_argument("env_prior: empty batch");
  const std::size_t k_count = assignment.probs[0].size();
  EnvPrior prior;
  prior.p_hat.assign(k_count, 0.0);
  for (const auto& row : assignment.probs)
    for (std::size_t k = 0; k < k_count; ++k) prior.p_hat[k] += row[k];
  for (double& v : prior.p_hat) v /= static_cast<double>(assignment.probs.size());
  return prior;
}

}  // namespace cdpo
