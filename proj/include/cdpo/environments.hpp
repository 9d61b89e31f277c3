#pragma once

#include <vector>

#include "cdpo/linalg.hpp"

namespace cdpo {

// z = W_g h + b_g, projecting policy hidden states down to the clustering
// space (d' < d).
struct ExtractorParams {
  Mat W_g;  // d' x d
  Vec b_g;  // d'

  void validate(std::size_t input_dim) const;
};

struct DbscanConfig {
  double eps = 0.5;
  int min_pts = 4;
};

constexpr int kNoiseLabel = -1;

struct SoftAssignment {
  Mat probs;                    // B x K, row-stochastic
  Mat centers;                  // K x d'
  std::vector<char> noise_mask; // per sample, 1 if DBSCAN labeled it noise
};

struct EnvPrior {
  Vec p_hat;
};

Vec extract(const ExtractorParams& g, const Vec& h);

// Density clustering with Euclidean distance and a fixed scan order; labels
// are 0..K-1 or kNoiseLabel.
std::vector<int> dbscan(const std::vector<Vec>& points, const DbscanConfig& cfg);

// Arithmetic mean per cluster, noise excluded. Throws if every point is
// noise.
Mat centers(const std::vector<Vec>& points, const std::vector<int>& labels);

// Softmax over negative Euclidean distances to the centers; `scale`
// multiplies the distances before the softmax (1.0 = raw distances).
SoftAssignment soft_assign(const std::vector<Vec>& points, const Mat& ctrs, double scale = 1.0);

// Weighted batch mean for cluster k: sum_i p_ik x_i / sum_i p_ik.
Vec aggregate(const Mat& batch_vectors, const SoftAssignment& assignment, int k);

// Column means of the soft assignment.
EnvPrior env_prior(const SoftAssignment& assignment);

}  // namespace cdpo
