#pragma once

#include <cstdint>
#include <vector>

#include "cdpo/linalg.hpp"

namespace cdpo {

struct KernelConfig {
  enum class BandwidthRule { Fixed, MedianHeuristic };
  double bandwidth = 1.0;  // sigma of exp(-||z-z'||^2 / (2 sigma^2))
  BandwidthRule rule = BandwidthRule::Fixed;
  // Penalty form: squared MMD by default; sqrt selects the unsquared
  // distance (subgradient 0 at the origin).
  bool sqrt_penalty = false;
};

// Weighted empirical measure: sample values with nonnegative masses.
// Values are low-dimensional vectors (scalars are length-1).
struct EnvSampleSet {
  std::vector<Vec> values;
  Vec weights;
};

// Global kernel-evaluation counter for cost accounting.
void reset_kernel_counter();
std::uint64_t kernel_eval_count();

double gaussian_kernel(const Vec& z, const Vec& z2, const KernelConfig& cfg);

// Median of nonzero pairwise Euclidean distances; 1.0 for degenerate sets.
double median_bandwidth(const std::vector<Vec>& points);

// Biased (V-statistic) weighted MMD^2 with weight-normalized sums.
double mmd2_weighted(const EnvSampleSet& a, const EnvSampleSet& b, const KernelConfig& cfg);

// d MMD^2 / d value, for every sample of both sets.
void mmd2_value_grads(const EnvSampleSet& a, const EnvSampleSet& b, const KernelConfig& cfg,
                      std::vector<Vec>* d_a, std::vector<Vec>* d_b);

// Chain-rule contraction: the caller supplies d value_i / d theta as one
// matrix (value_dim x n_params) per sample; returns d MMD^2 / d theta.
Vec mmd2_grad(const EnvSampleSet& a, const EnvSampleSet& b, const KernelConfig& cfg,
              const std::vector<Mat>& jac_a, const std::vector<Mat>& jac_b);

// Sum over unordered environment pairs (MMD^2 or its sqrt per config).
double pairwise_mmd_penalty(const std::vector<EnvSampleSet>& envs, const KernelConfig& cfg);

// Fused batch form used by the training loop: one shared sample per batch
// row, environment m weighting row i by probs[i][m]. Builds a single B x B
// kernel matrix (exactly B^2 kernel evaluations) and accumulates the
// pairwise penalty plus its gradients w.r.t. the sample values and the raw
// membership weights.
double batch_env_penalty(const std::vector<Vec>& values, const Mat& probs,
                         const KernelConfig& cfg, std::vector<Vec>* d_values, Mat* d_probs);

double tv_distance(const Vec& p, const Vec& q);

}  // namespace cdpo
