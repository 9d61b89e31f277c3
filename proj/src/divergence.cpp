#include "cdpo/divergence.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace cdpo {

namespace {

std::atomic<std::uint64_t> g_kernel_evals{0};

void check_weights(const EnvSampleSet& s, const char* who) {
  if (s.values.size() != s.weights.size())
    throw std::invalid_argument(std::string(who) + ": values/weights size mismatch");
  double total = 0.0;
  for (double w : s.weights) {
    if (!(w >= 0.0) || !std::isfinite(w))
      throw std::invalid_argument(std::string(who) + ": weights must be finite and nonnegative");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument(std::string(who) + ": zero total weight");
}

Vec normalized(const Vec& w) {
  double total = 0.0;
  for (double v : w) total += v;
  Vec u(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) u[i] = w[i] / total;
  return u;
}

}  // namespace

void reset_kernel_counter() { g_kernel_evals.store(0); }
std::uint64_t kernel_eval_count() { return g_kernel_evals.load(); }

double gaussian_kernel(const Vec& z, const Vec& z2, const KernelConfig& cfg) {
  if (cfg.bandwidth <= 0.0) throw std::invalid_argument("gaussian_kernel: bandwidth must be positive");
  g_kernel_evals.fetch_add(1, std::memory_order_relaxed);
  return std::exp(-sq_dist(z, z2) / (2.0 * cfg.bandwidth * cfg.bandwidth));
}

double median_bandwidth(const std::vector<Vec>& points) {
  if (points.size() < 2) throw std::invalid_argument("median_bandwidth: need at least 2 points");
  std::vector<double> dists;
  dists.reserve(points.size() * (points.size() - 1) / 2);
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      const double d = euclid(points[i], points[j]);
      if (d > 0.0) dists.push_back(d);
    }
  if (dists.empty()) return 1.0;  // all points identical
  std::sort(dists.begin(), dists.end());
  const std::size_t n = dists.size();
  if (n % 2 == 1) return dists[n / 2];
  return 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
}

double mmd2_weighted(const EnvSampleSet& a, const EnvSampleSet& b, const KernelConfig& cfg) {
  check_weights(a, "mmd2_weighted(a)");
  check_weights(b, "mmd2_weighted(b)");
  const Vec ua = normalized(a.weights);
  const Vec ub = normalized(b.weights);
  double kaa = 0.0, kbb = 0.0, kab = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    for (std::size_t j = 0; j < a.values.size(); ++j)
      kaa += ua[i] * ua[j] * gaussian_kernel(a.values[i], a.values[j], cfg);
  for (std::size_t i = 0; i < b.values.size(); ++i)
    for (std::size_t j = 0; j < b.values.size(); ++j)
      kbb += ub[i] * ub[j] * gaussian_kernel(b.values[i], b.values[j], cfg);
  for (std::size_t i = 0; i < a.values.size(); ++i)
    for (std::size_t j = 0; j < b.values.size(); ++j)
      kab += ua[i] * ub[j] * gaussian_kernel(a.values[i], b.values[j], cfg);
  return kaa + kbb - 2.0 * kab;
}

void mmd2_value_grads(const EnvSampleSet& a, const EnvSampleSet& b, const KernelConfig& cfg,
                      std::vector<Vec>* d_a, std::vector<Vec>* d_b) {
  check_weights(a, "mmd2_value_grads(a)");
  check_weights(b, "mmd2_value_grads(b)");
  const Vec ua = normalized(a.weights);
  const Vec ub = normalized(b.weights);
  const double inv_bw2 = 1.0 / (cfg.bandwidth * cfg.bandwidth);
  const std::size_t dim = a.values.empty() ? b.values[0].size() : a.values[0].size();

  if (d_a) d_a->assign(a.values.size(), Vec(dim, 0.0));
  if (d_b) d_b->assign(b.values.size(), Vec(dim, 0.0));

  // d k(z, z') / d z = -k * (z - z') / sigma^2
  auto add_pair = [&](std::vector<Vec>* dst, std::size_t t, const Vec& zt, double coef,
                      const Vec& zo) {
    if (!dst) return;
    const double k = gaussian_kernel(zt, zo, cfg);
    for (std::size_t c = 0; c < dim; ++c)
      (*dst)[t][c] += coef * (-k * inv_bw2) * (zt[c] - zo[c]);
  };

  for (std::size_t t = 0; t < a.values.size(); ++t) {
    for (std::size_t j = 0; j < a.values.size(); ++j)
      add_pair(d_a, t, a.values[t], 2.0 * ua[t] * ua[j], a.values[j]);
    for (std::size_t j = 0; j < b.values.size(); ++j)
      add_pair(d_a, t, a.values[t], -2.0 * ua[t] * ub[j], b.values[j]);
  }
  for (std::size_t t = 0; t < b.values.size(); ++t) {
    for (std::size_t j = 0; j < b.values.size(); ++j)
      add_pair(d_b, t, b.values[t], 2.0 * ub[t] * ub[j], b.values[j]);
    for (std::size_t j = 0; j < a.values.size(); ++j)
      add_pair(d_b, t, b.values[t], -2.0 * ub[t] * ua[j], a.values[j]);
  }
}

Vec mmd2_grad(const EnvSampleSet& a, const EnvSampleSet& b, const KernelConfig& cfg,
              const std::vector<Mat>& jac_a, const std::vector<Mat>& jac_b) {
  if (jac_a.size() != a.values.size() || jac_b.size() != b.values.size())
    throw std::invalid_argument("mmd2_grad: one Jacobian per sample required");
  std::vector<Vec> da, db;
  mmd2_value_grads(a, b, cfg, &da, &db);

  std::size_t n_params = 0;
  if (!jac_a.empty() && !jac_a[0].empty()) n_params = jac_a[0][0].size();
  else if (!jac_b.empty() && !jac_b[0].empty()) n_params = jac_b[0][0].size();
  Vec g(n_params, 0.0);

  auto contract = [&](const std::vector<Vec>& dv, const std::vector<Mat>& jac) {
    for (std::size_t i = 0; i < dv.size(); ++i) {
      if (jac[i].size() != dv[i].size())
        throw std::invalid_argument("mmd2_grad: Jacobian row count != value dim");
      for (std::size_t d = 0; d < dv[i].size(); ++d) {
        if (jac[i][d].size() != n_params)
          throw std::invalid_argument("mmd2_grad: Jacobian param count mismatch");
        for (std::size_t p = 0; p < n_params; ++p) g[p] += dv[i][d] * jac[i][d][p];
      }
    }
  };
  contract(da, jac_a);
  contract(db, jac_b);
  return g;
}

double pairwise_mmd_penalty(const std::vector<EnvSampleSet>& envs, const KernelConfig& cfg) {
  double total = 0.0;
  for (std::size_t m = 0; m < envs.size(); ++m)
    for (std::size_t m2 = m + 1; m2 < envs.size(); ++m2) {
      const double v = std::max(0.0, mmd2_weighted(envs[m], envs[m2], cfg));
      total += cfg.sqrt_penalty ? std::sqrt(v) : v;
    }
  return total;
}

double batch_env_penalty(const std::vector<Vec>& values, const Mat& probs,
                         const KernelConfig& cfg, std::vector<Vec>* d_values, Mat* d_probs) {
  const std::size_t n = values.size();
  if (probs.size() != n) throw std::invalid_argument("batch_env_penalty: probs rows != values");
  if (n == 0) return 0.0;
  const std::size_t k_count = probs[0].size();
  const std::size_t dim = values[0].size();

  if (d_values) d_values->assign(n, Vec(dim, 0.0));
  if (d_probs) d_probs->assign(n, Vec(k_count, 0.0));
  if (k_count <= 1) return 0.0;  // empty pair sum

  // One shared kernel matrix per batch: exactly n^2 evaluations.
  Mat K(n, Vec(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) K[i][j] = gaussian_kernel(values[i], values[j], cfg);

  std::vector<Vec> cols(k_count, Vec(n));
  Vec mass(k_count, 0.0);
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      cols[k][i] = probs[i][k];
      mass[k] += probs[i][k];
    }
    if (mass[k] > 0.0)
      for (double& v : cols[k]) v /= mass[k];
  }

  const double inv_bw2 = 1.0 / (cfg.bandwidth * cfg.bandwidth);
  double total = 0.0;

  for (std::size_t m = 0; m < k_count; ++m) {
    for (std::size_t m2 = m + 1; m2 < k_count; ++m2) {
      if (mass[m] <= 0.0 || mass[m2] <= 0.0) continue;
      Vec delta(n);
      for (std::size_t i = 0; i < n; ++i) delta[i] = cols[m][i] - cols[m2][i];
      Vec kd(n, 0.0);  // K * delta
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) kd[i] += K[i][j] * delta[j];
      double val = 0.0;
      for (std::size_t i = 0; i < n; ++i) val += delta[i] * kd[i];
      val = std::max(0.0, val);

      double scale = 1.0;
      if (cfg.sqrt_penalty) {
        const double root = std::sqrt(val);
        total += root;
        scale = root > 1e-12 ? 0.5 / root : 0.0;  // subgradient 0 at the origin
      } else {
        total += val;
      }
      if (scale == 0.0) continue;

      if (d_values) {
        // d val / d v_t = sum_j 2 delta_t delta_j dK_tj/dv_t
        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t j = 0; j < n; ++j) {
            const double coef = scale * 2.0 * delta[t] * delta[j] * (-K[t][j] * inv_bw2);
            for (std::size_t c = 0; c < dim; ++c)
              (*d_values)[t][c] += coef * (values[t][c] - values[j][c]);
          }
      }
      if (d_probs) {
        // d val / d u_m = 2 K delta, then through the weight normalization
        double dot_m = 0.0, dot_m2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          dot_m += cols[m][i] * 2.0 * kd[i];
          dot_m2 += cols[m2][i] * 2.0 * kd[i];
        }
        for (std::size_t t = 0; t < n; ++t) {
          (*d_probs)[t][m] += scale * (2.0 * kd[t] - dot_m) / mass[m];
          (*d_probs)[t][m2] += scale * (-2.0 * kd[t] + dot_m2) / mass[m2];
        }
      }
    }
  }
  return total;
}

double tv_distance(const Vec& p, const Vec& q) {
  if (p.size() != q.size()) throw std::invalid_argument("tv_distance: length mismatch");
  double sp = 0.0, sq = 0.0;
  for (double v : p) sp += v;
  for (double v : q) sq += v;
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
    throw std::invalid_argument("tv_distance: inputs must be normalized");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

}  // namespace cdpo
