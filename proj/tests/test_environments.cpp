#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "cdpo/environments.hpp"
#include "cdpo/rng.hpp"

using namespace cdpo;

namespace {

std::vector<Vec> two_blobs(int per_blob, double spread, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "test-env-blobs");
  std::vector<Vec> pts;
  for (int i = 0; i < per_blob; ++i)
    pts.push_back({spread * rng.uniform(-1.0, 1.0), spread * rng.uniform(-1.0, 1.0)});
  for (int i = 0; i < per_blob; ++i)
    pts.push_back({10.0 + spread * rng.uniform(-1.0, 1.0), 10.0 + spread * rng.uniform(-1.0, 1.0)});
  return pts;
}

}  // namespace

TEST_CASE("extract applies the affine projection") {
  ExtractorParams g;
  g.W_g = {{2.0, 0.0, 1.0}, {0.0, -1.0, 0.0}};
  g.b_g = {0.5, 0.0};
  const Vec z = extract(g, {1.0, 3.0, -2.0});
  REQUIRE(z.size() == 2);
  CHECK(z[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(z[1] == doctest::Approx(-3.0).epsilon(1e-15));
}

TEST_CASE("two separated blobs give two clusters and no noise") {
  const std::vector<Vec> pts = two_blobs(10, 0.5, 4);
  const std::vector<int> labels = dbscan(pts, DbscanConfig{1.5, 4});
  REQUIRE(labels.size() == pts.size());
  std::set<int> distinct(labels.begin(), labels.end());
  CHECK(distinct == std::set<int>{0, 1});
  // Blob membership must agree with the construction.
  for (int i = 1; i < 10; ++i) CHECK(labels[static_cast<std::size_t>(i)] == labels[0]);
  for (int i = 11; i < 20; ++i) CHECK(labels[static_cast<std::size_t>(i)] == labels[10]);
  CHECK(labels[0] != labels[10]);
}

TEST_CASE("an isolated point is labeled noise") {
  std::vector<Vec> pts = two_blobs(10, 0.25, 5);
  pts.push_back({100.0, -100.0});
  const std::vector<int> labels = dbscan(pts, DbscanConfig{1.5, 4});
  CHECK(labels.back() == kNoiseLabel);
}

TEST_CASE("sparse points all become noise") {
  const std::vector<Vec> pts{{0.0, 0.0}, {50.0, 0.0}, {0.0, 50.0}};
  const std::vector<int> labels = dbscan(pts, DbscanConfig{1.0, 2});
  for (int l : labels) CHECK(l == kNoiseLabel);
}

TEST_CASE("centers are per-cluster means with noise excluded") {
  const std::vector<Vec> pts{{0.0, 0.0}, {2.0, 0.0}, {10.0, 10.0}, {12.0, 10.0}, {99.0, 99.0}};
  const std::vector<int> labels{0, 0, 1, 1, kNoiseLabel};
  const Mat c = centers(pts, labels);
  REQUIRE(c.size() == 2);
  CHECK(c[0] == Vec{1.0, 0.0});
  CHECK(c[1] == Vec{11.0, 10.0});
}

TEST_CASE("equidistant points receive exactly uniform rows") {
  const Mat ctrs{{0.0, 0.0}, {2.0, 0.0}};
  const std::vector<Vec> pts{{1.0, 0.0}, {1.0, 5.0}, {1.0, -3.0}};
  const SoftAssignment a = soft_assign(pts, ctrs);
  for (const Vec& row : a.probs) {
    CHECK(row[0] == 0.5);
    CHECK(row[1] == 0.5);
  }
}

TEST_CASE("assignment rows are stochastic and favor the near center") {
  Rng rng = Rng::substream(12, "test-env-rows");
  const Mat ctrs{{0.0, 0.0}, {4.0, 0.0}, {0.0, 4.0}};
  std::vector<Vec> pts;
  for (int i = 0; i < 40; ++i) pts.push_back({rng.uniform(-6.0, 6.0), rng.uniform(-6.0, 6.0)});
  const SoftAssignment a = soft_assign(pts, ctrs);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double sum = 0.0;
    for (double v : a.probs[i]) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
  // A point sitting on a center takes its largest mass there.
  const SoftAssignment on_center = soft_assign({{4.0, 0.0}}, ctrs);
  CHECK(on_center.probs[0][1] > on_center.probs[0][0]);
  CHECK(on_center.probs[0][1] > on_center.probs[0][2]);
}

TEST_CASE("distance scale sharpens the assignment") {
  const Mat ctrs{{0.0, 0.0}, {3.0, 0.0}};
  const std::vector<Vec> pts{{1.0, 0.0}};
  const double soft = soft_assign(pts, ctrs, 1.0).probs[0][0];
  const double sharp = soft_assign(pts, ctrs, 4.0).probs[0][0];
  CHECK(soft > 0.5);
  CHECK(sharp > soft);
}

TEST_CASE("aggregate is the membership-weighted mean") {
  Mat batch{{1.0, 0.0}, {3.0, 0.0}, {0.0, 8.0}};
  SoftAssignment a;
  a.probs = {{1.0, 0.0}, {0.5, 0.5}, {0.0, 1.0}};
  const Vec m0 = aggregate(batch, a, 0);
  // (1*row0 + 0.5*row1) / 1.5
  CHECK(m0[0] == doctest::Approx(2.5 / 1.5).epsilon(1e-14));
  CHECK(m0[1] == doctest::Approx(0.0).epsilon(1e-14));
  const Vec m1 = aggregate(batch, a, 1);
  CHECK(m1[0] == doctest::Approx(1.5 / 1.5).epsilon(1e-14));
  CHECK(m1[1] == doctest::Approx(8.0 / 1.5).epsilon(1e-14));
}

TEST_CASE("environment prior is the column mean") {
  SoftAssignment a;
  a.probs = {{1.0, 0.0}, {0.5, 0.5}};
  const EnvPrior p = env_prior(a);
  REQUIRE(p.p_hat.size() == 2);
  CHECK(p.p_hat[0] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(p.p_hat[1] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("dbscan is deterministic") {
  const std::vector<Vec> pts = two_blobs(12, 0.5, 9);
  const DbscanConfig cfg{1.5, 4};
  CHECK(dbscan(pts, cfg) == dbscan(pts, cfg));
}
