#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "doctest.h"
#include "dear/hdbscan.hpp"
#include "support/oracles.hpp"

using namespace dear;

namespace {

// Unit vectors jittered around the given centers; returns points and the planted labels.
std::pair<std::vector<double>, std::vector<int>> blobs(std::mt19937_64& rng, const std::vector<std::vector<double>>& centers,
                                                       const std::vector<std::size_t>& sizes, double jitter) {
  std::vector<double> pts;
  std::vector<int> labels;
  std::normal_distribution<double> n(0.0, jitter);
  for (std::size_t c = 0; c < centers.size(); ++c)
    for (std::size_t i = 0; i < sizes[c]; ++i) {
      std::vector<double> v = centers[c];
      double norm = 0.0;
      for (auto& x : v) {
        x += n(rng);
        norm += x * x;
      }
      for (auto& x : v) pts.push_back(x / std::sqrt(norm));
      labels.push_back(static_cast<int>(c));
    }
  return {pts, labels};
}

double prim_mst_weight(const std::vector<double>& w, std::size_t n) {
  std::vector<bool> in(n, false);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  best[0] = 0.0;
  double total = 0.0;
  for (std::size_t it = 0; it < n; ++it) {
    std::size_t u = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!in[i] && (u == n || best[i] < best[u])) u = i;
    in[u] = true;
    total += best[u];
    for (std::size_t v = 0; v < n; ++v)
      if (!in[v]) best[v] = std::min(best[v], w[u * n + v]);
  }
  return total;
}

}  // namespace

TEST_SUITE("hdbscan") {

TEST_CASE("two planted blobs are recovered") {
  std::mt19937_64 rng(1);
  auto [pts, truth] = blobs(rng, {{1, 0, 0, 0}, {0, 0, 1, 0}}, {30, 20}, 0.1);
  const std::size_t n = truth.size();
  auto dist = hdbscan::cosine_distance_matrix(pts, n, 4);
  auto r = hdbscan::cluster(dist, n, {5, 5});
  CHECK(r.n_clusters == 2);
  CHECK(oracle::adjusted_rand_index(r.labels, truth) >= 0.9);
  // larger cluster gets id 0
  CHECK(r.labels[0] == 0);
  CHECK(r.labels[n - 1] == 1);
  // deterministic
  auto r2 = hdbscan::cluster(dist, n, {5, 5});
  CHECK(r.labels == r2.labels);
}

TEST_CASE("ties in cluster size order by lowest member index") {
  std::mt19937_64 rng(2);
  auto [pts, truth] = blobs(rng, {{0, 1, 0}, {1, 0, 0}}, {12, 12}, 0.05);
  auto dist = hdbscan::cosine_distance_matrix(pts, truth.size(), 3);
  auto r = hdbscan::cluster(dist, truth.size(), {5, 5});
  REQUIRE(r.n_clusters == 2);
  CHECK(r.labels.front() == 0);
  CHECK(r.labels.back() == 1);
}

TEST_CASE("a single tight group forms one cluster because the root is eligible") {
  std::mt19937_64 rng(3);
  auto [pts, truth] = blobs(rng, {{1, 1, 0}}, {15}, 0.05);
  auto dist = hdbscan::cosine_distance_matrix(pts, 15, 3);
  auto r = hdbscan::cluster(dist, 15, {5, 5});
  CHECK(r.n_clusters == 1);
  CHECK(std::count(r.labels.begin(), r.labels.end(), 0) >= 14);
}

TEST_CASE("a distant outlier is noise") {
  std::mt19937_64 rng(4);
  auto [pts, truth] = blobs(rng, {{1, 0, 0}, {0, 1, 0}}, {15, 15}, 0.05);
  pts.insert(pts.end(), {0.0, 0.0, 1.0});
  auto dist = hdbscan::cosine_distance_matrix(pts, 31, 3);
  auto r = hdbscan::cluster(dist, 31, {5, 5});
  CHECK(r.labels[30] == -1);
}

TEST_CASE("core distances and the spanning tree match brute force") {
  std::mt19937_64 rng(5);
  const std::size_t n = 25, ms = 4;
  auto raw = oracle::random_vector(rng, n * 6);
  std::vector<double> pts;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += raw[i * 6 + j] * raw[i * 6 + j];
    for (std::size_t j = 0; j < 6; ++j) pts.push_back(raw[i * 6 + j] / std::sqrt(s));
  }
  auto dist = hdbscan::cosine_distance_matrix(pts, n, 6);
  auto core = hdbscan::core_distances(dist, n, ms);
  std::vector<double> mreach(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(dist.begin() + i * n, dist.begin() + (i + 1) * n);
    std::sort(row.begin(), row.end());
    CHECK(core[i] == row[ms - 1]);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mreach[i * n + j] = std::max({core[i], core[j], dist[i * n + j]});
  auto mst = hdbscan::mutual_reachability_mst(dist, core, n);
  CHECK(mst.size() == n - 1);
  double total = 0.0;
  for (const auto& e : mst) total += e.weight;
  CHECK(total == doctest::Approx(prim_mst_weight(mreach, n)).epsilon(1e-12));
}

}  // TEST_SUITE
