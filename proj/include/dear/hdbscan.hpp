#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace dear::hdbscan {

struct Params {
  std::size_t min_cluster_size = 5;
  std::size_t min_samples = 5;  // neighbourhood size for core distance, counting the point itself
};

struct MstEdge {
  std::size_t a;
  std::size_t b;
  double weight;
};

struct Result {
  /// Cluster id per point, -1 for noise. Ids are ordered by cluster size
  /// (descending) and then by lowest member index.
  std::vector<int> labels;
  std::size_t n_clusters = 0;
  std::vector<MstEdge> mst;
};

/// Cosine distance 1 - cos over rows of a row-major [n x dim] matrix of unit vectors.
std::vector<double> cosine_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim);

/// Distance to the min_samples-th nearest point (the point itself counts as the first).
std::vector<double> core_distances(std::span<const double> dist, std::size_t n, std::size_t min_samples);

/// Kruskal over mutual-reachability distances; ties go to the lower (a, b) pair.
std::vector<MstEdge> mutual_reachability_mst(std::span<const double> dist, std::span<const double> core,
                                             std::size_t n);

/// Full pipeline on a precomputed symmetric [n x n] distance matrix:
/// mutual reachability, MST, single-linkage hierarchy, condensed tree with
/// min_cluster_size, excess-of-mass selection. The root is eligible, so data
/// without any split large enough forms one cluster.
Result cluster(std::span<const double> dist, std::size_t n, const Params& params);

}  // namespace dear::hdbscan
