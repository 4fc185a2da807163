#include "dear/hdbscan.hpp"

#include <algorithm>
#include <numeric>
#include <tuple>

#include "dear/errors.hpp"

namespace dear::hdbscan {

namespace {

constexpr double kDistanceFloor = 1e-12;

class DisjointSet {
 public:
  explicit DisjointSet(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  // Attaches both roots under `id` (which must already exist).
  void link(std::size_t a, std::size_t b, std::size_t id) {
    parent_[a] = id;
    parent_[b] = id;
  }
  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (a < b) std::swap(a, b);
    parent_[a] = b;
    return true;
  }

 private:
  std::vector<std::size_t> parent_;
};

struct Merge {
  std::size_t left;
  std::size_t right;
  double distance;
  std::size_t size;
};

// Condensed-tree record: `child` is a point (< n) or a cluster label (>= n).
struct CondensedEdge {
  std::size_t parent;
  std::size_t child;
  double lambda;
  std::size_t size;
};

double to_lambda(double d) { return 1.0 / std::max(d, kDistanceFloor); }

}  // namespace

std::vector<double> cosine_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double c = 0.0;
      for (std::size_t k = 0; k < dim; ++k) c += points[i * dim + k] * points[j * dim + k];
      const double v = std::max(0.0, 1.0 - c);
      d[i * n + j] = v;
      d[j * n + i] = v;
    }
  }
  return d;
}

std::vector<double> core_distances(std::span<const double> dist, std::size_t n, std::size_t min_samples) {
  std::vector<double> core(n, 0.0);
  if (n == 0) return core;
  const std::size_t k = std::min(std::max<std::size_t>(min_samples, 1), n) - 1;
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(dist.begin() + static_cast<std::ptrdiff_t>(i * n), n, row.begin());
    row[i] = 0.0;
    std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end());
    core[i] = row[k];
  }
  return core;
}

std::vector<MstEdge> mutual_reachability_mst(std::span<const double> dist, std::span<const double> core,
                                             std::size_t n) {
  std::vector<MstEdge> edges;
  edges.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      edges.push_back({i, j, std::max({core[i], core[j], dist[i * n + j]})});
  std::sort(edges.begin(), edges.end(), [](const MstEdge& x, const MstEdge& y) {
    return std::tie(x.weight, x.a, x.b) < std::tie(y.weight, y.a, y.b);
  });
  DisjointSet ds(n);
  std::vector<MstEdge> mst;
  mst.reserve(n ? n - 1 : 0);
  for (const auto& e : edges) {
    if (ds.unite(e.a, e.b)) mst.push_back(e);
    if (mst.size() + 1 == n) break;
  }
  return mst;
}

Result cluster(std::span<const double> dist, std::size_t n, const Params& params) {
  if (params.min_cluster_size < 2) throw ConfigError("hdbscan: min_cluster_size must be >= 2");
  if (n < params.min_cluster_size)
    throw InsufficientDataError("hdbscan: " + std::to_string(n) + " points, min_cluster_size " +
                                std::to_string(params.min_cluster_size));
  if (dist.size() != n * n) throw ShapeError("hdbscan: distance matrix size mismatch");

  Result result;
  const auto core = core_distances(dist, n, params.min_samples);
  result.mst = mutual_reachability_mst(dist, core, n);

  // Single-linkage hierarchy: node n + i is the i-th merge.
  std::vector<Merge> merges;
  merges.reserve(n - 1);
  {
    DisjointSet ds(2 * n - 1);
    std::vector<std::size_t> sizes(2 * n - 1, 1);
    for (std::size_t i = 0; i < result.mst.size(); ++i) {
      const auto& e = result.mst[i];
      const std::size_t ra = ds.find(e.a), rb = ds.find(e.b);
      const std::size_t id = n + i;
      sizes[id] = sizes[ra] + sizes[rb];
      merges.push_back({std::min(ra, rb), std::max(ra, rb), e.weight, sizes[id]});
      ds.link(ra, rb, id);
    }
  }
  auto node_size = [&](std::size_t node) { return node < n ? std::size_t{1} : merges[node - n].size; };
  auto leaves_of = [&](std::size_t node, std::vector<std::size_t>& out) {
    std::vector<std::size_t> stack{node};
    while (!stack.empty()) {
      const std::size_t x = stack.back();
      stack.pop_back();
      if (x < n) {
        out.push_back(x);
      } else {
        stack.push_back(merges[x - n].right);
        stack.push_back(merges[x - n].left);
      }
    }
  };

  // Condensed tree. Cluster labels start at n; label n is the root.
  std::vector<CondensedEdge> condensed;
  std::vector<double> birth{0.0};
  std::vector<std::size_t> cluster_parent{n};  // root's parent is itself (sentinel)
  const std::size_t root_node = n == 1 ? 0 : 2 * n - 2;
  std::vector<std::size_t> label_of(2 * n - 1, 0);
  label_of[root_node] = n;
  std::vector<std::size_t> queue{root_node};
  std::vector<std::size_t> fallen;
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const std::size_t node = queue[qi];
    const std::size_t c = label_of[node];
    if (node < n) {
      condensed.push_back({c, node, birth[c - n], 1});
      continue;
    }
    const Merge& m = merges[node - n];
    const double lambda = to_lambda(m.distance);
    const std::size_t sl = node_size(m.left), sr = node_size(m.right);
    const bool big_l = sl >= params.min_cluster_size, big_r = sr >= params.min_cluster_size;
    if (big_l && big_r) {
      for (std::size_t child : {m.left, m.right}) {
        const std::size_t label = n + birth.size();
        birth.push_back(lambda);
        cluster_parent.push_back(c);
        label_of[child] = label;
        condensed.push_back({c, label, lambda, node_size(child)});
        queue.push_back(child);
      }
      continue;
    }
    for (auto [child, big] : {std::pair{m.left, big_l}, std::pair{m.right, big_r}}) {
      if (big) {
        label_of[child] = c;
        queue.push_back(child);
      } else {
        fallen.clear();
        leaves_of(child, fallen);
        for (std::size_t p : fallen) condensed.push_back({c, p, lambda, 1});
      }
    }
  }

  // Stability and excess-of-mass selection (children are labelled after parents).
  const std::size_t n_clusters = birth.size();
  std::vector<double> stability(n_clusters, 0.0);
  std::vector<std::vector<std::size_t>> children(n_clusters);
  for (const auto& e : condensed) {
    const std::size_t pc = e.parent - n;
    stability[pc] += (e.lambda - birth[pc]) * static_cast<double>(e.size);
    if (e.child >= n) children[pc].push_back(e.child - n);
  }
  std::vector<bool> selected(n_clusters, false);
  std::vector<double> subtree(n_clusters, 0.0);
  for (std::size_t i = n_clusters; i-- > 0;) {
    if (children[i].empty()) {
      selected[i] = true;
      subtree[i] = stability[i];
      continue;
    }
    double child_sum = 0.0;
    for (std::size_t ch : children[i]) child_sum += subtree[ch];
    if (stability[i] >= child_sum) {
      selected[i] = true;
      subtree[i] = stability[i];
      std::vector<std::size_t> stack(children[i].begin(), children[i].end());
      while (!stack.empty()) {
        const std::size_t x = stack.back();
        stack.pop_back();
        selected[x] = false;
        stack.insert(stack.end(), children[x].begin(), children[x].end());
      }
    } else {
      subtree[i] = child_sum;
    }
  }

  // Label each point by the selected ancestor of the cluster it left.
  std::vector<long> raw(n, -1);
  for (const auto& e : condensed) {
    if (e.child >= n) continue;
    std::size_t c = e.parent - n;
    while (true) {
      if (selected[c]) {
        raw[e.child] = static_cast<long>(c);
        break;
      }
      if (c == 0) break;
      c = cluster_parent[c] - n;
    }
  }

  struct Summary {
    long id;
    std::size_t size;
    std::size_t first;
  };
  std::vector<Summary> summaries;
  for (std::size_t i = 0; i < n_clusters; ++i) {
    if (!selected[i]) continue;
    Summary s{static_cast<long>(i), 0, n};
    for (std::size_t p = 0; p < n; ++p) {
      if (raw[p] == static_cast<long>(i)) {
        ++s.size;
        s.first = std::min(s.first, p);
      }
    }
    if (s.size > 0) summaries.push_back(s);
  }
  std::sort(summaries.begin(), summaries.end(), [](const Summary& x, const Summary& y) {
    return std::tie(y.size, x.first) < std::tie(x.size, y.first);
  });
  result.labels.assign(n, -1);
  for (std::size_t rank = 0; rank < summaries.size(); ++rank)
    for (std::size_t p = 0; p < n; ++p)
      if (raw[p] == summaries[rank].id) result.labels[p] = static_cast<int>(rank);
  result.n_clusters = summaries.size();
  return result;
}

}  // namespace dear::hdbscan
