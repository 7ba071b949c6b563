#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "matpipe/common.hpp"
#include "matpipe/quant.hpp"

namespace matpipe {

// Binary feature-threshold tree. Internal nodes test one feature against a
// full-precision threshold (left iff value <= threshold); leaves carry a
// dense fuzzy index and the centroid of the training points routed there.
struct ClusterNode {
  int feature = -1;       // internal only
  double threshold = 0.0; // internal only
  int left = -1, right = -1;
  int leaf_index = -1;    // >= 0 iff leaf
  Vec centroid;           // leaf only
  bool is_leaf() const { return leaf_index >= 0; }
};

struct ClusterTree {
  int dim = 0;
  int depth = 0;          // configured depth bound
  int root = 0;
  std::vector<ClusterNode> nodes;
  int leaf_count = 0;

  const ClusterNode& leaf(int index) const {
    for (const auto& n : nodes)
      if (n.leaf_index == index) return n;
    throw Error("cluster", "no leaf with index " + std::to_string(index));
  }
};

struct ClusterFitConfig {
  int depth = 4;
  int min_leaf_size = 1;
};

struct SplitResult {
  int feature = -1;
  double threshold = 0.0;
  double sse = 0.0;
};

namespace detail {

inline double sse_of(const std::vector<const Vec*>& pts) {
  if (pts.empty()) return 0.0;
  size_t d = pts[0]->size();
  Vec mean(d, 0.0);
  for (const Vec* p : pts)
    for (size_t i = 0; i < d; ++i) mean[i] += (*p)[i];
  for (auto& v : mean) v /= double(pts.size());
  double s = 0.0;
  for (const Vec* p : pts)
    for (size_t i = 0; i < d; ++i) {
      double dlt = (*p)[i] - mean[i];
      s += dlt * dlt;
    }
  return s;
}

}  // namespace detail

// Finds the (feature, threshold) minimizing SSE(left)+SSE(right) over every
// feature and every midpoint of consecutive sorted unique values. Ties break
// to the lowest feature index, then the lowest threshold. Returns nullopt
// when all points are identical (no split exists).
inline std::optional<SplitResult> best_split(const std::vector<const Vec*>& pts) {
  if (pts.size() < 2) return std::nullopt;
  size_t d = pts[0]->size();
  std::optional<SplitResult> best;
  for (size_t f = 0; f < d; ++f) {
    std::vector<const Vec*> sorted(pts);  // stable order from the input order
    std::stable_sort(sorted.begin(), sorted.end(),
                     [f](const Vec* a, const Vec* b) { return (*a)[f] < (*b)[f]; });
    for (size_t i = 0; i + 1 < sorted.size(); ++i) {
      double a = (*sorted[i])[f], b = (*sorted[i + 1])[f];
      if (a == b) continue;
      double thr = a + (b - a) / 2.0;
      std::vector<const Vec*> left(sorted.begin(), sorted.begin() + i + 1);
      std::vector<const Vec*> right(sorted.begin() + i + 1, sorted.end());
      double sse = detail::sse_of(left) + detail::sse_of(right);
      if (!best || sse < best->sse)
        best = SplitResult{int(f), thr, sse};
    }
  }
  return best;
}

namespace detail {

inline Vec mean_of(const std::vector<const Vec*>& pts) {
  Vec m(pts[0]->size(), 0.0);
  for (const Vec* p : pts)
    for (size_t i = 0; i < m.size(); ++i) m[i] += (*p)[i];
  for (auto& v : m) v /= double(pts.size());
  return m;
}

inline int fit_node(ClusterTree& t, const std::vector<const Vec*>& pts,
                    int depth_left, const ClusterFitConfig& cfg) {
  bool stop = depth_left == 0 || int(pts.size()) < 2 * cfg.min_leaf_size;
  std::optional<SplitResult> split;
  if (!stop) {
    split = best_split(pts);
    if (!split) stop = true;  // all identical
  }
  int id = int(t.nodes.size());
  t.nodes.emplace_back();
  if (stop) {
    t.nodes[id].leaf_index = 0;  // renumbered after the build
    t.nodes[id].centroid = mean_of(pts);
    return id;
  }
  std::vector<const Vec*> left, right;
  for (const Vec* p : pts)
    ((*p)[split->feature] <= split->threshold ? left : right).push_back(p);
  t.nodes[id].feature = split->feature;
  t.nodes[id].threshold = split->threshold;
  t.nodes[id].left = fit_node(t, left, depth_left - 1, cfg);
  t.nodes[id].right = fit_node(t, right, depth_left - 1, cfg);
  return id;
}

inline void number_leaves(ClusterTree& t, int id, int& next) {
  auto& n = t.nodes[id];
  if (n.is_leaf()) {
    n.leaf_index = next++;
    return;
  }
  number_leaves(t, n.left, next);
  number_leaves(t, n.right, next);
}

}  // namespace detail

// Greedy recursive fit to the configured depth. Degenerate clusters
// (identical points, or below 2*min_leaf_size) become leaves early. Leaves
// are numbered left-to-right; centroids are per-leaf means.
inline ClusterTree fit_tree(const Mat& points, const ClusterFitConfig& cfg) {
  if (points.empty()) throw Error("cluster", "empty point set");
  if (cfg.depth < 1) throw Error("cluster", "depth must be >= 1");
  ClusterTree t;
  t.dim = int(points[0].size());
  t.depth = cfg.depth;
  std::vector<const Vec*> pts;
  pts.reserve(points.size());
  for (const auto& p : points) pts.push_back(&p);
  t.root = detail::fit_node(t, pts, cfg.depth, cfg);
  int next = 0;
  detail::number_leaves(t, t.root, next);
  t.leaf_count = next;
  return t;
}

// Routes a segment vector to its leaf: left iff value <= threshold.
inline std::pair<int, const Vec*> fuzzy_index(const ClusterTree& t, const Vec& v) {
  if (int(v.size()) != t.dim) throw Error("cluster", "segment dim mismatch");
  int id = t.root;
  while (!t.nodes[id].is_leaf())
    id = v[t.nodes[id].feature] <= t.nodes[id].threshold ? t.nodes[id].left
                                                         : t.nodes[id].right;
  return {t.nodes[id].leaf_index, &t.nodes[id].centroid};
}

// How a stored fixed-point feature maps onto the unsigned table key grid:
// key = (raw >> shift) + offset, clamped to [0, 2^width - 1]. offset is 0
// when the feature range is non-negative and 2^(width-1) otherwise, so
// unsigned key order always equals numeric order. Grid point k covers the
// half-open value cell starting at value_of_key(k).
struct KeyGrid {
  int width = 8;
  int shift = 0;
  int64_t offset = 0;
  QuantSpec storage;  // PHV fixed-point format of the feature

  int64_t grid_max() const { return (int64_t(1) << width) - 1; }

  int64_t key_of_raw(int64_t raw) const {
    return std::clamp<int64_t>((raw >> shift) + offset, 0, grid_max());
  }
  double value_of_key(int64_t key) const {
    return dequantize((key - offset) << shift, storage);
  }
  // Largest key whose entire cell sits at or below the threshold: floor
  // snapping. -1 means no key (the left side is empty on this grid).
  int64_t snap_threshold(double threshold) const {
    double scaled = std::floor(threshold * std::ldexp(1.0, storage.frac));
    int64_t raw;
    if (scaled >= double(storage.raw_max())) raw = storage.raw_max();
    else if (scaled < double(storage.raw_min())) raw = storage.raw_min() - 1;
    else raw = int64_t(scaled);
    int64_t cut = (raw >> shift) + offset;
    if (cut < 0) return -1;
    return std::min(cut, grid_max());
  }

  // Grid sized from the observed raw range: the smallest shift whose grid
  // covers [raw_lo, raw_hi], with an unsigned layout when the range allows.
  static KeyGrid fit(int width, const QuantSpec& storage, int64_t raw_lo,
                     int64_t raw_hi) {
    KeyGrid g;
    g.width = width;
    g.storage = storage;
    if (raw_lo >= 0) {
      g.offset = 0;
      while ((raw_hi >> g.shift) > g.grid_max()) ++g.shift;
    } else {
      g.offset = int64_t(1) << (width - 1);
      while ((raw_hi >> g.shift) + g.offset > g.grid_max() ||
             (raw_lo >> g.shift) + g.offset < 0)
        ++g.shift;
    }
    return g;
  }
};

struct LeafRegion {
  int index = 0;
  // inclusive per-feature intervals on the biased key grid; empty() when the
  // region contains no grid point
  std::vector<std::pair<int64_t, int64_t>> box;
  bool empty() const {
    for (auto& [lo, hi] : box)
      if (lo > hi) return true;
    return false;
  }
};

namespace detail {

inline void collect_regions(const ClusterTree& t, int id,
                            std::vector<std::pair<int64_t, int64_t>>& box,
                            const std::vector<KeyGrid>& grids,
                            std::vector<LeafRegion>& out) {
  const auto& n = t.nodes[id];
  if (n.is_leaf()) {
    out.push_back({n.leaf_index, box});
    return;
  }
  int f = n.feature;
  int64_t cut = grids[f].snap_threshold(n.threshold);
  auto saved = box[f];
  box[f] = {saved.first, std::min(saved.second, cut)};
  collect_regions(t, n.left, box, grids, out);
  box[f] = {std::max(saved.first, cut + 1), saved.second};
  collect_regions(t, n.right, box, grids, out);
  box[f] = saved;
}

}  // namespace detail

// Axis-aligned box per leaf over the quantized key grid. The boxes tile the
// full grid exactly: every grid point lies in exactly one box.
inline std::vector<LeafRegion> leaf_regions(const ClusterTree& t,
                                            const std::vector<KeyGrid>& grids) {
  if (int(grids.size()) != t.dim) throw Error("cluster", "grid dim mismatch");
  std::vector<std::pair<int64_t, int64_t>> box(t.dim);
  for (int f = 0; f < t.dim; ++f) box[f] = {0, grids[f].grid_max()};
  std::vector<LeafRegion> out;
  detail::collect_regions(t, t.root, box, grids, out);
  std::sort(out.begin(), out.end(),
            [](const LeafRegion& a, const LeafRegion& b) { return a.index < b.index; });
  return out;
}

// Lloyd-style refit: re-routes points through the fixed thresholds and
// recomputes each leaf centroid as the mean of its assigned points. Leaves
// that receive no points keep their previous centroid.
inline ClusterTree refine_centroids(const ClusterTree& t, const Mat& points) {
  if (points.empty()) throw Error("cluster", "empty point set");
  ClusterTree out = t;
  std::vector<Vec> sums(t.leaf_count, Vec(t.dim, 0.0));
  std::vector<int> counts(t.leaf_count, 0);
  for (const auto& p : points) {
    auto [idx, c] = fuzzy_index(t, p);
    (void)c;
    for (int i = 0; i < t.dim; ++i) sums[idx][i] += p[i];
    counts[idx]++;
  }
  for (auto& n : out.nodes) {
    if (!n.is_leaf()) continue;
    int idx = n.leaf_index;
    if (counts[idx] == 0) continue;
    for (int i = 0; i < t.dim; ++i) n.centroid[i] = sums[idx][i] / counts[idx];
  }
  return out;
}

inline double tree_total_sse(const ClusterTree& t, const Mat& points) {
  double s = 0.0;
  for (const auto& p : points) {
    auto [idx, c] = fuzzy_index(t, p);
    (void)idx;
    for (size_t i = 0; i < p.size(); ++i) {
      double d = p[i] - (*c)[i];
      s += d * d;
    }
  }
  return s;
}

// ---- JSON ----

namespace detail {

inline nlohmann::json tree_node_json(const ClusterTree& t, int id) {
  const auto& n = t.nodes[id];
  if (n.is_leaf())
    return {{"index", n.leaf_index}, {"centroid", n.centroid}};
  return {{"feature", n.feature},
          {"threshold", n.threshold},
          {"left", tree_node_json(t, n.left)},
          {"right", tree_node_json(t, n.right)}};
}

inline int tree_node_from_json(ClusterTree& t, const nlohmann::json& j) {
  int id = int(t.nodes.size());
  t.nodes.emplace_back();
  if (j.contains("index")) {
    t.nodes[id].leaf_index = j.at("index");
    t.nodes[id].centroid = j.at("centroid").get<Vec>();
    t.leaf_count = std::max(t.leaf_count, int(t.nodes[id].leaf_index) + 1);
  } else {
    t.nodes[id].feature = j.at("feature");
    t.nodes[id].threshold = j.at("threshold");
    int l = tree_node_from_json(t, j.at("left"));
    int r = tree_node_from_json(t, j.at("right"));
    t.nodes[id].left = l;
    t.nodes[id].right = r;
  }
  return id;
}

}  // namespace detail

inline nlohmann::json tree_to_json(const ClusterTree& t) {
  return {{"dim", t.dim}, {"depth", t.depth},
          {"root", detail::tree_node_json(t, t.root)}};
}

inline ClusterTree tree_from_json(const nlohmann::json& j) {
  ClusterTree t;
  t.dim = j.at("dim");
  t.depth = j.at("depth");
  t.leaf_count = 0;
  t.root = detail::tree_node_from_json(t, j.at("root"));
  return t;
}

}  // namespace matpipe
