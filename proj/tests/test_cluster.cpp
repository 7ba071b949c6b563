#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "helpers.hpp"
#include "matpipe/cluster.hpp"

using namespace matpipe;
using namespace testutil;

namespace {

std::vector<const Vec*> ptrs(const Mat& pts) {
  std::vector<const Vec*> out;
  for (const auto& p : pts) out.push_back(&p);
  return out;
}

// Exhaustive oracle: every (feature, midpoint) candidate, textbook SSE.
std::optional<SplitResult> brute_split(const Mat& pts) {
  if (pts.size() < 2) return std::nullopt;
  size_t d = pts[0].size();
  std::optional<SplitResult> best;
  for (size_t f = 0; f < d; ++f) {
    std::vector<const Vec*> sorted = ptrs(pts);
    std::stable_sort(sorted.begin(), sorted.end(),
                     [f](const Vec* a, const Vec* b) { return (*a)[f] < (*b)[f]; });
    for (size_t i = 0; i + 1 < sorted.size(); ++i) {
      double a = (*sorted[i])[f], b = (*sorted[i + 1])[f];
      if (a == b) continue;
      double thr = a + (b - a) / 2.0;
      std::vector<const Vec*> left(sorted.begin(), sorted.begin() + i + 1);
      std::vector<const Vec*> right(sorted.begin() + i + 1, sorted.end());
      double sse = detail::sse_of(left) + detail::sse_of(right);
      if (!best || sse < best->sse) best = SplitResult{int(f), thr, sse};
    }
  }
  return best;
}

// The worked clustering example: two tight clusters separated on x1, with
// the x1 gap midpoint at exactly 5.
Mat figure_clusters() {
  return {{1, 2}, {2, 1}, {2, 3}, {3, 2}, {1, 7}, {2, 8}, {2, 9}, {3, 8}};
}

ClusterTree two_level_tree() {
  // root: x1 <= 5 ? ... : (x0 <= 3 ? leaf2 : leaf3); left side splits x0 at 3
  ClusterTree t;
  t.dim = 2;
  t.depth = 2;
  t.nodes.resize(7);
  t.nodes[0] = {1, 5.0, 1, 4, -1, {}};
  t.nodes[1] = {0, 3.0, 2, 3, -1, {}};
  t.nodes[2] = {-1, 0, -1, -1, 0, {1.5, 2.0}};
  t.nodes[3] = {-1, 0, -1, -1, 1, {6.0, 3.0}};
  t.nodes[4] = {0, 3.0, 5, 6, -1, {}};
  t.nodes[5] = {-1, 0, -1, -1, 2, {2.0, 7.5}};
  t.nodes[6] = {-1, 0, -1, -1, 3, {8.0, 9.0}};
  t.root = 0;
  t.leaf_count = 4;
  return t;
}

}  // namespace

TEST_CASE("best split on a perfect two-point spread") {
  Mat pts = {{0, 0}, {0, 10}};
  auto s = best_split(ptrs(pts));
  REQUIRE(s);
  CHECK(s->feature == 1);
  CHECK(s->threshold == 5.0);
  CHECK(s->sse == 0.0);
}

TEST_CASE("best split separates the worked clusters on x1 at 5") {
  auto pts = figure_clusters();
  auto s = best_split(ptrs(pts));
  REQUIRE(s);
  CHECK(s->feature == 1);
  CHECK(s->threshold == 5.0);
}

TEST_CASE("best split equals exhaustive search on random points") {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    int n = int(rng.integer(2, 16));
    int d = int(rng.integer(1, 3));
    Mat pts;
    for (int i = 0; i < n; ++i) {
      Vec p(d);
      for (auto& v : p) v = rng.integer(0, 9);
      pts.push_back(p);
    }
    auto fast = best_split(ptrs(pts));
    auto slow = brute_split(pts);
    REQUIRE(bool(fast) == bool(slow));
    if (fast) {
      CHECK(fast->sse == slow->sse);
      CHECK(fast->feature == slow->feature);
      CHECK(fast->threshold == slow->threshold);
    }
  }
}

TEST_CASE("identical points give no split") {
  Mat pts = {{2, 2}, {2, 2}, {2, 2}};
  CHECK_FALSE(best_split(ptrs(pts)));
}

TEST_CASE("fit tree leaf centroids are means") {
  // depth-1 fit isolates the tight pair; its centroid is the pair mean
  Mat pts = {{4, 9}, {5, 10}, {20, 0}, {21, 1}};
  auto t = fit_tree(pts, {1, 1});
  REQUIRE(t.leaf_count == 2);
  CHECK(t.leaf(0).centroid == Vec{4.5, 9.5});
}

TEST_CASE("single-leaf fit equals the dataset mean") {
  Mat pts = {{1, 2}, {3, 4}, {5, 0}};
  auto t = fit_tree(pts, {3, int(pts.size())});  // min_leaf_size stops splits
  REQUIRE(t.leaf_count == 1);
  CHECK(t.leaf(0).centroid == Vec{3.0, 2.0});
  CHECK(fuzzy_index(t, {100, -100}).first == 0);
}

TEST_CASE("total SSE is non-increasing in depth") {
  Rng rng(31);
  Mat pts;
  for (int i = 0; i < 64; ++i) pts.push_back({rng.uniform(0, 10), rng.uniform(0, 10)});
  auto t2 = fit_tree(pts, {2, 1});
  auto t3 = fit_tree(pts, {3, 1});
  CHECK(tree_total_sse(t3, pts) <= tree_total_sse(t2, pts) + 1e-12);
}

TEST_CASE("fuzzy index routing") {
  auto t = two_level_tree();
  SECTION("worked example input (3,7) reaches index 2") {
    auto [idx, c] = fuzzy_index(t, {3, 7});
    CHECK(idx == 2);
    CHECK(*c == Vec{2.0, 7.5});
  }
  SECTION("threshold ties route left") {
    auto [idx, c] = fuzzy_index(t, {3, 5});  // x1 == 5 goes left
    (void)c;
    CHECK((idx == 0 || idx == 1));
    CHECK(fuzzy_index(t, {3.0, 5.0}).first == 0);  // then x0 == 3 left again
  }
}

TEST_CASE("leaf regions tile the grid") {
  QuantSpec store{16, 0};
  KeyGrid grid{4, 0, 0, store};  // keys are raw values 0..15

  SECTION("single leaf covers the whole domain") {
    Mat pts = {{3, 3}, {3, 3}};
    auto t = fit_tree(pts, {1, 4});
    auto regions = leaf_regions(t, {grid, grid});
    REQUIRE(regions.size() == 1);
    CHECK(regions[0].box[0] == std::pair<int64_t, int64_t>{0, 15});
    CHECK(regions[0].box[1] == std::pair<int64_t, int64_t>{0, 15});
  }

  SECTION("worked tree: leaf 2 box is x0 in [0,3], x1 in [6,15]") {
    auto t = two_level_tree();
    auto regions = leaf_regions(t, {grid, grid});
    REQUIRE(regions.size() == 4);
    CHECK(regions[2].box[0] == std::pair<int64_t, int64_t>{0, 3});
    CHECK(regions[2].box[1] == std::pair<int64_t, int64_t>{6, 15});
  }

  SECTION("every grid point lies in exactly one box and agrees with routing") {
    Rng rng(77);
    for (int trial = 0; trial < 10; ++trial) {
      Mat pts;
      for (int i = 0; i < 40; ++i)
        pts.push_back({double(rng.integer(0, 15)), double(rng.integer(0, 15))});
      auto t = fit_tree(pts, {3, 1});
      auto regions = leaf_regions(t, {grid, grid});
      for (int64_t a = 0; a <= 15; ++a)
        for (int64_t b = 0; b <= 15; ++b) {
          int hits = 0, box_leaf = -1;
          for (const auto& r : regions) {
            if (a >= r.box[0].first && a <= r.box[0].second &&
                b >= r.box[1].first && b <= r.box[1].second) {
              ++hits;
              box_leaf = r.index;
            }
          }
          REQUIRE(hits == 1);
          Vec v = {grid.value_of_key(a), grid.value_of_key(b)};
          CHECK(fuzzy_index(t, v).first == box_leaf);
        }
    }
  }
}

TEST_CASE("centroid refinement") {
  Rng rng(13);
  Mat pts;
  for (int i = 0; i < 50; ++i) pts.push_back({rng.uniform(0, 8), rng.uniform(0, 8)});
  auto t = fit_tree(pts, {3, 1});

  SECTION("idempotent on the fitting data") {
    auto t2 = refine_centroids(t, pts);
    for (size_t i = 0; i < t.nodes.size(); ++i)
      if (t.nodes[i].is_leaf())
        for (int d = 0; d < t.dim; ++d)
          CHECK(t2.nodes[i].centroid[d] == Catch::Approx(t.nodes[i].centroid[d]).epsilon(1e-12));
  }

  SECTION("refinement never increases total SSE") {
    Mat shifted;
    for (const auto& p : pts) shifted.push_back({p[0] + 0.3, p[1] - 0.2});
    auto t2 = refine_centroids(t, shifted);
    CHECK(tree_total_sse(t2, shifted) <= tree_total_sse(t, shifted) + 1e-9);
  }

  SECTION("uniform shift moves non-straddling centroids by the shift") {
    // one tight cluster far from every threshold: shifting it slightly keeps
    // all its points in the same leaf
    Mat tight;
    for (int i = 0; i < 30; ++i) tight.push_back({rng.uniform(0, 1), rng.uniform(0, 1)});
    for (int i = 0; i < 30; ++i) tight.push_back({rng.uniform(7, 8), rng.uniform(7, 8)});
    auto tree = fit_tree(tight, {1, 1});
    Mat moved;
    for (const auto& p : tight) moved.push_back({p[0] + 0.25, p[1] + 0.25});
    auto refined = refine_centroids(tree, moved);
    auto [i0, c0] = fuzzy_index(tree, tight[0]);
    auto [i1, c1] = fuzzy_index(refined, moved[0]);
    CHECK(i0 == i1);
    CHECK((*c1)[0] == Catch::Approx((*c0)[0] + 0.25));
    CHECK((*c1)[1] == Catch::Approx((*c0)[1] + 0.25));
  }
}

TEST_CASE("tree json round trip") {
  Rng rng(3);
  Mat pts;
  for (int i = 0; i < 20; ++i) pts.push_back({rng.uniform(0, 5), rng.uniform(0, 5)});
  auto t = fit_tree(pts, {2, 1});
  auto t2 = tree_from_json(tree_to_json(t));
  for (int i = 0; i < 50; ++i) {
    Vec v = {rng.uniform(-1, 6), rng.uniform(-1, 6)};
    CHECK(fuzzy_index(t, v).first == fuzzy_index(t2, v).first);
  }
}
