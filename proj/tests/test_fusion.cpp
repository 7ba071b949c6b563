#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "matpipe/fusion.hpp"
#include "matpipe/lower.hpp"

using namespace matpipe;
using namespace testutil;

namespace {

std::string canon(const PrimitiveGraph& g) { return graph_to_json(g).dump(); }

// Two-segment sum feeding a trailing single-member map.
PrimitiveGraph sum_then_map(MapFunction tail) {
  PrimitiveGraph g;
  g.input_arity = 2;
  PrimitiveNode p;
  p.kind = PrimKind::Partition;
  p.sources = {{-1, 0}};
  p.segments = {Segment::contiguous(0, 1), Segment::contiguous(1, 1)};
  int pid = g.add(std::move(p));
  PrimitiveNode m;
  m.kind = PrimKind::Map;
  m.partition = pid;
  m.members = {MapFunction::identity(1), MapFunction::identity(1)};
  int mid = g.add(std::move(m));
  PrimitiveNode s;
  s.kind = PrimKind::SumReduce;
  s.inputs = {{mid, 0}, {mid, 1}};
  s.out_arity = 1;
  int sid = g.add(std::move(s));
  PrimitiveNode pt;
  pt.kind = PrimKind::Partition;
  pt.sources = {{sid, 0}};
  pt.segments = {Segment::contiguous(0, 1)};
  int ptid = g.add(std::move(pt));
  PrimitiveNode mt;
  mt.kind = PrimKind::Map;
  mt.partition = ptid;
  mt.members = {std::move(tail)};
  int mtid = g.add(std::move(mt));
  g.outputs = {{mtid, 0}};
  return g;
}

// The two-hidden-block MLP whose seven operator maps fuse down to two:
// BN -> FC(2 segments) -> ReLU -> BN -> FC -> ReLU -> FC.
ModelGraph fused_maps_layout(Rng& rng) {
  ModelBuilder b(4);
  Vec sg4 = {1.2, 0.8, 1.5, 1.1};
  b.batchnorm(random_vec(rng, 4), random_vec(rng, 4), random_vec(rng, 4), sg4);
  b.fc(random_matrix(rng, 2, 4), random_vec(rng, 2));
  b.relu();
  Vec sg2 = {0.9, 1.3};
  b.batchnorm(random_vec(rng, 2), random_vec(rng, 2), random_vec(rng, 2), sg2);
  b.fc(random_matrix(rng, 2, 2), random_vec(rng, 2));
  b.relu();
  b.fc(random_matrix(rng, 3, 2), random_vec(rng, 3));
  return b.finish();
}

}  // namespace

TEST_CASE("linear reordering swaps sum and map") {
  auto doubled = MapFunction::affine({{2.0}}, {0.0});
  auto g = sum_then_map(doubled);
  CHECK(eval_graph(g, {1, 3})[0] == Catch::Approx(8.0));
  auto r = reorder_linear(g);
  // trailing map folded into the branches; sum is now the output
  CHECK(r.map_node_count() == 1);
  REQUIRE(r.outputs.size() == 1);
  CHECK(r.nodes[r.outputs[0].node].kind == PrimKind::SumReduce);
  CHECK(eval_graph(r, {1, 3})[0] == Catch::Approx(8.0));
}

TEST_CASE("non-linear maps are not reordered") {
  auto g = sum_then_map(MapFunction::elementwise(EwOp::ReLU, 1));
  auto r = reorder_linear(g);
  CHECK(canon(r) == canon(detail::compact(g)));
}

TEST_CASE("affine constants ride exactly one branch") {
  Rng rng(21);
  auto g = sum_then_map(MapFunction::affine({{1.5}}, {2.0}));
  auto r = reorder_linear(g);
  CHECK(r.map_node_count() == 1);
  for (int i = 0; i < 100; ++i) {
    Vec x = random_input(rng, 2);
    CHECK(approx_rel(eval_graph(r, x)[0], eval_graph(g, x)[0], 1e-9));
  }
}

TEST_CASE("consecutive maps merge") {
  SECTION("two affines compose") {
    ModelBuilder b(1);
    b.fc({{0.4}}, {0.0});
    b.bias({1.0});
    auto g = lower(b.finish(), {1, 1, 1});
    auto merged = merge_maps(g);
    CHECK(eval_graph(merged, {3})[0] == Catch::Approx(2.2));
  }
  SECTION("relu then tanh clamps negatives") {
    ModelBuilder b(1);
    b.relu();
    b.tanh_();
    auto g = lower(b.finish(), {1, 1, 1});
    auto merged = merge_maps(g);
    CHECK(merged.map_node_count() == 1);
    CHECK(eval_graph(merged, {-2})[0] == Catch::Approx(0.0));
  }
  SECTION("a single map is a fixpoint") {
    ModelBuilder b(3);
    b.relu();
    auto g = lower(b.finish(), {3, 1, 1});
    CHECK(canon(merge_maps(g)) == canon(detail::compact(g)));
  }
}

TEST_CASE("basic fusion compresses the two-block MLP from 7 lookups to 2") {
  Rng rng(55);
  auto m = fused_maps_layout(rng);
  auto g = lower(m, {2, 1, 1});
  auto [fused, report] = fuse_basic(g);
  CHECK(report.lookups_before == 7);
  CHECK(report.lookups_after == 2);
  CHECK(fused.map_node_count() == 2);
  // semantics preserved
  for (int i = 0; i < 50; ++i) {
    Vec x = random_input(rng, 4);
    auto a = reference_infer(m, x);
    auto b = eval_graph(fused, x);
    REQUIRE(a.size() == b.size());
    for (size_t k = 0; k < a.size(); ++k) CHECK(approx_rel(a[k], b[k], 1e-9));
  }
}

TEST_CASE("all-linear chains collapse to one map per segment") {
  Rng rng(65);
  for (int len = 2; len <= 6; ++len) {
    ModelBuilder b(4);
    b.fc(random_matrix(rng, 3, 4), random_vec(rng, 3));  // 2 segments
    for (int i = 0; i < len - 1; ++i) {
      if (i % 2 == 0) {
        b.bias(random_vec(rng, 3));
      } else {
        Vec sg(3);
        for (auto& s : sg) s = rng.uniform(0.5, 2.0);
        b.batchnorm(random_vec(rng, 3), random_vec(rng, 3), random_vec(rng, 3), sg);
      }
    }
    auto m = b.finish();
    auto g = lower(m, {2, 1, 1});
    auto [fused, report] = fuse_basic(g);
    CHECK(fused.map_node_count() == 1);
    for (const auto& n : fused.nodes)
      if (n.kind == PrimKind::Map) CHECK(n.members.size() == 2);
    CHECK(report.lookups_after == 1);
    Vec x = random_input(rng, 4);
    auto want = reference_infer(m, x);
    auto got = eval_graph(fused, x);
    for (size_t k = 0; k < want.size(); ++k) CHECK(approx_rel(got[k], want[k], 1e-9));
  }
}

TEST_CASE("graphs without fusable patterns are unchanged") {
  ModelBuilder b(4);
  b.relu();
  auto g = lower(b.finish(), {4, 1, 1});
  auto [fused, report] = fuse_basic(g);
  CHECK(report.lookups_before == report.lookups_after);
  CHECK(canon(fused) == canon(detail::compact(g)));
}

TEST_CASE("fusion preserves semantics on random graphs") {
  Rng rng(101);
  for (int t = 0; t < 40; ++t) {
    auto m = random_chain_model(rng, 5);
    auto g = lower(m, {int(rng.integer(1, 3)), 1, 1});
    auto [fused, report] = fuse_basic(g);
    CHECK(report.lookups_after <= report.lookups_before);
    for (int i = 0; i < 25; ++i) {
      Vec x = random_input(rng, m.input_len());
      auto a = eval_graph(g, x);
      auto b = eval_graph(fused, x);
      REQUIRE(a.size() == b.size());
      for (size_t k = 0; k < a.size(); ++k) CHECK(approx_rel(a[k], b[k], 1e-9));
    }
  }
}

TEST_CASE("per-pass lookup monotonicity") {
  Rng rng(303);
  for (int t = 0; t < 30; ++t) {
    auto m = random_chain_model(rng, 5);
    auto g = lower(m, {int(rng.integer(1, 3)), 1, 1});
    CHECK(merge_maps(g).map_node_count() <= g.map_node_count());
    CHECK(reorder_linear(g).map_node_count() <= g.map_node_count());
  }
}

TEST_CASE("basic fusion is idempotent") {
  Rng rng(404);
  for (int t = 0; t < 20; ++t) {
    auto m = random_chain_model(rng, 5, true);
    auto g = lower(m, {2, 1, 1});
    auto [once, r1] = fuse_basic(g);
    auto [twice, r2] = fuse_basic(once);
    CHECK(canon(once) == canon(twice));
    CHECK(r2.lookups_before == r2.lookups_after);
  }
}

TEST_CASE("fusable graphs strictly lose lookups") {
  Rng rng(505);
  for (int t = 0; t < 25; ++t) {
    auto m = random_chain_model(rng, 4, /*ensure_fusable=*/true);
    auto g = lower(m, {2, 1, 1});
    auto [fused, report] = fuse_basic(g);
    CHECK(report.lookups_after < report.lookups_before);
  }
}

TEST_CASE("advanced fusion: dropping nonlinearities leaves one map per path") {
  Rng rng(77);
  auto m = fused_maps_layout(rng);
  auto g = lower(m, {2, 1, 1});
  auto [fused, report] = fuse_advanced(g, AdvancedMode::DropNonlinear);
  CHECK(report.mode == FusionMode::AdvancedLinear);
  CHECK(nam_path_invariant(fused));
  CHECK(fused.map_node_count() == 1);
}

TEST_CASE("advanced fusion: nam restructuring") {
  Rng rng(88);
  SECTION("four segments become four mapped sub-models and one sum") {
    ModelBuilder b(8);
    b.fc(random_matrix(rng, 4, 8), random_vec(rng, 4));
    b.relu();
    b.fc(random_matrix(rng, 2, 4), random_vec(rng, 2));
    auto g = lower(b.finish(), {2, 1, 1});
    auto [fused, report] = fuse_advanced(g, AdvancedMode::Nam);
    CHECK(report.mode == FusionMode::AdvancedNam);
    CHECK(fused.map_node_count() == 1);
    int members = 0, sums = 0;
    for (const auto& n : fused.nodes) {
      if (n.kind == PrimKind::Map) members = int(n.members.size());
      if (n.kind == PrimKind::SumReduce) ++sums;
    }
    CHECK(members == 4);
    CHECK(sums == 1);
    CHECK(nam_path_invariant(fused));
  }
  SECTION("degenerate single segment") {
    ModelBuilder b(2);
    b.fc(random_matrix(rng, 2, 2), random_vec(rng, 2));
    b.relu();
    auto g = lower(b.finish(), {2, 1, 1});
    auto [fused, report] = fuse_advanced(g, AdvancedMode::Nam);
    (void)report;
    int members = 0;
    for (const auto& n : fused.nodes)
      if (n.kind == PrimKind::Map) members = int(n.members.size());
    CHECK(members == 1);
    CHECK(nam_path_invariant(fused));
  }
  SECTION("non-series topologies are rejected") {
    ModelGraph m;
    m.input = "x";
    m.tensors = {{"x", {4}, TensorRole::Input},
                 {"a", {4}, TensorRole::Activation},
                 {"y", {4}, TensorRole::Output}};
    LayerSpec r;
    r.name = "r";
    r.kind = LayerKind::ReLU;
    r.inputs = {"x"};
    r.output = "a";
    LayerSpec h;
    h.name = "h";
    h.kind = LayerKind::Hadamard;
    h.inputs = {"x", "a"};
    h.output = "y";
    m.layers = {r, h};
    m.output = "y";
    auto g = lower(m, {2, 1, 2});
    CHECK_THROWS_AS(fuse_advanced(g, AdvancedMode::Nam), Error);
  }
}
