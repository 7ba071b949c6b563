#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "matpipe/lower.hpp"

using namespace matpipe;
using namespace testutil;

namespace {

const PrimitiveNode* only_map(const PrimitiveGraph& g) {
  const PrimitiveNode* found = nullptr;
  for (const auto& n : g.nodes)
    if (n.kind == PrimKind::Map) {
      REQUIRE(found == nullptr);
      found = &n;
    }
  return found;
}

}  // namespace

TEST_CASE("weighted aggregation lowering shape") {
  Rng rng(4);
  SECTION("FC 8->4 with segment size 2") {
    ModelBuilder b(8);
    b.fc(random_matrix(rng, 4, 8), random_vec(rng, 4));
    auto g = lower(b.finish(), {2, 1, 1});
    // one partition with 4 segments, a map family of 4, one sum
    int partitions = 0, sums = 0;
    const PrimitiveNode* map = nullptr;
    for (const auto& n : g.nodes) {
      if (n.kind == PrimKind::Partition) {
        ++partitions;
        CHECK(n.segments.size() == 4);
      }
      if (n.kind == PrimKind::Map) map = &n;
      if (n.kind == PrimKind::SumReduce) ++sums;
    }
    CHECK(partitions == 1);
    CHECK(sums == 1);
    REQUIRE(map);
    CHECK(map->members.size() == 4);  // ceil(8/2) mapped segments
    for (const auto& m : map->members) {
      CHECK(m.in_arity() == 2);
      CHECK(m.out_arity() == 4);  // partial result vectors
    }
  }
  SECTION("degenerate single segment still has a SumReduce") {
    ModelBuilder b(2);
    b.fc(random_matrix(rng, 2, 2), random_vec(rng, 2));
    auto g = lower(b.finish(), {2, 1, 1});
    int sums = 0;
    for (const auto& n : g.nodes)
      if (n.kind == PrimKind::SumReduce) {
        ++sums;
        CHECK(n.inputs.size() == 1);
      }
    CHECK(sums == 1);
    CHECK(only_map(g)->members.size() == 1);
  }
  SECTION("node-count formula over random sizes") {
    for (int trial = 0; trial < 10; ++trial) {
      int in = int(rng.integer(1, 12)), out = int(rng.integer(1, 6));
      int seg = int(rng.integer(1, 5));
      ModelBuilder b(in);
      b.fc(random_matrix(rng, out, in), random_vec(rng, out));
      auto g = lower(b.finish(), {seg, 1, 1});
      int eff = std::min(seg, in);
      CHECK(only_map(g)->members.size() == size_t((in + eff - 1) / eff));
    }
  }
}

TEST_CASE("element-wise lowering emits a single map and no sum") {
  ModelBuilder b(4);
  b.relu();
  auto g = lower(b.finish(), {4, 1, 1});
  CHECK(g.map_node_count() == 1);
  for (const auto& n : g.nodes) CHECK(n.kind != PrimKind::SumReduce);
  CHECK(eval_graph(g, {-1, 2, -3, 4}) == Vec{0, 2, 0, 4});
}

TEST_CASE("softmax fragment") {
  SECTION("symmetry at 2 and 3 dims") {
    auto g2 = lower_softmax(2);
    auto y2 = eval_graph(g2, {0, 0});
    CHECK(y2[0] == Catch::Approx(0.5));
    CHECK(y2[1] == Catch::Approx(0.5));

    auto g3 = lower_softmax(3);
    auto y3 = eval_graph(g3, {1, 1, 1});
    for (double v : y3) CHECK(v == Catch::Approx(1.0 / 3));
  }
  SECTION("hand-evaluated case") {
    auto g = lower_softmax(2);
    auto y = eval_graph(g, {std::log(3.0), 0.0});
    CHECK(y[0] == Catch::Approx(0.75));
    CHECK(y[1] == Catch::Approx(0.25));
  }
  SECTION("structure: exp maps, one sum, recip, pairwise combine") {
    auto g = lower_softmax(4);
    int sums = 0, maps = 0;
    for (const auto& n : g.nodes) {
      if (n.kind == PrimKind::SumReduce) ++sums;
      if (n.kind == PrimKind::Map) ++maps;
    }
    CHECK(sums == 1);
    CHECK(maps == 3);
  }
}

TEST_CASE("pooling fragments") {
  SECTION("average of a window") {
    auto g = lower_pool(LayerKind::AvgPool, 4, 4);
    CHECK(eval_graph(g, {1, 2, 3, 6})[0] == Catch::Approx(3.0));
  }
  SECTION("max of a pair") {
    auto g = lower_pool(LayerKind::MaxPool, 2, 2);
    CHECK(eval_graph(g, {-1, 5})[0] == Catch::Approx(5.0));
  }
  SECTION("max k=4 uses two pairwise levels") {
    auto g = lower_pool(LayerKind::MaxPool, 4, 8);
    CHECK(g.map_node_count() == 2);
    auto y = eval_graph(g, {1, 9, 2, 3, 7, 0, 8, 5});
    CHECK(y == Vec{9, 8});
  }
  SECTION("non-divisible window rejected") {
    CHECK_THROWS_AS(lower_pool(LayerKind::AvgPool, 3, 4), Error);
  }
}

TEST_CASE("partition segments tile the input on every lowered graph") {
  Rng rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    auto m = random_chain_model(rng);
    int seg = int(rng.integer(1, 4));
    auto g = lower(m, {seg, 1, 1});
    CHECK(check_graph(g).empty());
  }
}

TEST_CASE("lowering soundness against the reference interpreter") {
  Rng rng(99);
  int models = 100, inputs = 100;
  for (int t = 0; t < models; ++t) {
    auto m = random_chain_model(rng);
    int seg = int(rng.integer(1, 4));
    PartitionPolicy pol{seg, 1, int(rng.integer(1, 2))};
    auto g = lower(m, pol);
    for (int i = 0; i < inputs; ++i) {
      Vec x = random_input(rng, m.input_len());
      auto want = reference_infer(m, x);
      auto got = eval_graph(g, x);
      REQUIRE(got.size() == want.size());
      for (size_t k = 0; k < want.size(); ++k)
        CHECK(approx_rel(got[k], want[k], 1e-9));
    }
  }
}

TEST_CASE("two-input layers lower through pair segments") {
  Rng rng(8);
  // hadamard: u (x) * v (relu(x)) via an explicit two-input graph
  ModelGraph m;
  m.name = "had";
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
  REQUIRE(validate_model(m).empty());
  auto g = lower(m, {2, 1, 2});
  for (int i = 0; i < 20; ++i) {
    Vec x = random_input(rng, 4);
    auto want = reference_infer(m, x);
    auto got = eval_graph(g, x);
    for (size_t k = 0; k < want.size(); ++k)
      CHECK(approx_rel(got[k], want[k], 1e-9));
  }
}

TEST_CASE("absdiffsum lowers to pair maps plus one sum") {
  ModelGraph m;
  m.name = "ae_head";
  m.input = "x";
  m.tensors = {{"x", {4}, TensorRole::Input},
               {"a", {4}, TensorRole::Activation},
               {"y", {1}, TensorRole::Output}};
  LayerSpec t;
  t.name = "t";
  t.kind = LayerKind::Tanh;
  t.inputs = {"x"};
  t.output = "a";
  LayerSpec d;
  d.name = "d";
  d.kind = LayerKind::AbsDiffSum;
  d.inputs = {"x", "a"};
  d.output = "y";
  m.layers = {t, d};
  m.output = "y";
  REQUIRE(validate_model(m).empty());
  auto g = lower(m, {2, 1, 2});
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    Vec x = random_input(rng, 4);
    CHECK(approx_rel(eval_graph(g, x)[0], reference_infer(m, x)[0], 1e-9));
  }
}

TEST_CASE("unsupported segment size rejected") {
  ModelBuilder b(4);
  b.relu();
  CHECK_THROWS_AS(lower(b.finish(), {0, 1, 1}), Error);
}
