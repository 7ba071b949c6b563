#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "matpipe/model.hpp"

using namespace matpipe;
using namespace testutil;

TEST_CASE("validation accepts shape-consistent FC") {
  Rng rng(1);
  ModelBuilder b(3);
  b.fc(random_matrix(rng, 4, 3), Vec(4, 0.0));
  auto m = b.finish();
  CHECK(validate_model(m).empty());
}

TEST_CASE("validation flags non-positive sigma") {
  ModelBuilder b(2);
  b.batchnorm({1, 1}, {0, 0}, {0, 0}, {1, 0});
  auto v = validate_model(b.finish());
  REQUIRE_FALSE(v.empty());
  bool found = false;
  for (auto& x : v) found |= x.message.find("non-positive sigma") != std::string::npos;
  CHECK(found);
}

TEST_CASE("validation flags multiple producers") {
  ModelBuilder b(2);
  b.relu();
  auto m = b.finish();
  // second layer writing the same tensor
  LayerSpec dup = m.layers[0];
  dup.name = "dup";
  m.layers.push_back(dup);
  auto v = validate_model(m);
  bool found = false;
  for (auto& x : v) found |= x.message.find("multiple producers") != std::string::npos;
  CHECK(found);
}

TEST_CASE("reference inference basics") {
  SECTION("identity FC") {
    ModelBuilder b(2);
    b.fc({{1, 0}, {0, 1}}, {0, 0});
    auto m = b.finish();
    CHECK(reference_infer(m, {1.5, -2}) == Vec{1.5, -2});
  }
  SECTION("tanh at zero") {
    ModelBuilder b(1);
    b.tanh_();
    CHECK(reference_infer(b.finish(), {0}) == Vec{0});
  }
  SECTION("softmax symmetry") {
    ModelBuilder b(2);
    b.softmax();
    auto y = reference_infer(b.finish(), {0, 0});
    CHECK(y[0] == Catch::Approx(0.5));
    CHECK(y[1] == Catch::Approx(0.5));
  }
  SECTION("FC then BatchNorm composes to 0.4x + 1") {
    // gamma=1, beta=1, mu=0, sigma=2.5 after W=[[0.4*2.5]] gives f(x)=0.4x+1
    ModelBuilder b(1);
    b.fc({{0.4 * 2.5}}, {0.0});
    b.batchnorm({1}, {1}, {0}, {2.5});
    auto y = reference_infer(b.finish(), {3});
    CHECK(y[0] == Catch::Approx(2.2));
  }
}

TEST_CASE("embedding domain error") {
  ModelBuilder b(2);
  b.embedding({{0.0, 1.0}, {2.0, 3.0}}, 0, 1);
  auto m = b.finish();
  CHECK(reference_infer(m, {0, 1}) == Vec{0, 1, 2, 3});
  CHECK_THROWS_AS(reference_infer(m, {0, 2}), Error);
}

TEST_CASE("reference inference is deterministic") {
  Rng rng(42);
  auto m = random_chain_model(rng);
  Vec x = random_input(rng, m.input_len());
  auto a = reference_infer(m, x);
  auto b = reference_infer(m, x);
  CHECK(a == b);  // bit identical
}

TEST_CASE("affine chains equal the collapsed affine map") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    int n = int(rng.integer(1, 5));
    Vec sg(n);
    for (auto& s : sg) s = rng.uniform(0.5, 2.0);
    Vec g = random_vec(rng, n), be = random_vec(rng, n), mu = random_vec(rng, n);
    int out = int(rng.integer(1, 5));
    Mat w = random_matrix(rng, out, n);
    Vec bb = random_vec(rng, out);
    Vec b2 = random_vec(rng, out);

    ModelBuilder mb(n);
    mb.batchnorm(g, be, mu, sg);
    mb.fc(w, bb);
    mb.bias(b2);
    auto m = mb.finish();

    // collapsed: y = W * (g/sg * (x - mu) + be) + bb + b2
    Vec x = random_input(rng, n);
    Vec hidden(n);
    for (int i = 0; i < n; ++i) hidden[i] = g[i] * (x[i] - mu[i]) / sg[i] + be[i];
    Vec y = matvec(w, hidden);
    for (int i = 0; i < out; ++i) y[i] += bb[i] + b2[i];

    auto got = reference_infer(m, x);
    for (int i = 0; i < out; ++i) CHECK(approx_rel(got[i], y[i], 1e-9));
  }
}

TEST_CASE("range inference") {
  SECTION("constant dataset through identity with margin") {
    ModelBuilder b(2);
    b.fc({{1, 0}, {0, 1}}, {0, 0});
    auto m = b.finish();
    auto r = infer_ranges(m, {{1, 1}}, 0.1);
    auto [lo, hi] = r.at(m.input);
    CHECK(lo == Catch::Approx(0.9));
    CHECK(hi == Catch::Approx(1.1));
  }
  SECTION("relu output range is non-negative") {
    ModelBuilder b(2);
    b.relu();
    auto m = b.finish();
    auto r = infer_ranges(m, {{-5, 2}, {-1, -2}, {3, 4}}, 0.1);
    auto [lo, hi] = r.at(m.output);
    CHECK(lo >= 0.0);
    CHECK(hi >= 4.0);
  }
  SECTION("ranges contain all observed values pre-margin") {
    Rng rng(5);
    auto m = random_chain_model(rng);
    Mat data;
    for (int i = 0; i < 20; ++i) data.push_back(random_input(rng, m.input_len()));
    auto r = infer_ranges(m, data, 0.0);
    for (const auto& row : data) {
      auto y = reference_infer(m, row);
      auto [lo, hi] = r.at(m.output);
      for (double v : y) {
        CHECK(v >= lo);
        CHECK(v <= hi);
      }
    }
  }
  SECTION("empty dataset rejected") {
    ModelBuilder b(1);
    b.relu();
    CHECK_THROWS_AS(infer_ranges(b.finish(), {}, 0.1), Error);
  }
}

TEST_CASE("model json round trip") {
  Rng rng(9);
  auto m = random_chain_model(rng);
  auto j = model_to_json(m);
  auto m2 = model_from_json(j);
  Vec x = random_input(rng, m.input_len());
  CHECK(reference_infer(m, x) == reference_infer(m2, x));
  CHECK(model_to_json(m2) == j);
}
