#pragma once

#include <string>
#include <vector>

#include "matpipe/lower.hpp"
#include "matpipe/model.hpp"

namespace testutil {

using namespace matpipe;

// Chain-style model assembly with automatic tensor bookkeeping.
struct ModelBuilder {
  ModelGraph m;
  std::string cur;
  int cur_len = 0;
  int counter = 0;

  explicit ModelBuilder(int in_len, HeadKind head = HeadKind::Classifier,
                        const std::string& name = "test") {
    m.name = name;
    m.head = head;
    m.input = "x";
    m.tensors.push_back({"x", {in_len}, TensorRole::Input});
    cur = "x";
    cur_len = in_len;
  }

  std::string fresh(int len) {
    std::string n = "t" + std::to_string(counter++);
    m.tensors.push_back({n, {len}, TensorRole::Activation});
    return n;
  }

  LayerSpec& push(LayerKind kind, int out_len, const std::string& tag = "") {
    LayerSpec l;
    l.kind = kind;
    l.name = (tag.empty() ? std::string(layer_kind_name(kind)) : tag) + "_" +
             std::to_string(counter);
    l.inputs = {cur};
    l.output = fresh(out_len);
    cur = l.output;
    cur_len = out_len;
    m.layers.push_back(l);
    return m.layers.back();
  }

  ModelBuilder& fc(const Mat& w, const Vec& b) {
    auto& l = push(LayerKind::FC, int(w.size()));
    l.weight = w;
    l.bias = b;
    return *this;
  }
  ModelBuilder& batchnorm(const Vec& g, const Vec& be, const Vec& mu, const Vec& sg) {
    auto& l = push(LayerKind::BatchNorm, cur_len);
    l.gamma = g; l.beta = be; l.mean = mu; l.sigma = sg;
    return *this;
  }
  ModelBuilder& bias(const Vec& b) {
    auto& l = push(LayerKind::Bias, cur_len);
    l.bias = b;
    return *this;
  }
  ModelBuilder& relu() { push(LayerKind::ReLU, cur_len); return *this; }
  ModelBuilder& tanh_() { push(LayerKind::Tanh, cur_len); return *this; }
  ModelBuilder& sigmoid() { push(LayerKind::Sigmoid, cur_len); return *this; }
  ModelBuilder& softmax() { push(LayerKind::Softmax, cur_len); return *this; }
  ModelBuilder& avgpool(int k) {
    auto& l = push(LayerKind::AvgPool, cur_len / k);
    l.window = k;
    return *this;
  }
  ModelBuilder& maxpool(int k) {
    auto& l = push(LayerKind::MaxPool, cur_len / k);
    l.window = k;
    return *this;
  }
  ModelBuilder& conv1d(const Mat& kernels, int stride) {
    int kernel = int(kernels[0].size());
    int pos = (cur_len - kernel) / stride + 1;
    auto& l = push(LayerKind::Conv1D, int(kernels.size()) * pos);
    l.weight = kernels;
    l.stride = stride;
    return *this;
  }
  ModelBuilder& embedding(const Mat& table, int lo, int hi) {
    auto& l = push(LayerKind::Embedding, cur_len * int(table[0].size()));
    l.weight = table;
    l.emb_lo = lo;
    l.emb_hi = hi;
    return *this;
  }

  ModelGraph finish() {
    m.output = cur;
    for (auto& t : m.tensors)
      if (t.name == cur && t.role == TensorRole::Activation)
        t.role = TensorRole::Output;
    return m;
  }
};

inline Mat random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Mat w = zeros(rows, cols);
  for (auto& r : w)
    for (auto& v : r) v = rng.normal(0.0, scale);
  return w;
}

inline Vec random_vec(Rng& rng, int n, double scale = 1.0) {
  Vec v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

// Random layer chain with consistent shapes. `ensure_fusable` guarantees at
// least one elementwise layer adjacent to an FC, so basic fusion always has
// something to do.
inline ModelGraph random_chain_model(Rng& rng, int max_depth = 5,
                                     bool ensure_fusable = false) {
  int in_len = int(rng.integer(2, 8));
  ModelBuilder b(in_len);
  int depth = int(rng.integer(1, max_depth));
  for (int i = 0; i < depth; ++i) {
    int pick = int(rng.integer(0, 8));
    int n = b.cur_len;
    switch (pick) {
      case 0: {
        int out = int(rng.integer(1, 8));
        b.fc(random_matrix(rng, out, n), random_vec(rng, out));
        break;
      }
      case 1: {
        Vec sg(n);
        for (auto& s : sg) s = rng.uniform(0.5, 2.0);
        b.batchnorm(random_vec(rng, n), random_vec(rng, n), random_vec(rng, n), sg);
        break;
      }
      case 2: b.bias(random_vec(rng, n)); break;
      case 3: b.relu(); break;
      case 4: b.tanh_(); break;
      case 5: b.sigmoid(); break;
      case 6: {
        if (n % 2 == 0 && n >= 2) b.avgpool(2);
        else b.relu();
        break;
      }
      case 7: {
        if (n % 2 == 0 && n >= 2) b.maxpool(2);
        else b.sigmoid();
        break;
      }
      case 8: {
        if (n >= 3) {
          int kernel = 2 + int(rng.integer(0, std::min(2, n - 2)));
          int filters = int(rng.integer(1, 3));
          b.conv1d(random_matrix(rng, filters, kernel), 1);
        } else {
          b.tanh_();
        }
        break;
      }
    }
  }
  if (ensure_fusable) {
    // a BatchNorm immediately before an FC always merges into its segments
    int n = b.cur_len;
    Vec sg(n);
    for (auto& s : sg) s = rng.uniform(0.5, 2.0);
    b.batchnorm(random_vec(rng, n), random_vec(rng, n), random_vec(rng, n), sg);
    int out = int(rng.integer(1, 6));
    b.fc(random_matrix(rng, out, n), random_vec(rng, out));
    b.relu();
  }
  return b.finish();
}

inline Vec random_input(Rng& rng, int n, double lo = -3.0, double hi = 3.0) {
  Vec v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline bool vectors_close(const Vec& a, const Vec& b, double tol = 1e-9) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (!approx_rel(a[i], b[i], tol)) return false;
  return true;
}

}  // namespace testutil
