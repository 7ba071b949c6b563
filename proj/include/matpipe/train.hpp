#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "matpipe/model.hpp"

namespace matpipe {

struct TrainConfig {
  int epochs = 400;
  double lr = 0.05;
  double momentum = 0.9;
  uint64_t seed = 1;
};

namespace detail {

struct LayerGrads {
  Mat weight;
  Vec bias;
};

inline void init_params(ModelGraph& m, Rng& rng) {
  for (auto& l : m.layers) {
    switch (l.kind) {
      case LayerKind::FC: {
        int out = 0, in = 0;
        // dims come from the declared tensors
        // weight may already be sized by the DSL skeleton
        out = int(l.weight.size());
        in = out ? int(l.weight[0].size()) : 0;
        double s = std::sqrt(2.0 / std::max(1, in));
        for (auto& row : l.weight)
          for (auto& v : row) v = rng.normal(0.0, s);
        for (auto& v : l.bias) v = 0.0;
        break;
      }
      case LayerKind::Conv1D: {
        int k = l.weight.empty() ? 0 : int(l.weight[0].size());
        double s = std::sqrt(2.0 / std::max(1, k));
        for (auto& row : l.weight)
          for (auto& v : row) v = rng.normal(0.0, s);
        break;
      }
      case LayerKind::Embedding:
        for (auto& row : l.weight)
          for (auto& v : row) v = rng.normal(0.0, 0.5);
        break;
      case LayerKind::Bias:
        for (auto& v : l.bias) v = 0.0;
        break;
      default:
        break;
    }
  }
}

// Sets BatchNorm statistics from the activations the layer actually sees
// with the initial weights, then leaves them frozen for the whole fit.
inline void calibrate_batchnorm(ModelGraph& m, const Mat& X) {
  for (size_t li = 0; li < m.layers.size(); ++li) {
    if (m.layers[li].kind != LayerKind::BatchNorm) continue;
    auto& bn = m.layers[li];
    int n = int(bn.gamma.size());
    Vec sum(n, 0.0), sq(n, 0.0);
    size_t count = 0;
    for (const auto& row : X) {
      std::map<std::string, Vec> values;
      values[m.input] = row;
      for (size_t lj = 0; lj < li; ++lj) {
        std::vector<Vec> ins;
        for (const auto& name : m.layers[lj].inputs) ins.push_back(values.at(name));
        values[m.layers[lj].output] = eval_layer(m.layers[lj], ins);
      }
      const Vec& x = values.at(bn.inputs[0]);
      for (int i = 0; i < n; ++i) {
        sum[i] += x[i];
        sq[i] += x[i] * x[i];
      }
      ++count;
    }
    for (int i = 0; i < n; ++i) {
      double mean = sum[i] / double(count);
      double var = sq[i] / double(count) - mean * mean;
      bn.mean[i] = mean;
      bn.sigma[i] = std::sqrt(std::max(var, 1e-6)) + 1e-3;
      bn.gamma[i] = 1.0;
      bn.beta[i] = 0.0;
    }
  }
}

struct ForwardCache {
  std::map<std::string, Vec> values;
};

inline void backward_layer(const LayerSpec& l, const ForwardCache& fc,
                           const Vec& dy, std::map<std::string, Vec>& grads_by_tensor,
                           LayerGrads& g) {
  const Vec& x = fc.values.at(l.inputs[0]);
  auto addg = [&](const std::string& name, const Vec& d) {
    auto& acc = grads_by_tensor[name];
    if (acc.empty()) acc.assign(d.size(), 0.0);
    for (size_t i = 0; i < d.size(); ++i) acc[i] += d[i];
  };
  switch (l.kind) {
    case LayerKind::FC: {
      for (size_t r = 0; r < l.weight.size(); ++r) {
        g.bias[r] += dy[r];
        for (size_t c = 0; c < x.size(); ++c) g.weight[r][c] += dy[r] * x[c];
      }
      Vec dx(x.size(), 0.0);
      for (size_t r = 0; r < l.weight.size(); ++r)
        for (size_t c = 0; c < x.size(); ++c) dx[c] += l.weight[r][c] * dy[r];
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::Conv1D: {
      int filters = int(l.weight.size()), k = int(l.weight[0].size());
      int pos = conv_positions(int(x.size()), k, l.stride);
      Vec dx(x.size(), 0.0);
      for (int f = 0; f < filters; ++f)
        for (int t = 0; t < pos; ++t) {
          double d = dy[size_t(f) * pos + t];
          for (int j = 0; j < k; ++j) {
            g.weight[f][j] += d * x[t * l.stride + j];
            dx[t * l.stride + j] += d * l.weight[f][j];
          }
        }
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::BatchNorm: {
      Vec dx(x.size());
      for (size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * l.gamma[i] / l.sigma[i];
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::Bias: {
      for (size_t i = 0; i < x.size(); ++i) g.bias[i] += dy[i];
      addg(l.inputs[0], dy);
      break;
    }
    case LayerKind::ReLU: {
      Vec dx(x.size());
      for (size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0 ? dy[i] : 0.0;
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::Tanh: {
      const Vec& y = fc.values.at(l.output);
      Vec dx(x.size());
      for (size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * (1.0 - y[i] * y[i]);
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::Sigmoid: {
      const Vec& y = fc.values.at(l.output);
      Vec dx(x.size());
      for (size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::Softmax: {
      const Vec& y = fc.values.at(l.output);
      double dot = 0.0;
      for (size_t i = 0; i < y.size(); ++i) dot += dy[i] * y[i];
      Vec dx(x.size());
      for (size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (dy[i] - dot);
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::AvgPool: {
      Vec dx(x.size());
      for (size_t t = 0; t < dy.size(); ++t)
        for (int j = 0; j < l.window; ++j)
          dx[t * l.window + j] = dy[t] / l.window;
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::MaxPool: {
      Vec dx(x.size(), 0.0);
      for (size_t t = 0; t < dy.size(); ++t) {
        size_t best = t * l.window;
        for (int j = 1; j < l.window; ++j)
          if (x[t * l.window + j] > x[best]) best = t * l.window + j;
        dx[best] = dy[t];
      }
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::Embedding: {
      int dim = int(l.weight[0].size());
      for (size_t i = 0; i < x.size(); ++i) {
        long long idx = std::llround(x[i]);
        idx = std::clamp<long long>(idx, l.emb_lo, l.emb_hi);
        for (int j = 0; j < dim; ++j)
          g.weight[size_t(idx - l.emb_lo)][j] += dy[i * dim + j];
      }
      break;  // indices are not differentiated
    }
    case LayerKind::Hadamard: {
      const Vec& b = fc.values.at(l.inputs[1]);
      Vec dx(x.size()), db(b.size());
      for (size_t i = 0; i < x.size(); ++i) {
        dx[i] = dy[i] * b[i];
        db[i] = dy[i] * x[i];
      }
      addg(l.inputs[0], dx);
      addg(l.inputs[1], db);
      break;
    }
    case LayerKind::Slice: {
      Vec dx(x.size(), 0.0);
      for (int i = 0; i < l.len; ++i) dx[l.offset + i] = dy[i];
      addg(l.inputs[0], dx);
      break;
    }
    case LayerKind::Sum: {
      for (const auto& name : l.inputs) addg(name, dy);
      break;
    }
    case LayerKind::AbsDiffSum:
      throw Error("train", "absdiffsum is a deployment head, not trainable");
  }
}

}  // namespace detail

// Minimal full-batch gradient-descent trainer with momentum: deterministic
// under a fixed seed, sufficient for desk-scale synthetic tasks. Classifier
// heads train with cross-entropy on the output logits; autoencoders with
// squared reconstruction error.
inline ModelGraph fit_model(const ModelGraph& skeleton, const Mat& X,
                            const std::vector<int>& labels, const TrainConfig& cfg) {
  if (X.empty()) throw Error("train", "empty training set");
  bool classifier = skeleton.head == HeadKind::Classifier;
  if (classifier && labels.size() != X.size())
    throw Error("train", "labels required for classifier training");

  ModelGraph m = skeleton;
  Rng rng(cfg.seed);
  detail::init_params(m, rng);
  detail::calibrate_batchnorm(m, X);

  int out_len = m.output_len();
  std::vector<detail::LayerGrads> grads(m.layers.size()), vel(m.layers.size());
  for (size_t li = 0; li < m.layers.size(); ++li) {
    const auto& l = m.layers[li];
    grads[li].weight = zeros(l.weight.size(), l.weight.empty() ? 0 : l.weight[0].size());
    grads[li].bias = Vec(l.bias.size(), 0.0);
    vel[li] = grads[li];
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (auto& g : grads) {
      for (auto& row : g.weight) std::fill(row.begin(), row.end(), 0.0);
      std::fill(g.bias.begin(), g.bias.end(), 0.0);
    }
    double loss = 0.0;
    for (size_t r = 0; r < X.size(); ++r) {
      detail::ForwardCache fc;
      fc.values[m.input] = X[r];
      for (const auto& l : m.layers) {
        std::vector<Vec> ins;
        for (const auto& name : l.inputs) ins.push_back(fc.values.at(name));
        fc.values[l.output] = detail::eval_layer(l, ins);
      }
      const Vec& out = fc.values.at(m.output);
      Vec dout(out.size(), 0.0);
      if (classifier) {
        // cross entropy via log-softmax on the logits
        double mx = out[0];
        for (double v : out) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : out) z += std::exp(v - mx);
        for (size_t i = 0; i < out.size(); ++i)
          dout[i] = std::exp(out[i] - mx) / z;
        loss += -(out[labels[r]] - mx - std::log(z));
        dout[labels[r]] -= 1.0;
      } else {
        for (size_t i = 0; i < out.size(); ++i) {
          double d = out[i] - X[r][i];
          loss += d * d / out_len;
          dout[i] = 2.0 * d / out_len;
        }
      }
      std::map<std::string, Vec> grads_by_tensor;
      grads_by_tensor[m.output] = dout;
      for (size_t li = m.layers.size(); li-- > 0;) {
        const auto& l = m.layers[li];
        auto it = grads_by_tensor.find(l.output);
        if (it == grads_by_tensor.end() || it->second.empty()) continue;
        detail::backward_layer(l, fc, it->second, grads_by_tensor, grads[li]);
      }
    }
    if (!std::isfinite(loss)) throw Error("train", "training diverged");
    double scale = cfg.lr / double(X.size());
    for (size_t li = 0; li < m.layers.size(); ++li) {
      auto& l = m.layers[li];
      if (l.kind == LayerKind::BatchNorm) continue;  // frozen statistics
      for (size_t a = 0; a < l.weight.size(); ++a)
        for (size_t b = 0; b < l.weight[a].size(); ++b) {
          vel[li].weight[a][b] =
              cfg.momentum * vel[li].weight[a][b] - scale * grads[li].weight[a][b];
          l.weight[a][b] += vel[li].weight[a][b];
        }
      for (size_t a = 0; a < l.bias.size(); ++a) {
        vel[li].bias[a] = cfg.momentum * vel[li].bias[a] - scale * grads[li].bias[a];
        l.bias[a] += vel[li].bias[a];
      }
    }
  }
  return m;
}

inline double classifier_accuracy(const ModelGraph& m, const Mat& X,
                                  const std::vector<int>& labels) {
  size_t ok = 0;
  for (size_t i = 0; i < X.size(); ++i) {
    auto y = reference_infer(m, X[i]);
    int best = 0;
    for (size_t c = 1; c < y.size(); ++c)
      if (y[c] > y[best]) best = int(c);
    ok += best == labels[i];
  }
  return double(ok) / X.size();
}

}  // namespace matpipe
