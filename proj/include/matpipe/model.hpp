#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "matpipe/common.hpp"

namespace matpipe {

enum class TensorRole { Input, Activation, Output };

struct TensorSpec {
  std::string name;
  std::vector<int> dims;  // flat semantics: length = product of dims
  TensorRole role = TensorRole::Activation;

  int length() const {
    int n = 1;
    for (int d : dims) n *= d;
    return n;
  }
};

enum class LayerKind {
  FC,
  Conv1D,
  BatchNorm,
  Bias,
  ReLU,
  Tanh,
  Sigmoid,
  Softmax,
  AvgPool,
  MaxPool,
  Embedding,
  Hadamard,
  AbsDiffSum,
  Slice,  // structural: passes through a contiguous sub-range
  Sum,    // structural: element-wise sum of n inputs
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::FC: return "fc";
    case LayerKind::Conv1D: return "conv1d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Bias: return "bias";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::Softmax: return "softmax";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Embedding: return "embedding";
    case LayerKind::Hadamard: return "hadamard";
    case LayerKind::AbsDiffSum: return "absdiffsum";
    case LayerKind::Slice: return "slice";
    case LayerKind::Sum: return "sum";
  }
  return "?";
}

inline std::optional<LayerKind> layer_kind_from_name(const std::string& s) {
  static const std::map<std::string, LayerKind> table = {
      {"fc", LayerKind::FC},           {"conv1d", LayerKind::Conv1D},
      {"batchnorm", LayerKind::BatchNorm}, {"bias", LayerKind::Bias},
      {"relu", LayerKind::ReLU},       {"tanh", LayerKind::Tanh},
      {"sigmoid", LayerKind::Sigmoid}, {"softmax", LayerKind::Softmax},
      {"avgpool", LayerKind::AvgPool}, {"maxpool", LayerKind::MaxPool},
      {"embedding", LayerKind::Embedding}, {"hadamard", LayerKind::Hadamard},
      {"absdiffsum", LayerKind::AbsDiffSum}, {"slice", LayerKind::Slice},
      {"sum", LayerKind::Sum}};
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::FC;
  std::vector<std::string> inputs;  // tensor names
  std::string output;               // tensor name

  // kind-specific parameters (full precision)
  Mat weight;   // FC: out x in; Conv1D: filters x kernel; Embedding: vocab x dim
  Vec bias;     // FC / Bias
  Vec gamma, beta, mean, sigma;  // BatchNorm
  int stride = 1;                // Conv1D
  int window = 1;                // AvgPool / MaxPool
  int emb_lo = 0, emb_hi = -1;   // Embedding index domain (inclusive)
  int offset = 0, len = 0;       // Slice
};

enum class HeadKind { Classifier, Autoencoder };

struct ModelGraph {
  std::string name;
  HeadKind head = HeadKind::Classifier;
  std::vector<TensorSpec> tensors;
  std::vector<LayerSpec> layers;
  std::string input;   // designated input tensor
  std::string output;  // designated output tensor

  const TensorSpec* find_tensor(const std::string& n) const {
    for (const auto& t : tensors)
      if (t.name == n) return &t;
    return nullptr;
  }
  TensorSpec* find_tensor(const std::string& n) {
    for (auto& t : tensors)
      if (t.name == n) return &t;
    return nullptr;
  }
  int input_len() const {
    const auto* t = find_tensor(input);
    return t ? t->length() : 0;
  }
  int output_len() const {
    const auto* t = find_tensor(output);
    return t ? t->length() : 0;
  }
};

struct Violation {
  std::string where;
  std::string message;
};

namespace detail {

inline int conv_positions(int in_len, int kernel, int stride) {
  if (kernel > in_len) return 0;
  return (in_len - kernel) / stride + 1;
}

}  // namespace detail

// Structural and parameter-shape validation. Violations are data, not
// failures: callers decide whether to proceed.
inline std::vector<Violation> validate_model(const ModelGraph& m) {
  std::vector<Violation> out;
  auto bad = [&](const std::string& where, const std::string& msg) {
    out.push_back({where, msg});
  };

  std::set<std::string> names;
  for (const auto& t : m.tensors) {
    if (!names.insert(t.name).second) bad(t.name, "duplicate tensor name");
    if (t.dims.empty()) bad(t.name, "empty dims");
    for (int d : t.dims)
      if (d < 1) bad(t.name, "non-positive dim");
  }
  if (!m.find_tensor(m.input)) bad(m.input, "missing input tensor");
  if (!m.find_tensor(m.output)) bad(m.output, "missing output tensor");

  int input_roles = 0, output_roles = 0;
  for (const auto& t : m.tensors) {
    if (t.role == TensorRole::Input) ++input_roles;
    if (t.role == TensorRole::Output) ++output_roles;
  }
  if (input_roles != 1) bad("model", "expected exactly one input tensor");
  if (output_roles != 1) bad("model", "expected exactly one output tensor");

  // single producer per tensor; produced-before-consumed in layer order
  std::map<std::string, int> producer;
  for (size_t li = 0; li < m.layers.size(); ++li) {
    const auto& l = m.layers[li];
    if (producer.count(l.output))
      bad(l.name, "multiple producers for tensor " + l.output);
    producer[l.output] = int(li);
  }
  if (producer.count(m.input)) bad(m.input, "input tensor has a producer");
  std::set<std::string> ready = {m.input};
  for (const auto& l : m.layers) {
    for (const auto& in : l.inputs) {
      if (!m.find_tensor(in)) {
        bad(l.name, "unknown input tensor " + in);
      } else if (!ready.count(in)) {
        bad(l.name, "input " + in + " not produced before use (cycle or order)");
      }
    }
    ready.insert(l.output);
  }
  if (!ready.count(m.output) && !m.layers.empty())
    bad(m.output, "output tensor never produced");

  auto in_len = [&](const LayerSpec& l, int idx = 0) -> int {
    const auto* t = idx < int(l.inputs.size()) ? m.find_tensor(l.inputs[idx]) : nullptr;
    return t ? t->length() : -1;
  };
  auto out_len = [&](const LayerSpec& l) -> int {
    const auto* t = m.find_tensor(l.output);
    return t ? t->length() : -1;
  };

  for (const auto& l : m.layers) {
    int ni = in_len(l), no = out_len(l);
    if (ni < 0 || no < 0) continue;
    switch (l.kind) {
      case LayerKind::FC:
        if (int(l.weight.size()) != no) bad(l.name, "weight rows != output len");
        for (const auto& row : l.weight)
          if (int(row.size()) != ni) bad(l.name, "weight cols != input len");
        if (int(l.bias.size()) != no) bad(l.name, "bias size != output len");
        break;
      case LayerKind::Conv1D: {
        if (l.weight.empty()) { bad(l.name, "missing kernels"); break; }
        int kernel = int(l.weight[0].size());
        if (l.stride < 1) bad(l.name, "stride must be >= 1");
        int pos = detail::conv_positions(ni, kernel, l.stride);
        if (pos <= 0) bad(l.name, "kernel wider than input");
        else if ((ni - kernel) % l.stride != 0)
          bad(l.name, "input length not aligned to stride");
        else if (no != int(l.weight.size()) * pos)
          bad(l.name, "output len != filters * positions");
        break;
      }
      case LayerKind::BatchNorm:
        if (int(l.gamma.size()) != ni || int(l.beta.size()) != ni ||
            int(l.mean.size()) != ni || int(l.sigma.size()) != ni)
          bad(l.name, "batchnorm parameter size mismatch");
        for (double s : l.sigma)
          if (!(s > 0.0)) bad(l.name, "non-positive sigma");
        if (no != ni) bad(l.name, "output len != input len");
        break;
      case LayerKind::Bias:
        if (int(l.bias.size()) != ni) bad(l.name, "bias size mismatch");
        if (no != ni) bad(l.name, "output len != input len");
        break;
      case LayerKind::ReLU:
      case LayerKind::Tanh:
      case LayerKind::Sigmoid:
      case LayerKind::Softmax:
        if (no != ni) bad(l.name, "output len != input len");
        break;
      case LayerKind::AvgPool:
      case LayerKind::MaxPool:
        if (l.window < 1) bad(l.name, "window must be >= 1");
        else if (ni % l.window != 0) bad(l.name, "window does not divide input len");
        else if (no != ni / l.window) bad(l.name, "output len != input/window");
        break;
      case LayerKind::Embedding: {
        if (l.emb_hi < l.emb_lo) bad(l.name, "embedding domain empty");
        int vocab = int(l.weight.size());
        if (vocab != l.emb_hi - l.emb_lo + 1)
          bad(l.name, "embedding table rows != domain size");
        int dim = l.weight.empty() ? 0 : int(l.weight[0].size());
        if (no != ni * dim) bad(l.name, "output len != input len * dim");
        break;
      }
      case LayerKind::Hadamard: {
        if (l.inputs.size() != 2) { bad(l.name, "hadamard needs two inputs"); break; }
        int nb = in_len(l, 1);
        if (nb != ni) bad(l.name, "input dims differ");
        if (no != ni) bad(l.name, "output len != input len");
        break;
      }
      case LayerKind::AbsDiffSum: {
        if (l.inputs.size() != 2) { bad(l.name, "absdiffsum needs two inputs"); break; }
        int nb = in_len(l, 1);
        if (nb != ni) bad(l.name, "input dims differ");
        if (no != 1) bad(l.name, "output must be scalar");
        break;
      }
      case LayerKind::Slice:
        if (l.offset < 0 || l.len < 1 || l.offset + l.len > ni)
          bad(l.name, "slice out of range");
        else if (no != l.len) bad(l.name, "output len != slice len");
        break;
      case LayerKind::Sum: {
        if (l.inputs.size() < 1) { bad(l.name, "sum needs inputs"); break; }
        for (size_t i = 1; i < l.inputs.size(); ++i)
          if (in_len(l, int(i)) != ni) bad(l.name, "sum input dims differ");
        if (no != ni) bad(l.name, "output len != input len");
        break;
      }
    }
  }

  if (m.head == HeadKind::Autoencoder && m.input_len() != m.output_len())
    bad("model", "autoencoder output dims must equal input dims");

  return out;
}

namespace detail {

inline Vec eval_layer(const LayerSpec& l, const std::vector<Vec>& ins) {
  const Vec& x = ins[0];
  switch (l.kind) {
    case LayerKind::FC: {
      Vec y = matvec(l.weight, x);
      for (size_t i = 0; i < y.size(); ++i) y[i] += l.bias[i];
      return y;
    }
    case LayerKind::Conv1D: {
      int filters = int(l.weight.size());
      int kernel = int(l.weight[0].size());
      int pos = conv_positions(int(x.size()), kernel, l.stride);
      Vec y(size_t(filters) * pos, 0.0);  // filter-major: y[f*pos + t]
      for (int f = 0; f < filters; ++f)
        for (int t = 0; t < pos; ++t) {
          double s = 0.0;
          for (int j = 0; j < kernel; ++j) s += l.weight[f][j] * x[t * l.stride + j];
          y[size_t(f) * pos + t] = s;
        }
      return y;
    }
    case LayerKind::BatchNorm: {
      Vec y(x.size());
      for (size_t i = 0; i < x.size(); ++i)
        y[i] = l.gamma[i] * (x[i] - l.mean[i]) / l.sigma[i] + l.beta[i];
      return y;
    }
    case LayerKind::Bias: {
      Vec y(x.size());
      for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] + l.bias[i];
      return y;
    }
    case LayerKind::ReLU: {
      Vec y(x.size());
      for (size_t i = 0; i < x.size(); ++i) y[i] = std::max(0.0, x[i]);
      return y;
    }
    case LayerKind::Tanh: {
      Vec y(x.size());
      for (size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
      return y;
    }
    case LayerKind::Sigmoid: {
      Vec y(x.size());
      for (size_t i = 0; i < x.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
      return y;
    }
    case LayerKind::Softmax: {
      Vec y(x.size());
      double s = 0.0;
      for (size_t i = 0; i < x.size(); ++i) { y[i] = std::exp(x[i]); s += y[i]; }
      for (auto& v : y) v /= s;
      return y;
    }
    case LayerKind::AvgPool: {
      int k = l.window, n = int(x.size()) / l.window;
      Vec y(n, 0.0);
      for (int t = 0; t < n; ++t) {
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += x[t * k + j];
        y[t] = s / k;
      }
      return y;
    }
    case LayerKind::MaxPool: {
      int k = l.window, n = int(x.size()) / l.window;
      Vec y(n, 0.0);
      for (int t = 0; t < n; ++t) {
        double s = x[t * k];
        for (int j = 1; j < k; ++j) s = std::max(s, x[t * k + j]);
        y[t] = s;
      }
      return y;
    }
    case LayerKind::Embedding: {
      int dim = int(l.weight[0].size());
      Vec y(x.size() * dim);
      for (size_t i = 0; i < x.size(); ++i) {
        long long idx = std::llround(x[i]);
        if (idx < l.emb_lo || idx > l.emb_hi)
          throw Error("infer", "embedding index " + std::to_string(idx) +
                                   " outside domain in layer " + l.name);
        const Vec& row = l.weight[size_t(idx - l.emb_lo)];
        for (int j = 0; j < dim; ++j) y[i * dim + j] = row[j];
      }
      return y;
    }
    case LayerKind::Hadamard: {
      const Vec& b = ins[1];
      Vec y(x.size());
      for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] * b[i];
      return y;
    }
    case LayerKind::AbsDiffSum: {
      const Vec& b = ins[1];
      double s = 0.0;
      for (size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - b[i]);
      return {s};
    }
    case LayerKind::Slice:
      return Vec(x.begin() + l.offset, x.begin() + l.offset + l.len);
    case LayerKind::Sum: {
      Vec y(x.size(), 0.0);
      for (const auto& in : ins)
        for (size_t i = 0; i < y.size(); ++i) y[i] += in[i];
      return y;
    }
  }
  throw Error("infer", "unreachable layer kind");
}

}  // namespace detail

// Full-precision (64-bit float) reference execution: the correctness oracle
// for everything downstream. Deterministic; layers run in listed order,
// which validation guarantees is topological.
inline Vec reference_infer(const ModelGraph& m, const Vec& input) {
  if (int(input.size()) != m.input_len())
    throw Error("infer", "input length mismatch");
  std::map<std::string, Vec> values;
  values[m.input] = input;
  for (const auto& l : m.layers) {
    std::vector<Vec> ins;
    for (const auto& n : l.inputs) {
      auto it = values.find(n);
      if (it == values.end()) throw Error("infer", "tensor not ready: " + n);
      ins.push_back(it->second);
    }
    values[l.output] = detail::eval_layer(l, ins);
  }
  auto it = values.find(m.output);
  if (it == values.end()) throw Error("infer", "output tensor missing");
  return it->second;
}

struct RangeMap {
  // tensor name -> (min, max) over all elements, margin applied
  std::map<std::string, std::pair<double, double>> ranges;

  std::pair<double, double> at(const std::string& n) const {
    auto it = ranges.find(n);
    if (it == ranges.end()) throw Error("ranges", "no range for tensor " + n);
    return it->second;
  }
};

// Observes per-tensor min/max over reference inference on every dataset row,
// then widens each bound away from zero by the relative margin.
inline RangeMap infer_ranges(const ModelGraph& m, const Mat& dataset,
                             double margin = 0.1) {
  if (dataset.empty()) throw Error("ranges", "empty dataset");
  std::map<std::string, std::pair<double, double>> mm;
  auto track = [&](const std::string& n, const Vec& v) {
    auto it = mm.find(n);
    if (it == mm.end()) {
      double lo = v[0], hi = v[0];
      for (double x : v) { lo = std::min(lo, x); hi = std::max(hi, x); }
      mm[n] = {lo, hi};
    } else {
      for (double x : v) {
        it->second.first = std::min(it->second.first, x);
        it->second.second = std::max(it->second.second, x);
      }
    }
  };
  for (const auto& row : dataset) {
    std::map<std::string, Vec> values;
    values[m.input] = row;
    track(m.input, row);
    for (const auto& l : m.layers) {
      std::vector<Vec> ins;
      for (const auto& n : l.inputs) ins.push_back(values.at(n));
      values[l.output] = detail::eval_layer(l, ins);
      track(l.output, values[l.output]);
    }
  }
  RangeMap out;
  for (auto& [n, r] : mm) {
    double lo = r.first - margin * std::fabs(r.first);
    double hi = r.second + margin * std::fabs(r.second);
    out.ranges[n] = {lo, hi};
  }
  return out;
}

// ---- JSON serialization ----

inline nlohmann::json model_to_json(const ModelGraph& m) {
  nlohmann::json j;
  j["name"] = m.name;
  j["head"] = m.head == HeadKind::Classifier ? "classifier" : "autoencoder";
  j["input"] = m.input;
  j["output"] = m.output;
  j["tensors"] = nlohmann::json::array();
  for (const auto& t : m.tensors) {
    const char* role = t.role == TensorRole::Input      ? "input"
                       : t.role == TensorRole::Output   ? "output"
                                                        : "activation";
    j["tensors"].push_back({{"name", t.name}, {"dims", t.dims}, {"role", role}});
  }
  j["layers"] = nlohmann::json::array();
  for (const auto& l : m.layers) {
    nlohmann::json jl;
    jl["name"] = l.name;
    jl["kind"] = layer_kind_name(l.kind);
    jl["inputs"] = l.inputs;
    jl["output"] = l.output;
    nlohmann::json p;
    switch (l.kind) {
      case LayerKind::FC: p["weight"] = l.weight; p["bias"] = l.bias; break;
      case LayerKind::Conv1D: p["kernels"] = l.weight; p["stride"] = l.stride; break;
      case LayerKind::BatchNorm:
        p["gamma"] = l.gamma; p["beta"] = l.beta;
        p["mean"] = l.mean; p["sigma"] = l.sigma;
        break;
      case LayerKind::Bias: p["bias"] = l.bias; break;
      case LayerKind::AvgPool:
      case LayerKind::MaxPool: p["window"] = l.window; break;
      case LayerKind::Embedding:
        p["table"] = l.weight; p["lo"] = l.emb_lo; p["hi"] = l.emb_hi;
        break;
      case LayerKind::Slice: p["offset"] = l.offset; p["len"] = l.len; break;
      default: break;
    }
    jl["params"] = p;
    j["layers"].push_back(jl);
  }
  return j;
}

inline ModelGraph model_from_json(const nlohmann::json& j) {
  ModelGraph m;
  m.name = j.value("name", "");
  m.head = j.value("head", "classifier") == std::string("autoencoder")
               ? HeadKind::Autoencoder
               : HeadKind::Classifier;
  m.input = j.at("input");
  m.output = j.at("output");
  for (const auto& jt : j.at("tensors")) {
    TensorSpec t;
    t.name = jt.at("name");
    t.dims = jt.at("dims").get<std::vector<int>>();
    std::string role = jt.value("role", "activation");
    t.role = role == "input"    ? TensorRole::Input
             : role == "output" ? TensorRole::Output
                                : TensorRole::Activation;
    m.tensors.push_back(t);
  }
  for (const auto& jl : j.at("layers")) {
    LayerSpec l;
    l.name = jl.at("name");
    auto kind = layer_kind_from_name(jl.at("kind"));
    if (!kind) throw Error("model", "unknown layer kind in json");
    l.kind = *kind;
    l.inputs = jl.at("inputs").get<std::vector<std::string>>();
    l.output = jl.at("output");
    const auto& p = jl.at("params");
    switch (l.kind) {
      case LayerKind::FC:
        l.weight = p.at("weight").get<Mat>();
        l.bias = p.at("bias").get<Vec>();
        break;
      case LayerKind::Conv1D:
        l.weight = p.at("kernels").get<Mat>();
        l.stride = p.at("stride");
        break;
      case LayerKind::BatchNorm:
        l.gamma = p.at("gamma").get<Vec>();
        l.beta = p.at("beta").get<Vec>();
        l.mean = p.at("mean").get<Vec>();
        l.sigma = p.at("sigma").get<Vec>();
        break;
      case LayerKind::Bias: l.bias = p.at("bias").get<Vec>(); break;
      case LayerKind::AvgPool:
      case LayerKind::MaxPool: l.window = p.at("window"); break;
      case LayerKind::Embedding:
        l.weight = p.at("table").get<Mat>();
        l.emb_lo = p.at("lo");
        l.emb_hi = p.at("hi");
        break;
      case LayerKind::Slice:
        l.offset = p.at("offset");
        l.len = p.at("len");
        break;
      default: break;
    }
    m.layers.push_back(l);
  }
  return m;
}

}  // namespace matpipe
