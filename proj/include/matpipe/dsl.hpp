#pragma once

#include <cctype>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "matpipe/cluster.hpp"
#include "matpipe/lower.hpp"
#include "matpipe/model.hpp"
#include "matpipe/sim.hpp"

namespace matpipe {

// Parsed model description: three sections mirroring the primitives.
// partition declares the input and its segmentation, map declares the
// clustering-tree depth and the layer stack, reduce picks chain vs additive
// (per-segment sub-model) composition.
struct ParsedModel {
  std::string name;
  ModelGraph skeleton;  // shapes only; parameters are fit later
  PartitionPolicy policy;
  ClusterFitConfig map_tree{4, 1};     // depth for fuzzy map tables
  ClusterFitConfig packet_tree{4, 1};  // depth for per-packet front indexes
  int window = 1;
  std::vector<StreamFeature> features;  // stream models
  std::vector<int> feature_shifts;
  int bytes_per_packet = 0;
  bool reduce_sum = false;
  bool map_depth_set = false;
};

namespace dsl_detail {

struct Token {
  std::string text;
  int line = 0, col = 0;
};

inline std::vector<Token> tokenize(const std::string& text) {
  std::vector<Token> out;
  int line = 1, col = 1;
  size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    if (c == '\n') {
      ++line;
      col = 1;
      ++i;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++col;
      ++i;
      continue;
    }
    if (c == '#') {
      while (i < text.size() && text[i] != '\n') ++i;
      continue;
    }
    if (c == '{' || c == '}' || c == ';') {
      out.push_back({std::string(1, c), line, col});
      ++i;
      ++col;
      continue;
    }
    if (c == '>' && i + 1 < text.size() && text[i + 1] == '>') {
      out.push_back({">>", line, col});
      i += 2;
      col += 2;
      continue;
    }
    size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) &&
           text[j] != '{' && text[j] != '}' && text[j] != ';' && text[j] != '#' &&
           !(text[j] == '>' && j + 1 < text.size() && text[j + 1] == '>'))
      ++j;
    out.push_back({text.substr(i, j - i), line, col});
    col += int(j - i);
    i = j;
  }
  return out;
}

struct Cursor {
  const std::vector<Token>* toks;
  size_t pos = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    if (pos < toks->size()) {
      const auto& t = (*toks)[pos];
      throw Error("dsl", msg + " at line " + std::to_string(t.line) + ", col " +
                             std::to_string(t.col) + " (near '" + t.text + "')");
    }
    throw Error("dsl", msg + " at end of input");
  }
  bool done() const { return pos >= toks->size(); }
  const std::string& peek() const {
    if (done()) throw Error("dsl", "unexpected end of input");
    return (*toks)[pos].text;
  }
  std::string next() {
    if (done()) throw Error("dsl", "unexpected end of input");
    return (*toks)[pos++].text;
  }
  void expect(const std::string& t) {
    if (done() || peek() != t) fail("expected '" + t + "'");
    ++pos;
  }
  bool accept(const std::string& t) {
    if (!done() && peek() == t) {
      ++pos;
      return true;
    }
    return false;
  }
  int integer() {
    std::string t = next();
    try {
      size_t used = 0;
      int v = std::stoi(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return v;
    } catch (...) {
      --pos;
      fail("expected an integer");
    }
  }
  void skip_separators() {
    while (!done() && peek() == ";") ++pos;
  }
};

struct StackItem {
  LayerKind kind;
  int a = 0, b = 0, c = 0;  // kind-specific integers
};

inline std::vector<StackItem> parse_layers(Cursor& cur) {
  std::vector<StackItem> stack;
  cur.expect("{");
  cur.skip_separators();
  while (!cur.accept("}")) {
    std::string word = cur.next();
    auto kind = layer_kind_from_name(word);
    if (!kind) {
      --cur.pos;
      cur.fail("unknown layer kind '" + word + "'");
    }
    StackItem item{*kind, 0, 0, 0};
    switch (*kind) {
      case LayerKind::FC: item.a = cur.integer(); break;
      case LayerKind::Conv1D:
        item.a = cur.integer();  // filters
        item.b = cur.integer();  // kernel
        item.c = cur.integer();  // stride
        break;
      case LayerKind::AvgPool:
      case LayerKind::MaxPool: item.a = cur.integer(); break;
      case LayerKind::Embedding:
        item.a = cur.integer();  // vocab
        item.b = cur.integer();  // dim
        break;
      case LayerKind::BatchNorm:
      case LayerKind::Bias:
      case LayerKind::ReLU:
      case LayerKind::Tanh:
      case LayerKind::Sigmoid:
      case LayerKind::Softmax:
        break;
      default:
        --cur.pos;
        cur.fail("layer kind '" + word + "' is not allowed in a stack");
    }
    stack.push_back(item);
    cur.skip_separators();
  }
  if (stack.empty()) throw Error("dsl", "empty layer stack");
  return stack;
}

// Appends the stack to a builder-ish state on the skeleton with zeroed
// parameters of the right shapes.
struct ChainState {
  ModelGraph* m;
  std::string cur;
  int cur_len;
  int counter = 0;
  std::string prefix;

  std::string fresh(int len) {
    std::string n = prefix + "t" + std::to_string(counter++);
    m->tensors.push_back({n, {len}, TensorRole::Activation});
    return n;
  }
  LayerSpec& push(LayerKind kind, int out_len) {
    LayerSpec l;
    l.kind = kind;
    l.name = prefix + layer_kind_name(kind) + std::to_string(counter);
    l.inputs = {cur};
    l.output = fresh(out_len);
    cur = l.output;
    cur_len = out_len;
    m->layers.push_back(l);
    return m->layers.back();
  }
};

inline void append_stack(ChainState& st, const std::vector<StackItem>& stack) {
  for (const auto& item : stack) {
    int n = st.cur_len;
    switch (item.kind) {
      case LayerKind::FC: {
        auto& l = st.push(LayerKind::FC, item.a);
        l.weight = zeros(item.a, n);
        l.bias = Vec(item.a, 0.0);
        break;
      }
      case LayerKind::Conv1D: {
        if (item.b > n || (n - item.b) % item.c != 0)
          throw Error("dsl", "conv1d kernel/stride do not fit the input length");
        int pos = (n - item.b) / item.c + 1;
        auto& l = st.push(LayerKind::Conv1D, item.a * pos);
        l.weight = zeros(item.a, item.b);
        l.stride = item.c;
        break;
      }
      case LayerKind::BatchNorm: {
        auto& l = st.push(LayerKind::BatchNorm, n);
        l.gamma = Vec(n, 1.0);
        l.beta = Vec(n, 0.0);
        l.mean = Vec(n, 0.0);
        l.sigma = Vec(n, 1.0);
        break;
      }
      case LayerKind::Bias: {
        auto& l = st.push(LayerKind::Bias, n);
        l.bias = Vec(n, 0.0);
        break;
      }
      case LayerKind::ReLU: st.push(LayerKind::ReLU, n); break;
      case LayerKind::Tanh: st.push(LayerKind::Tanh, n); break;
      case LayerKind::Sigmoid: st.push(LayerKind::Sigmoid, n); break;
      case LayerKind::Softmax: st.push(LayerKind::Softmax, n); break;
      case LayerKind::AvgPool:
      case LayerKind::MaxPool: {
        if (item.a < 1 || n % item.a != 0)
          throw Error("dsl", "pool window does not divide the input length");
        auto& l = st.push(item.kind, n / item.a);
        l.window = item.a;
        break;
      }
      case LayerKind::Embedding: {
        auto& l = st.push(LayerKind::Embedding, n * item.b);
        l.weight = zeros(item.a, item.b);
        l.emb_lo = 0;
        l.emb_hi = item.a - 1;
        break;
      }
      default:
        throw Error("dsl", "unsupported stack layer");
    }
  }
}

}  // namespace dsl_detail

inline ParsedModel parse_model_dsl(const std::string& text) {
  using namespace dsl_detail;
  auto toks = tokenize(text);
  Cursor cur{&toks, 0};

  ParsedModel pm;
  cur.expect("model");
  pm.name = cur.next();
  cur.expect("{");

  int input_dim = 0;
  std::string input_name = "x";
  std::vector<StackItem> stack;
  bool have_map = false, have_partition = false;
  HeadKind head = HeadKind::Classifier;

  while (!cur.accept("}")) {
    cur.skip_separators();
    if (cur.accept("}")) break;
    std::string word = cur.next();
    if (word == "head") {
      std::string h = cur.next();
      if (h == "classifier") head = HeadKind::Classifier;
      else if (h == "autoencoder") head = HeadKind::Autoencoder;
      else { --cur.pos; cur.fail("head must be classifier or autoencoder"); }
    } else if (word == "window") {
      pm.window = cur.integer();
      if (pm.window < 1) cur.fail("window must be >= 1");
    } else if (word == "input") {
      input_name = cur.next();
      input_dim = cur.integer();
      if (input_dim < 1) cur.fail("input dim must be >= 1");
    } else if (word == "features") {
      while (!cur.done() && cur.peek() != ";" && cur.peek() != "}" &&
             cur.peek() != "partition" && cur.peek() != "map" &&
             cur.peek() != "packet" && cur.peek() != "reduce") {
        std::string f = cur.next();
        StreamFeature sf;
        int shift = 0;
        if (f == "pkt_len") sf = StreamFeature::PktLen;
        else if (f == "ipd") sf = StreamFeature::Ipd;
        else if (f == "bytes") {
          sf = StreamFeature::Bytes;
          pm.bytes_per_packet = cur.integer();
        } else {
          --cur.pos;
          cur.fail("unknown feature '" + f + "'");
        }
        if (cur.accept(">>")) shift = cur.integer();
        pm.features.push_back(sf);
        pm.feature_shifts.push_back(shift);
      }
    } else if (word == "partition") {
      have_partition = true;
      cur.expect("{");
      cur.skip_separators();
      while (!cur.accept("}")) {
        std::string key = cur.next();
        if (key == "segment_size") pm.policy.weighted_segment = cur.integer();
        else if (key == "embed_size") pm.policy.embed_segment = cur.integer();
        else if (key == "pair_size") pm.policy.pair_segment = cur.integer();
        else if (key == "inner_segment_size")
          pm.policy.inner_weighted_segment = cur.integer();
        else { --cur.pos; cur.fail("unknown partition setting '" + key + "'"); }
        cur.skip_separators();
      }
    } else if (word == "packet") {
      cur.expect("{");
      cur.skip_separators();
      while (!cur.accept("}")) {
        std::string key = cur.next();
        if (key == "depth") pm.packet_tree.depth = cur.integer();
        else { --cur.pos; cur.fail("unknown packet setting '" + key + "'"); }
        cur.skip_separators();
      }
    } else if (word == "map") {
      have_map = true;
      cur.expect("{");
      cur.skip_separators();
      while (!cur.accept("}")) {
        std::string key = cur.next();
        if (key == "depth") {
          pm.map_tree.depth = cur.integer();
          pm.map_depth_set = true;
        } else if (key == "layers") {
          stack = parse_layers(cur);
        } else {
          --cur.pos;
          cur.fail("unknown map setting '" + key + "'");
        }
        cur.skip_separators();
      }
    } else if (word == "reduce") {
      cur.expect("{");
      cur.skip_separators();
      std::string mode = cur.next();
      if (mode == "sum") pm.reduce_sum = true;
      else if (mode == "none") pm.reduce_sum = false;
      else { --cur.pos; cur.fail("reduce must be sum or none"); }
      cur.skip_separators();
      cur.expect("}");
    } else {
      --cur.pos;
      cur.fail("unknown section '" + word + "'");
    }
    cur.skip_separators();
  }

  if (!have_map || stack.empty())
    throw Error("dsl", "model " + pm.name + ": missing map section with layers");
  if (!pm.map_depth_set)
    throw Error("dsl", "model " + pm.name + ": map block is missing its depth");
  if (!have_partition)
    throw Error("dsl", "model " + pm.name + ": missing partition section");

  bool stream = pm.window > 1 || !pm.features.empty();
  int per_packet = 0;
  if (stream) {
    if (pm.features.empty())
      throw Error("dsl", "model " + pm.name + ": windowed model needs features");
    for (auto f : pm.features)
      per_packet += f == StreamFeature::Bytes ? pm.bytes_per_packet : 1;
    input_dim = per_packet * pm.window;
  } else if (input_dim == 0) {
    throw Error("dsl", "model " + pm.name + ": missing input declaration");
  }

  ModelGraph& m = pm.skeleton;
  m.name = pm.name;
  m.head = head;
  m.input = input_name;
  m.tensors.push_back({input_name, {input_dim}, TensorRole::Input});

  if (!pm.reduce_sum) {
    ChainState st{&m, input_name, input_dim, 0, ""};
    append_stack(st, stack);
    m.output = st.cur;
  } else {
    // additive composition: one sub-model per input segment, summed
    int seg = std::min(pm.policy.weighted_segment, input_dim);
    int k = (input_dim + seg - 1) / seg;
    std::vector<std::string> branch_outputs;
    int out_len = -1;
    for (int b = 0; b < k; ++b) {
      int offset = b * seg;
      int len = std::min(seg, input_dim - offset);
      ChainState st{&m, input_name, input_dim, 0, "b" + std::to_string(b) + "_"};
      auto& sl = st.push(LayerKind::Slice, len);
      sl.offset = offset;
      sl.len = len;
      append_stack(st, stack);
      if (out_len < 0) out_len = st.cur_len;
      else if (out_len != st.cur_len)
        throw Error("dsl", "branch output lengths differ");
      branch_outputs.push_back(st.cur);
    }
    LayerSpec sum;
    sum.kind = LayerKind::Sum;
    sum.name = "sum";
    sum.inputs = branch_outputs;
    sum.output = "y";
    m.tensors.push_back({"y", {out_len}, TensorRole::Activation});
    m.layers.push_back(sum);
    m.output = "y";
  }
  for (auto& t : m.tensors)
    if (t.name == m.output) t.role = TensorRole::Output;

  auto violations = validate_model(m);
  if (!violations.empty())
    throw Error("dsl", "model " + pm.name + ": " + violations[0].where + ": " +
                           violations[0].message);
  return pm;
}

// Canonical text form; parse(serialize(pm)) reproduces the structure.
inline std::string serialize_model_dsl(const ParsedModel& pm) {
  std::ostringstream os;
  os << "model " << pm.name << " {\n";
  os << "  head "
     << (pm.skeleton.head == HeadKind::Classifier ? "classifier" : "autoencoder")
     << "\n";
  os << "  window " << pm.window << "\n";
  if (!pm.features.empty()) {
    os << "  features";
    for (size_t i = 0; i < pm.features.size(); ++i) {
      switch (pm.features[i]) {
        case StreamFeature::PktLen: os << " pkt_len"; break;
        case StreamFeature::Ipd: os << " ipd"; break;
        case StreamFeature::Bytes: os << " bytes " << pm.bytes_per_packet; break;
      }
      if (pm.feature_shifts[i]) os << " >> " << pm.feature_shifts[i];
    }
    os << "\n";
  } else {
    os << "  input " << pm.skeleton.input << " " << pm.skeleton.input_len() << "\n";
  }
  os << "  partition { segment_size " << pm.policy.weighted_segment;
  if (pm.policy.embed_segment != 1) os << " ; embed_size " << pm.policy.embed_segment;
  if (pm.policy.pair_segment != 1) os << " ; pair_size " << pm.policy.pair_segment;
  if (pm.policy.inner_weighted_segment)
    os << " ; inner_segment_size " << pm.policy.inner_weighted_segment;
  os << " }\n";
  os << "  packet { depth " << pm.packet_tree.depth << " }\n";
  os << "  map {\n    depth " << pm.map_tree.depth << "\n    layers { ";

  // recover the stack from the first chain (or branch 0)
  const auto& m = pm.skeleton;
  bool first = true;
  for (const auto& l : m.layers) {
    if (pm.reduce_sum && l.name.rfind("b0_", 0) != 0) continue;
    if (l.kind == LayerKind::Slice || l.kind == LayerKind::Sum) continue;
    if (!first) os << " ; ";
    first = false;
    os << layer_kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::FC: os << " " << l.weight.size(); break;
      case LayerKind::Conv1D:
        os << " " << l.weight.size() << " " << l.weight[0].size() << " " << l.stride;
        break;
      case LayerKind::AvgPool:
      case LayerKind::MaxPool: os << " " << l.window; break;
      case LayerKind::Embedding:
        os << " " << l.weight.size() << " " << l.weight[0].size();
        break;
      default: break;
    }
  }
  os << " }\n  }\n";
  os << "  reduce { " << (pm.reduce_sum ? "sum" : "none") << " }\n";
  os << "}\n";
  return os.str();
}

}  // namespace matpipe
