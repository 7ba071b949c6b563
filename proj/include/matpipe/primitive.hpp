#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "matpipe/cluster.hpp"
#include "matpipe/common.hpp"

namespace matpipe {

enum class FnKind {
  Affine,      // y = A x + c
  Elementwise, // named scalar op applied per element
  EmbedRows,   // per-element table row lookup, arity n -> n*dim
  PairMul,     // input [a;b] halves -> elementwise a*b
  PairMax,     // input [a;b] halves -> elementwise max(a,b)
  AbsDiffAcc,  // input [a;b] halves -> scalar sum |a-b|
  TreeIndex,   // clustering-tree fuzzy index of the segment
  Composite,   // functions applied left to right
};

enum class EwOp { ReLU, Tanh, Sigmoid, Exp, Recip };

inline const char* ew_op_name(EwOp op) {
  switch (op) {
    case EwOp::ReLU: return "relu";
    case EwOp::Tanh: return "tanh";
    case EwOp::Sigmoid: return "sigmoid";
    case EwOp::Exp: return "exp";
    case EwOp::Recip: return "recip";
  }
  return "?";
}

// Symbolic description of what one Map segment computes. Kept symbolic so
// fusion can compose and reorder functions before any table is built.
struct MapFunction {
  FnKind kind = FnKind::Affine;

  // Affine
  Mat A;
  Vec c;

  // Elementwise
  EwOp op = EwOp::ReLU;
  int ew_arity = 0;

  // EmbedRows
  Mat table;
  int emb_lo = 0, emb_hi = -1;

  // Pair ops
  int half = 0;

  // TreeIndex
  ClusterTree tree;

  // Composite
  std::vector<MapFunction> parts;

  static MapFunction affine(Mat a, Vec cc) {
    MapFunction f;
    f.kind = FnKind::Affine;
    f.A = std::move(a);
    f.c = std::move(cc);
    return f;
  }
  static MapFunction elementwise(EwOp o, int arity) {
    MapFunction f;
    f.kind = FnKind::Elementwise;
    f.op = o;
    f.ew_arity = arity;
    return f;
  }
  static MapFunction embed_rows(Mat t, int lo, int hi, int arity) {
    MapFunction f;
    f.kind = FnKind::EmbedRows;
    f.table = std::move(t);
    f.emb_lo = lo;
    f.emb_hi = hi;
    f.ew_arity = arity;
    return f;
  }
  static MapFunction pair_mul(int half) {
    MapFunction f;
    f.kind = FnKind::PairMul;
    f.half = half;
    return f;
  }
  static MapFunction pair_max(int half) {
    MapFunction f;
    f.kind = FnKind::PairMax;
    f.half = half;
    return f;
  }
  static MapFunction abs_diff_acc(int half) {
    MapFunction f;
    f.kind = FnKind::AbsDiffAcc;
    f.half = half;
    return f;
  }
  static MapFunction identity(int n) {
    Mat a = zeros(n, n);
    for (int i = 0; i < n; ++i) a[i][i] = 1.0;
    return affine(std::move(a), Vec(n, 0.0));
  }
  static MapFunction tree_index(ClusterTree t) {
    MapFunction f;
    f.kind = FnKind::TreeIndex;
    f.tree = std::move(t);
    return f;
  }
  static MapFunction composite(std::vector<MapFunction> ps) {
    MapFunction f;
    f.kind = FnKind::Composite;
    f.parts = std::move(ps);
    return f;
  }

  int in_arity() const {
    switch (kind) {
      case FnKind::Affine: return A.empty() ? 0 : int(A[0].size());
      case FnKind::Elementwise: return ew_arity;
      case FnKind::EmbedRows: return ew_arity;
      case FnKind::PairMul:
      case FnKind::PairMax:
      case FnKind::AbsDiffAcc: return 2 * half;
      case FnKind::TreeIndex: return tree.dim;
      case FnKind::Composite: return parts.front().in_arity();
    }
    return 0;
  }
  int out_arity() const {
    switch (kind) {
      case FnKind::Affine: return int(A.size());
      case FnKind::Elementwise: return ew_arity;
      case FnKind::EmbedRows:
        return ew_arity * (table.empty() ? 0 : int(table[0].size()));
      case FnKind::PairMul:
      case FnKind::PairMax: return half;
      case FnKind::AbsDiffAcc: return 1;
      case FnKind::TreeIndex: return 1;
      case FnKind::Composite: return parts.back().out_arity();
    }
    return 0;
  }

  // f(a+b) == f(a)+f(b): affine with zero constant, or a composite of such.
  bool linear() const {
    switch (kind) {
      case FnKind::Affine:
        for (double v : c)
          if (v != 0.0) return false;
        return true;
      case FnKind::Composite:
        for (const auto& p : parts)
          if (!p.linear()) return false;
        return true;
      default:
        return false;
    }
  }

  // Affine, possibly with a constant (handled by the bias-once reordering).
  bool affine_like() const {
    if (kind == FnKind::Affine) return true;
    if (kind == FnKind::Composite) {
      for (const auto& p : parts)
        if (!p.affine_like()) return false;
      return true;
    }
    return false;
  }

  // Per-index functions commute with partitioning: diagonal affine maps and
  // elementwise ops can be restricted to any index subset.
  bool splittable() const {
    switch (kind) {
      case FnKind::Elementwise: return true;
      case FnKind::Affine: {
        if (A.size() != (A.empty() ? 0 : A[0].size())) return false;
        for (size_t i = 0; i < A.size(); ++i)
          for (size_t j = 0; j < A[i].size(); ++j)
            if (i != j && A[i][j] != 0.0) return false;
        return true;
      }
      case FnKind::Composite:
        for (const auto& p : parts)
          if (!p.splittable()) return false;
        return true;
      default:
        return false;
    }
  }

  MapFunction restrict_to(const std::vector<int>& indices) const {
    switch (kind) {
      case FnKind::Elementwise: {
        MapFunction f = *this;
        f.ew_arity = int(indices.size());
        return f;
      }
      case FnKind::Affine: {
        MapFunction f;
        f.kind = FnKind::Affine;
        f.A = zeros(indices.size(), indices.size());
        f.c.resize(indices.size());
        for (size_t i = 0; i < indices.size(); ++i) {
          f.A[i][i] = A[indices[i]][indices[i]];
          f.c[i] = c[indices[i]];
        }
        return f;
      }
      case FnKind::Composite: {
        std::vector<MapFunction> ps;
        for (const auto& p : parts) ps.push_back(p.restrict_to(indices));
        return composite(std::move(ps));
      }
      default:
        throw Error("primitive", "restrict on non-splittable function");
    }
  }

  Vec eval(const Vec& x) const {
    switch (kind) {
      case FnKind::Affine: {
        Vec y = matvec(A, x);
        for (size_t i = 0; i < y.size(); ++i) y[i] += c[i];
        return y;
      }
      case FnKind::Elementwise: {
        Vec y(x.size());
        for (size_t i = 0; i < x.size(); ++i) {
          switch (op) {
            case EwOp::ReLU: y[i] = std::max(0.0, x[i]); break;
            case EwOp::Tanh: y[i] = std::tanh(x[i]); break;
            case EwOp::Sigmoid: y[i] = 1.0 / (1.0 + std::exp(-x[i])); break;
            case EwOp::Exp: y[i] = std::exp(x[i]); break;
            case EwOp::Recip: y[i] = 1.0 / x[i]; break;
          }
        }
        return y;
      }
      case FnKind::EmbedRows: {
        int dim = table.empty() ? 0 : int(table[0].size());
        Vec y(x.size() * dim);
        for (size_t i = 0; i < x.size(); ++i) {
          long long idx = std::llround(x[i]);
          idx = std::clamp<long long>(idx, emb_lo, emb_hi);
          const Vec& row = table[size_t(idx - emb_lo)];
          for (int j = 0; j < dim; ++j) y[i * dim + j] = row[j];
        }
        return y;
      }
      case FnKind::PairMul: {
        Vec y(half);
        for (int i = 0; i < half; ++i) y[i] = x[i] * x[half + i];
        return y;
      }
      case FnKind::PairMax: {
        Vec y(half);
        for (int i = 0; i < half; ++i) y[i] = std::max(x[i], x[half + i]);
        return y;
      }
      case FnKind::AbsDiffAcc: {
        double s = 0.0;
        for (int i = 0; i < half; ++i) s += std::abs(x[i] - x[half + i]);
        return {s};
      }
      case FnKind::TreeIndex:
        return {double(fuzzy_index(tree, x).first)};
      case FnKind::Composite: {
        Vec y = x;
        for (const auto& p : parts) y = p.eval(y);
        return y;
      }
    }
    throw Error("primitive", "unreachable function kind");
  }
};

enum class PrimKind { Partition, Map, SumReduce };

// Reference to one output part of a node. Partition parts are its segments,
// Map parts are its member outputs, SumReduce has a single part 0.
// node == -1 refers to the graph input vector (part must be 0).
struct PartRef {
  int node = -1;
  int part = 0;
  bool operator==(const PartRef& o) const { return node == o.node && part == o.part; }
};

// One segment of a Partition: a gather of index ranges over the node's
// concatenated source parts. Usually a single contiguous range.
struct Segment {
  std::vector<std::pair<int, int>> ranges;  // (start, len)
  int length() const {
    int n = 0;
    for (auto& [s, l] : ranges) n += l;
    return n;
  }
  static Segment contiguous(int start, int len) { return {{{start, len}}}; }
  static Segment from_positions(const std::vector<int>& pos) {
    Segment s;
    size_t i = 0;
    while (i < pos.size()) {
      int start = pos[i];
      int len = 1;
      while (i + len < pos.size() && pos[i + len] == start + len) ++len;
      s.ranges.push_back({start, len});
      i += len;
    }
    return s;
  }
  std::vector<int> positions() const {
    std::vector<int> out;
    for (auto& [s, l] : ranges)
      for (int i = 0; i < l; ++i) out.push_back(s + i);
    return out;
  }
};

// A Map node applies one function family to the segments of its input
// Partition: member i computes members[i](segment i). A Map node counts as
// one table lookup in fusion reports; each member becomes one physical table.
struct PrimitiveNode {
  int id = -1;
  PrimKind kind = PrimKind::Partition;
  std::string provenance;  // originating layer name

  // Partition
  std::vector<PartRef> sources;  // concatenated inputs
  std::vector<Segment> segments;

  // Map
  int partition = -1;
  std::vector<MapFunction> members;

  // SumReduce
  std::vector<PartRef> inputs;
  int out_arity = 0;
};

struct PrimitiveGraph {
  int input_arity = 0;
  std::vector<PrimitiveNode> nodes;  // node id == index
  std::vector<PartRef> outputs;      // concatenated graph output
  std::map<int, std::string> provenance_by_id() const {
    std::map<int, std::string> m;
    for (const auto& n : nodes) m[n.id] = n.provenance;
    return m;
  }

  int add(PrimitiveNode n) {
    n.id = int(nodes.size());
    nodes.push_back(std::move(n));
    return nodes.back().id;
  }

  int map_node_count() const {
    int c = 0;
    for (const auto& n : nodes)
      if (n.kind == PrimKind::Map) ++c;
    return c;
  }
  int map_member_count() const {
    int c = 0;
    for (const auto& n : nodes)
      if (n.kind == PrimKind::Map) c += int(n.members.size());
    return c;
  }
};

namespace detail {

using PartsValue = std::vector<Vec>;  // one vector per part

inline Vec gather_concat(const std::vector<PartsValue>& values, const Vec& input,
                         const std::vector<PartRef>& refs) {
  Vec out;
  for (const auto& r : refs) {
    const Vec& v = r.node < 0 ? input : values[r.node][r.part];
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

}  // namespace detail

// Full-precision evaluation of the graph: the lowering soundness oracle.
inline Vec eval_graph(const PrimitiveGraph& g, const Vec& input) {
  if (int(input.size()) != g.input_arity)
    throw Error("primitive", "graph input arity mismatch");
  std::vector<detail::PartsValue> values(g.nodes.size());
  for (const auto& n : g.nodes) {
    switch (n.kind) {
      case PrimKind::Partition: {
        Vec concat = detail::gather_concat(values, input, n.sources);
        for (const auto& seg : n.segments) {
          Vec v;
          for (auto& [s, l] : seg.ranges)
            v.insert(v.end(), concat.begin() + s, concat.begin() + s + l);
          values[n.id].push_back(std::move(v));
        }
        break;
      }
      case PrimKind::Map: {
        const auto& part = values[n.partition];
        for (size_t i = 0; i < n.members.size(); ++i)
          values[n.id].push_back(n.members[i].eval(part[i]));
        break;
      }
      case PrimKind::SumReduce: {
        Vec acc(n.out_arity, 0.0);
        for (const auto& r : n.inputs) {
          const Vec& v = r.node < 0 ? input : values[r.node][r.part];
          for (int i = 0; i < n.out_arity; ++i) acc[i] += v[i];
        }
        values[n.id].push_back(std::move(acc));
        break;
      }
    }
  }
  return detail::gather_concat(values, input, g.outputs);
}

inline int part_arity_of(const PrimitiveGraph& g, const PartRef& r) {
  if (r.node < 0) return g.input_arity;
  const auto& n = g.nodes[r.node];
  switch (n.kind) {
    case PrimKind::Partition: return n.segments[r.part].length();
    case PrimKind::Map: return n.members[r.part].out_arity();
    case PrimKind::SumReduce: return n.out_arity;
  }
  return 0;
}

// Walks partition aliasing back to the part that actually produces an
// element: returns the producing (ref, element), where ref is the graph
// input, a Map member, or a SumReduce output.
inline std::pair<PartRef, int> resolve_element(const PrimitiveGraph& g,
                                               const PartRef& ref, int elem) {
  PartRef r = ref;
  int e = elem;
  while (r.node >= 0 && g.nodes[r.node].kind == PrimKind::Partition) {
    const auto& n = g.nodes[r.node];
    int p = n.segments[r.part].positions()[e];
    if (n.sources.empty()) return {{-1, 0}, p};
    bool advanced = false;
    for (const auto& src : n.sources) {
      int a = part_arity_of(g, src);
      if (p < a) {
        r = src;
        e = p;
        advanced = true;
        break;
      }
      p -= a;
    }
    if (!advanced) throw Error("primitive", "segment position out of range");
  }
  return {r, e};
}

// Rebuilds the node list in dependency order (stable w.r.t. existing ids).
inline PrimitiveGraph topologize(const PrimitiveGraph& g) {
  std::vector<int> order;
  std::vector<char> done(g.nodes.size(), 0);
  std::function<void(int)> visit = [&](int id) {
    if (id < 0 || done[id]) return;
    done[id] = 1;
    const auto& n = g.nodes[id];
    if (n.kind == PrimKind::Partition)
      for (const auto& r : n.sources) visit(r.node);
    if (n.kind == PrimKind::Map) visit(n.partition);
    if (n.kind == PrimKind::SumReduce)
      for (const auto& r : n.inputs) visit(r.node);
    order.push_back(id);
  };
  for (const auto& r : g.outputs) visit(r.node);
  PrimitiveGraph out;
  out.input_arity = g.input_arity;
  std::vector<int> remap(g.nodes.size(), -1);
  for (int id : order) {
    remap[id] = int(out.nodes.size());
    out.nodes.push_back(g.nodes[id]);
    out.nodes.back().id = remap[id];
  }
  auto fix = [&](PartRef& r) {
    if (r.node >= 0) r.node = remap[r.node];
  };
  for (auto& n : out.nodes) {
    for (auto& r : n.sources) fix(r);
    if (n.partition >= 0) n.partition = remap[n.partition];
    for (auto& r : n.inputs) fix(r);
  }
  out.outputs = g.outputs;
  for (auto& r : out.outputs) fix(r);
  return out;
}

// Structural checks: ids consistent, partition segments disjoint and
// covering, member count matches segment count, SumReduce arities agree.
inline std::vector<std::string> check_graph(const PrimitiveGraph& g) {
  std::vector<std::string> errs;
  auto part_arity = [&](const PartRef& r) -> int {
    if (r.node < 0) return g.input_arity;
    const auto& n = g.nodes[r.node];
    switch (n.kind) {
      case PrimKind::Partition: return n.segments[r.part].length();
      case PrimKind::Map: return n.members[r.part].out_arity();
      case PrimKind::SumReduce: return n.out_arity;
    }
    return 0;
  };
  for (const auto& n : g.nodes) {
    if (n.id != int(&n - g.nodes.data())) errs.push_back("node id mismatch");
    switch (n.kind) {
      case PrimKind::Partition: {
        int total = 0;
        for (const auto& r : n.sources) {
          if (r.node >= n.id) errs.push_back("partition source not upstream");
          total += part_arity(r);
        }
        if (n.sources.empty()) total = g.input_arity;
        std::vector<int> hits(total, 0);
        for (const auto& seg : n.segments)
          for (int p : seg.positions()) {
            if (p < 0 || p >= total) { errs.push_back("segment out of range"); continue; }
            hits[p]++;
          }
        for (int h : hits)
          if (h != 1) { errs.push_back("segments do not tile the input"); break; }
        break;
      }
      case PrimKind::Map: {
        if (n.partition < 0 || n.partition >= n.id ||
            g.nodes[n.partition].kind != PrimKind::Partition) {
          errs.push_back("map must consume an upstream partition");
          break;
        }
        const auto& p = g.nodes[n.partition];
        if (p.segments.size() != n.members.size())
          errs.push_back("member count != segment count");
        for (size_t i = 0; i < n.members.size() && i < p.segments.size(); ++i)
          if (n.members[i].in_arity() != p.segments[i].length())
            errs.push_back("member arity != segment length");
        break;
      }
      case PrimKind::SumReduce: {
        for (const auto& r : n.inputs) {
          if (r.node >= n.id) errs.push_back("sumreduce input not upstream");
          else if (part_arity(r) != n.out_arity)
            errs.push_back("sumreduce operand arity mismatch");
        }
        break;
      }
    }
  }
  return errs;
}

// ---- JSON ----

inline nlohmann::json fn_to_json(const MapFunction& f) {
  nlohmann::json j;
  switch (f.kind) {
    case FnKind::Affine:
      j["kind"] = "affine"; j["A"] = f.A; j["c"] = f.c; break;
    case FnKind::Elementwise:
      j["kind"] = "elementwise"; j["op"] = ew_op_name(f.op); j["arity"] = f.ew_arity;
      break;
    case FnKind::EmbedRows:
      j["kind"] = "embed"; j["table"] = f.table; j["lo"] = f.emb_lo;
      j["hi"] = f.emb_hi; j["arity"] = f.ew_arity;
      break;
    case FnKind::PairMul: j["kind"] = "pair_mul"; j["half"] = f.half; break;
    case FnKind::PairMax: j["kind"] = "pair_max"; j["half"] = f.half; break;
    case FnKind::AbsDiffAcc: j["kind"] = "abs_diff_acc"; j["half"] = f.half; break;
    case FnKind::TreeIndex: j["kind"] = "tree_index"; j["tree"] = tree_to_json(f.tree); break;
    case FnKind::Composite: {
      j["kind"] = "composite";
      j["parts"] = nlohmann::json::array();
      for (const auto& p : f.parts) j["parts"].push_back(fn_to_json(p));
      break;
    }
  }
  return j;
}

inline nlohmann::json graph_to_json(const PrimitiveGraph& g) {
  nlohmann::json j;
  j["input_arity"] = g.input_arity;
  j["nodes"] = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nlohmann::json jn;
    jn["id"] = n.id;
    jn["provenance"] = n.provenance;
    switch (n.kind) {
      case PrimKind::Partition: {
        jn["kind"] = "partition";
        jn["sources"] = nlohmann::json::array();
        for (const auto& r : n.sources)
          jn["sources"].push_back({{"node", r.node}, {"part", r.part}});
        jn["segments"] = nlohmann::json::array();
        for (const auto& s : n.segments) {
          nlohmann::json js = nlohmann::json::array();
          for (auto& [st, ln] : s.ranges) js.push_back({{"start", st}, {"len", ln}});
          jn["segments"].push_back(js);
        }
        break;
      }
      case PrimKind::Map: {
        jn["kind"] = "map";
        jn["partition"] = n.partition;
        jn["members"] = nlohmann::json::array();
        for (const auto& m : n.members) jn["members"].push_back(fn_to_json(m));
        break;
      }
      case PrimKind::SumReduce: {
        jn["kind"] = "sum_reduce";
        jn["out_arity"] = n.out_arity;
        jn["inputs"] = nlohmann::json::array();
        for (const auto& r : n.inputs)
          jn["inputs"].push_back({{"node", r.node}, {"part", r.part}});
        break;
      }
    }
    j["nodes"].push_back(jn);
  }
  j["outputs"] = nlohmann::json::array();
  for (const auto& r : g.outputs)
    j["outputs"].push_back({{"node", r.node}, {"part", r.part}});
  return j;
}

}  // namespace matpipe
