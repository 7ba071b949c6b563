#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "matpipe/primitive.hpp"

namespace matpipe {

enum class FusionMode { Basic, AdvancedLinear, AdvancedNam };

inline const char* fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::Basic: return "basic";
    case FusionMode::AdvancedLinear: return "advanced-linear";
    case FusionMode::AdvancedNam: return "advanced-nam";
  }
  return "?";
}

struct FusionReport {
  int lookups_before = 0;  // Map nodes before
  int lookups_after = 0;
  std::vector<std::string> passes;
  FusionMode mode = FusionMode::Basic;
};

inline nlohmann::json fusion_report_to_json(const FusionReport& r) {
  return {{"lookups_before", r.lookups_before},
          {"lookups_after", r.lookups_after},
          {"passes", r.passes},
          {"mode", fusion_mode_name(r.mode)}};
}

namespace detail {

inline Mat matmul(const Mat& a, const Mat& b) {
  size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Mat r = zeros(n, m);
  for (size_t i = 0; i < n; ++i)
    for (size_t t = 0; t < k; ++t) {
      double av = a[i][t];
      if (av == 0.0) continue;
      for (size_t j = 0; j < m; ++j) r[i][j] += av * b[t][j];
    }
  return r;
}

// Flattens nested composites and collapses adjacent affine parts; a
// single-part composite unwraps to the part itself.
inline MapFunction normalize_fn(const MapFunction& f) {
  if (f.kind != FnKind::Composite) return f;
  std::vector<MapFunction> flat;
  for (const auto& p : f.parts) {
    MapFunction np = normalize_fn(p);
    if (np.kind == FnKind::Composite)
      flat.insert(flat.end(), np.parts.begin(), np.parts.end());
    else
      flat.push_back(std::move(np));
  }
  std::vector<MapFunction> merged;
  for (auto& p : flat) {
    if (!merged.empty() && merged.back().kind == FnKind::Affine &&
        p.kind == FnKind::Affine) {
      // g(f(x)) with f = A1 x + c1, g = A2 x + c2
      Mat a = matmul(p.A, merged.back().A);
      Vec c = matvec(p.A, merged.back().c);
      for (size_t i = 0; i < c.size(); ++i) c[i] += p.c[i];
      merged.back() = MapFunction::affine(std::move(a), std::move(c));
    } else {
      merged.push_back(std::move(p));
    }
  }
  if (merged.size() == 1) return merged[0];
  return MapFunction::composite(std::move(merged));
}

inline MapFunction compose(const MapFunction& first, const MapFunction& then) {
  return normalize_fn(MapFunction::composite({first, then}));
}

// Collapse an affine-like function (possibly a composite of affines) into a
// single (A, c) pair.
inline MapFunction collapse_affine(const MapFunction& f) {
  MapFunction n = normalize_fn(f);
  if (n.kind != FnKind::Affine) throw Error("fusion", "not affine-like");
  return n;
}

inline std::map<std::pair<int, int>, int> ref_counts(const PrimitiveGraph& g) {
  std::map<std::pair<int, int>, int> c;
  auto add = [&](const PartRef& r) {
    if (r.node >= 0) c[{r.node, r.part}]++;
  };
  for (const auto& n : g.nodes) {
    if (n.kind == PrimKind::Partition)
      for (const auto& r : n.sources) add(r);
    if (n.kind == PrimKind::SumReduce)
      for (const auto& r : n.inputs) add(r);
  }
  for (const auto& r : g.outputs) add(r);
  return c;
}

inline void replace_ref(PrimitiveGraph& g, const PartRef& from, const PartRef& to) {
  auto fix = [&](PartRef& r) {
    if (r == from) r = to;
  };
  for (auto& n : g.nodes) {
    for (auto& r : n.sources) fix(r);
    for (auto& r : n.inputs) fix(r);
  }
  for (auto& r : g.outputs) fix(r);
}

// Drops nodes unreachable from the graph outputs and renumbers.
inline PrimitiveGraph compact(const PrimitiveGraph& g) {
  std::vector<bool> live(g.nodes.size(), false);
  std::vector<int> stack;
  auto mark = [&](int id) {
    if (id >= 0 && !live[id]) {
      live[id] = true;
      stack.push_back(id);
    }
  };
  for (const auto& r : g.outputs) mark(r.node);
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    const auto& n = g.nodes[id];
    if (n.kind == PrimKind::Partition)
      for (const auto& r : n.sources) mark(r.node);
    if (n.kind == PrimKind::Map) mark(n.partition);
    if (n.kind == PrimKind::SumReduce)
      for (const auto& r : n.inputs) mark(r.node);
  }
  std::vector<int> remap(g.nodes.size(), -1);
  PrimitiveGraph out;
  out.input_arity = g.input_arity;
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    if (!live[i]) continue;
    remap[i] = int(out.nodes.size());
    out.nodes.push_back(g.nodes[i]);
    out.nodes.back().id = remap[i];
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

// SumReduce over a single operand is the operand.
inline bool remove_identity_sums(PrimitiveGraph& g) {
  bool changed = false;
  for (auto& n : g.nodes) {
    if (n.kind != PrimKind::SumReduce || n.inputs.size() != 1) continue;
    PartRef in = n.inputs[0];
    if (in == PartRef{n.id, 0}) continue;
    replace_ref(g, {n.id, 0}, in);
    n.inputs.clear();  // now dead; compact removes it
    n.inputs.push_back(in);
    changed = true;
  }
  return changed;
}

inline bool segment_is_trivial(const Segment& s, int arity) {
  return s.ranges.size() == 1 && s.ranges[0].first == 0 && s.ranges[0].second == arity;
}

// Merges a single-member Map u into the Map v downstream of it. Two shapes:
// v consumes the whole of u through a trivial partition (plain composition),
// or u's function is per-index and pushes through v's partition into every
// member. Either way u and its partition become dead.
inline bool merge_maps_pass(PrimitiveGraph& g) {
  auto counts = ref_counts(g);
  bool changed = false;
  for (auto& v : g.nodes) {
    if (v.kind != PrimKind::Map) continue;
    auto& pv = g.nodes[v.partition];
    if (pv.sources.size() != 1) continue;
    PartRef src = pv.sources[0];
    if (src.node < 0) continue;
    auto& u = g.nodes[src.node];
    if (u.kind != PrimKind::Map || u.members.size() != 1 || src.part != 0) continue;
    if (counts[{u.id, 0}] != 1) continue;
    const MapFunction& f = u.members[0];
    auto& pu = g.nodes[u.partition];

    if (v.members.size() == 1 &&
        segment_is_trivial(pv.segments[0], f.out_arity())) {
      v.members[0] = compose(f, v.members[0]);
      pv.sources = pu.sources;
      pv.segments = pu.segments;
      changed = true;
    } else if (f.splittable()) {
      auto through = pu.segments[0].positions();
      std::vector<Segment> new_segs;
      for (size_t j = 0; j < v.members.size(); ++j) {
        auto pos = pv.segments[j].positions();
        v.members[j] = compose(f.restrict_to(pos), v.members[j]);
        std::vector<int> mapped;
        for (int p : pos) mapped.push_back(through[p]);
        new_segs.push_back(Segment::from_positions(mapped));
      }
      pv.sources = pu.sources;
      pv.segments = std::move(new_segs);
      changed = true;
    }
  }
  return changed;
}

// SumReduce followed by an affine Map: push the map into every branch, with
// the constant term assigned to the first branch only, so the sum still adds
// it exactly once. Fires only when every branch is an exclusively-owned Map
// member, which keeps the lookup count from growing.
inline bool reorder_linear_pass(PrimitiveGraph& g) {
  auto counts = ref_counts(g);
  bool changed = false;
  for (auto& v : g.nodes) {
    if (v.kind != PrimKind::Map || v.members.size() != 1) continue;
    if (!v.members[0].affine_like()) continue;
    auto& pv = g.nodes[v.partition];
    if (pv.sources.size() != 1) continue;
    PartRef src = pv.sources[0];
    if (src.node < 0) continue;
    auto& s = g.nodes[src.node];
    if (s.kind != PrimKind::SumReduce || src.part != 0) continue;
    if (counts[{s.id, 0}] != 1) continue;
    if (!segment_is_trivial(pv.segments[0], s.out_arity)) continue;

    std::set<std::pair<int, int>> seen;
    bool ok = true;
    for (const auto& r : s.inputs) {
      if (r.node < 0 || g.nodes[r.node].kind != PrimKind::Map) { ok = false; break; }
      if (counts[{r.node, r.part}] != 1) { ok = false; break; }
      if (!seen.insert({r.node, r.part}).second) { ok = false; break; }
    }
    if (!ok || s.inputs.empty()) continue;

    MapFunction gfn = collapse_affine(v.members[0]);
    MapFunction gzero = gfn;
    std::fill(gzero.c.begin(), gzero.c.end(), 0.0);
    for (size_t i = 0; i < s.inputs.size(); ++i) {
      auto& branch = g.nodes[s.inputs[i].node];
      auto& member = branch.members[s.inputs[i].part];
      member = compose(member, i == 0 ? gfn : gzero);
    }
    s.out_arity = gfn.out_arity();
    replace_ref(g, {v.id, 0}, {s.id, 0});
    // detach v so it goes dead even if it was a graph output alias
    pv.sources = {{s.id, 0}};
    changed = true;
  }
  return changed;
}

}  // namespace detail

// Spec-level pass: merge consecutive Map primitives (directly or through a
// partition) to fixpoint.
inline PrimitiveGraph merge_maps(const PrimitiveGraph& graph) {
  PrimitiveGraph g = graph;
  while (detail::merge_maps_pass(g)) g = detail::compact(g);
  return detail::compact(g);
}

// Spec-level pass: one sweep of SumReduce/Map linear reordering.
inline PrimitiveGraph reorder_linear(const PrimitiveGraph& graph) {
  PrimitiveGraph g = graph;
  if (detail::reorder_linear_pass(g)) g = detail::compact(g);
  return g;
}

// Alternates identity-sum elimination, map merging, and linear reordering to
// fixpoint. Semantics-preserving.
inline std::pair<PrimitiveGraph, FusionReport> fuse_basic(const PrimitiveGraph& graph) {
  PrimitiveGraph g = graph;
  FusionReport r;
  r.mode = FusionMode::Basic;
  r.lookups_before = g.map_node_count();
  bool changed = true;
  while (changed) {
    changed = false;
    if (detail::remove_identity_sums(g)) {
      changed = true;
      if (r.passes.empty() || r.passes.back() != "identity-sum")
        r.passes.push_back("identity-sum");
    }
    if (detail::merge_maps_pass(g)) {
      changed = true;
      if (r.passes.empty() || r.passes.back() != "merge-maps")
        r.passes.push_back("merge-maps");
    }
    if (detail::reorder_linear_pass(g)) {
      changed = true;
      if (r.passes.empty() || r.passes.back() != "reorder-linear")
        r.passes.push_back("reorder-linear");
    }
    g = detail::compact(g);
  }
  r.lookups_after = g.map_node_count();
  return {g, r};
}

enum class AdvancedMode { DropNonlinear, Nam };

namespace detail {

inline MapFunction strip_nonlinear(const MapFunction& f) {
  if (f.kind == FnKind::Composite) {
    std::vector<MapFunction> kept;
    int cur_arity = f.in_arity();
    for (const auto& p : f.parts) {
      if (p.kind == FnKind::Elementwise) continue;  // the nonlinear mappings
      MapFunction np = strip_nonlinear(p);
      cur_arity = np.out_arity();
      kept.push_back(std::move(np));
    }
    if (kept.empty()) return MapFunction::identity(f.in_arity());
    (void)cur_arity;
    return normalize_fn(MapFunction::composite(std::move(kept)));
  }
  if (f.kind == FnKind::Elementwise) return MapFunction::identity(f.ew_arity);
  return f;
}

}  // namespace detail

// Architecture-modifying fusion. drop-nonlinear deletes the nonlinear
// elementwise mappings and re-runs basic fusion; nam restructures a
// single-partition series graph into per-segment end-to-end sub-models
// joined by one final SumReduce. Both change model semantics and are meant
// to run before (re)training.
inline std::pair<PrimitiveGraph, FusionReport> fuse_advanced(
    const PrimitiveGraph& graph, AdvancedMode mode) {
  if (mode == AdvancedMode::DropNonlinear) {
    PrimitiveGraph g = graph;
    for (auto& n : g.nodes)
      if (n.kind == PrimKind::Map)
        for (auto& m : n.members) m = detail::strip_nonlinear(m);
    auto [fused, rep] = fuse_basic(g);
    rep.mode = FusionMode::AdvancedLinear;
    rep.passes.insert(rep.passes.begin(), "drop-nonlinear");
    rep.lookups_before = graph.map_node_count();
    return {fused, rep};
  }

  // nam: normalize with basic fusion first, then require the series shape
  // input partition -> map family -> sum -> single-member map chain
  PrimitiveGraph g = fuse_basic(graph).first;
  int p0 = -1;
  for (const auto& n : g.nodes)
    if (n.kind == PrimKind::Partition && n.sources.size() == 1 &&
        n.sources[0].node == -1) {
      if (p0 >= 0) throw Error("fusion", "unsupported topology for nam fusion: "
                                         "multiple input partitions");
      p0 = n.id;
    }
  if (p0 < 0) throw Error("fusion", "unsupported topology for nam fusion: "
                                    "no input partition");
  int m0 = -1;
  for (const auto& n : g.nodes)
    if (n.kind == PrimKind::Map && n.partition == p0) m0 = n.id;
  if (m0 < 0) throw Error("fusion", "unsupported topology for nam fusion");

  // collect the tail as a series of single-member map functions
  std::vector<MapFunction> tail;
  PartRef cur{-2, 0};
  for (const auto& n : g.nodes) {
    if (n.kind == PrimKind::SumReduce) {
      bool over_m0 = !n.inputs.empty();
      for (const auto& r : n.inputs) over_m0 &= r.node == m0;
      if (over_m0) cur = {n.id, 0};
    }
  }
  if (cur.node == -2) {
    // a single-segment model fuses to a bare map; the sum it needs is trivial
    if (g.nodes[m0].members.size() == 1) cur = {m0, 0};
    else throw Error("fusion", "unsupported topology for nam fusion: "
                               "no SumReduce over the input maps");
  }
  bool advanced = true;
  while (advanced) {
    advanced = false;
    for (const auto& n : g.nodes) {
      if (n.kind == PrimKind::Map && n.members.size() == 1) {
        const auto& p = g.nodes[n.partition];
        if (p.sources.size() == 1 && p.sources[0] == cur) {
          tail.push_back(n.members[0]);
          cur = {n.id, 0};
          advanced = true;
        }
      } else if (n.kind == PrimKind::SumReduce && n.inputs.size() == 1 &&
                 n.inputs[0] == cur) {
        cur = {n.id, 0};
        advanced = true;
      }
    }
  }
  if (!(g.outputs.size() == 1 && g.outputs[0] == cur))
    throw Error("fusion", "unsupported topology for nam fusion: non-series tail");

  PrimitiveGraph out;
  out.input_arity = g.input_arity;
  PrimitiveNode part = g.nodes[p0];
  part.id = -1;
  int np = out.add(std::move(part));
  std::vector<MapFunction> members;
  for (const auto& m : g.nodes[m0].members) {
    std::vector<MapFunction> chain = {m};
    chain.insert(chain.end(), tail.begin(), tail.end());
    members.push_back(detail::normalize_fn(MapFunction::composite(std::move(chain))));
  }
  int out_arity = members[0].out_arity();
  PrimitiveNode mapn;
  mapn.kind = PrimKind::Map;
  mapn.partition = np;
  mapn.members = std::move(members);
  mapn.provenance = g.nodes[m0].provenance;
  int nm = out.add(std::move(mapn));
  PrimitiveNode sum;
  sum.kind = PrimKind::SumReduce;
  sum.out_arity = out_arity;
  for (size_t i = 0; i < out.nodes[nm].members.size(); ++i)
    sum.inputs.push_back({nm, int(i)});
  sum.provenance = "nam";
  int ns = out.add(std::move(sum));
  out.outputs = {{ns, 0}};

  FusionReport rep;
  rep.mode = FusionMode::AdvancedNam;
  rep.passes = {"nam-restructure"};
  rep.lookups_before = graph.map_node_count();
  rep.lookups_after = out.map_node_count();
  return {out, rep};
}

// Structural NAM property: every directed input-to-output path crosses
// exactly one Map node and one SumReduce node.
inline bool nam_path_invariant(const PrimitiveGraph& g) {
  // count (maps, sums) along paths from each part back to the input
  struct Count { int maps = -1, sums = -1; };
  std::vector<Count> best(g.nodes.size());
  for (const auto& n : g.nodes) {
    auto upstream = [&](const PartRef& r) -> Count {
      if (r.node < 0) return {0, 0};
      return best[r.node];
    };
    Count c{0, 0};
    bool first = true;
    auto meet = [&](Count u) {
      if (u.maps < 0) return;  // disconnected from input
      if (first) { c = u; first = false; }
      else if (c.maps != u.maps || c.sums != u.sums) { c = {-2, -2}; }
    };
    switch (n.kind) {
      case PrimKind::Partition:
        for (const auto& r : n.sources) meet(upstream(r));
        break;
      case PrimKind::Map:
        meet(best[n.partition]);
        if (c.maps >= 0) c.maps += 1;
        break;
      case PrimKind::SumReduce:
        for (const auto& r : n.inputs) meet(upstream(r));
        if (c.maps >= 0) c.sums += 1;
        break;
    }
    if (first) c = {0, 0};
    best[n.id] = c;
  }
  for (const auto& r : g.outputs) {
    Count c = r.node < 0 ? Count{0, 0} : best[r.node];
    if (c.maps != 1 || c.sums != 1) return false;
  }
  return true;
}

}  // namespace matpipe
