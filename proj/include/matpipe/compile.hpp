#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>

#include "matpipe/dataset.hpp"
#include "matpipe/datagen.hpp"
#include "matpipe/dsl.hpp"
#include "matpipe/fusion.hpp"
#include "matpipe/lower.hpp"
#include "matpipe/metrics.hpp"
#include "matpipe/model.hpp"
#include "matpipe/pipeline.hpp"
#include "matpipe/sim.hpp"
#include "matpipe/table.hpp"
#include "matpipe/train.hpp"

namespace matpipe {

enum class FusionChoice { Basic, DropNonlinear, Nam };

inline const char* fusion_choice_name(FusionChoice f) {
  switch (f) {
    case FusionChoice::Basic: return "basic";
    case FusionChoice::DropNonlinear: return "drop-nonlinear";
    case FusionChoice::Nam: return "nam";
  }
  return "?";
}

struct ExperimentConfig {
  FusionChoice fusion = FusionChoice::Basic;
  int acc_width = 16;
  int key_bits = 8;
  int exact_prefer_bits = 12;  // wider key spaces go fuzzy
  int tree_depth = 0;          // 0 = take the DSL value
  int packet_depth = 0;        // 0 = take the DSL value
  TableLimits limits;
  ResourceModel resources;
  double range_margin = 0.1;
  int fit_sample_cap = 1024;
  TrainConfig train;
  double ae_threshold_quantile = 0.995;
};

// ---- full-precision observation of a fused graph over a dataset ----

struct GraphObs {
  // per (node, part): per-element (min, max), margin applied
  std::map<std::pair<int, int>, std::vector<std::pair<double, double>>> elem_ranges;
  // per (map node, member): observed input segments
  std::map<std::pair<int, int>, Mat> member_inputs;
};

inline GraphObs observe_graph(const PrimitiveGraph& g, const Mat& rows,
                              double margin) {
  if (rows.empty()) throw Error("compile", "empty observation set");
  GraphObs obs;
  auto track = [&](int node, int part, const Vec& v) {
    auto& r = obs.elem_ranges[{node, part}];
    if (r.empty()) {
      r.resize(v.size(), {v.empty() ? 0.0 : v[0], v.empty() ? 0.0 : v[0]});
      for (size_t i = 0; i < v.size(); ++i) r[i] = {v[i], v[i]};
      return;
    }
    for (size_t i = 0; i < v.size(); ++i) {
      r[i].first = std::min(r[i].first, v[i]);
      r[i].second = std::max(r[i].second, v[i]);
    }
  };
  for (const auto& row : rows) {
    std::vector<std::vector<Vec>> values(g.nodes.size());
    track(-1, 0, row);
    for (const auto& n : g.nodes) {
      switch (n.kind) {
        case PrimKind::Partition: {
          Vec concat;
          for (const auto& r : n.sources) {
            const Vec& v = r.node < 0 ? row : values[r.node][r.part];
            concat.insert(concat.end(), v.begin(), v.end());
          }
          if (n.sources.empty()) concat = row;
          for (const auto& seg : n.segments) {
            Vec v;
            for (int p : seg.positions()) v.push_back(concat[p]);
            values[n.id].push_back(std::move(v));
          }
          break;
        }
        case PrimKind::Map: {
          for (size_t i = 0; i < n.members.size(); ++i) {
            const Vec& in = values[n.partition][i];
            obs.member_inputs[{n.id, int(i)}].push_back(in);
            Vec out = n.members[i].eval(in);
            track(n.id, int(i), out);
            values[n.id].push_back(std::move(out));
          }
          break;
        }
        case PrimKind::SumReduce: {
          Vec acc(n.out_arity, 0.0);
          for (const auto& r : n.inputs) {
            const Vec& v = r.node < 0 ? row : values[r.node][r.part];
            for (int i = 0; i < n.out_arity; ++i) acc[i] += v[i];
          }
          track(n.id, 0, acc);
          values[n.id].push_back(std::move(acc));
        }
      }
    }
  }
  for (auto& [key, ranges] : obs.elem_ranges)
    for (auto& [lo, hi] : ranges) {
      lo -= margin * std::fabs(lo);
      hi += margin * std::fabs(hi);
    }
  return obs;
}

inline Mat strided_sample(const Mat& rows, int cap) {
  if (int(rows.size()) <= cap) return rows;
  Mat out;
  size_t stride = (rows.size() + cap - 1) / cap;
  for (size_t i = 0; i < rows.size(); i += stride) out.push_back(rows[i]);
  return out;
}

// ---- quantization / table planning ----

inline std::pair<double, double> hull(const std::vector<std::pair<double, double>>& r) {
  double lo = r[0].first, hi = r[0].second;
  for (auto& [a, b] : r) {
    lo = std::min(lo, a);
    hi = std::max(hi, b);
  }
  return {lo, hi};
}

// Builds the quantization plan and one table per Map member: exact when the
// key space and payload fit the caps, fuzzy (clustering tree over observed
// member inputs) otherwise.
inline TablePlan plan_tables(const PrimitiveGraph& g, const GraphObs& obs,
                             const ExperimentConfig& cfg, int tree_depth) {
  TablePlan plan;
  auto in_hull = hull(obs.elem_ranges.at({-1, 0}));
  plan.spec[{-1, 0}] = choose_fixed_point(in_hull.first, in_hull.second, cfg.acc_width);

  for (const auto& n : g.nodes) {
    if (n.kind == PrimKind::Map) {
      for (size_t mi = 0; mi < n.members.size(); ++mi) {
        auto h = hull(obs.elem_ranges.at({n.id, int(mi)}));
        plan.spec[{n.id, int(mi)}] =
            choose_fixed_point(h.first, h.second, cfg.acc_width);
      }
    } else if (n.kind == PrimKind::SumReduce) {
      auto h = hull(obs.elem_ranges.at({n.id, 0}));
      plan.spec[{n.id, 0}] = choose_fixed_point(h.first, h.second, cfg.acc_width);
    }
  }

  for (const auto& n : g.nodes) {
    if (n.kind != PrimKind::Map) continue;
    const auto& p = g.nodes[n.partition];
    for (size_t mi = 0; mi < n.members.size(); ++mi) {
      const auto& fn = n.members[mi];
      std::vector<KeyGrid> grids;
      for (int e = 0; e < p.segments[mi].length(); ++e) {
        auto [root, re] = resolve_element(g, {n.partition, int(mi)}, e);
        const QuantSpec& src = plan.spec_of(root.node, root.part);
        auto [lo, hi] = obs.elem_ranges.at({root.node, root.part})[re];
        grids.push_back(KeyGrid::fit(cfg.key_bits, src, quantize(lo, src),
                                     quantize(hi, src)));
      }
      const QuantSpec& out = plan.spec_of(n.id, int(mi));
      auto& ids = plan.member_tables[{n.id, int(mi)}];
      auto emit = [&](MappingTable tab, int in_off, int out_off) {
        tab.map_node = n.id;
        tab.member = int(mi);
        tab.in_offset = in_off;
        tab.out_offset = out_off;
        tab.provenance = n.provenance;
        ids.push_back(int(plan.tables.size()));
        plan.tables.push_back(std::move(tab));
      };

      if (fn.kind == FnKind::TreeIndex) {
        emit(build_fuzzy_table(fn, fn.tree, grids, out, cfg.limits), 0, 0);
        continue;
      }
      int bits = 0;
      for (const auto& gr : grids) bits += gr.width;
      if (fn.splittable() && fn.in_arity() == fn.out_arity() && fn.in_arity() > 1) {
        // per-index function: realize as one small table per element
        for (int e = 0; e < fn.in_arity(); ++e)
          emit(build_exact_table(fn.restrict_to({e}), {grids[e]}, out, cfg.limits),
               e, e);
      } else if (bits <= cfg.exact_prefer_bits &&
                 (int64_t(1) << bits) * fn.out_arity() * out.width <=
                     cfg.resources.sram_bits_per_stage) {
        emit(build_exact_table(fn, grids, out, cfg.limits), 0, 0);
      } else {
        const Mat& observed = obs.member_inputs.at({n.id, int(mi)});
        auto tree = fit_tree(strided_sample(observed, cfg.fit_sample_cap),
                             {tree_depth, 1});
        tree = refine_centroids(tree, observed);
        emit(build_fuzzy_table(fn, tree, grids, out, cfg.limits), 0, 0);
      }
    }
  }
  return plan;
}

// ---- stream support ----

// A front member consumes graph-input elements only; for windowed models
// these are the per-packet segments whose fuzzy indexes get stored.
struct FrontMember {
  int node = -1, member = -1;
  int packet = -1;     // window position
  int signature = -1;  // per-packet segment kind (shared tree id)
  std::vector<int> within;  // positions inside the packet block
};

inline std::vector<FrontMember> detect_front_members(const PrimitiveGraph& g,
                                                     int per_packet, int window) {
  std::vector<FrontMember> fronts;
  std::map<std::vector<int>, int> signatures;
  for (const auto& n : g.nodes) {
    if (n.kind != PrimKind::Map) continue;
    const auto& p = g.nodes[n.partition];
    for (size_t mi = 0; mi < n.members.size(); ++mi) {
      bool all_input = true;
      std::vector<int> positions;
      for (int e = 0; e < p.segments[mi].length(); ++e) {
        auto [root, re] = resolve_element(g, {n.partition, int(mi)}, e);
        if (root.node != -1) {
          all_input = false;
          break;
        }
        positions.push_back(re);
      }
      if (!all_input) continue;
      int packet = positions[0] / per_packet;
      std::vector<int> within;
      for (int pos : positions) {
        if (pos / per_packet != packet)
          throw Error("compile", "window model input segments must not span packets");
        within.push_back(pos % per_packet);
      }
      auto it = signatures.find(within);
      int sig;
      if (it == signatures.end()) {
        sig = int(signatures.size());
        signatures[within] = sig;
      } else {
        sig = it->second;
      }
      FrontMember fm;
      fm.node = n.id;
      fm.member = int(mi);
      fm.packet = packet;
      fm.signature = sig;
      fm.within = within;
      fronts.push_back(fm);
    }
  }
  std::sort(fronts.begin(), fronts.end(), [](const FrontMember& a, const FrontMember& b) {
    return std::tie(a.packet, a.signature) < std::tie(b.packet, b.signature);
  });
  int pps = int(signatures.size());
  if (int(fronts.size()) != window * pps)
    throw Error("compile", "window model needs one input segment per packet slot");
  // a map node must be entirely front or entirely derived
  std::map<int, int> members_in_front;
  for (const auto& fm : fronts) members_in_front[fm.node]++;
  for (auto& [node, count] : members_in_front)
    if (count != int(g.nodes[node].members.size()))
      throw Error("compile", "map node mixes raw-input and derived segments");
  return fronts;
}

struct CompiledModel {
  ParsedModel parsed;
  ModelGraph trained;   // as fit (autoencoders: reconstruction output)
  ModelGraph deployed;  // with the MAE head appended for autoencoders
  PrimitiveGraph fused;
  FusionReport fusion;
  TablePlan plan;             // plan for the executed graph
  PrimitiveGraph exec_graph;  // what program/plan execute (index space for streams)
  PipelineProgram program;
  std::optional<StreamProgram> stream;
  HeadSpec head;
  ResourceReport resources;
  std::map<std::string, double> timings_ms;
};

inline ModelGraph append_mae_head(const ModelGraph& m) {
  ModelGraph d = m;
  for (auto& t : d.tensors)
    if (t.name == d.output) t.role = TensorRole::Activation;
  LayerSpec head;
  head.kind = LayerKind::AbsDiffSum;
  head.name = "mae_head";
  head.inputs = {d.input, d.output};
  head.output = "mae";
  d.tensors.push_back({"mae", {1}, TensorRole::Output});
  d.layers.push_back(head);
  d.output = "mae";
  return d;
}

// Model-level additive restructure for nam mode on chain models: one
// sub-model per input segment, outputs summed. Parameters are refit by the
// caller; only shapes carry over.
inline ModelGraph nam_restructure_model(const ModelGraph& m, int segment) {
  for (const auto& l : m.layers)
    if (l.kind != LayerKind::FC && l.kind != LayerKind::BatchNorm &&
        l.kind != LayerKind::Bias && l.kind != LayerKind::ReLU &&
        l.kind != LayerKind::Tanh && l.kind != LayerKind::Sigmoid)
      throw Error("compile", "nam restructure supports FC/elementwise chains only");
  int in = m.input_len(), out = m.output_len();
  ModelGraph d;
  d.name = m.name + "_nam";
  d.head = m.head;
  d.input = m.input;
  d.tensors.push_back({m.input, {in}, TensorRole::Input});
  int k = (in + segment - 1) / segment;
  std::vector<std::string> branch_outputs;
  for (int b = 0; b < k; ++b) {
    int offset = b * segment, len = std::min(segment, in - offset);
    std::string prefix = "b" + std::to_string(b) + "_";
    std::string cur = prefix + "slice";
    d.tensors.push_back({cur, {len}, TensorRole::Activation});
    LayerSpec sl;
    sl.kind = LayerKind::Slice;
    sl.name = prefix + "slice";
    sl.inputs = {m.input};
    sl.output = cur;
    sl.offset = offset;
    sl.len = len;
    d.layers.push_back(sl);
    int cur_len = len;
    int idx = 0;
    for (const auto& l : m.layers) {
      LayerSpec nl = l;
      nl.name = prefix + l.name + std::to_string(idx++);
      nl.inputs = {cur};
      nl.output = prefix + "t" + std::to_string(idx);
      switch (l.kind) {
        case LayerKind::FC: {
          int o = int(l.weight.size());
          nl.weight = zeros(o, cur_len);
          nl.bias = Vec(o, 0.0);
          cur_len = o;
          break;
        }
        case LayerKind::BatchNorm:
          nl.gamma = Vec(cur_len, 1.0);
          nl.beta = Vec(cur_len, 0.0);
          nl.mean = Vec(cur_len, 0.0);
          nl.sigma = Vec(cur_len, 1.0);
          break;
        case LayerKind::Bias: nl.bias = Vec(cur_len, 0.0); break;
        default: break;
      }
      d.tensors.push_back({nl.output, {cur_len}, TensorRole::Activation});
      d.layers.push_back(nl);
      cur = nl.output;
    }
    if (cur_len != out) throw Error("compile", "nam branch output length mismatch");
    branch_outputs.push_back(cur);
  }
  LayerSpec sum;
  sum.kind = LayerKind::Sum;
  sum.name = "sum";
  sum.inputs = branch_outputs;
  sum.output = "y";
  d.tensors.push_back({"y", {out}, TensorRole::Output});
  d.layers.push_back(sum);
  d.output = "y";
  return d;
}

namespace detail {

inline ModelGraph strip_activations(const ModelGraph& m) {
  ModelGraph d = m;
  d.layers.clear();
  std::map<std::string, std::string> alias;  // removed output -> surviving tensor
  auto resolve = [&](std::string n) {
    while (alias.count(n)) n = alias[n];
    return n;
  };
  for (auto l : m.layers) {
    for (auto& in : l.inputs) in = resolve(in);
    if (l.kind == LayerKind::ReLU || l.kind == LayerKind::Tanh ||
        l.kind == LayerKind::Sigmoid) {
      alias[l.output] = l.inputs[0];
      continue;
    }
    d.layers.push_back(l);
  }
  d.output = resolve(m.output);
  for (auto& t : d.tensors)
    if (t.role == TensorRole::Output && t.name != d.output)
      t.role = TensorRole::Activation;
  for (auto& t : d.tensors)
    if (t.name == d.output) t.role = TensorRole::Output;
  return d;
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                     t0)
        .count();
  }
};

}  // namespace detail

// Sliding feature windows per flow, aligned with run_stream's decisions.
struct WindowSample {
  std::string flow;
  int64_t packet_index = 0;
  Vec features;  // window x per-packet features
};

inline std::vector<WindowSample> windowize(const std::vector<StreamFeature>& features,
                                           const std::vector<int>& shifts,
                                           int bytes_per_packet, int window,
                                           const std::vector<PacketRecord>& packets) {
  std::map<std::string, std::pair<FlowState, std::deque<Vec>>> flows;
  std::vector<WindowSample> out;
  for (const auto& p : packets) {
    auto& [st, ring] = flows[p.flow];
    if (st.count > 0 && p.timestamp_us < st.last_ts)
      throw Error("compile", "out-of-order timestamp in flow " + p.flow);
    int64_t ipd = st.count == 0 ? 0 : std::min<int64_t>(p.timestamp_us - st.last_ts, 0xffff);
    st.last_ts = p.timestamp_us;
    st.count += 1;
    Vec f = packet_features(features, shifts, bytes_per_packet, p, ipd);
    ring.push_back(std::move(f));
    if (int(ring.size()) > window) ring.pop_front();
    if (int(ring.size()) == window) {
      WindowSample ws;
      ws.flow = p.flow;
      ws.packet_index = st.count;
      for (const auto& g : ring) ws.features.insert(ws.features.end(), g.begin(), g.end());
      out.push_back(std::move(ws));
    }
  }
  return out;
}

// ---- compilation ----

inline CompiledModel compile_model(const ParsedModel& parsed, const Mat& train_rows,
                                   const std::vector<int>& train_labels,
                                   const ExperimentConfig& cfg) {
  CompiledModel cm;
  cm.parsed = parsed;
  detail::Timer total;
  int tree_depth = cfg.tree_depth > 0 ? cfg.tree_depth : parsed.map_tree.depth;
  int packet_depth = cfg.packet_depth > 0 ? cfg.packet_depth : parsed.packet_tree.depth;

  // 1. resolve the architecture for the chosen fusion mode
  ModelGraph skeleton = parsed.skeleton;
  if (cfg.fusion == FusionChoice::Nam && !parsed.reduce_sum)
    skeleton = nam_restructure_model(skeleton,
                                     std::min(parsed.policy.weighted_segment,
                                              skeleton.input_len()));
  if (cfg.fusion == FusionChoice::DropNonlinear)
    skeleton = detail::strip_activations(skeleton);

  // 2. fit
  detail::Timer t_fit;
  cm.trained = fit_model(skeleton, train_rows, train_labels, cfg.train);
  cm.timings_ms["fit"] = t_fit.ms();

  // 3. deploy-time head
  cm.deployed = cm.trained;
  if (cm.trained.head == HeadKind::Autoencoder) cm.deployed = append_mae_head(cm.trained);

  // 4. lower and fuse
  detail::Timer t_fuse;
  auto lowered = lower(cm.deployed, parsed.policy);
  auto [fused, freport] = fuse_basic(lowered);
  cm.fused = std::move(fused);
  cm.fusion = freport;
  cm.fusion.mode = cfg.fusion == FusionChoice::Basic ? FusionMode::Basic
                   : cfg.fusion == FusionChoice::Nam ? FusionMode::AdvancedNam
                                                     : FusionMode::AdvancedLinear;
  if (cfg.fusion == FusionChoice::Nam && !nam_path_invariant(cm.fused))
    throw Error("compile", "nam mode did not produce an additive structure");
  cm.timings_ms["lower_fuse"] = t_fuse.ms();

  // 5. observe, plan, build tables
  detail::Timer t_tables;
  auto obs = observe_graph(cm.fused, train_rows, cfg.range_margin);

  bool stream = parsed.window > 1;
  if (!stream) {
    cm.plan = plan_tables(cm.fused, obs, cfg, tree_depth);
    cm.exec_graph = cm.fused;
    cm.timings_ms["tables"] = t_tables.ms();
    detail::Timer t_sched;
    cm.program = schedule(cm.exec_graph, cm.plan, cfg.resources);
    cm.timings_ms["schedule"] = t_sched.ms();
  } else {
    int pf = 0;
    for (size_t i = 0; i < parsed.features.size(); ++i)
      pf += parsed.features[i] == StreamFeature::Bytes ? parsed.bytes_per_packet : 1;
    auto fronts = detect_front_members(cm.fused, pf, parsed.window);
    int pps = int(fronts.size()) / parsed.window;

    // shared tree per signature, fitted on observations pooled across packets
    std::vector<Mat> pooled(pps);
    for (const auto& fm : fronts) {
      const Mat& mi = obs.member_inputs.at({fm.node, fm.member});
      auto& dst = pooled[fm.signature];
      dst.insert(dst.end(), mi.begin(), mi.end());
    }
    std::vector<ClusterTree> trees;
    for (int s = 0; s < pps; ++s) {
      auto tree = fit_tree(strided_sample(pooled[s], cfg.fit_sample_cap),
                           {packet_depth, 1});
      trees.push_back(refine_centroids(tree, pooled[s]));
    }

    // per-feature ranges pooled across packet positions
    std::vector<std::pair<double, double>> pooled_range(pf, {0, 0});
    {
      const auto& r = obs.elem_ranges.at({-1, 0});
      for (int e = 0; e < int(r.size()); ++e) {
        auto& pr = pooled_range[e % pf];
        if (e < pf) pr = r[e];
        else {
          pr.first = std::min(pr.first, r[e].first);
          pr.second = std::max(pr.second, r[e].second);
        }
      }
    }
    // every index field is declared over the full leaf range, so the packet
    // part's output format and the window part's input format agree exactly
    const double idx_hi = double((int64_t(1) << packet_depth) - 1);

    // packet part: per-packet features -> fuzzy indexes
    PrimitiveGraph gp;
    gp.input_arity = pf;
    {
      PrimitiveNode part;
      part.kind = PrimKind::Partition;
      part.sources = {{-1, 0}};
      std::vector<MapFunction> members;
      for (int s = 0; s < pps; ++s) {
        const auto& fm = *std::find_if(fronts.begin(), fronts.end(),
                                       [&](const FrontMember& f) {
                                         return f.signature == s;
                                       });
        part.segments.push_back(Segment::from_positions(fm.within));
        members.push_back(MapFunction::tree_index(trees[s]));
      }
      int pid = gp.add(std::move(part));
      PrimitiveNode mapn;
      mapn.kind = PrimKind::Map;
      mapn.partition = pid;
      mapn.members = std::move(members);
      mapn.provenance = "packet_index";
      int mid = gp.add(std::move(mapn));
      for (int s = 0; s < pps; ++s) gp.outputs.push_back({mid, s});
    }
    GraphObs pobs;
    {
      // observe index outputs over per-packet rows
      Mat prows;
      for (const auto& row : strided_sample(train_rows, 4 * cfg.fit_sample_cap))
        for (int t = 0; t < parsed.window; ++t)
          prows.push_back(Vec(row.begin() + t * pf, row.begin() + (t + 1) * pf));
      pobs = observe_graph(gp, prows, 0.0);
      pobs.elem_ranges[{-1, 0}].clear();
      for (int e = 0; e < pf; ++e)
        pobs.elem_ranges[{-1, 0}].push_back(pooled_range[e]);
      for (int s = 0; s < pps; ++s) pobs.elem_ranges[{1, s}] = {{0.0, idx_hi}};
    }
    TablePlan pplan = plan_tables(gp, pobs, cfg, packet_depth);
    PipelineProgram packet_part = schedule(gp, pplan, cfg.resources);

    // window part: clone the fused graph with index-keyed front members
    PrimitiveGraph gw = cm.fused;
    gw.input_arity = int(fronts.size());
    std::map<int, std::vector<const FrontMember*>> by_node;
    for (const auto& fm : fronts) by_node[fm.node].push_back(&fm);
    auto field_of = [&](const FrontMember& fm) {
      return fm.packet * pps + fm.signature;
    };
    for (auto& [node, members] : by_node) {
      auto& mapn = gw.nodes[node];
      auto& part = gw.nodes[mapn.partition];
      part.sources = {{-1, 0}};
      part.segments.assign(mapn.members.size(), Segment{});
      for (const auto* fm : members) {
        part.segments[fm->member] = Segment::contiguous(field_of(*fm), 1);
        const auto& tree = trees[fm->signature];
        Mat values;
        for (int leaf = 0; leaf < tree.leaf_count; ++leaf)
          values.push_back(cm.fused.nodes[node].members[fm->member].eval(
              tree.leaf(leaf).centroid));
        mapn.members[fm->member] =
            MapFunction::embed_rows(std::move(values), 0, tree.leaf_count - 1, 1);
      }
    }
    // any other reference to raw input (e.g. reconstruction targets) gets a
    // centroid dereference map per front field
    {
      std::map<int, int> deref_part_of_field;  // field -> (deref node, part)
      int deref_node = -1;
      auto ensure_deref = [&]() {
        if (deref_node >= 0) return;
        PrimitiveNode part;
        part.kind = PrimKind::Partition;
        part.sources = {{-1, 0}};
        std::vector<MapFunction> members;
        for (const auto& fm : fronts) {
          part.segments.push_back(Segment::contiguous(field_of(fm), 1));
          Mat centroids;
          for (int leaf = 0; leaf < trees[fm.signature].leaf_count; ++leaf)
            centroids.push_back(trees[fm.signature].leaf(leaf).centroid);
          members.push_back(MapFunction::embed_rows(
              std::move(centroids), 0, trees[fm.signature].leaf_count - 1, 1));
        }
        part.provenance = "deref";
        int pid = gw.add(std::move(part));
        PrimitiveNode mapn;
        mapn.kind = PrimKind::Map;
        mapn.partition = pid;
        mapn.members = std::move(members);
        mapn.provenance = "deref";
        deref_node = gw.add(std::move(mapn));
        for (size_t i = 0; i < fronts.size(); ++i)
          deref_part_of_field[field_of(fronts[i])] = int(i);
      };
      // element position -> (front field, offset inside the segment)
      std::map<int, std::pair<int, int>> input_elem_home;
      for (const auto& fm : fronts)
        for (size_t o = 0; o < fm.within.size(); ++o)
          input_elem_home[fm.packet * pf + fm.within[o]] = {field_of(fm), int(o)};

      for (auto& n : gw.nodes) {
        if (n.kind != PrimKind::Partition) continue;
        bool is_front_or_deref = n.provenance == "deref";
        for (auto& [node, members] : by_node)
          if (gw.nodes[node].partition == n.id) is_front_or_deref = true;
        if (is_front_or_deref) continue;
        bool touches_input = false;
        for (const auto& src : n.sources) touches_input |= src.node == -1;
        if (!touches_input) continue;
        ensure_deref();
        // rebuild this partition against resolved producers, swapping raw
        // input elements for centroid dereferences
        std::vector<PartRef> new_sources;
        std::map<std::pair<int, int>, int> src_offset;
        auto offset_of = [&](const PartRef& r) {
          auto key = std::make_pair(r.node, r.part);
          auto it = src_offset.find(key);
          if (it != src_offset.end()) return it->second;
          int off = 0;
          for (const auto& s : new_sources) off += part_arity_of(gw, s);
          src_offset[key] = off;
          new_sources.push_back(r);
          return off;
        };
        std::vector<Segment> new_segs;
        for (size_t si = 0; si < n.segments.size(); ++si) {
          std::vector<int> positions;
          for (int e = 0; e < n.segments[si].length(); ++e) {
            auto [root, re] = resolve_element(cm.fused, {n.id, int(si)}, e);
            if (root.node == -1) {
              auto [field, off] = input_elem_home.at(re);
              int dpart = deref_part_of_field.at(field);
              positions.push_back(offset_of({deref_node, dpart}) + off);
            } else {
              positions.push_back(offset_of(root) + re);
            }
          }
          new_segs.push_back(Segment::from_positions(positions));
        }
        n.sources = std::move(new_sources);
        n.segments = std::move(new_segs);
      }
      // deref nodes were appended after their consumers; restore dependency order
      if (deref_node >= 0) gw = topologize(gw);
    }

    auto werrs = check_graph(gw);
    if (!werrs.empty())
      throw Error("compile", "window graph invalid: " + werrs[0]);

    // observe the window graph over index rows
    Mat irows;
    for (const auto& row : strided_sample(train_rows, 4 * cfg.fit_sample_cap)) {
      Vec ir(fronts.size());
      for (const auto& fm : fronts) {
        Vec seg;
        for (int w : fm.within) seg.push_back(row[fm.packet * pf + w]);
        ir[field_of(fm)] = double(fuzzy_index(trees[fm.signature], seg).first);
      }
      irows.push_back(std::move(ir));
    }
    auto wobs = observe_graph(gw, irows, cfg.range_margin);
    {
      auto& r = wobs.elem_ranges.at({-1, 0});
      for (const auto& fm : fronts) r[field_of(fm)] = {0.0, idx_hi};
    }
    cm.plan = plan_tables(gw, wobs, cfg, tree_depth);
    cm.exec_graph = gw;
    cm.timings_ms["tables"] = t_tables.ms();

    detail::Timer t_sched;
    cm.program = schedule(gw, cm.plan, cfg.resources);
    cm.timings_ms["schedule"] = t_sched.ms();

    StreamProgram sp;
    sp.window = parsed.window;
    sp.features = parsed.features;
    sp.feature_shifts = parsed.feature_shifts;
    sp.bytes_per_packet = parsed.bytes_per_packet;
    sp.feature_specs.assign(pf, pplan.spec_of(-1, 0));
    sp.packet_part = packet_part;
    sp.index_widths.assign(pps, packet_depth);
    sp.window_part = cm.program;
    sp.window_part.flow_state = flow_state_layout(
        parsed.window, sp.index_widths,
        std::find(parsed.features.begin(), parsed.features.end(),
                  StreamFeature::Ipd) != parsed.features.end());
    cm.program.flow_state = sp.window_part.flow_state;
    cm.stream = std::move(sp);
  }

  // 6. decision head
  cm.head.kind = cm.trained.head;
  if (cm.head.kind == HeadKind::Autoencoder) {
    Vec scores;
    for (const auto& row : train_rows)
      scores.push_back(reference_infer(cm.deployed, row)[0]);
    std::sort(scores.begin(), scores.end());
    double q = scores[size_t(cfg.ae_threshold_quantile * double(scores.size() - 1))];
    // the MAE output is the final graph part; use its spec
    auto out_ref = cm.exec_graph.outputs[0];
    cm.head.threshold_raw = quantize(q, cm.plan.spec_of(out_ref.node, out_ref.part));
  }
  if (cm.stream) cm.stream->head = cm.head;

  cm.resources = account(cm.program, cfg.resources);
  cm.timings_ms["total"] = total.ms();
  return cm;
}

// Quantizes a feature row with the executed graph's input spec.
inline std::vector<int64_t> quantize_input(const CompiledModel& cm, const Vec& row) {
  const QuantSpec& spec = cm.plan.spec_of(-1, 0);
  std::vector<int64_t> raws(row.size());
  for (size_t i = 0; i < row.size(); ++i) raws[i] = quantize(row[i], spec);
  return raws;
}

// ---- evaluation ----

struct EvalReport {
  bool classifier = true;
  ClassificationMetrics pipeline, reference;
  double agreement = 0;
  double macro_f1_delta = 0;
  double auroc_pipeline = 0, auroc_reference = 0;
  int decisions = 0;
  FusionReport fusion;
  ResourceReport resources;
  std::map<std::string, double> timings_ms;
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["decisions"] = r.decisions;
  j["agreement"] = r.agreement;
  if (r.classifier) {
    j["pipeline"] = metrics_to_json(r.pipeline);
    j["reference"] = metrics_to_json(r.reference);
    j["macro_f1_delta"] = r.macro_f1_delta;
  } else {
    j["auroc_pipeline"] = r.auroc_pipeline;
    j["auroc_reference"] = r.auroc_reference;
  }
  j["fusion"] = fusion_report_to_json(r.fusion);
  j["resources"] = report_to_json(r.resources);
  j["timings_ms"] = r.timings_ms;
  return j;
}

inline EvalReport evaluate_plain(const CompiledModel& cm, const Dataset& test) {
  if (test.rows.empty()) throw Error("evaluate", "empty test set");
  EvalReport rep;
  rep.fusion = cm.fusion;
  rep.resources = cm.resources;
  rep.classifier = cm.head.kind == HeadKind::Classifier;
  std::vector<int> pipe, ref;
  std::vector<double> pipe_scores, ref_scores;
  for (const auto& row : test.rows) {
    auto raws = quantize_input(cm, row);
    auto out = execute(cm.program, raws);
    auto full = reference_infer(cm.deployed, row);
    if (rep.classifier) {
      pipe.push_back(argmax_raw(out));
      int best = 0;
      for (size_t c = 1; c < full.size(); ++c)
        if (full[c] > full[best]) best = int(c);
      ref.push_back(best);
    } else {
      pipe_scores.push_back(double(out[0]));
      ref_scores.push_back(full[0]);
      pipe.push_back(out[0] > cm.head.threshold_raw ? 1 : 0);
      auto out_ref = cm.exec_graph.outputs[0];
      double thr = dequantize(cm.head.threshold_raw,
                              cm.plan.spec_of(out_ref.node, out_ref.part));
      ref.push_back(full[0] > thr ? 1 : 0);
    }
  }
  rep.decisions = int(test.rows.size());
  if (rep.classifier) {
    int classes = 1;
    for (int l : test.labels) classes = std::max(classes, l + 1);
    rep.pipeline = classification_metrics(test.labels, pipe, classes);
    rep.reference = classification_metrics(test.labels, ref, classes);
    rep.agreement = agreement_rate(pipe, ref);
    rep.macro_f1_delta = rep.reference.macro_f1 - rep.pipeline.macro_f1;
  } else {
    rep.auroc_pipeline = auroc(pipe_scores, test.labels);
    rep.auroc_reference = auroc(ref_scores, test.labels);
    rep.agreement = agreement_rate(pipe, ref);
  }
  return rep;
}

inline EvalReport evaluate_stream(const CompiledModel& cm, const FlowSet& test) {
  if (!cm.stream) throw Error("evaluate", "model was not compiled for streams");
  EvalReport rep;
  rep.fusion = cm.fusion;
  rep.resources = cm.resources;
  rep.classifier = cm.head.kind == HeadKind::Classifier;
  const auto& sp = *cm.stream;

  auto decisions = run_stream(sp, test.packets);
  auto windows = windowize(sp.features, sp.feature_shifts, sp.bytes_per_packet,
                           sp.window, test.packets);
  if (decisions.size() != windows.size())
    throw Error("evaluate", "decision/window alignment mismatch");

  std::vector<int> truth, pipe, ref;
  std::vector<double> pipe_scores, ref_scores;
  double ref_threshold = 0;
  if (!rep.classifier) {
    // the full-precision threshold that corresponds to the deployed one
    auto out_ref = cm.exec_graph.outputs[0];
    ref_threshold = dequantize(cm.head.threshold_raw,
                               cm.plan.spec_of(out_ref.node, out_ref.part));
  }
  for (size_t i = 0; i < decisions.size(); ++i) {
    const auto& d = decisions[i];
    const auto& w = windows[i];
    if (d.flow != w.flow || d.packet_index != w.packet_index)
      throw Error("evaluate", "decision/window alignment mismatch");
    int label = test.flow_labels.at(d.flow);
    truth.push_back(label);
    auto full = reference_infer(cm.deployed, w.features);
    if (rep.classifier) {
      pipe.push_back(d.decision);
      int best = 0;
      for (size_t c = 1; c < full.size(); ++c)
        if (full[c] > full[best]) best = int(c);
      ref.push_back(best);
    } else {
      pipe_scores.push_back(double(d.raw_output[0]));
      ref_scores.push_back(full[0]);
      pipe.push_back(d.decision);
      ref.push_back(full[0] > ref_threshold ? 1 : 0);
    }
  }
  rep.decisions = int(decisions.size());
  if (rep.classifier) {
    int classes = 1;
    for (int l : truth) classes = std::max(classes, l + 1);
    rep.pipeline = classification_metrics(truth, pipe, classes);
    rep.reference = classification_metrics(truth, ref, classes);
    rep.agreement = agreement_rate(pipe, ref);
    rep.macro_f1_delta = rep.reference.macro_f1 - rep.pipeline.macro_f1;
  } else {
    rep.auroc_pipeline = auroc(pipe_scores, truth);
    rep.auroc_reference = auroc(ref_scores, truth);
    rep.agreement = agreement_rate(pipe, ref);
  }
  return rep;
}

// ---- artifact persistence ----

inline void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("compile", "cannot write " + path);
  f << j.dump(2) << "\n";
}

inline void save_artifacts(const CompiledModel& cm, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_json(model_to_json(cm.trained), dir + "/model.json");
  write_json(graph_to_json(cm.fused), dir + "/fused_graph.json");
  write_json(fusion_report_to_json(cm.fusion), dir + "/fusion.json");
  write_json(program_to_json(cm.program), dir + "/program.json");
  write_json(report_to_json(cm.resources), dir + "/resources.json");

  nlohmann::json meta;
  meta["head"] = cm.head.kind == HeadKind::Classifier ? "classifier" : "autoencoder";
  meta["threshold_raw"] = cm.head.threshold_raw;
  meta["window"] = cm.stream ? cm.stream->window : 1;
  if (cm.stream) {
    const auto& sp = *cm.stream;
    write_json(program_to_json(sp.packet_part), dir + "/packet_program.json");
    nlohmann::json jf = nlohmann::json::array();
    for (size_t i = 0; i < sp.features.size(); ++i) {
      const char* k = sp.features[i] == StreamFeature::PktLen ? "pkt_len"
                      : sp.features[i] == StreamFeature::Ipd  ? "ipd"
                                                              : "bytes";
      jf.push_back({{"kind", k}, {"shift", sp.feature_shifts[i]}});
    }
    meta["features"] = jf;
    meta["bytes_per_packet"] = sp.bytes_per_packet;
    meta["index_widths"] = sp.index_widths;
    nlohmann::json specs = nlohmann::json::array();
    for (const auto& q : sp.feature_specs)
      specs.push_back({{"width", q.width}, {"frac", q.frac}});
    meta["feature_specs"] = specs;
  }
  write_json(meta, dir + "/deploy.json");
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("compile", "cannot open " + path);
  nlohmann::json j;
  f >> j;
  return j;
}

// Rebuilds the runnable deployment (plain program or stream pair) from a
// saved artifact directory.
struct DeployedArtifact {
  PipelineProgram program;
  std::optional<StreamProgram> stream;
  HeadSpec head;
};

inline DeployedArtifact load_artifacts(const std::string& dir) {
  DeployedArtifact d;
  d.program = program_from_json(read_json(dir + "/program.json"));
  auto meta = read_json(dir + "/deploy.json");
  d.head.kind = meta.at("head") == "autoencoder" ? HeadKind::Autoencoder
                                                 : HeadKind::Classifier;
  d.head.threshold_raw = meta.at("threshold_raw");
  int window = meta.at("window");
  if (window > 1) {
    StreamProgram sp;
    sp.window = window;
    sp.packet_part = program_from_json(read_json(dir + "/packet_program.json"));
    sp.window_part = d.program;
    sp.head = d.head;
    sp.bytes_per_packet = meta.at("bytes_per_packet");
    sp.index_widths = meta.at("index_widths").get<std::vector<int>>();
    for (const auto& jf : meta.at("features")) {
      std::string k = jf.at("kind");
      sp.features.push_back(k == "pkt_len" ? StreamFeature::PktLen
                            : k == "ipd"   ? StreamFeature::Ipd
                                           : StreamFeature::Bytes);
      sp.feature_shifts.push_back(jf.at("shift"));
    }
    for (const auto& js : meta.at("feature_specs"))
      sp.feature_specs.push_back(QuantSpec{js.at("width"), js.at("frac")});
    d.stream = std::move(sp);
  }
  return d;
}

}  // namespace matpipe
