#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "matpipe/cluster.hpp"
#include "matpipe/primitive.hpp"
#include "matpipe/quant.hpp"
#include "matpipe/ternary.hpp"

namespace matpipe {

// Precomputed realization of one Map member. Exact tables enumerate every
// key; ternary tables carry TCAM rules whose payload selects a centroid row.
// Payload values are raw fixed-point integers in the `out` format.
struct MappingTable {
  enum class Kind { Exact, Ternary };
  Kind kind = Kind::Exact;
  int map_node = -1;
  int member = -1;
  // element-split members realize as several small tables; offsets locate
  // this table's slice of the member's input and output vectors
  int in_offset = 0;
  int out_offset = 0;
  std::string provenance;

  std::vector<KeyGrid> key;  // field 0 is the most significant
  QuantSpec out;
  int out_arity = 0;

  std::vector<std::vector<int64_t>> rows;  // payload rows
  std::vector<TernaryRule> rules;          // ternary only; payload = row index

  int key_bits() const {
    int b = 0;
    for (const auto& g : key) b += g.width;
    return b;
  }
  int payload_bits() const { return out_arity * out.width; }
  int64_t sram_bits() const { return int64_t(rows.size()) * payload_bits(); }
  int64_t tcam_bits() const {
    return kind == Kind::Ternary ? int64_t(rules.size()) * 2 * key_bits() : 0;
  }

  uint64_t compose_key(const std::vector<int64_t>& raws) const {
    uint64_t k = 0;
    for (size_t i = 0; i < key.size(); ++i)
      k = (k << key[i].width) | uint64_t(key[i].key_of_raw(raws[i]));
    return k;
  }

  // Row index for a raw segment, or -1 when no ternary rule matches.
  int64_t lookup(const std::vector<int64_t>& raws) const {
    uint64_t k = compose_key(raws);
    if (kind == Kind::Exact) return int64_t(k);
    for (const auto& r : rules)
      if (r.matches(k)) return r.payload;
    return -1;
  }
};

struct TableLimits {
  int exact_key_cap_bits = 16;   // 2^16 entries ceiling for exact tables
  int ternary_rule_budget = 8192;
};

// Enumerates the full key space, evaluates fn at each grid point in full
// precision, and quantizes the outputs.
inline MappingTable build_exact_table(const MapFunction& fn,
                                      const std::vector<KeyGrid>& grids,
                                      const QuantSpec& out,
                                      const TableLimits& limits = {}) {
  MappingTable t;
  t.kind = MappingTable::Kind::Exact;
  t.key = grids;
  t.out = out;
  t.out_arity = fn.out_arity();
  if (int(grids.size()) != fn.in_arity())
    throw Error("tables", "key fields do not match function arity");
  int bits = t.key_bits();
  if (bits > limits.exact_key_cap_bits)
    throw Error("tables", "table-too-large: " + std::to_string(bits) +
                              " key bits exceed the exact cap");
  uint64_t n = uint64_t(1) << bits;
  t.rows.reserve(n);
  Vec point(grids.size());
  for (uint64_t k = 0; k < n; ++k) {
    uint64_t rest = k;
    for (size_t i = grids.size(); i-- > 0;) {
      uint64_t field = rest & ((uint64_t(1) << grids[i].width) - 1);
      rest >>= grids[i].width;
      point[i] = grids[i].value_of_key(int64_t(field));
    }
    Vec y = fn.eval(point);
    std::vector<int64_t> row(y.size());
    for (size_t i = 0; i < y.size(); ++i) row[i] = quantize(y[i], out);
    t.rows.push_back(std::move(row));
  }
  return t;
}

// One rule set per clustering-tree leaf: per-feature prefix covers of the
// leaf box, cross-producted across features. The payload row holds the
// quantized full-precision function value at the leaf centroid, so one
// match realizes the whole Map.
inline MappingTable build_fuzzy_table(const MapFunction& fn, const ClusterTree& tree,
                                      const std::vector<KeyGrid>& grids,
                                      const QuantSpec& out,
                                      const TableLimits& limits = {}) {
  if (tree.dim != fn.in_arity())
    throw Error("tables", "tree dimension does not match function arity");
  if (int(grids.size()) != fn.in_arity())
    throw Error("tables", "key fields do not match function arity");
  MappingTable t;
  t.kind = MappingTable::Kind::Ternary;
  t.key = grids;
  t.out = out;
  t.out_arity = fn.out_arity();

  t.rows.resize(tree.leaf_count);
  for (const auto& n : tree.nodes) {
    if (!n.is_leaf()) continue;
    Vec y = fn.eval(n.centroid);
    std::vector<int64_t> row(y.size());
    for (size_t i = 0; i < y.size(); ++i) row[i] = quantize(y[i], out);
    t.rows[n.leaf_index] = std::move(row);
  }

  int total_bits = t.key_bits();
  auto regions = leaf_regions(tree, grids);
  int priority = 0;
  for (const auto& region : regions) {
    if (region.empty()) continue;  // no grid point reaches this leaf
    // per-feature prefix sets
    std::vector<std::vector<TernaryRule>> per_feature;
    for (size_t f = 0; f < grids.size(); ++f)
      per_feature.push_back(range_to_ternary(uint64_t(region.box[f].first),
                                             uint64_t(region.box[f].second),
                                             grids[f].width));
    // cross product into full-width rules
    std::vector<TernaryRule> cross = {TernaryRule{0, 0, 0, region.index}};
    for (size_t f = 0; f < per_feature.size(); ++f) {
      std::vector<TernaryRule> next;
      int w = grids[f].width;
      for (const auto& base : cross)
        for (const auto& r : per_feature[f]) {
          TernaryRule nr;
          nr.value = (base.value << w) | r.value;
          nr.mask = (base.mask << w) | r.mask;
          nr.payload = region.index;
          next.push_back(nr);
        }
      cross = std::move(next);
      if (int(cross.size()) > limits.ternary_rule_budget)
        throw Error("tables", "table-too-large: ternary rules exceed the budget");
    }
    for (auto& r : cross) {
      r.priority = priority++;
      t.rules.push_back(r);
    }
    if (int(t.rules.size()) > limits.ternary_rule_budget)
      throw Error("tables", "table-too-large: ternary rules exceed the budget");
  }
  (void)total_bits;
  return t;
}

// Quantization/realization plan for a fused graph: a storage format per
// node part (graph input is part {-1,0}) and one or more tables per Map
// member (elementwise members split into per-element tables).
struct TablePlan {
  std::map<std::pair<int, int>, QuantSpec> spec;             // (node, part)
  std::map<std::pair<int, int>, std::vector<int>> member_tables;
  std::vector<MappingTable> tables;

  const QuantSpec& spec_of(int node, int part) const {
    auto it = spec.find({node, part});
    if (it == spec.end())
      throw Error("tables", "no quant spec for node " + std::to_string(node));
    return it->second;
  }
  const std::vector<int>& tables_of(int node, int member) const {
    auto it = member_tables.find({node, member});
    if (it == member_tables.end())
      throw Error("tables", "no tables for map node " + std::to_string(node));
    return it->second;
  }
};

// Accumulate one operand into a wide accumulator, aligning fractional
// positions by compile-time shift. Accumulators run unsaturated; the sum
// saturates to the accumulator format once complete (on read).
inline void accumulate_raw(std::vector<int64_t>& acc, const std::vector<int64_t>& x,
                           int from_frac, const QuantSpec& acc_spec) {
  for (size_t i = 0; i < acc.size(); ++i)
    acc[i] += shift_align(x[i], from_frac, acc_spec.frac);
}

// Direct post-quantization evaluation of the fused graph over raw integers:
// table lookups plus saturating adds, no scheduling involved. This is the
// oracle the pipeline simulator must match bit-for-bit.
inline std::vector<int64_t> eval_tabular(const PrimitiveGraph& g, const TablePlan& plan,
                                         const std::vector<int64_t>& input_raws) {
  if (int(input_raws.size()) != g.input_arity)
    throw Error("tables", "input arity mismatch");
  std::vector<std::vector<std::vector<int64_t>>> values(g.nodes.size());
  auto fetch = [&](const PartRef& r) -> const std::vector<int64_t>& {
    return r.node < 0 ? input_raws : values[r.node][r.part];
  };
  for (const auto& n : g.nodes) {
    switch (n.kind) {
      case PrimKind::Partition: {
        std::vector<int64_t> concat;
        for (const auto& r : n.sources) {
          const auto& v = fetch(r);
          concat.insert(concat.end(), v.begin(), v.end());
        }
        if (n.sources.empty()) concat = input_raws;
        for (const auto& seg : n.segments) {
          std::vector<int64_t> v;
          for (int p : seg.positions()) v.push_back(concat[p]);
          values[n.id].push_back(std::move(v));
        }
        break;
      }
      case PrimKind::Map: {
        for (size_t i = 0; i < n.members.size(); ++i) {
          const auto& seg = values[n.partition][i];
          std::vector<int64_t> out(n.members[i].out_arity(), 0);
          for (int ti : plan.tables_of(n.id, int(i))) {
            const auto& tab = plan.tables[ti];
            std::vector<int64_t> sub(seg.begin() + tab.in_offset,
                                     seg.begin() + tab.in_offset + int(tab.key.size()));
            int64_t row = tab.lookup(sub);
            if (row < 0)
              throw Error("tables", "no matching rule in table of map node " +
                                        std::to_string(n.id));
            const auto& payload = tab.rows[size_t(row)];
            for (int e = 0; e < tab.out_arity; ++e)
              out[tab.out_offset + e] = payload[e];
          }
          values[n.id].push_back(std::move(out));
        }
        break;
      }
      case PrimKind::SumReduce: {
        const QuantSpec& acc_spec = plan.spec_of(n.id, 0);
        std::vector<int64_t> acc(n.out_arity, 0);
        for (const auto& r : n.inputs) {
          const QuantSpec& from = plan.spec_of(r.node, r.part);
          accumulate_raw(acc, fetch(r), from.frac, acc_spec);
        }
        for (auto& v : acc) v = saturate(v, acc_spec);
        values[n.id].push_back(std::move(acc));
        break;
      }
    }
  }
  std::vector<int64_t> out;
  for (const auto& r : g.outputs) {
    const auto& v = fetch(r);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

// ---- JSON ----

inline nlohmann::json keygrid_to_json(const KeyGrid& g) {
  return {{"width", g.width},
          {"shift", g.shift},
          {"offset", g.offset},
          {"storage", {{"width", g.storage.width}, {"frac", g.storage.frac}}}};
}

inline KeyGrid keygrid_from_json(const nlohmann::json& j) {
  KeyGrid g;
  g.width = j.at("width");
  g.shift = j.at("shift");
  g.offset = j.at("offset");
  g.storage = QuantSpec{j.at("storage").at("width"), j.at("storage").at("frac")};
  return g;
}

inline nlohmann::json table_to_json(const MappingTable& t) {
  nlohmann::json j;
  j["kind"] = t.kind == MappingTable::Kind::Exact ? "exact" : "ternary";
  j["map_node"] = t.map_node;
  j["member"] = t.member;
  j["in_offset"] = t.in_offset;
  j["out_offset"] = t.out_offset;
  j["provenance"] = t.provenance;
  j["key"] = nlohmann::json::array();
  for (const auto& g : t.key) j["key"].push_back(keygrid_to_json(g));
  j["out"] = {{"width", t.out.width}, {"frac", t.out.frac}};
  j["out_arity"] = t.out_arity;
  j["rows"] = t.rows;
  if (t.kind == MappingTable::Kind::Ternary) {
    j["rules"] = nlohmann::json::array();
    char buf[32];
    for (const auto& r : t.rules) {
      nlohmann::json jr;
      std::snprintf(buf, sizeof buf, "%llx", (unsigned long long)r.value);
      jr["value"] = buf;
      std::snprintf(buf, sizeof buf, "%llx", (unsigned long long)r.mask);
      jr["mask"] = buf;
      jr["priority"] = r.priority;
      jr["payload"] = r.payload;
      j["rules"].push_back(jr);
    }
  }
  return j;
}

inline MappingTable table_from_json(const nlohmann::json& j) {
  MappingTable t;
  t.kind = j.at("kind") == "exact" ? MappingTable::Kind::Exact
                                   : MappingTable::Kind::Ternary;
  t.map_node = j.at("map_node");
  t.member = j.at("member");
  t.in_offset = j.value("in_offset", 0);
  t.out_offset = j.value("out_offset", 0);
  t.provenance = j.value("provenance", "");
  for (const auto& jk : j.at("key")) t.key.push_back(keygrid_from_json(jk));
  t.out = QuantSpec{j.at("out").at("width"), j.at("out").at("frac")};
  t.out_arity = j.at("out_arity");
  t.rows = j.at("rows").get<std::vector<std::vector<int64_t>>>();
  if (j.contains("rules"))
    for (const auto& jr : j.at("rules")) {
      TernaryRule r;
      r.value = std::stoull(jr.at("value").get<std::string>(), nullptr, 16);
      r.mask = std::stoull(jr.at("mask").get<std::string>(), nullptr, 16);
      r.priority = jr.at("priority");
      r.payload = jr.at("payload");
      t.rules.push_back(r);
    }
  return t;
}

}  // namespace matpipe
