#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "matpipe/table.hpp"

namespace matpipe {

// Switch resource constants. Defaults follow a 20-stage pipeline with 10 Mb
// of SRAM and 0.5 Mb of TCAM per stage, a 1024-bit action data bus, and a
// 4096-bit PHV. stateful_sram_bits caps the per-flow state footprint.
struct ResourceModel {
  int stages = 20;
  int64_t sram_bits_per_stage = 10LL << 20;
  int64_t tcam_bits_per_stage = 1LL << 19;
  int action_bus_bits = 1024;
  int phv_bits = 4096;
  int per_stage_table_limit = 16;
  int stateful_sram_bits = 512;
};

struct PhvSlot {
  int id = -1;
  int width = 16;
  QuantSpec spec;
  std::string role;
};

// What happens to one payload element after a table match: copy into a
// result slot, and/or shift-align + saturating-add into an accumulator slot.
struct PayloadAction {
  int write_slot = -1;
  int acc_slot = -1;
  int acc_shift_from_frac = 0;  // operand fractional position before align
};

struct TableApply {
  int table_id = -1;
  std::vector<int> match_slots;  // one per key field
  std::vector<PayloadAction> actions;
};

// Table-less accumulate: adds the (shift-aligned) value of a slot into an
// accumulator slot. Used when a SumReduce operand is a raw field rather
// than a table payload.
struct SlotAdd {
  int src_slot = -1;
  int acc_slot = -1;
  int from_frac = 0;
};

struct StageProgram {
  std::vector<TableApply> tables;
  std::vector<SlotAdd> adds;
};

struct FlowField {
  std::string name;
  int bits = 0;
};

struct PipelineProgram {
  std::vector<PhvSlot> slots;
  std::vector<StageProgram> stages;
  std::vector<MappingTable> tables;
  std::vector<int> input_slots;
  std::vector<int> output_slots;
  std::vector<FlowField> flow_state;
  int64_t phv_peak_bits = 0;

  int64_t flow_bits() const {
    int64_t b = 0;
    for (const auto& f : flow_state) b += f.bits;
    return b;
  }
  int lookup_count() const {
    int c = 0;
    for (const auto& s : stages) c += int(s.tables.size());
    return c;
  }
};

// Per-packet register file layout for stream programs: a 16-bit previous
// timestamp when inter-packet delay is used, plus the stored per-packet
// index fields of the trailing window-1 packets packed into 8-bit registers
// (hardware has no sub-byte registers, so two 4-bit indexes share one).
inline std::vector<FlowField> flow_state_layout(int window,
                                                const std::vector<int>& idx_widths,
                                                bool uses_ipd) {
  std::vector<FlowField> out;
  if (uses_ipd) out.push_back({"prev_timestamp", 16});
  int stored = window - 1;
  if (stored <= 0 || idx_widths.empty()) return out;
  for (size_t f = 0; f < idx_widths.size(); ++f) {
    int w = idx_widths[f];
    int per_reg = std::max(1, 8 / std::max(1, w));
    int regs = (stored + per_reg - 1) / per_reg;
    int reg_bits = w > 8 ? 16 : 8;
    for (int r = 0; r < regs; ++r)
      out.push_back({"idx_f" + std::to_string(f) + "_r" + std::to_string(r), reg_bits});
  }
  return out;
}

struct StageUsage {
  int64_t sram_bits = 0;
  int64_t tcam_bits = 0;
  int64_t bus_bits = 0;
  int tables = 0;
};

struct ResourceReport {
  std::vector<StageUsage> per_stage;
  int64_t sram_bits = 0;
  int64_t tcam_bits = 0;
  int64_t bus_bits_max = 0;
  int64_t phv_peak_bits = 0;
  int stages_used = 0;
  int64_t stateful_bits_per_flow = 0;
  double sram_util = 0, tcam_util = 0, bus_util = 0, phv_util = 0;
};

namespace detail {

struct SlotAlloc {
  std::vector<PhvSlot> slots;
  int add(int width, const QuantSpec& spec, const std::string& role) {
    PhvSlot s;
    s.id = int(slots.size());
    s.width = width;
    s.spec = spec;
    s.role = role;
    slots.push_back(s);
    return s.id;
  }
};

// Element-level address of a value in the dataflow: which slot carries it.
struct ElemKey {
  int node, part, elem;
  bool operator<(const ElemKey& o) const {
    return std::tie(node, part, elem) < std::tie(o.node, o.part, o.elem);
  }
};

}  // namespace detail

// Greedy level-order scheduling of a fused graph whose Map members all have
// tables. Maps become table applications; SumReduce becomes saturating-add
// actions in the stages where operands are produced; Partition is free slot
// aliasing. Throws when any budget or the stage count cannot be met.
inline PipelineProgram schedule(const PrimitiveGraph& g, const TablePlan& plan,
                                const ResourceModel& model) {
  auto errs = check_graph(g);
  if (!errs.empty()) throw Error("schedule", "invalid graph: " + errs[0]);

  detail::SlotAlloc alloc;
  std::map<detail::ElemKey, int> slot_of;   // element -> slot
  std::map<std::pair<int, int>, int> part_arity;

  const QuantSpec& in_spec = plan.spec_of(-1, 0);
  PipelineProgram prog;
  for (int e = 0; e < g.input_arity; ++e) {
    int s = alloc.add(in_spec.width, in_spec, "input");
    slot_of[{-1, 0, e}] = s;
    prog.input_slots.push_back(s);
  }
  part_arity[{-1, 0}] = g.input_arity;

  // which parts feed SumReduce vs get matched/emitted later
  std::set<std::pair<int, int>> summed_parts;
  std::set<std::pair<int, int>> slotted_parts;
  for (const auto& n : g.nodes) {
    if (n.kind == PrimKind::Partition)
      for (const auto& r : n.sources) slotted_parts.insert({r.node, r.part});
    if (n.kind == PrimKind::SumReduce)
      for (const auto& r : n.inputs) summed_parts.insert({r.node, r.part});
  }
  for (const auto& r : g.outputs) slotted_parts.insert({r.node, r.part});

  // resolve a partition segment element back to its producer slot
  auto elem_slot = [&](const PartRef& r, int elem) -> int {
    auto [root, e] = resolve_element(g, r, elem);
    return slot_of.at({root.node, root.part, e});
  };

  // stage availability per (node, part): tables may read it at stage+1
  std::map<std::pair<int, int>, int> avail;
  avail[{-1, 0}] = 0;

  struct Placed {
    int stage;
    TableApply apply;
  };
  std::vector<StageUsage> usage(1);  // stage 0 unused; grows on demand
  auto ensure_stage = [&](int s) {
    while (int(usage.size()) <= s) usage.push_back({});
  };

  // liveness per slot: [born, last_read]
  std::vector<int> born, last_read;
  auto note_born = [&](int slot, int stage) {
    while (int(born.size()) <= slot) {
      born.push_back(0);
      last_read.push_back(0);
    }
    born[slot] = stage;
  };
  auto note_read = [&](int slot, int stage) {
    while (int(last_read.size()) <= slot) {
      born.push_back(0);
      last_read.push_back(0);
    }
    last_read[slot] = std::max(last_read[slot], stage);
  };
  for (int s : prog.input_slots) note_born(s, 0);

  std::vector<Placed> placed;
  std::map<std::pair<int, int>, std::vector<size_t>> placed_of;  // member -> placed
  std::vector<std::pair<int, SlotAdd>> slot_adds;                // (stage, add)

  for (const auto& n : g.nodes) {
    switch (n.kind) {
      case PrimKind::Partition: {
        for (size_t i = 0; i < n.segments.size(); ++i) {
          part_arity[{n.id, int(i)}] = n.segments[i].length();
          int src_avail = 0;
          for (const auto& r : n.sources)
            src_avail = std::max(src_avail, avail.at({r.node, r.part}));
          avail[{n.id, int(i)}] = src_avail;
        }
        break;
      }
      case PrimKind::Map: {
        for (size_t mi = 0; mi < n.members.size(); ++mi) {
          int out_arity = n.members[mi].out_arity();
          part_arity[{n.id, int(mi)}] = out_arity;
          const QuantSpec& out_spec = plan.spec_of(n.id, int(mi));
          int min_stage = std::max(1, avail.at({n.partition, int(mi)}) + 1);

          bool needs_slots = slotted_parts.count({n.id, int(mi)}) > 0;
          if (needs_slots)
            for (int e = 0; e < out_arity; ++e)
              slot_of[{n.id, int(mi), e}] =
                  alloc.add(out_spec.width, out_spec, "map" + std::to_string(n.id));

          int member_stage = 0;
          for (int ti : plan.tables_of(n.id, int(mi))) {
            const auto& tab = plan.tables[ti];
            TableApply apply;
            apply.table_id = ti;
            for (size_t f = 0; f < tab.key.size(); ++f)
              apply.match_slots.push_back(
                  elem_slot({n.partition, int(mi)}, tab.in_offset + int(f)));
            apply.actions.resize(tab.out_arity);
            if (needs_slots)
              for (int e = 0; e < tab.out_arity; ++e)
                apply.actions[e].write_slot =
                    slot_of.at({n.id, int(mi), tab.out_offset + e});

            // earliest stage with room for this table
            int stage = min_stage;
            for (;;) {
              if (stage > model.stages) {
                std::ostringstream os;
                os << "insufficient stages: map node " << n.id << " ("
                   << n.provenance << ") needs stage " << stage << " of "
                   << model.stages;
                throw Error("schedule", os.str());
              }
              ensure_stage(stage);
              auto& u = usage[stage];
              bool fits = u.tables + 1 <= model.per_stage_table_limit &&
                          u.sram_bits + tab.sram_bits() <= model.sram_bits_per_stage &&
                          u.tcam_bits + tab.tcam_bits() <= model.tcam_bits_per_stage &&
                          u.bus_bits + tab.payload_bits() <= model.action_bus_bits;
              if (fits) break;
              ++stage;
            }
            auto& u = usage[stage];
            u.tables += 1;
            u.sram_bits += tab.sram_bits();
            u.tcam_bits += tab.tcam_bits();
            u.bus_bits += tab.payload_bits();

            for (int s : apply.match_slots) note_read(s, stage);
            if (needs_slots)
              for (int e = 0; e < tab.out_arity; ++e)
                note_born(slot_of.at({n.id, int(mi), tab.out_offset + e}), stage);
            member_stage = std::max(member_stage, stage);
            placed_of[{n.id, int(mi)}].push_back(placed.size());
            placed.push_back({stage, std::move(apply)});
          }
          avail[{n.id, int(mi)}] = member_stage;
        }
        break;
      }
      case PrimKind::SumReduce: {
        const QuantSpec& acc_spec = plan.spec_of(n.id, 0);
        part_arity[{n.id, 0}] = n.out_arity;
        std::vector<int> acc_slots(n.out_arity);
        for (int e = 0; e < n.out_arity; ++e) {
          // accumulators are wide: sums run unsaturated and saturate on read
          int s = alloc.add(32, acc_spec, "acc" + std::to_string(n.id));
          slot_of[{n.id, 0, e}] = s;
          acc_slots[e] = s;
        }
        int ready = 0;
        int first_stage = model.stages + 1;
        for (const auto& r : n.inputs) {
          const QuantSpec& from = plan.spec_of(r.node, r.part);
          auto it = placed_of.find({r.node, r.part});
          if (it != placed_of.end()) {
            // fold the adds into the producing tables' actions
            for (size_t pi : it->second) {
              auto& pl = placed[pi];
              const auto& tab = plan.tables[pl.apply.table_id];
              for (int e = 0; e < tab.out_arity; ++e) {
                pl.apply.actions[e].acc_slot = acc_slots[tab.out_offset + e];
                pl.apply.actions[e].acc_shift_from_frac = from.frac;
              }
              ready = std::max(ready, pl.stage);
              first_stage = std::min(first_stage, pl.stage);
            }
          } else {
            // raw field or upstream accumulator: explicit per-element adds
            int add_stage = avail.at({r.node, r.part}) + 1;
            if (add_stage > model.stages)
              throw Error("schedule", "insufficient stages: sum over node " +
                                          std::to_string(r.node));
            ensure_stage(add_stage);
            for (int e = 0; e < n.out_arity; ++e) {
              int src = elem_slot(r, e);
              slot_adds.push_back({add_stage, {src, acc_slots[e], from.frac}});
              note_read(src, add_stage);
            }
            ready = std::max(ready, add_stage);
            first_stage = std::min(first_stage, add_stage);
          }
        }
        for (int e = 0; e < n.out_arity; ++e) note_born(acc_slots[e], first_stage);
        avail[{n.id, 0}] = ready;
        break;
      }
    }
  }

  // keep output slots alive to the end
  int total_stages = int(usage.size()) - 1;
  for (const auto& r : g.outputs) {
    int a = part_arity.at({r.node, r.part});
    for (int e = 0; e < a; ++e) {
      int s = r.node < 0 ? slot_of.at({-1, 0, e}) : slot_of.at({r.node, r.part, e});
      prog.output_slots.push_back(s);
      note_read(s, total_stages + 1);
    }
  }

  // PHV peak: sum of widths of slots live at each stage boundary
  int64_t peak = 0;
  for (int s = 0; s <= total_stages + 1; ++s) {
    int64_t live = 0;
    for (size_t i = 0; i < alloc.slots.size(); ++i)
      if (born[i] <= s && last_read[i] >= s) live += alloc.slots[i].width;
    peak = std::max(peak, live);
  }
  if (peak > model.phv_bits) {
    std::ostringstream os;
    os << "phv budget exceeded: peak " << peak << " bits > " << model.phv_bits;
    throw Error("schedule", os.str());
  }

  prog.phv_peak_bits = peak;
  prog.slots = alloc.slots;
  prog.tables = plan.tables;
  prog.stages.resize(total_stages);
  for (auto& pl : placed) prog.stages[pl.stage - 1].tables.push_back(pl.apply);
  for (auto& [stage, add] : slot_adds) prog.stages[stage - 1].adds.push_back(add);
  return prog;
}

inline ResourceReport account(const PipelineProgram& prog, const ResourceModel& model) {
  ResourceReport r;
  r.per_stage.resize(prog.stages.size());
  for (size_t s = 0; s < prog.stages.size(); ++s) {
    auto& u = r.per_stage[s];
    for (const auto& t : prog.stages[s].tables) {
      const auto& tab = prog.tables[t.table_id];
      u.tables += 1;
      u.sram_bits += tab.sram_bits();
      u.tcam_bits += tab.tcam_bits();
      u.bus_bits += tab.payload_bits();
    }
    r.sram_bits += u.sram_bits;
    r.tcam_bits += u.tcam_bits;
    r.bus_bits_max = std::max(r.bus_bits_max, u.bus_bits);
  }
  r.stages_used = int(prog.stages.size());
  r.stateful_bits_per_flow = prog.flow_bits();
  r.phv_peak_bits = prog.phv_peak_bits;

  r.sram_util = double(r.sram_bits) / (double(model.sram_bits_per_stage) * model.stages);
  r.tcam_util = double(r.tcam_bits) / (double(model.tcam_bits_per_stage) * model.stages);
  r.bus_util = double(r.bus_bits_max) / double(model.action_bus_bits);
  r.phv_util = double(r.phv_peak_bits) / double(model.phv_bits);
  return r;
}

// ---- JSON ----

inline nlohmann::json program_to_json(const PipelineProgram& p) {
  nlohmann::json j;
  j["slots"] = nlohmann::json::array();
  for (const auto& s : p.slots)
    j["slots"].push_back({{"id", s.id},
                          {"width", s.width},
                          {"spec", {{"width", s.spec.width}, {"frac", s.spec.frac}}},
                          {"role", s.role}});
  j["stages"] = nlohmann::json::array();
  for (const auto& st : p.stages) {
    nlohmann::json js;
    js["tables"] = nlohmann::json::array();
    for (const auto& t : st.tables) {
      nlohmann::json jt;
      jt["table"] = t.table_id;
      jt["match"] = t.match_slots;
      jt["actions"] = nlohmann::json::array();
      for (const auto& a : t.actions)
        jt["actions"].push_back({{"write", a.write_slot},
                                 {"acc", a.acc_slot},
                                 {"from_frac", a.acc_shift_from_frac}});
      js["tables"].push_back(jt);
    }
    js["adds"] = nlohmann::json::array();
    for (const auto& a : st.adds)
      js["adds"].push_back({{"src", a.src_slot},
                            {"acc", a.acc_slot},
                            {"from_frac", a.from_frac}});
    j["stages"].push_back(js);
  }
  j["tables"] = nlohmann::json::array();
  for (const auto& t : p.tables) j["tables"].push_back(table_to_json(t));
  j["input_slots"] = p.input_slots;
  j["output_slots"] = p.output_slots;
  j["flow_state"] = nlohmann::json::array();
  for (const auto& f : p.flow_state)
    j["flow_state"].push_back({{"name", f.name}, {"bits", f.bits}});
  j["phv_peak_bits"] = p.phv_peak_bits;
  return j;
}

inline PipelineProgram program_from_json(const nlohmann::json& j) {
  PipelineProgram p;
  for (const auto& js : j.at("slots")) {
    PhvSlot s;
    s.id = js.at("id");
    s.width = js.at("width");
    s.spec = QuantSpec{js.at("spec").at("width"), js.at("spec").at("frac")};
    s.role = js.value("role", "");
    p.slots.push_back(s);
  }
  for (const auto& js : j.at("stages")) {
    StageProgram st;
    for (const auto& jt : js.at("tables")) {
      TableApply t;
      t.table_id = jt.at("table");
      t.match_slots = jt.at("match").get<std::vector<int>>();
      for (const auto& ja : jt.at("actions")) {
        PayloadAction a;
        a.write_slot = ja.at("write");
        a.acc_slot = ja.at("acc");
        a.acc_shift_from_frac = ja.at("from_frac");
        t.actions.push_back(a);
      }
      st.tables.push_back(std::move(t));
    }
    for (const auto& ja : js.at("adds"))
      st.adds.push_back({ja.at("src"), ja.at("acc"), ja.at("from_frac")});
    p.stages.push_back(std::move(st));
  }
  for (const auto& jt : j.at("tables")) p.tables.push_back(table_from_json(jt));
  p.input_slots = j.at("input_slots").get<std::vector<int>>();
  p.output_slots = j.at("output_slots").get<std::vector<int>>();
  for (const auto& jf : j.at("flow_state"))
    p.flow_state.push_back({jf.at("name"), jf.at("bits")});
  p.phv_peak_bits = j.value("phv_peak_bits", int64_t(0));
  return p;
}

inline nlohmann::json report_to_json(const ResourceReport& r) {
  nlohmann::json j;
  j["stages_used"] = r.stages_used;
  j["sram_bits"] = r.sram_bits;
  j["tcam_bits"] = r.tcam_bits;
  j["bus_bits_max"] = r.bus_bits_max;
  j["phv_peak_bits"] = r.phv_peak_bits;
  j["stateful_bits_per_flow"] = r.stateful_bits_per_flow;
  j["sram_util"] = r.sram_util;
  j["tcam_util"] = r.tcam_util;
  j["bus_util"] = r.bus_util;
  j["phv_util"] = r.phv_util;
  j["per_stage"] = nlohmann::json::array();
  for (const auto& u : r.per_stage)
    j["per_stage"].push_back({{"sram_bits", u.sram_bits},
                              {"tcam_bits", u.tcam_bits},
                              {"bus_bits", u.bus_bits},
                              {"tables", u.tables}});
  return j;
}

inline std::string report_to_text(const ResourceReport& r) {
  std::ostringstream os;
  os << "stages used        : " << r.stages_used << "\n";
  os << "SRAM bits          : " << r.sram_bits << " (" << r.sram_util * 100 << "%)\n";
  os << "TCAM bits          : " << r.tcam_bits << " (" << r.tcam_util * 100 << "%)\n";
  os << "bus bits (max/st)  : " << r.bus_bits_max << " (" << r.bus_util * 100 << "%)\n";
  os << "PHV peak bits      : " << r.phv_peak_bits << " (" << r.phv_util * 100 << "%)\n";
  os << "stateful bits/flow : " << r.stateful_bits_per_flow << "\n";
  return os.str();
}

}  // namespace matpipe
