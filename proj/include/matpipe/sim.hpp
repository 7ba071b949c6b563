#pragma once

#include <deque>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "matpipe/model.hpp"
#include "matpipe/pipeline.hpp"

namespace matpipe {

struct SimTrace {
  struct TableHit {
    int table_id = -1;
    int64_t row = -1;
    int priority = -1;  // matched rule priority; -1 for exact tables
  };
  std::vector<TableHit> hits;
  std::vector<std::vector<int64_t>> phv_per_stage;
  std::vector<int64_t> output;
  int lookups = 0;
};

// Stage-by-stage integer execution: match, payload copy, shift-align,
// accumulate. Accumulator slots are wide; every read saturates to the
// slot's declared format first. The instruction set has no multiply,
// divide, or float operation.
inline std::vector<int64_t> execute(const PipelineProgram& prog,
                                    const std::vector<int64_t>& input_raws,
                                    SimTrace* trace = nullptr) {
  if (input_raws.size() != prog.input_slots.size())
    throw Error("sim", "input does not match the program's input layout");
  std::vector<int64_t> phv(prog.slots.size(), 0);
  for (size_t i = 0; i < input_raws.size(); ++i)
    phv[prog.input_slots[i]] = input_raws[i];

  auto read = [&](int slot) { return saturate(phv[slot], prog.slots[slot].spec); };

  for (const auto& stage : prog.stages) {
    for (const auto& t : stage.tables) {
      const auto& tab = prog.tables[t.table_id];
      std::vector<int64_t> key_raws(t.match_slots.size());
      for (size_t i = 0; i < t.match_slots.size(); ++i)
        key_raws[i] = read(t.match_slots[i]);
      int64_t row = tab.lookup(key_raws);
      if (row < 0)
        throw Error("sim", "no matching rule in table " + std::to_string(t.table_id) +
                               " (" + tab.provenance + ")");
      const auto& payload = tab.rows[size_t(row)];
      for (size_t e = 0; e < t.actions.size(); ++e) {
        const auto& a = t.actions[e];
        if (a.write_slot >= 0) phv[a.write_slot] = payload[e];
        if (a.acc_slot >= 0) {
          int64_t aligned = shift_align(payload[e], a.acc_shift_from_frac,
                                        prog.slots[a.acc_slot].spec.frac);
          phv[a.acc_slot] += aligned;
        }
      }
      if (trace) {
        int prio = -1;
        if (tab.kind == MappingTable::Kind::Ternary) {
          uint64_t k = tab.compose_key(key_raws);
          for (const auto& r : tab.rules)
            if (r.matches(k)) { prio = r.priority; break; }
        }
        trace->hits.push_back({t.table_id, row, prio});
        trace->lookups += 1;
      }
    }
    for (const auto& a : stage.adds) {
      int64_t aligned = shift_align(read(a.src_slot), a.from_frac,
                                    prog.slots[a.acc_slot].spec.frac);
      phv[a.acc_slot] += aligned;
    }
    if (trace) trace->phv_per_stage.push_back(phv);
  }

  std::vector<int64_t> out(prog.output_slots.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = read(prog.output_slots[i]);
  if (trace) trace->output = out;
  return out;
}

// ---- per-flow streaming ----

struct PacketRecord {
  std::string flow;
  int64_t timestamp_us = 0;
  int pkt_len = 0;
  std::vector<int> bytes;  // optional raw feature bytes
};

enum class StreamFeature { PktLen, Ipd, Bytes };

struct HeadSpec {
  HeadKind kind = HeadKind::Classifier;
  int64_t threshold_raw = 0;  // autoencoder: anomalous iff output > threshold
};

// Compiled stream model: a per-packet part that compresses the packet's
// features into stored index fields, and a window part keyed on the stored
// indexes of the last (window-1) packets plus the current one.
struct StreamProgram {
  int window = 1;
  std::vector<StreamFeature> features;
  std::vector<int> feature_shifts;  // right-shift bucketing per feature
  int bytes_per_packet = 0;
  std::vector<QuantSpec> feature_specs;  // one per per-packet feature element
  PipelineProgram packet_part;
  std::vector<int> index_widths;  // stored bits per index field
  PipelineProgram window_part;
  HeadSpec head;

  int per_packet_feature_count() const {
    int n = 0;
    for (auto f : features)
      n += f == StreamFeature::Bytes ? bytes_per_packet : 1;
    return n;
  }
};

struct FlowState {
  int64_t last_ts = 0;
  std::deque<std::vector<int64_t>> ring;  // stored index fields per packet
  int64_t count = 0;
};

struct Decision {
  std::string flow;
  int64_t packet_index = 0;  // 1-based within the flow
  int decision = 0;          // class id, or 1 = anomalous
  std::vector<int64_t> raw_output;
  int lookups = 0;
};

inline int argmax_raw(const std::vector<int64_t>& v) {
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = int(i);
  return best;
}

inline Vec packet_features(const std::vector<StreamFeature>& features,
                           const std::vector<int>& shifts, int bytes_per_packet,
                           const PacketRecord& p, int64_t ipd) {
  Vec f;
  for (size_t fi = 0; fi < features.size(); ++fi) {
    int sh = fi < shifts.size() ? shifts[fi] : 0;
    switch (features[fi]) {
      case StreamFeature::PktLen: f.push_back(double(p.pkt_len >> sh)); break;
      case StreamFeature::Ipd: f.push_back(double(ipd >> sh)); break;
      case StreamFeature::Bytes:
        for (int i = 0; i < bytes_per_packet; ++i)
          f.push_back(i < int(p.bytes.size()) ? double(p.bytes[i] >> sh) : 0.0);
        break;
    }
  }
  return f;
}

inline Vec packet_features(const StreamProgram& sp, const PacketRecord& p, int64_t ipd) {
  return packet_features(sp.features, sp.feature_shifts, sp.bytes_per_packet, p, ipd);
}

// Per-packet stream execution. Packets of one flow must arrive with
// non-decreasing timestamps; flows are independent, so distinct flows could
// be processed concurrently as long as each flow's state is updated by one
// worker at a time (this implementation is single-threaded).
inline std::vector<Decision> run_stream(const StreamProgram& sp,
                                        const std::vector<PacketRecord>& packets,
                                        std::vector<SimTrace>* traces = nullptr) {
  std::map<std::string, FlowState> flows;
  std::vector<Decision> out;
  for (const auto& p : packets) {
    auto& st = flows[p.flow];
    if (st.count > 0 && p.timestamp_us < st.last_ts)
      throw Error("sim", "out-of-order timestamp in flow " + p.flow);
    int64_t ipd = st.count == 0 ? 0 : p.timestamp_us - st.last_ts;
    ipd = std::min<int64_t>(ipd, 0xffff);  // 16-bit saturating IPD
    st.last_ts = p.timestamp_us;

    Vec feats = packet_features(sp, p, ipd);
    std::vector<int64_t> raws(feats.size());
    for (size_t i = 0; i < feats.size(); ++i)
      raws[i] = quantize(feats[i], sp.feature_specs[i]);

    SimTrace ptrace;
    auto idx = execute(sp.packet_part, raws, traces ? &ptrace : nullptr);

    st.count += 1;
    if (int(st.ring.size()) == sp.window - 1 && sp.window >= 1) {
      // window input: stored indexes oldest-first, then the current packet
      std::vector<int64_t> win;
      for (const auto& stored : st.ring)
        win.insert(win.end(), stored.begin(), stored.end());
      win.insert(win.end(), idx.begin(), idx.end());
      SimTrace wtrace;
      auto raw_out = execute(sp.window_part, win, traces ? &wtrace : nullptr);
      Decision d;
      d.flow = p.flow;
      d.packet_index = st.count;
      d.raw_output = raw_out;
      d.lookups = sp.packet_part.lookup_count() + sp.window_part.lookup_count();
      if (sp.head.kind == HeadKind::Classifier) {
        d.decision = argmax_raw(raw_out);
      } else {
        d.decision = raw_out[0] > sp.head.threshold_raw ? 1 : 0;
      }
      out.push_back(std::move(d));
      if (traces) {
        wtrace.hits.insert(wtrace.hits.begin(), ptrace.hits.begin(), ptrace.hits.end());
        wtrace.lookups += ptrace.lookups;
        traces->push_back(std::move(wtrace));
      }
    } else if (traces) {
      traces->push_back(std::move(ptrace));
    }
    if (sp.window > 1) {
      st.ring.push_back(idx);
      if (int(st.ring.size()) > sp.window - 1) st.ring.pop_front();
    }
  }
  return out;
}

// ---- packet and decision IO ----

inline std::vector<PacketRecord> load_packets_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("sim", "cannot open " + path);
  std::vector<PacketRecord> out;
  std::string line;
  if (!std::getline(f, line)) throw Error("sim", "empty packet file");
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    PacketRecord p;
    if (!std::getline(ss, cell, ',')) continue;
    p.flow = cell;
    if (!std::getline(ss, cell, ','))
      throw Error("sim", path + ":" + std::to_string(lineno) + ": missing timestamp");
    p.timestamp_us = std::stoll(cell);
    if (!std::getline(ss, cell, ','))
      throw Error("sim", path + ":" + std::to_string(lineno) + ": missing pkt_len");
    p.pkt_len = std::stoi(cell);
    if (std::getline(ss, cell, ',')) {
      for (size_t i = 0; i + 1 < cell.size(); i += 2)
        p.bytes.push_back(std::stoi(cell.substr(i, 2), nullptr, 16));
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline void save_packets_csv(const std::vector<PacketRecord>& packets,
                             const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("sim", "cannot write " + path);
  f << "flow_id,timestamp_us,pkt_len,bytes\n";
  static const char* hex = "0123456789abcdef";
  for (const auto& p : packets) {
    f << p.flow << "," << p.timestamp_us << "," << p.pkt_len << ",";
    for (int b : p.bytes) f << hex[(b >> 4) & 0xf] << hex[b & 0xf];
    f << "\n";
  }
}

inline void save_decisions_jsonl(const std::vector<Decision>& ds,
                                 const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("sim", "cannot write " + path);
  for (const auto& d : ds) {
    nlohmann::json j = {{"flow_id", d.flow},
                        {"packet_index", d.packet_index},
                        {"decision", d.decision},
                        {"raw_output", d.raw_output},
                        {"lookups", d.lookups}};
    f << j.dump() << "\n";
  }
}

}  // namespace matpipe
