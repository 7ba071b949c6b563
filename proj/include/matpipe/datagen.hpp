#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "matpipe/dataset.hpp"
#include "matpipe/sim.hpp"

namespace matpipe {

// Gaussian blob classification task: one isotropic cluster per class with
// means `separation` apart along random directions.
inline Dataset gen_blobs(int samples, int dim, int classes, double separation,
                         uint64_t seed) {
  Rng rng(seed);
  Mat means(classes, Vec(dim));
  for (auto& m : means) {
    double norm = 0;
    for (auto& v : m) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : m) v = v / norm * separation / 2.0;
  }
  Dataset d;
  d.has_labels = true;
  for (int i = 0; i < dim; ++i) d.feature_names.push_back("f" + std::to_string(i));
  for (int s = 0; s < samples; ++s) {
    int c = int(rng.integer(0, classes - 1));
    Vec row(dim);
    for (int i = 0; i < dim; ++i) row[i] = means[c][i] + rng.normal();
    d.rows.push_back(std::move(row));
    d.labels.push_back(c);
  }
  return d;
}

inline void split_dataset(const Dataset& d, double train_frac, double valid_frac,
                          uint64_t seed, Dataset* train, Dataset* valid,
                          Dataset* test) {
  Rng rng(seed);
  std::vector<size_t> order(d.rows.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());
  size_t n_train = size_t(train_frac * double(order.size()));
  size_t n_valid = size_t(valid_frac * double(order.size()));
  auto take = [&](size_t from, size_t to, Dataset* out) {
    out->feature_names = d.feature_names;
    out->has_labels = d.has_labels;
    for (size_t i = from; i < to && i < order.size(); ++i) {
      out->rows.push_back(d.rows[order[i]]);
      if (d.has_labels) out->labels.push_back(d.labels[order[i]]);
    }
  };
  take(0, n_train, train);
  take(n_train, n_train + n_valid, valid);
  take(n_train + n_valid, order.size(), test);
}

// Per-class traffic profile for synthetic flows: packet lengths and
// inter-packet delays follow an AR(1) process around class-specific means.
struct FlowProfile {
  double len_mean = 600, len_jitter = 120;
  double ipd_mean = 4000, ipd_jitter = 1500;  // microseconds
  double byte_mean = 90, byte_jitter = 40;    // raw payload byte values
};

struct FlowSet {
  std::vector<PacketRecord> packets;
  std::map<std::string, int> flow_labels;
};

inline FlowSet gen_flows(const std::vector<FlowProfile>& profiles, int flows_per_class,
                         int packets_per_flow, int bytes_per_packet, uint64_t seed) {
  Rng rng(seed);
  FlowSet out;
  for (size_t c = 0; c < profiles.size(); ++c) {
    const auto& pr = profiles[c];
    for (int f = 0; f < flows_per_class; ++f) {
      std::string flow = "c" + std::to_string(c) + "_f" + std::to_string(f);
      out.flow_labels[flow] = int(c);
      int64_t ts = rng.integer(0, 1000000);
      double len = pr.len_mean, ipd = pr.ipd_mean;
      for (int p = 0; p < packets_per_flow; ++p) {
        len = pr.len_mean + 0.8 * (len - pr.len_mean) + rng.normal(0, pr.len_jitter);
        ipd = pr.ipd_mean + 0.6 * (ipd - pr.ipd_mean) + rng.normal(0, pr.ipd_jitter);
        PacketRecord rec;
        rec.flow = flow;
        rec.pkt_len = int(std::clamp(len, 40.0, 1500.0));
        ts += int64_t(std::clamp(ipd, 10.0, 60000.0));
        rec.timestamp_us = ts;
        for (int b = 0; b < bytes_per_packet; ++b)
          rec.bytes.push_back(
              int(std::clamp(pr.byte_mean + rng.normal(0, pr.byte_jitter), 0.0, 255.0)));
        out.packets.push_back(std::move(rec));
      }
    }
  }
  // interleave flows by timestamp for realism; per-flow order is preserved
  std::stable_sort(out.packets.begin(), out.packets.end(),
                   [](const PacketRecord& a, const PacketRecord& b) {
                     return a.timestamp_us < b.timestamp_us;
                   });
  return out;
}

// Benign profile plus injected anomalous flows (label 1) with a strongly
// shifted profile, for unsupervised detection experiments.
inline FlowSet gen_anomaly_flows(int benign_flows, int anomaly_flows,
                                 int packets_per_flow, uint64_t seed) {
  FlowProfile benign;
  benign.len_mean = 500;
  benign.len_jitter = 80;
  benign.ipd_mean = 6000;
  benign.ipd_jitter = 1200;
  FlowProfile attack;  // flood-like: large packets, tiny delays
  attack.len_mean = 1300;
  attack.len_jitter = 150;
  attack.ipd_mean = 200;
  attack.ipd_jitter = 120;

  auto benign_set = gen_flows({benign}, benign_flows, packets_per_flow, 0, seed);
  auto attack_set = gen_flows({attack}, anomaly_flows, packets_per_flow, 0, seed + 1);
  FlowSet out;
  for (auto& p : benign_set.packets) {
    p.flow = "benign_" + p.flow;
    out.packets.push_back(p);
  }
  for (auto& p : attack_set.packets) {
    p.flow = "attack_" + p.flow;
    out.packets.push_back(p);
  }
  for (auto& [f, l] : benign_set.flow_labels) out.flow_labels["benign_" + f] = 0;
  for (auto& [f, l] : attack_set.flow_labels) out.flow_labels["attack_" + f] = 1;
  std::stable_sort(out.packets.begin(), out.packets.end(),
                   [](const PacketRecord& a, const PacketRecord& b) {
                     return a.timestamp_us < b.timestamp_us;
                   });
  return out;
}

inline void save_flow_labels(const std::map<std::string, int>& labels,
                             const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("datagen", "cannot write " + path);
  f << "flow_id,label\n";
  for (const auto& [flow, l] : labels) f << flow << "," << l << "\n";
}

inline std::map<std::string, int> load_flow_labels(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("datagen", "cannot open " + path);
  std::map<std::string, int> out;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto comma = line.find(',');
    out[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
  }
  return out;
}

}  // namespace matpipe
