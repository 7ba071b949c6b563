#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "matpipe/common.hpp"

namespace matpipe {

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  int support = 0;
};

struct ClassificationMetrics {
  std::vector<ClassMetrics> per_class;
  double macro_f1 = 0;
  double macro_precision = 0;
  double macro_recall = 0;
  double accuracy = 0;
};

inline ClassificationMetrics classification_metrics(const std::vector<int>& truth,
                                                    const std::vector<int>& pred,
                                                    int classes) {
  if (truth.size() != pred.size() || truth.empty())
    throw Error("metrics", "prediction/label size mismatch or empty");
  std::vector<int> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  int correct = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == pred[i]) {
      ++correct;
      ++tp[truth[i]];
    } else {
      ++fp[pred[i]];
      ++fn[truth[i]];
    }
  }
  ClassificationMetrics m;
  m.per_class.resize(classes);
  for (int c = 0; c < classes; ++c) {
    auto& cm = m.per_class[c];
    cm.support = tp[c] + fn[c];
    cm.precision = tp[c] + fp[c] ? double(tp[c]) / (tp[c] + fp[c]) : 0.0;
    cm.recall = tp[c] + fn[c] ? double(tp[c]) / (tp[c] + fn[c]) : 0.0;
    cm.f1 = cm.precision + cm.recall > 0
                ? 2 * cm.precision * cm.recall / (cm.precision + cm.recall)
                : 0.0;
    m.macro_f1 += cm.f1;
    m.macro_precision += cm.precision;
    m.macro_recall += cm.recall;
  }
  m.macro_f1 /= classes;
  m.macro_precision /= classes;
  m.macro_recall /= classes;
  m.accuracy = double(correct) / truth.size();
  return m;
}

// Rank-based AUROC with midrank tie handling.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw Error("metrics", "score/label size mismatch or empty");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mid = (double(i) + double(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (size_t k = 0; k < labels.size(); ++k)
    if (labels[k]) {
      pos += 1;
      rank_sum += rank[k];
    }
  double neg = double(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw Error("metrics", "auroc needs both classes");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

inline double agreement_rate(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty())
    throw Error("metrics", "agreement size mismatch or empty");
  size_t same = 0;
  for (size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return double(same) / a.size();
}

inline nlohmann::json metrics_to_json(const ClassificationMetrics& m) {
  nlohmann::json j;
  j["macro_f1"] = m.macro_f1;
  j["macro_precision"] = m.macro_precision;
  j["macro_recall"] = m.macro_recall;
  j["accuracy"] = m.accuracy;
  j["per_class"] = nlohmann::json::array();
  for (const auto& c : m.per_class)
    j["per_class"].push_back({{"precision", c.precision},
                              {"recall", c.recall},
                              {"f1", c.f1},
                              {"support", c.support}});
  return j;
}

}  // namespace matpipe
