#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "matpipe/common.hpp"

namespace matpipe {

// Tabular dataset: one row per sample, optional integer labels taken from a
// final `label` column.
struct Dataset {
  std::vector<std::string> feature_names;
  Mat rows;
  std::vector<int> labels;
  bool has_labels = false;

  size_t size() const { return rows.size(); }
  int dim() const { return rows.empty() ? 0 : int(rows[0].size()); }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  return out;
}

inline Dataset load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("dataset", "cannot open " + path);
  Dataset d;
  std::string line;
  if (!std::getline(f, line)) throw Error("dataset", "empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_csv_line(line);
  d.has_labels = !header.empty() && header.back() == "label";
  size_t ncols = header.size();
  size_t nfeat = ncols - (d.has_labels ? 1 : 0);
  d.feature_names.assign(header.begin(), header.begin() + nfeat);
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != ncols)
      throw Error("dataset", path + ":" + std::to_string(lineno) +
                                 ": wrong column count");
    Vec row(nfeat);
    for (size_t i = 0; i < nfeat; ++i) row[i] = std::stod(cells[i]);
    d.rows.push_back(std::move(row));
    if (d.has_labels) d.labels.push_back(std::stoi(cells[nfeat]));
  }
  return d;
}

inline void save_csv(const Dataset& d, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("dataset", "cannot write " + path);
  for (size_t i = 0; i < d.feature_names.size(); ++i)
    f << (i ? "," : "") << d.feature_names[i];
  if (d.has_labels) f << (d.feature_names.empty() ? "" : ",") << "label";
  f << "\n";
  for (size_t r = 0; r < d.rows.size(); ++r) {
    for (size_t i = 0; i < d.rows[r].size(); ++i) {
      if (i) f << ",";
      f << d.rows[r][i];
    }
    if (d.has_labels) f << "," << d.labels[r];
    f << "\n";
  }
}

}  // namespace matpipe
