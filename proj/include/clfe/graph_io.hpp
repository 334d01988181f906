#pragma once

// Line-delimited graph files. One JSON object per line:
//   {"n":3,"edges":[[0,1],[1,2]],"node_feats":[[..],..],
//    "edge_feats":[[..],..],"node_labels":[..],"edge_labels":[..],
//    "graph_label":1,"graph_target":0.5}
// Undirected edges are listed once. Optional per-edge fields align with
// "edges". Floats are written with 17 significant digits.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "clfe/errors.hpp"
#include "clfe/graph.hpp"

namespace clfe {

namespace detail {

inline void write_double(std::ostream& os, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  os << buf;
}

inline void write_rows(std::ostream& os, const Matrix& m, const std::vector<std::size_t>* row_order = nullptr) {
  os << '[';
  const std::size_t R = row_order ? row_order->size() : m.rows;
  for (std::size_t i = 0; i < R; ++i) {
    const std::size_t r = row_order ? (*row_order)[i] : i;
    os << (i ? ",[" : "[");
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (j) os << ',';
      write_double(os, m(r, j));
    }
    os << ']';
  }
  os << ']';
}

inline Matrix read_rows(const nlohmann::json& j, const char* field, std::size_t line) {
  if (!j.is_array()) throw ParseError("line " + std::to_string(line) + ": '" + field + "' must be an array of rows");
  Matrix m;
  m.rows = j.size();
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& row = j[i];
    if (!row.is_array()) throw ParseError("line " + std::to_string(line) + ": '" + field + "' row " + std::to_string(i) + " is not an array");
    if (i == 0) m.cols = row.size();
    if (row.size() != m.cols)
      throw ParseError("line " + std::to_string(line) + ": schema error, '" + field + "' rows have inconsistent widths");
    for (const auto& v : row) {
      if (!v.is_number()) throw ParseError("line " + std::to_string(line) + ": non-numeric entry in '" + field + "'");
      m.data.push_back(v.get<double>());
    }
  }
  return m;
}

}  // namespace detail

/// One graph as a single-line record.
inline std::string graph_to_line(const Graph& g) {
  std::ostringstream os;
  const auto listed = g.listed_edges();
  std::vector<std::size_t> csr_index;
  for (const auto& [e, k] : listed) csr_index.push_back(k);
  os << "{\"n\":" << g.n;
  if (!g.undirected) os << ",\"directed\":true";
  os << ",\"edges\":[";
  for (std::size_t i = 0; i < listed.size(); ++i) os << (i ? ",[" : "[") << listed[i].first.first << ',' << listed[i].first.second << ']';
  os << "],\"node_feats\":";
  detail::write_rows(os, g.node_feats);
  if (!g.edge_feats.empty()) {
    os << ",\"edge_feats\":";
    detail::write_rows(os, g.edge_feats, &csr_index);
  }
  if (!g.node_labels.empty()) {
    os << ",\"node_labels\":[";
    for (std::size_t i = 0; i < g.node_labels.size(); ++i) os << (i ? "," : "") << g.node_labels[i];
    os << ']';
  }
  if (!g.edge_labels.empty()) {
    os << ",\"edge_labels\":[";
    for (std::size_t i = 0; i < csr_index.size(); ++i) os << (i ? "," : "") << g.edge_labels[csr_index[i]];
    os << ']';
  }
  if (g.graph_label) os << ",\"graph_label\":" << *g.graph_label;
  if (g.graph_target) {
    os << ",\"graph_target\":";
    detail::write_double(os, *g.graph_target);
  }
  os << '}';
  return os.str();
}

/// Parses one record; `line` is used in error messages.
inline Graph graph_from_line(const std::string& text, std::size_t line) {
  const std::string at = "line " + std::to_string(line) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(at + "malformed record (" + e.what() + ")");
  }
  if (!j.is_object()) throw ParseError(at + "record is not an object");
  static const std::vector<std::string> known{"n", "directed", "edges", "node_feats", "edge_feats",
                                              "node_labels", "edge_labels", "graph_label", "graph_target"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ParseError(at + "unknown field '" + key + "'");
  if (!j.contains("n") || !j["n"].is_number_unsigned()) throw ParseError(at + "missing or invalid 'n'");
  if (!j.contains("edges") || !j["edges"].is_array()) throw ParseError(at + "missing or invalid 'edges'");
  if (!j.contains("node_feats")) throw ParseError(at + "missing 'node_feats'");
  const std::size_t n = j["n"].get<std::size_t>();
  const bool directed = j.contains("directed") && j["directed"].get<bool>();
  EdgeList edges;
  for (const auto& e : j["edges"]) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number_unsigned() || !e[1].is_number_unsigned())
      throw ParseError(at + "edges must be [src,dst] pairs of non-negative integers");
    edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
  }
  Matrix nf = detail::read_rows(j["node_feats"], "node_feats", line);
  if (nf.rows != n) throw ParseError(at + "schema error, node_feats has " + std::to_string(nf.rows) + " rows for n=" + std::to_string(n));
  Matrix ef;
  if (j.contains("edge_feats")) {
    ef = detail::read_rows(j["edge_feats"], "edge_feats", line);
    if (ef.rows != edges.size()) throw ParseError(at + "schema error, edge_feats not aligned with edges");
  }
  auto read_ints = [&](const char* field) {
    std::vector<int> v;
    if (!j[field].is_array()) throw ParseError(at + "'" + field + "' must be an array");
    for (const auto& x : j[field]) {
      if (!x.is_number_integer()) throw ParseError(at + "non-integer entry in '" + field + "'");
      v.push_back(x.get<int>());
    }
    return v;
  };
  std::vector<int> el;
  if (j.contains("edge_labels")) {
    el = read_ints("edge_labels");
    if (el.size() != edges.size()) throw ParseError(at + "schema error, edge_labels not aligned with edges");
  }
  Graph g;
  try {
    g = Graph::from_edges(n, edges, !directed, std::move(nf), ef, el);
  } catch (const std::exception& e) {
    throw ParseError(at + e.what());
  }
  if (j.contains("node_labels")) {
    g.node_labels = read_ints("node_labels");
    if (g.node_labels.size() != n) throw ParseError(at + "schema error, node_labels length differs from n");
  }
  if (j.contains("graph_label")) {
    if (!j["graph_label"].is_number_integer()) throw ParseError(at + "graph_label must be an integer");
    g.graph_label = j["graph_label"].get<int>();
  }
  if (j.contains("graph_target")) {
    if (!j["graph_target"].is_number()) throw ParseError(at + "graph_target must be a number");
    g.graph_target = j["graph_target"].get<double>();
  }
  return g;
}

inline void save_graphs(std::span<const Graph> graphs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& g : graphs) out << graph_to_line(g) << '\n';
  if (!out) throw IoError("write to " + path.string() + " failed");
}

/// Reads every record. All graphs must share node (and edge) feature widths.
inline std::vector<Graph> load_graphs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Graph> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos) continue;
    Graph g = graph_from_line(text, line);
    if (!out.empty()) {
      const Graph& f = out.front();
      if (g.node_feats.cols != f.node_feats.cols || g.edge_feats.cols != f.edge_feats.cols)
        throw ParseError("line " + std::to_string(line) + ": schema error, feature width differs from the first record");
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace clfe
