#pragma once

// Config-driven A/B runner: builds one dataset, trains every backbone and
// depth with and without CLFE on identical seeds, and writes comparison
// tables as CSV, markdown and a JSON manifest.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "clfe/generators.hpp"
#include "clfe/graph_io.hpp"
#include "clfe/training.hpp"

namespace clfe {

inline constexpr const char* kVersion = "1.0.0";

enum class Arm { baseline, clfe };

inline const char* to_string(Arm a) { return a == Arm::clfe ? "clfe" : "baseline"; }

inline Arm parse_arm(std::string_view s) {
  if (s == "baseline") return Arm::baseline;
  if (s == "clfe") return Arm::clfe;
  throw std::invalid_argument("unknown arm '" + std::string(s) + "' (expected baseline or clfe)");
}

// ---------------------------------------------------------------------------
// Text helpers

namespace detail {

/// Shortest decimal that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& xs, char sep, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += f(xs[i]);
  }
  return out;
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument("expected a number, got '" + std::string(s) + "'");
  return v;
}

inline std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument("expected a non-negative integer, got '" + std::string(s) + "'");
  return v;
}

inline std::size_t parse_size(std::string_view s) { return static_cast<std::size_t>(parse_u64(s)); }

inline bool parse_bool(std::string_view s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("expected true or false, got '" + std::string(s) + "'");
}

template <class T>
std::vector<T> parse_list(std::string_view s, T (*item)(std::string_view)) {
  std::vector<T> out;
  if (trim(s).empty()) return out;
  for (const auto& part : split(s, ',')) out.push_back(item(part));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  Task task = Task::node_cls;
  /// sbm | tsp | reg | file
  std::string dataset;
  std::string dataset_path;
  std::vector<Backbone> backbones;
  std::vector<std::size_t> layers{4};
  std::size_t hidden = 16;
  std::size_t heads = 4;
  std::size_t kernels = 3;
  Activation activation = Activation::relu;
  Norm norm = Norm::batch;
  bool skip = true;
  std::vector<Arm> arms{Arm::baseline, Arm::clfe};
  /// CLFE arm keeps W = 0 and b = 0 frozen; its results must equal the baseline.
  bool clfe_zero = false;
  std::vector<std::uint64_t> seeds{std::begin(kDefaultSeeds), std::end(kDefaultSeeds)};
  std::size_t workers = 1;
  TrainConfig train;
  std::string out = "results";

  std::uint64_t data_seed = 1;
  /// 0 selects the dataset default (sbm 60, tsp 100, reg 200, file: all).
  std::size_t graphs = 0;
  double train_frac = 0.6;
  double val_frac = 0.2;
  SbmParams sbm;
  std::size_t tsp_nodes = 10;
  std::size_t tsp_k = 4;
  TspLabeling tsp_labeling = TspLabeling::exact;
  RegressionParams reg;
  /// Quantile bins of the regression target when task = graph_cls.
  std::size_t classes = 2;

  bool metric_given = false;
};

namespace detail {

struct ConfigField {
  const char* key;
  bool required;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<ConfigField>& config_fields() {
  using C = ExperimentConfig;
  auto size_field = [](const char* key, std::size_t C::*m) {
    return ConfigField{key, false, [m](C& c, std::string_view v) { c.*m = parse_size(v); },
                       [m](const C& c) { return std::to_string(c.*m); }};
  };
  auto double_field = [](const char* key, double C::*m) {
    return ConfigField{key, false, [m](C& c, std::string_view v) { c.*m = parse_double(v); },
                       [m](const C& c) { return format_double(c.*m); }};
  };
  auto text = [](const char* key, bool required, std::string C::*m) {
    return ConfigField{key, required, [m](C& c, std::string_view v) { c.*m = std::string(v); },
                       [m](const C& c) { return c.*m; }};
  };
  static const std::vector<ConfigField> fields = {
      {"task", true, [](C& c, std::string_view v) { c.task = parse_task(v); }, [](const C& c) { return std::string(to_string(c.task)); }},
      text("dataset", true, &C::dataset),
      text("dataset_path", false, &C::dataset_path),
      {"backbone", true, [](C& c, std::string_view v) { c.backbones = parse_list<Backbone>(v, parse_backbone); },
       [](const C& c) { return join<Backbone>(c.backbones, ',', [](const Backbone& b) { return std::string(to_string(b)); }); }},
      {"layers", false, [](C& c, std::string_view v) { c.layers = parse_list<std::size_t>(v, parse_size); },
       [](const C& c) { return join<std::size_t>(c.layers, ',', [](const std::size_t& l) { return std::to_string(l); }); }},
      size_field("hidden", &C::hidden),
      size_field("heads", &C::heads),
      size_field("kernels", &C::kernels),
      {"activation", false, [](C& c, std::string_view v) { c.activation = parse_activation(v); },
       [](const C& c) { return std::string(to_string(c.activation)); }},
      {"norm", false, [](C& c, std::string_view v) { c.norm = parse_norm(v); }, [](const C& c) { return std::string(to_string(c.norm)); }},
      {"skip", false, [](C& c, std::string_view v) { c.skip = parse_bool(v); }, [](const C& c) { return std::string(c.skip ? "true" : "false"); }},
      {"arms", false, [](C& c, std::string_view v) { c.arms = parse_list<Arm>(v, parse_arm); },
       [](const C& c) { return join<Arm>(c.arms, ',', [](const Arm& a) { return std::string(to_string(a)); }); }},
      {"clfe_zero", false, [](C& c, std::string_view v) { c.clfe_zero = parse_bool(v); },
       [](const C& c) { return std::string(c.clfe_zero ? "true" : "false"); }},
      {"seeds", false, [](C& c, std::string_view v) { c.seeds = parse_list<std::uint64_t>(v, parse_u64); },
       [](const C& c) { return join<std::uint64_t>(c.seeds, ',', [](const std::uint64_t& s) { return std::to_string(s); }); }},
      size_field("workers", &C::workers),
      {"lr", false, [](C& c, std::string_view v) { c.train.lr = parse_double(v); }, [](const C& c) { return format_double(c.train.lr); }},
      {"decay", false, [](C& c, std::string_view v) { c.train.decay = parse_double(v); }, [](const C& c) { return format_double(c.train.decay); }},
      {"patience", false, [](C& c, std::string_view v) { c.train.patience = parse_size(v); },
       [](const C& c) { return std::to_string(c.train.patience); }},
      {"min_lr", false, [](C& c, std::string_view v) { c.train.min_lr = parse_double(v); }, [](const C& c) { return format_double(c.train.min_lr); }},
      {"max_epochs", false, [](C& c, std::string_view v) { c.train.max_epochs = parse_size(v); },
       [](const C& c) { return std::to_string(c.train.max_epochs); }},
      {"batch_size", false, [](C& c, std::string_view v) { c.train.batch_size = parse_size(v); },
       [](const C& c) { return std::to_string(c.train.batch_size); }},
      {"metric", false,
       [](C& c, std::string_view v) {
         c.train.metric = parse_metric(v);
         c.metric_given = true;
       },
       [](const C& c) { return std::string(to_string(c.train.metric)); }},
      {"hits_k", false, [](C& c, std::string_view v) { c.train.hits_k = parse_size(v); }, [](const C& c) { return std::to_string(c.train.hits_k); }},
      {"class_weighted", false, [](C& c, std::string_view v) { c.train.class_weighted = parse_bool(v); },
       [](const C& c) { return std::string(c.train.class_weighted ? "true" : "false"); }},
      text("out", false, &C::out),
      {"data_seed", false, [](C& c, std::string_view v) { c.data_seed = parse_u64(v); }, [](const C& c) { return std::to_string(c.data_seed); }},
      size_field("graphs", &C::graphs),
      double_field("train_frac", &C::train_frac),
      double_field("val_frac", &C::val_frac),
      {"sbm_blocks", false, [](C& c, std::string_view v) { c.sbm.blocks = parse_list<std::size_t>(v, parse_size); },
       [](const C& c) { return join<std::size_t>(c.sbm.blocks, ',', [](const std::size_t& b) { return std::to_string(b); }); }},
      {"sbm_p_intra", false, [](C& c, std::string_view v) { c.sbm.p_intra = parse_double(v); }, [](const C& c) { return format_double(c.sbm.p_intra); }},
      {"sbm_p_inter", false, [](C& c, std::string_view v) { c.sbm.p_inter = parse_double(v); }, [](const C& c) { return format_double(c.sbm.p_inter); }},
      {"sbm_noise", false, [](C& c, std::string_view v) { c.sbm.noise = parse_double(v); }, [](const C& c) { return format_double(c.sbm.noise); }},
      {"sbm_features", false,
       [](C& c, std::string_view v) {
         if (v == "noisy_onehot") c.sbm.features = SbmFeatures::noisy_onehot;
         else if (v == "revealed_seeds") c.sbm.features = SbmFeatures::revealed_seeds;
         else throw std::invalid_argument("expected noisy_onehot or revealed_seeds, got '" + std::string(v) + "'");
       },
       [](const C& c) { return std::string(c.sbm.features == SbmFeatures::noisy_onehot ? "noisy_onehot" : "revealed_seeds"); }},
      size_field("tsp_nodes", &C::tsp_nodes),
      size_field("tsp_k", &C::tsp_k),
      {"tsp_labeling", false,
       [](C& c, std::string_view v) {
         if (v == "exact") c.tsp_labeling = TspLabeling::exact;
         else if (v == "heuristic") c.tsp_labeling = TspLabeling::heuristic;
         else throw std::invalid_argument("expected exact or heuristic, got '" + std::string(v) + "'");
       },
       [](const C& c) { return std::string(c.tsp_labeling == TspLabeling::exact ? "exact" : "heuristic"); }},
      {"reg_min_nodes", false, [](C& c, std::string_view v) { c.reg.min_nodes = parse_size(v); },
       [](const C& c) { return std::to_string(c.reg.min_nodes); }},
      {"reg_max_nodes", false, [](C& c, std::string_view v) { c.reg.max_nodes = parse_size(v); },
       [](const C& c) { return std::to_string(c.reg.max_nodes); }},
      {"reg_edge_prob", false, [](C& c, std::string_view v) { c.reg.edge_prob = parse_double(v); },
       [](const C& c) { return format_double(c.reg.edge_prob); }},
      {"reg_categories", false, [](C& c, std::string_view v) { c.reg.categories = parse_size(v); },
       [](const C& c) { return std::to_string(c.reg.categories); }},
      size_field("classes", &C::classes),
  };
  return fields;
}

inline std::size_t default_graph_count(const std::string& dataset) {
  if (dataset == "sbm") return 60;
  if (dataset == "tsp") return 100;
  if (dataset == "reg") return 200;
  return 0;
}

[[noreturn]] inline void bad_key(const std::string& key, const std::string& msg) {
  throw ParseError("config: key '" + key + "': " + msg);
}

/// Fills dataset-dependent defaults and rejects inconsistent settings.
inline void finalize(ExperimentConfig& c) {
  if (!c.metric_given) c.train.metric = default_metric(c.task);
  if (c.dataset != "sbm" && c.dataset != "tsp" && c.dataset != "reg" && c.dataset != "file")
    bad_key("dataset", "expected sbm, tsp, reg or file, got '" + c.dataset + "'");
  if (c.dataset == "file" && c.dataset_path.empty()) bad_key("dataset_path", "required when dataset = file");
  if (c.dataset == "sbm" && c.task != Task::node_cls) bad_key("task", "the sbm dataset supports node_cls only");
  if (c.dataset == "tsp" && c.task != Task::edge_cls) bad_key("task", "the tsp dataset supports edge_cls only");
  if (c.dataset == "reg" && c.task != Task::graph_reg && c.task != Task::graph_cls)
    bad_key("task", "the reg dataset supports graph_reg and graph_cls only");
  if (c.backbones.empty()) bad_key("backbone", "at least one backbone is required");
  if (c.layers.empty()) bad_key("layers", "at least one depth is required");
  for (auto l : c.layers)
    if (l == 0) bad_key("layers", "at least one layer is required");
  if (c.hidden == 0) bad_key("hidden", "must be positive");
  if (std::find(c.backbones.begin(), c.backbones.end(), Backbone::gat) != c.backbones.end() && (c.heads == 0 || c.hidden % c.heads != 0))
    bad_key("heads", std::to_string(c.heads) + " heads do not divide hidden = " + std::to_string(c.hidden));
  if (c.kernels == 0) bad_key("kernels", "must be positive");
  if (c.arms.empty()) bad_key("arms", "at least one arm is required");
  if (c.arms.size() == 2 && c.arms[0] == c.arms[1]) bad_key("arms", "duplicate arm");
  if (c.seeds.empty()) bad_key("seeds", "at least one seed is required");
  if (c.workers == 0) bad_key("workers", "must be positive");
  if (!(c.train.lr >= 0.0)) bad_key("lr", "must be non-negative");
  if (!(c.train.decay > 0.0 && c.train.decay < 1.0)) bad_key("decay", "must lie in (0, 1)");
  if (c.train.patience == 0) bad_key("patience", "must be positive");
  if (!(c.train.min_lr >= 0.0)) bad_key("min_lr", "must be non-negative");
  if (c.train.max_epochs == 0) bad_key("max_epochs", "must be positive");
  if (c.train.batch_size == 0) bad_key("batch_size", "must be positive");
  if ((c.train.metric == MetricKind::mae) != (c.task == Task::graph_reg))
    bad_key("metric", std::string(to_string(c.train.metric)) + " does not fit task " + to_string(c.task));
  if (c.train.metric == MetricKind::hits_at_k && c.task != Task::edge_cls) bad_key("metric", "hits_at_k needs edge_cls");
  if (c.train.metric == MetricKind::f1_positive && c.task != Task::edge_cls) bad_key("metric", "f1_positive needs edge_cls");
  if (c.train.hits_k == 0) bad_key("hits_k", "must be positive");
  if (c.graphs == 0) c.graphs = default_graph_count(c.dataset);
  if (!(c.train_frac > 0.0 && c.val_frac > 0.0 && c.train_frac + c.val_frac < 1.0))
    bad_key("train_frac", "train_frac and val_frac must be positive with a sum below 1");
  if (c.task == Task::graph_cls && c.classes < 2) bad_key("classes", "need at least 2 classes");
  if (c.dataset == "sbm") {
    if (c.sbm.blocks.empty()) bad_key("sbm_blocks", "need at least one block");
    for (double q : {c.sbm.p_intra, c.sbm.p_inter, c.sbm.noise})
      if (!(q >= 0.0 && q <= 1.0)) bad_key("sbm_p_intra", "probabilities must lie in [0, 1]");
  }
  if (c.dataset == "tsp") {
    if (c.tsp_nodes < 3) bad_key("tsp_nodes", "need at least 3 nodes");
    if (c.tsp_k == 0 || c.tsp_k >= c.tsp_nodes) bad_key("tsp_k", "must lie in [1, tsp_nodes)");
    if (c.tsp_labeling == TspLabeling::exact && c.tsp_nodes > kMaxExactTspNodes)
      bad_key("tsp_labeling", "exact labels support at most " + std::to_string(kMaxExactTspNodes) + " nodes");
  }
  if (c.dataset == "reg" && (c.reg.min_nodes < 2 || c.reg.max_nodes < c.reg.min_nodes))
    bad_key("reg_min_nodes", "need 2 <= reg_min_nodes <= reg_max_nodes");
}

}  // namespace detail

using ConfigOverrides = std::vector<std::pair<std::string, std::string>>;

/// Parses flat `key = value` text (`#` starts a comment), applies overrides,
/// fills defaults and validates. Errors name the offending key.
inline ExperimentConfig parse_config_text(std::string_view text, const ConfigOverrides& overrides = {}) {
  const auto& fields = detail::config_fields();
  auto find = [&](const std::string& key) -> const detail::ConfigField* {
    for (const auto& f : fields)
      if (key == f.key) return &f;
    return nullptr;
  };
  ExperimentConfig c;
  std::map<std::string, std::size_t> seen;
  auto apply = [&](const std::string& key, const std::string& value, const std::string& where) {
    const auto* f = find(key);
    if (!f) throw ParseError(where + "unknown key '" + key + "'");
    try {
      f->set(c, value);
    } catch (const std::invalid_argument& e) {
      throw ParseError(where + "key '" + key + "': " + e.what());
    }
    seen[key] = 1;
  };

  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  std::map<std::string, std::size_t> first_line;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError(where + "expected key = value, got '" + body + "'");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ParseError(where + "missing key before '='");
    if (auto it = first_line.find(key); it != first_line.end())
      throw ParseError(where + "key '" + key + "' repeats line " + std::to_string(it->second));
    first_line[key] = line_no;
    apply(key, value, where);
  }
  for (const auto& [key, value] : overrides) apply(key, value, "override: ");
  for (const auto& f : fields)
    if (f.required && !seen.count(f.key)) throw ParseError(std::string("config: missing required key '") + f.key + "'");
  detail::finalize(c);
  return c;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), overrides);
}

/// Every key with its resolved value, in a fixed order.
inline std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& c) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : detail::config_fields()) out.emplace_back(f.key, f.get(c));
  return out;
}

/// Resolved configuration in the input format; parsing it yields the same config.
inline std::string echo_config(const ExperimentConfig& c) {
  std::string s = "# resolved configuration, clfe " + std::string(kVersion) + "\n";
  for (const auto& [k, v] : config_entries(c)) s += k + " = " + v + "\n";
  return s;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write to " + path.string() + " failed");
}

}  // namespace detail

inline void write_config_echo(const ExperimentConfig& c, const std::filesystem::path& dir) {
  detail::write_text(dir / "config.resolved", echo_config(c));
}

// ---------------------------------------------------------------------------
// Datasets

struct ExperimentData {
  Dataset data;
  std::size_t in_features = 0;
  /// Edge feature width handed to GatedGCN (0: constant edge input).
  std::size_t edge_in_features = 0;
  std::size_t num_classes = 1;
};

namespace detail {

/// Label = number of quantile cut points at or below the target.
inline void bin_targets(std::vector<Graph>& graphs, std::size_t classes) {
  std::vector<double> sorted;
  for (const auto& g : graphs) {
    if (!g.graph_target) throw ContractError("graph_cls: every graph needs a regression target to bin");
    sorted.push_back(*g.graph_target);
  }
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> cuts;
  for (std::size_t j = 1; j < classes; ++j) cuts.push_back(sorted[j * sorted.size() / classes]);
  for (auto& g : graphs) {
    const auto label = std::upper_bound(cuts.begin(), cuts.end(), *g.graph_target) - cuts.begin();
    g.graph_label = static_cast<int>(label);
    g.graph_target.reset();
  }
}

inline std::size_t count_classes(Task task, const std::vector<Graph>& graphs) {
  int hi = -1;
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    const auto& g = graphs[i];
    switch (task) {
      case Task::node_cls:
        if (g.node_labels.size() != g.n) throw ContractError("graph " + std::to_string(i) + " lacks node labels");
        for (int l : g.node_labels) hi = std::max(hi, l);
        break;
      case Task::edge_cls:
        if (g.edge_labels.size() != g.num_edges()) throw ContractError("graph " + std::to_string(i) + " lacks edge labels");
        for (int l : g.edge_labels) hi = std::max(hi, l);
        break;
      case Task::graph_cls:
        if (!g.graph_label) throw ContractError("graph " + std::to_string(i) + " lacks a graph label");
        hi = std::max(hi, *g.graph_label);
        break;
      case Task::graph_reg:
        if (!g.graph_target) throw ContractError("graph " + std::to_string(i) + " lacks a regression target");
        return 1;
    }
  }
  if (task == Task::edge_cls) hi = std::max(hi, 1);
  return static_cast<std::size_t>(std::max(hi + 1, 2));
}

}  // namespace detail

/// Generates (or loads) the graphs once and splits them at random by data_seed.
inline ExperimentData build_dataset(const ExperimentConfig& c) {
  std::vector<Graph> graphs;
  if (c.dataset == "sbm") {
    for (std::size_t i = 0; i < c.graphs; ++i) graphs.push_back(gen_sbm(c.sbm, Rng::mix(c.data_seed, i)));
  } else if (c.dataset == "tsp") {
    for (std::size_t i = 0; i < c.graphs; ++i) graphs.push_back(gen_tsp(c.tsp_nodes, c.tsp_k, Rng::mix(c.data_seed, i), c.tsp_labeling));
  } else if (c.dataset == "reg") {
    graphs = gen_regression(c.graphs, c.reg, c.data_seed);
    if (c.task == Task::graph_cls) detail::bin_targets(graphs, c.classes);
  } else {
    graphs = load_graphs(c.dataset_path);
    if (c.graphs && c.graphs < graphs.size()) graphs.resize(c.graphs);
  }
  if (graphs.empty()) throw ContractError("dataset has no graphs");

  ExperimentData d;
  d.num_classes = detail::count_classes(c.task, graphs);
  d.in_features = graphs.front().node_feats.cols;
  for (const auto& g : graphs)
    if (g.num_edges() > 0) {
      d.edge_in_features = g.edge_feats.rows == g.num_edges() ? g.edge_feats.cols : 0;
      break;
    }

  const std::size_t G = graphs.size();
  const auto n_train = static_cast<std::size_t>(std::llround(c.train_frac * static_cast<double>(G)));
  const auto n_val = static_cast<std::size_t>(std::llround(c.val_frac * static_cast<double>(G)));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= G)
    throw ContractError("dataset of " + std::to_string(G) + " graphs is too small for the requested split");
  std::vector<std::size_t> order(G);
  for (std::size_t i = 0; i < G; ++i) order[i] = i;
  Rng split_rng(Rng::mix(c.data_seed, 0xffffffffULL));
  split_rng.shuffle(order);
  for (std::size_t i = 0; i < G; ++i) {
    auto& dst = i < n_train ? d.data.train : i < n_train + n_val ? d.data.val : d.data.test;
    dst.push_back(std::move(graphs[order[i]]));
  }
  return d;
}

inline ModelSpec model_spec(const ExperimentConfig& c, const ExperimentData& d, Backbone b, std::size_t depth, Arm arm) {
  ModelSpec s;
  s.task = c.task;
  s.layer.backbone = b;
  s.layer.width = c.hidden;
  s.layer.clfe = arm == Arm::clfe;
  s.layer.skip = c.skip;
  s.layer.activation = c.activation;
  s.layer.norm = c.norm;
  s.layer.heads = c.heads;
  s.layer.kernels = c.kernels;
  s.depth = depth;
  s.in_features = d.in_features;
  s.edge_in_features = d.edge_in_features;
  s.num_classes = d.num_classes;
  s.clfe_frozen_zero = c.clfe_zero && arm == Arm::clfe;
  return s;
}

// ---------------------------------------------------------------------------
// Comparison tables

struct ArmStats {
  /// Seeds attempted.
  std::size_t runs = 0;
  std::vector<std::uint64_t> failed;
  MeanStd test;
  MeanStd train;

  bool any_completed() const { return failed.size() < runs; }
  bool operator==(const ArmStats&) const = default;
};

struct ComparisonRow {
  Backbone backbone = Backbone::gcn;
  std::size_t layers = 0;
  std::optional<ArmStats> without;
  std::optional<ArmStats> with;

  /// with - without on the test metric, when both arms produced a result.
  std::optional<double> delta() const {
    if (!without || !with || !without->any_completed() || !with->any_completed()) return std::nullopt;
    return with->test.mean - without->test.mean;
  }
  bool operator==(const ComparisonRow&) const = default;
};

/// Outcome of one (backbone, depth, arm, seed) training run.
struct RunNote {
  Backbone backbone = Backbone::gcn;
  std::size_t layers = 0;
  Arm arm = Arm::baseline;
  std::uint64_t seed = 0;
  bool completed = false;
  std::size_t best_epoch = 0;
  std::size_t epochs = 0;
  std::size_t decays = 0;
  double seconds = 0.0;
  std::string error;
};

struct ComparisonTable {
  std::string title;
  Task task = Task::node_cls;
  MetricKind metric = MetricKind::accuracy_weighted;
  std::vector<std::uint64_t> seeds;
  std::vector<ComparisonRow> rows;
  /// Resolved configuration; not part of results.csv.
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<RunNote> runs;

  bool all_completed() const {
    for (const auto& r : rows)
      for (const auto* a : {&r.without, &r.with})
        if (*a && !(*a)->failed.empty()) return false;
    return true;
  }
};

/// Equality of everything results.csv records.
inline bool same_results(const ComparisonTable& a, const ComparisonTable& b) {
  return a.title == b.title && a.task == b.task && a.metric == b.metric && a.seeds == b.seeds && a.rows == b.rows;
}

namespace detail {

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

/// One RFC 4180 record; fields may be quoted with doubled inner quotes.
inline std::vector<std::string> csv_fields(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"' && cur.empty() && !was_quoted) {
      quoted = was_quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += ch;
    }
  }
  if (quoted) throw ParseError("results.csv line " + std::to_string(line_no) + ": unterminated quote");
  out.push_back(std::move(cur));
  return out;
}

inline const std::vector<std::string>& csv_header() {
  static const std::vector<std::string> h = {
      "table",          "task",           "metric",         "seeds",         "backbone",     "layers",          "without_runs",
      "without_failed", "without_test_mean", "without_test_std", "without_train_mean", "without_train_std", "with_runs", "with_failed",
      "with_test_mean", "with_test_std",  "with_train_mean", "with_train_std", "delta",        "direction"};
  return h;
}

inline std::string seeds_cell(const std::vector<std::uint64_t>& s) {
  return join<std::uint64_t>(s, ';', [](const std::uint64_t& v) { return std::to_string(v); });
}

inline std::vector<std::uint64_t> parse_seeds_cell(const std::string& s) {
  std::vector<std::uint64_t> out;
  if (s.empty()) return out;
  for (const auto& part : split(s, ';')) out.push_back(parse_u64(part));
  return out;
}

inline void arm_cells(std::vector<std::string>& row, const std::optional<ArmStats>& a) {
  if (!a) {
    row.insert(row.end(), 6, "");
    return;
  }
  row.push_back(std::to_string(a->runs));
  row.push_back(seeds_cell(a->failed));
  if (!a->any_completed()) {
    row.insert(row.end(), 4, "");
    return;
  }
  for (double v : {a->test.mean, a->test.std, a->train.mean, a->train.std}) row.push_back(format_double(v));
}

inline std::optional<ArmStats> parse_arm_cells(const std::vector<std::string>& f, std::size_t at) {
  if (f[at].empty()) return std::nullopt;
  ArmStats a;
  a.runs = parse_size(f[at]);
  a.failed = parse_seeds_cell(f[at + 1]);
  if (a.any_completed()) {
    a.test = {parse_double(f[at + 2]), parse_double(f[at + 3])};
    a.train = {parse_double(f[at + 4]), parse_double(f[at + 5])};
  }
  return a;
}

inline const char* direction(std::optional<double> delta) {
  if (!delta) return "";
  return *delta > 0 ? "up" : *delta < 0 ? "down" : "none";
}

}  // namespace detail

inline std::string results_csv(std::span<const ComparisonTable> tables) {
  std::string out;
  const auto& header = detail::csv_header();
  for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
  out += "\n";
  for (const auto& t : tables)
    for (const auto& r : t.rows) {
      std::vector<std::string> row{t.title, to_string(t.task), to_string(t.metric), detail::seeds_cell(t.seeds), to_string(r.backbone),
                                   std::to_string(r.layers)};
      detail::arm_cells(row, r.without);
      detail::arm_cells(row, r.with);
      const auto d = r.delta();
      row.push_back(d ? detail::format_double(*d) : "");
      row.push_back(detail::direction(d));
      for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + detail::csv_quote(row[i]);
      out += "\n";
    }
  return out;
}

/// Inverse of results_csv. Consecutive rows with the same title form a table;
/// configs and run notes are not recorded in the CSV.
inline std::vector<ComparisonTable> parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("results.csv: empty input");
  ++line_no;
  if (detail::csv_fields(line, line_no) != detail::csv_header()) throw ParseError("results.csv line 1: unexpected header");
  std::vector<ComparisonTable> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::csv_fields(line, line_no);
    if (f.size() != detail::csv_header().size())
      throw ParseError("results.csv line " + std::to_string(line_no) + ": expected " + std::to_string(detail::csv_header().size()) +
                       " fields, got " + std::to_string(f.size()));
    try {
      if (out.empty() || out.back().title != f[0]) {
        ComparisonTable t;
        t.title = f[0];
        t.task = parse_task(f[1]);
        t.metric = parse_metric(f[2]);
        t.seeds = detail::parse_seeds_cell(f[3]);
        out.push_back(std::move(t));
      }
      ComparisonRow r;
      r.backbone = parse_backbone(f[4]);
      r.layers = detail::parse_size(f[5]);
      r.without = detail::parse_arm_cells(f, 6);
      r.with = detail::parse_arm_cells(f, 12);
      out.back().rows.push_back(std::move(r));
    } catch (const std::invalid_argument& e) {
      throw ParseError("results.csv line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

namespace detail {

inline const char* display_name(Backbone b) {
  switch (b) {
    case Backbone::gcn: return "GCN";
    case Backbone::sage: return "GraphSage";
    case Backbone::gat: return "GAT";
    case Backbone::monet: return "MoNet";
    case Backbone::gatedgcn: return "GatedGCN";
  }
  return "?";
}

inline const char* metric_label(MetricKind m) {
  switch (m) {
    case MetricKind::accuracy_weighted: return "balanced accuracy (%)";
    case MetricKind::f1_positive: return "F1 of the positive class (%)";
    case MetricKind::hits_at_k: return "Hits@K (%)";
    case MetricKind::mae: return "MAE";
  }
  return "?";
}

inline double metric_scale(MetricKind m) { return m == MetricKind::mae ? 1.0 : 100.0; }

inline std::string fixed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

/// "68.836±0.119", with "(4.956↑)" appended when a delta is given.
inline std::string md_cell(const std::optional<ArmStats>& a, bool train, double scale, std::optional<double> delta = std::nullopt) {
  if (!a) return "n/a";
  if (!a->any_completed()) return "failed";
  const MeanStd& m = train ? a->train : a->test;
  std::string s = fixed3(m.mean * scale) + "±" + fixed3(m.std * scale);
  if (delta) {
    const double d = *delta * scale;
    s += " (" + fixed3(std::abs(d)) + (d > 0 ? "↑" : d < 0 ? "↓" : "") + ")";
  }
  if (!a->failed.empty()) s += " [" + std::to_string(a->failed.size()) + "/" + std::to_string(a->runs) + " failed]";
  return s;
}

}  // namespace detail

inline std::string results_markdown(std::span<const ComparisonTable> tables) {
  std::string out;
  for (const auto& t : tables) {
    const double scale = detail::metric_scale(t.metric);
    out += "## " + t.title + ": " + detail::metric_label(t.metric) + "\n\n";
    out += "Seeds: " + detail::join<std::uint64_t>(t.seeds, ',', [](const std::uint64_t& s) { return std::to_string(s); }) + "\n\n";
    out += "| Model | L | Train w/o CLFE | Train + CLFE | Test w/o CLFE | Test + CLFE |\n";
    out += "|---|---|---|---|---|---|\n";
    for (const auto& r : t.rows) {
      std::optional<double> train_delta;
      if (r.without && r.with && r.without->any_completed() && r.with->any_completed())
        train_delta = r.with->train.mean - r.without->train.mean;
      out += std::string("| ") + detail::display_name(r.backbone) + " | " + std::to_string(r.layers) + " | " +
             detail::md_cell(r.without, true, scale) + " | " + detail::md_cell(r.with, true, scale, train_delta) + " | " +
             detail::md_cell(r.without, false, scale) + " | " + detail::md_cell(r.with, false, scale, r.delta()) + " |\n";
    }
    bool header = false;
    for (const auto& n : t.runs)
      if (!n.completed) {
        if (!header) out += "\nFailed runs:\n\n";
        header = true;
        out += std::string("- ") + to_string(n.backbone) + " L=" + std::to_string(n.layers) + " " + to_string(n.arm) + " seed " +
               std::to_string(n.seed) + ": " + n.error + "\n";
      }
    out += "\n";
  }
  return out;
}

inline nlohmann::json manifest_json(std::span<const ComparisonTable> tables) {
  nlohmann::json j;
  j["tool"] = "clfe";
  j["version"] = kVersion;
  j["tables"] = nlohmann::json::array();
  for (const auto& t : tables) {
    nlohmann::json jt;
    jt["title"] = t.title;
    jt["task"] = to_string(t.task);
    jt["metric"] = to_string(t.metric);
    jt["seeds"] = t.seeds;
    jt["all_completed"] = t.all_completed();
    nlohmann::json cfg = nlohmann::json::object();
    for (const auto& [k, v] : t.config) cfg[k] = v;
    jt["config"] = cfg;
    jt["runs"] = nlohmann::json::array();
    for (const auto& n : t.runs) {
      nlohmann::json jr{{"backbone", to_string(n.backbone)}, {"layers", n.layers},     {"arm", to_string(n.arm)},
                        {"seed", n.seed},                    {"completed", n.completed}, {"best_epoch", n.best_epoch},
                        {"epochs", n.epochs},                {"decays", n.decays},       {"seconds", n.seconds}};
      if (!n.completed) jr["error"] = n.error;
      jt["runs"].push_back(std::move(jr));
    }
    j["tables"].push_back(std::move(jt));
  }
  return j;
}

/// Writes results.csv, results.md and manifest.json into dir.
inline void emit_report(std::span<const ComparisonTable> tables, const std::filesystem::path& dir) {
  if (tables.empty()) throw ContractError("emit_report: no tables");
  detail::write_text(dir / "results.csv", results_csv(tables));
  detail::write_text(dir / "results.md", results_markdown(tables));
  detail::write_text(dir / "manifest.json", manifest_json(tables).dump(2) + "\n");
}

inline void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochRecord>& records) {
  std::string s = "epoch,train_loss,val_loss,train_metric,val_metric,test_metric,lr,seconds\n";
  for (const auto& r : records) {
    s += std::to_string(r.epoch);
    for (double v : {r.train_loss, r.val_loss, r.train_metric, r.val_metric, r.test_metric, r.lr, r.seconds})
      s += "," + detail::format_double(v);
    s += "\n";
  }
  detail::write_text(path, s);
}

/// Trains every (backbone, depth, arm) on one shared dataset with the same
/// seeds. When cfg.out is set, also writes the config echo, per-epoch logs
/// and the report there. Failed seeds are annotated, not fatal.
inline ComparisonTable run_ab(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  const ExperimentData data = build_dataset(cfg);
  const std::filesystem::path out = cfg.out;
  if (!cfg.out.empty()) write_config_echo(cfg, out);

  ComparisonTable table;
  table.title = std::string(to_string(cfg.task)) + "/" + cfg.dataset;
  table.task = cfg.task;
  table.metric = cfg.train.metric;
  table.seeds = cfg.seeds;
  table.config = config_entries(cfg);
  if (progress)
    *progress << "dataset " << cfg.dataset << ": " << data.data.train.size() << " train / " << data.data.val.size() << " val / "
              << data.data.test.size() << " test graphs\n";

  for (Backbone b : cfg.backbones)
    for (std::size_t depth : cfg.layers) {
      ComparisonRow row;
      row.backbone = b;
      row.layers = depth;
      for (Arm arm : cfg.arms) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto summary = run_seeds(model_spec(cfg, data, b, depth, arm), data.data, cfg.train, cfg.seeds, cfg.workers);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ArmStats stats;
        stats.runs = summary.runs.size();
        stats.failed = summary.failed;
        stats.test = summary.test;
        stats.train = summary.train;
        for (const auto& r : summary.runs) {
          RunNote n{b, depth, arm, r.seed, r.completed(), r.best_epoch, r.records.size(), r.decays, 0.0, r.error};
          for (const auto& e : r.records) n.seconds += e.seconds;
          table.runs.push_back(std::move(n));
          if (!cfg.out.empty())
            write_epoch_log(out / "logs" /
                                (std::string(to_string(b)) + "_L" + std::to_string(depth) + "_" + to_string(arm) + "_seed" +
                                 std::to_string(r.seed) + ".csv"),
                            r.records);
        }
        if (progress) {
          *progress << to_string(b) << " L=" << depth << " " << to_string(arm) << ": ";
          if (stats.any_completed())
            *progress << "test " << to_string(cfg.train.metric) << " " << detail::format_double(stats.test.mean) << " ± "
                      << detail::format_double(stats.test.std);
          else
            *progress << "no seed completed";
          *progress << " (" << stats.runs - stats.failed.size() << "/" << stats.runs << " seeds, " << detail::fixed3(secs) << " s)\n";
          for (const auto& w : summary.warnings) *progress << "  warning: " << w << "\n";
        }
        (arm == Arm::clfe ? row.with : row.without) = std::move(stats);
      }
      table.rows.push_back(std::move(row));
    }
  if (!cfg.out.empty()) emit_report(std::span<const ComparisonTable>(&table, 1), out);
  return table;
}

}  // namespace clfe
