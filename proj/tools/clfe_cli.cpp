// clfe: experiment runner, dataset generator and gradient check.

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "clfe/experiment.hpp"
#include "clfe/gradient_suite.hpp"

namespace {

using namespace clfe;

int cmd_run(const std::string& config, const std::string& out, const std::string& seeds, const std::string& arms,
            const std::vector<std::string>& sets, bool quiet) {
  ConfigOverrides overrides;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError("--set expects key=value, got '" + s + "'");
    overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  // Flags win over both the file and --set.
  if (!out.empty()) overrides.emplace_back("out", out);
  if (!seeds.empty()) overrides.emplace_back("seeds", seeds);
  if (!arms.empty()) overrides.emplace_back("arms", arms);
  const ExperimentConfig cfg = parse_config(config, overrides);
  const ComparisonTable table = run_ab(cfg, quiet ? nullptr : &std::cout);
  if (!quiet) std::cout << "\n" << results_markdown(std::span<const ComparisonTable>(&table, 1));
  if (!cfg.out.empty()) std::cout << "wrote " << (std::filesystem::path(cfg.out) / "results.csv").string() << "\n";
  if (!table.all_completed()) {
    std::cerr << "some runs failed; see results.md\n";
    return 1;
  }
  return 0;
}

struct GenOptions {
  std::string kind, out;
  std::size_t count = 1;
  std::uint64_t seed = 1;
  std::string blocks = "15,15,15,15";
  double p_intra = 0.5, p_inter = 0.1, noise = 0.3;
  std::string features = "noisy_onehot";
  std::size_t nodes = 10, k = 4;
  std::string labeling = "exact";
  std::size_t min_nodes = 6, max_nodes = 14, categories = 4;
  double edge_prob = 0.3;
};

int cmd_gen(const GenOptions& o) {
  std::vector<Graph> graphs;
  if (o.kind == "sbm") {
    SbmParams p;
    p.blocks.clear();
    for (const auto& b : detail::split(o.blocks, ',')) p.blocks.push_back(detail::parse_size(b));
    p.p_intra = o.p_intra;
    p.p_inter = o.p_inter;
    p.noise = o.noise;
    p.features = o.features == "revealed_seeds" ? SbmFeatures::revealed_seeds : SbmFeatures::noisy_onehot;
    for (std::size_t i = 0; i < o.count; ++i) graphs.push_back(gen_sbm(p, Rng::mix(o.seed, i)));
  } else if (o.kind == "tsp") {
    const auto lab = o.labeling == "heuristic" ? TspLabeling::heuristic : TspLabeling::exact;
    for (std::size_t i = 0; i < o.count; ++i) graphs.push_back(gen_tsp(o.nodes, o.k, Rng::mix(o.seed, i), lab));
  } else {
    RegressionParams p;
    p.min_nodes = o.min_nodes;
    p.max_nodes = o.max_nodes;
    p.edge_prob = o.edge_prob;
    p.categories = o.categories;
    graphs = gen_regression(o.count, p, o.seed);
  }
  save_graphs(graphs, o.out);
  std::cout << "wrote " << graphs.size() << " graphs to " << o.out << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& backbone, std::uint64_t seed) {
  std::vector<Backbone> kinds;
  if (backbone == "all") kinds.assign(std::begin(kAllBackbones), std::end(kAllBackbones));
  else kinds.push_back(parse_backbone(backbone));
  double worst = 0.0;
  bool ok = true;
  for (Backbone b : kinds)
    for (bool clfe : {false, true}) {
      const auto r = layer_grad_check(b, clfe, seed);
      std::cout << to_string(b) << " clfe=" << (clfe ? "on " : "off") << "  max_rel_error " << r.report.max_rel_error << "  ("
                << r.report.checked << " checked, " << r.report.skipped << " at kinks, worst in " << r.worst_tensor << ")\n";
      worst = std::max(worst, r.report.max_rel_error);
      ok = ok && r.report.passed;
    }
  std::cout << "max relative error: " << worst << (ok ? "  PASS" : "  FAIL") << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional local feature encoding experiments"};
  app.set_version_flag("--version", clfe::kVersion);
  app.require_subcommand(1);

  std::string config, out, seeds, arms;
  std::vector<std::string> sets;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Train baseline and CLFE arms and write comparison tables");
  run->add_option("--config", config, "key = value config file")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "output directory (overrides 'out')");
  run->add_option("--seeds", seeds, "comma-separated seeds, e.g. 9,23,41,42");
  run->add_option("--arms", arms, "baseline,clfe or a single arm");
  run->add_option("--set", sets, "extra key=value override (repeatable)");
  run->add_flag("--quiet", quiet, "suppress progress output");

  GenOptions g;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset as JSON lines");
  gen->add_option("--kind", g.kind, "sbm, tsp or reg")->required()->check(CLI::IsMember({"sbm", "tsp", "reg"}));
  gen->add_option("--out", g.out, "output file")->required();
  gen->add_option("--count", g.count, "number of graphs")->capture_default_str();
  gen->add_option("--seed", g.seed, "random seed")->capture_default_str();
  gen->add_option("--blocks", g.blocks, "sbm block sizes")->capture_default_str();
  gen->add_option("--p-intra", g.p_intra, "sbm within-block edge probability")->capture_default_str();
  gen->add_option("--p-inter", g.p_inter, "sbm cross-block edge probability")->capture_default_str();
  gen->add_option("--noise", g.noise, "sbm feature noise")->capture_default_str();
  gen->add_option("--features", g.features, "noisy_onehot or revealed_seeds")
      ->check(CLI::IsMember({"noisy_onehot", "revealed_seeds"}))
      ->capture_default_str();
  gen->add_option("--nodes", g.nodes, "tsp cities")->capture_default_str();
  gen->add_option("--k", g.k, "tsp nearest neighbours")->capture_default_str();
  gen->add_option("--labeling", g.labeling, "tsp labels: exact or heuristic")
      ->check(CLI::IsMember({"exact", "heuristic"}))
      ->capture_default_str();
  gen->add_option("--min-nodes", g.min_nodes, "reg minimum nodes")->capture_default_str();
  gen->add_option("--max-nodes", g.max_nodes, "reg maximum nodes")->capture_default_str();
  gen->add_option("--edge-prob", g.edge_prob, "reg edge probability")->capture_default_str();
  gen->add_option("--categories", g.categories, "reg node categories")->capture_default_str();

  std::string backbone = "all";
  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "Compare layer gradients with central differences");
  gc->add_option("--backbone", backbone, "gcn, sage, gat, monet, gatedgcn or all")
      ->check(CLI::IsMember({"gcn", "sage", "gat", "monet", "gatedgcn", "all"}))
      ->capture_default_str();
  gc->add_option("--seed", gc_seed, "graph and parameter seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config, out, seeds, arms, sets, quiet);
    if (*gen) return cmd_gen(g);
    if (*gc) return cmd_gradcheck(backbone, gc_seed);
  } catch (const clfe::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
