#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "clfe/generators.hpp"
#include "clfe/graph_io.hpp"

using namespace clfe;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("clfe_io_" + name); }

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

std::string parse_error_of(const fs::path& p) {
  try {
    load_graphs(p);
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(GraphIo, RoundTripIsIdentity) {
  std::vector<Graph> gs;
  for (std::uint64_t s = 0; s < 4; ++s) gs.push_back(make_tsp_instance(6 + s, 3, s).graph);
  for (std::uint64_t s = 0; s < 3; ++s) {
    SbmParams p;
    p.blocks = {3, 4};
    gs.push_back(gen_sbm(p, s));
    gs.back().node_feats = Matrix(7, 2);
    gs.back().node_feats.data[s] = 0.1 + 1e-17 * static_cast<double>(s);
  }
  for (auto& g : gen_regression(3, RegressionParams{}, 1)) {
    g.node_feats = Matrix(g.n, 2, std::vector<double>(g.n * 2, 1.0 / 3.0));
    g.graph_label = 2;
    gs.push_back(std::move(g));
  }
  // Split by width so each file is schema-consistent.
  std::vector<Graph> tsp(gs.begin(), gs.begin() + 4), rest(gs.begin() + 4, gs.end());
  auto p1 = temp_file("tsp.jsonl"), p2 = temp_file("rest.jsonl");
  save_graphs(tsp, p1);
  save_graphs(rest, p2);
  EXPECT_EQ(load_graphs(p1), tsp);
  EXPECT_EQ(load_graphs(p2), rest);
}

TEST(GraphIo, DirectedGraphsAndSelfLoopsSurvive) {
  Graph g = Graph::from_edges(3, {{0, 1}, {1, 0}, {2, 2}, {2, 0}}, false, Matrix(3, 1, {1, 2, 3}));
  g.edge_labels = {1, 0, 1, 0};
  auto p = temp_file("directed.jsonl");
  save_graphs(std::vector<Graph>{g}, p);
  auto back = load_graphs(p);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0], g);
}

TEST(GraphIo, EmptyFileGivesEmptyList) {
  auto p = temp_file("empty.jsonl");
  write_text(p, "");
  EXPECT_TRUE(load_graphs(p).empty());
}

TEST(GraphIo, TruncatedRecordReportsLine) {
  auto p = temp_file("trunc.jsonl");
  std::vector<Graph> gs{Graph::from_edges(2, {{0, 1}}, true, Matrix(2, 1))};
  const std::string line = graph_to_line(gs[0]);
  write_text(p, line + "\n" + line.substr(0, line.size() / 2) + "\n");
  EXPECT_NE(parse_error_of(p).find("line 2"), std::string::npos);
}

TEST(GraphIo, SchemaErrors) {
  auto p = temp_file("schema.jsonl");
  write_text(p, R"({"n":2,"edges":[[0,1]],"node_feats":[[1],[2]]})" "\n" R"({"n":1,"edges":[],"node_feats":[[1,2]]})" "\n");
  auto msg = parse_error_of(p);
  EXPECT_NE(msg.find("line 2"), std::string::npos);
  EXPECT_NE(msg.find("schema"), std::string::npos);

  write_text(p, R"({"n":2,"edges":[[0,1]],"node_feats":[[1],[2,3]]})");
  EXPECT_NE(parse_error_of(p).find("line 1"), std::string::npos);
  write_text(p, R"({"n":2,"edges":[[0,5]],"node_feats":[[1],[2]]})");
  EXPECT_NE(parse_error_of(p).find("line 1"), std::string::npos);
  write_text(p, R"({"n":1,"edges":[],"node_feats":[[1]],"colour":3})");
  EXPECT_NE(parse_error_of(p).find("colour"), std::string::npos);
}
