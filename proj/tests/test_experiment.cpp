#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "peftlab/experiment.hpp"

using namespace peftlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("peftlab_exp_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

json demo_spec_json(const std::string& out_dir) {
  return json{
      {"name", "demo"},
      {"seeds", {1, 2, 3}},
      {"modes", {"full", "lora"}},
      {"models",
       {{{"name", "nano"}, {"layers", 1}, {"model_dim", 16}, {"heads", 2}, {"ffn_dim", 32}},
        {{"name", "tiny"}, {"tier", "tiny"}}}},
      {"task",
       {{"kind", "sequence"}, {"classes", 2}, {"train", 48}, {"eval", 24}, {"vocab", 24},
        {"seq_len", 8}, {"noise", 0.0}, {"seed", 5}}},
      {"budgets", {{{"kind", "epochs"}, {"value", 2}}}},
      {"train",
       {{"batch_size", 16}, {"max_epochs", 4}, {"eval_every", 50},
        {"metric_of_record", "f1_macro"}}},
      {"output_dir", out_dir},
      {"jobs", 1},
  };
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    rows.push_back(std::move(fields));
  }
  return rows;
}

}  // namespace

TEST_CASE("spec parsing validates and names offending paths") {
  TempDir tmp("spec");
  const ExperimentSpec spec = spec_from_json(demo_spec_json((tmp.path / "out").string()));
  CHECK(spec.models.size() == 2);
  CHECK(spec.seeds.size() == 3);
  CHECK(spec.modes.size() == 2);

  json bad = demo_spec_json("out");
  bad.erase("models");
  CHECK_THROWS_WITH_AS((void)spec_from_json(bad), doctest::Contains("models"), SchemaError);

  bad = demo_spec_json("out");
  bad["modes"] = {"full", "banana"};
  CHECK_THROWS_WITH_AS((void)spec_from_json(bad), doctest::Contains("modes"), SchemaError);

  bad = demo_spec_json("out");
  bad["budgets"][0]["value"] = -1;
  CHECK_THROWS_WITH_AS((void)spec_from_json(bad), doctest::Contains("budgets[0]"), SchemaError);

  bad = demo_spec_json("out");
  bad["surprise"] = 1;
  CHECK_THROWS_WITH_AS((void)spec_from_json(bad), doctest::Contains("surprise"), SchemaError);

  bad = demo_spec_json("out");
  bad["models"][0]["name"] = "has space";
  CHECK_THROWS_WITH_AS((void)spec_from_json(bad), doctest::Contains("models[0].name"),
                       SchemaError);
}

TEST_CASE("environment variables override output dir and jobs only") {
  TempDir tmp("env");
  const fs::path spec_path = tmp.path / "spec.json";
  std::ofstream(spec_path) << demo_spec_json((tmp.path / "plain").string()).dump();

  ::setenv("PEFTLAB_OUT", (tmp.path / "redirected").c_str(), 1);
  ::setenv("PEFTLAB_JOBS", "2", 1);
  const ExperimentSpec spec = load_spec(spec_path.string());
  ::unsetenv("PEFTLAB_OUT");
  ::unsetenv("PEFTLAB_JOBS");
  CHECK(spec.output_dir == (tmp.path / "redirected").string());
  CHECK(spec.jobs == 2);
  // hash ignores both
  ExperimentSpec plain = spec;
  plain.output_dir = "elsewhere";
  plain.jobs = 7;
  CHECK(spec_hash(plain) == spec_hash(spec));
}

TEST_CASE("matrix is the cartesian product with unique deterministic ids") {
  TempDir tmp("matrix");
  const ExperimentSpec spec = spec_from_json(demo_spec_json((tmp.path / "out").string()));
  const TaskData task = build_task(spec.task);
  const std::vector<MatrixCell> cells = make_matrix(spec, task);
  CHECK(cells.size() == 2 * 2 * 1 * 3);  // model x mode x budget x seed
  std::set<std::string> ids;
  for (const MatrixCell& cell : cells) ids.insert(cell.id);
  CHECK(ids.size() == cells.size());
  const std::vector<MatrixCell> again = make_matrix(spec, task);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    CHECK(cells[i].id == again[i].id);
    CHECK(cells[i].seed == again[i].seed);
  }
}

TEST_CASE("cmd_run executes the matrix, resumes, and refuses foreign bundles") {
  TempDir tmp("run");
  const std::string out = (tmp.path / "bundle").string();
  const ExperimentSpec spec = spec_from_json(demo_spec_json(out));

  const RunBundle first = cmd_run(spec);
  CHECK(first.rows.size() == 12);
  CHECK(first.failed.empty());
  CHECK(first.reused.empty());
  CHECK(fs::exists(fs::path(out) / "matrix.csv"));
  CHECK(fs::exists(fs::path(out) / "summary.json"));
  CHECK(fs::exists(fs::path(out) / "spec.hash"));
  const auto rows = read_csv_rows(fs::path(out) / "matrix.csv");
  CHECK(rows.size() == 13);  // header + 12 cells

  // resumability: delete one trace, rerun, exactly one cell re-executes
  std::size_t traces = 0;
  fs::path victim;
  for (const auto& entry : fs::directory_iterator(fs::path(out) / "traces")) {
    ++traces;
    victim = entry.path();
  }
  CHECK(traces == 12);
  fs::remove(victim);
  const RunBundle second = cmd_run(spec);
  CHECK(second.rows.size() == 12);
  CHECK(second.reused.size() == 11);

  // a different spec refuses to write into the same bundle
  ExperimentSpec other = spec;
  other.seeds = {9};
  CHECK_THROWS_WITH_AS((void)cmd_run(other), doctest::Contains("refusing"), SchemaError);
}

TEST_CASE("metric columns are identical regardless of parallelism") {
  TempDir tmp("par");
  json j = demo_spec_json((tmp.path / "a").string());
  const ExperimentSpec serial = spec_from_json(j);
  j["output_dir"] = (tmp.path / "b").string();
  j["jobs"] = 2;
  const ExperimentSpec parallel = spec_from_json(j);

  (void)cmd_run(serial);
  (void)cmd_run(parallel);

  const auto a = read_csv_rows(tmp.path / "a" / "matrix.csv");
  const auto b = read_csv_rows(tmp.path / "b" / "matrix.csv");
  REQUIRE(a.size() == b.size());
  // all columns except the two trailing wall-clock ones must match exactly
  const std::size_t cols = a[0].size();
  for (std::size_t r = 0; r < a.size(); ++r) {
    REQUIRE(a[r].size() == cols);
    for (std::size_t c = 0; c + 2 < cols; ++c) {
      CHECK(a[r][c] == b[r][c]);
    }
  }
}

TEST_CASE("efficiency scatter coordinates equal the efficiency index") {
  TempDir tmp("plot");
  const std::string out = (tmp.path / "bundle").string();
  const ExperimentSpec spec = spec_from_json(demo_spec_json(out));
  const RunBundle bundle = cmd_run(spec);

  const PlotResult plot = cmd_plot(out, FigureKind::efficiency_scatter);
  CHECK(fs::exists(plot.svg_path));
  CHECK(fs::exists(plot.csv_path));
  CHECK(plot.points == 4);  // (nano, tiny) x (full, lora)

  // recompute the cohort from the bundle rows
  std::map<std::string, std::vector<const CellRow*>> groups;
  for (const CellRow& row : bundle.rows) groups[row.model + "/" + row.mode].push_back(&row);
  std::vector<RunStats> cohort;
  for (const auto& [label, rows] : groups) {
    std::vector<double> times;
    for (const CellRow* r : rows) times.push_back(r->time_to_peak);
    cohort.push_back({label, median(times), static_cast<double>(rows.front()->trainable_params),
                      static_cast<double>(rows.front()->total_params)});
  }
  const std::map<std::string, double> expected = efficiency_index(cohort);

  const auto points = read_csv_rows(plot.csv_path);
  REQUIRE(points.size() == 5);  // header + 4
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double eff = std::strtod(points[i][1].c_str(), nullptr);
    CHECK(eff == doctest::Approx(expected.at(points[i][0])).epsilon(1e-9));
  }

  // other figures render from the same bundle
  CHECK(fs::exists(cmd_plot(out, FigureKind::params_vs_performance).svg_path));
  CHECK(fs::exists(cmd_plot(out, FigureKind::budget_curves).svg_path));
}

TEST_CASE("rank_deltas plotting handles the single-baseline case") {
  TempDir tmp("rank");
  RankSweepResult result;
  RankTrial best;
  best.rank = 8;
  best.metric = 0.91;
  result.rows.push_back({8, best, 0.0});
  result.trials.push_back(best);
  write_rank_sweep(tmp.path, result);
  const PlotResult plot = cmd_plot(tmp.path, FigureKind::rank_deltas);
  CHECK(plot.points == 1);
  const auto rows = read_csv_rows(plot.csv_path);
  REQUIRE(rows.size() == 2);
  CHECK(std::strtod(rows[1][1].c_str(), nullptr) == 0.0);
}

TEST_CASE("plots on empty bundles fail without writing files") {
  TempDir tmp("empty");
  CHECK_THROWS_AS((void)cmd_plot(tmp.path, FigureKind::budget_curves), ReportError);
  // header-only matrix: data rows are required
  std::ofstream(tmp.path / "matrix.csv") << matrix_csv_header() << "\n";
  CHECK_THROWS_AS((void)cmd_plot(tmp.path, FigureKind::budget_curves), ReportError);
  CHECK_THROWS_AS((void)cmd_plot(tmp.path, FigureKind::rank_deltas), ReportError);
  CHECK_FALSE(fs::exists(tmp.path / "plots" / "budget_curves.svg"));
  CHECK_FALSE(fs::exists(tmp.path / "plots" / "rank_deltas.svg"));
}

TEST_CASE("accounting reproduces the published table at reference tiers") {
  AccountingOptions options;
  options.train_hours = 2.51;
  options.infer_hours = 0.22;
  const std::vector<AccountingRow> rows =
      cmd_accounting({"bert-ref", "distilbert-ref", "tinybert-ref"}, options);
  REQUIRE(rows.size() == 3);
  CHECK(std::fabs(rows[0].params - 108.31e6) / 108.31e6 <= 0.02);
  CHECK(std::fabs(rows[0].vram_gib - 0.403) / 0.403 <= 0.02);
  // the FLOPs column is computed at 10 tokens
  const double ratio = rows[0].flops / rows[1].flops;
  CHECK(std::fabs(ratio - 2.0) / 2.0 <= 0.05);
  CHECK(rows[0].cost == doctest::Approx(5.56).epsilon(0.01));

  CHECK(cmd_accounting({}, options).empty());
  CHECK_THROWS_WITH_AS((void)cmd_accounting({"gigantic"}, options),
                       doctest::Contains("unknown tier"), ConfigError);

  const std::string csv = accounting_csv(rows);
  CHECK(csv.find("tier,params,vram_gib,flops,cost") == 0);
}

TEST_CASE("ner task specs drive the token pipeline end to end") {
  TempDir tmp("ner");
  json j = demo_spec_json((tmp.path / "out").string());
  j["task"] = {{"kind", "ner"}, {"entity_types", 2}, {"train", 32}, {"eval", 16},
               {"seq_len", 12}, {"seed", 3}};
  j["seeds"] = {1};
  j["modes"] = {"ia3"};
  j["models"] = json::array(
      {{{"name", "nano"}, {"layers", 1}, {"model_dim", 16}, {"heads", 2}, {"ffn_dim", 32}}});
  const ExperimentSpec spec = spec_from_json(j);
  const RunBundle bundle = cmd_run(spec);
  REQUIRE(bundle.rows.size() == 1);
  CHECK(bundle.failed.empty());
  CHECK(std::isfinite(bundle.rows[0].span_f1));
}
