#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "peftlab/data.hpp"
#include "peftlab/efficiency.hpp"
#include "peftlab/harness.hpp"
#include "peftlab/model.hpp"

namespace peftlab {

/// Named model size presets. Desk tiers (tiny/mobile/distil/base) keep the
/// family's layer/width ratios at laptop scale; reference tiers carry the
/// published dimensions and are meant for the accounting report.
ModelConfig tier_config(const std::string& tier);
std::vector<std::string> known_tiers();

struct TaskSpec {
  TaskKind kind = TaskKind::sequence;
  std::size_t classes = 2;
  std::size_t entity_types = 2;
  std::size_t train_examples = 512;
  std::size_t eval_examples = 256;
  std::size_t vocab_size = 64;
  std::size_t seq_len = 16;
  double noise = 0.1;
  std::uint64_t seed = 7;
  std::string train_jsonl;  // when set, load instead of generating
  std::string eval_jsonl;
};

struct TaskData {
  Dataset train;
  Dataset eval;
};

TaskData build_task(const TaskSpec& spec);

struct ExperimentSpec {
  std::string name = "experiment";
  std::vector<std::uint64_t> seeds = {1};
  std::vector<TrainMode> modes = {TrainMode::full};
  std::vector<std::pair<std::string, ModelConfig>> models;  // vocab/labels filled from task
  TaskSpec task;
  std::vector<Budget> budgets = {{BudgetKind::epochs, 3}};
  TrainConfig train;
  LoraConfig lora;
  Ia3Config ia3;
  std::string output_dir = "out";
  std::size_t jobs = 1;
};

/// Parses and validates a spec JSON file; schema problems name the offending
/// path. PEFTLAB_OUT / PEFTLAB_JOBS environment variables override only the
/// output directory and parallelism degree.
ExperimentSpec load_spec(const std::string& path);
ExperimentSpec spec_from_json(const nlohmann::json& j);
nlohmann::json spec_to_json(const ExperimentSpec& spec);

/// Hash of the spec's scientific content (output_dir and jobs excluded).
std::uint64_t spec_hash(const ExperimentSpec& spec);

struct MatrixCell {
  std::string id;
  std::string model_name;
  ModelConfig config;
  TrainMode mode;
  Budget budget;
  std::uint64_t seed = 0;
  std::size_t index = 0;
};

/// Deterministic cartesian product (model × mode × budget × seed); ids are
/// unique and stable.
std::vector<MatrixCell> make_matrix(const ExperimentSpec& spec, const TaskData& task);

/// One CSV row per executed cell. Metric columns are deterministic for a
/// given spec + seeds; wall-clock columns are not.
struct CellRow {
  std::string cell_id, model, mode, budget_kind;
  double budget_value = 0.0;
  std::uint64_t seed = 0;
  std::size_t trainable_params = 0, total_params = 0, train_examples = 0, steps = 0,
              peak_step = 0;
  double f1_micro = 0.0, f1_macro = 0.0, accuracy = 0.0, auroc_macro = 0.0, auroc_binary = 0.0,
         span_f1 = 0.0, peak_metric = 0.0, final_train_loss = 0.0;
  double time_to_peak = 0.0, elapsed = 0.0;
};

std::string matrix_csv_header();
std::string cell_row_csv(const CellRow& row);

struct RunBundle {
  std::filesystem::path dir;
  std::vector<CellRow> rows;
  std::vector<std::string> reused;  // cell ids restored from existing traces
  std::vector<std::pair<std::string, std::string>> failed;  // cell id -> error
};

/// Executes the matrix with up to spec.jobs concurrent cells. Completed cells
/// (existing trace files) are skipped; outputs are written atomically and the
/// CSV row order is independent of the parallelism degree. Refuses to reuse a
/// bundle directory whose recorded spec hash differs.
RunBundle cmd_run(const ExperimentSpec& spec);

struct AccountingRow {
  std::string tier;
  double params = 0.0;
  double vram_gib = 0.0;
  double flops = 0.0;  // at num_tokens tokens
  double cost = 0.0;
};

struct AccountingOptions {
  Precision precision = Precision::fp32;
  std::size_t num_tokens = 10;
  double train_hours = 0.0;
  double infer_hours = 0.0;
  CostRates rates = default_cost_rates();
};

std::vector<AccountingRow> cmd_accounting(const std::vector<std::string>& tiers,
                                          const AccountingOptions& options);
std::string accounting_csv(const std::vector<AccountingRow>& rows);

enum class FigureKind { params_vs_performance, budget_curves, efficiency_scatter, rank_deltas };

FigureKind figure_kind_from_name(const std::string& name);
const char* figure_kind_name(FigureKind kind);

/// Renders one figure from the bundle's CSVs into plots/<kind>.svg and dumps
/// the plotted points as plots/<kind>.csv. Missing inputs raise ReportError
/// naming the requirement; nothing is written on error.
struct PlotResult {
  std::filesystem::path svg_path;
  std::filesystem::path csv_path;
  std::size_t points = 0;
};

PlotResult cmd_plot(const std::filesystem::path& bundle_dir, FigureKind kind);

/// Writes rank-sweep results into the bundle (rank_sweep.csv + trials CSV).
void write_rank_sweep(const std::filesystem::path& bundle_dir, const RankSweepResult& result);

/// Writes budget-sweep cells in matrix-row format to the named CSV.
void write_sweep_rows(const std::filesystem::path& path, const std::vector<CellRow>& rows);

/// Full per-cell trace (row + checkpoint list) as written into bundles.
nlohmann::json cell_trace_json(const CellRow& row, const TrainResult& result);

CellRow row_from_result(const MatrixCell& cell, const TrainResult& result);

/// Median of a non-empty vector (average of middle pair for even sizes).
double median(std::vector<double> values);

}  // namespace peftlab
