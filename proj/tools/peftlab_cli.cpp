#include <cstdio>
#include <fstream>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "peftlab/checkpoint.hpp"
#include "peftlab/experiment.hpp"

namespace fs = std::filesystem;
using namespace peftlab;

namespace {

// exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

int classify_error(const std::exception& e) {
  if (dynamic_cast<const SchemaError*>(&e) != nullptr) return kExitUsage;
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitUsage;
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return kExitNumeric;
  if (dynamic_cast<const ContractError*>(&e) != nullptr) return kExitNumeric;
  return kExitData;
}

struct SweepArgs {
  std::string out_dir = "out/sweep";
  std::string tier = "tiny";
  std::string mode = "full";
  std::string metric = "f1_macro";
  std::string task_kind = "sequence";
  std::size_t classes = 2;
  std::size_t train_examples = 512;
  std::size_t eval_examples = 256;
  std::size_t vocab = 64;
  std::size_t seq_len = 16;
  double noise = 0.1;
  std::uint64_t task_seed = 7;
  std::uint64_t seed = 1;
  double learning_rate = 3e-4;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 5;
  std::size_t eval_every = 20;
  double dropout = 0.1;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
  double lora_dropout = 0.1;
  std::vector<std::string> lora_targets = {"key", "value"};
};

void add_task_options(CLI::App* cmd, SweepArgs& args) {
  cmd->add_option("--out", args.out_dir, "Output directory");
  cmd->add_option("--tier", args.tier, "Model tier (tiny, mobile, distil, base)");
  cmd->add_option("--metric", args.metric, "Metric of record");
  cmd->add_option("--task", args.task_kind, "Task kind: sequence or ner");
  cmd->add_option("--classes", args.classes, "Sequence task classes");
  cmd->add_option("--train-examples", args.train_examples, "Training set size");
  cmd->add_option("--eval-examples", args.eval_examples, "Eval set size");
  cmd->add_option("--vocab", args.vocab, "Filler vocabulary size");
  cmd->add_option("--seq-len", args.seq_len, "Sequence length");
  cmd->add_option("--noise", args.noise, "Marker corruption probability");
  cmd->add_option("--task-seed", args.task_seed, "Task generator seed");
  cmd->add_option("--seed", args.seed, "Training seed");
  cmd->add_option("--lr", args.learning_rate, "Learning rate");
  cmd->add_option("--batch-size", args.batch_size, "Batch size");
  cmd->add_option("--max-epochs", args.max_epochs, "Epoch cap");
  cmd->add_option("--eval-every", args.eval_every, "Evaluation cadence in steps");
  cmd->add_option("--dropout", args.dropout, "Hidden dropout for full fine-tuning");
  cmd->add_option("--lora-rank", args.lora_rank, "LoRA rank");
  cmd->add_option("--lora-alpha", args.lora_alpha, "LoRA alpha");
  cmd->add_option("--lora-dropout", args.lora_dropout, "LoRA dropout");
  cmd->add_option("--lora-targets", args.lora_targets, "LoRA target modules");
}

TaskData sweep_task(const SweepArgs& args) {
  TaskSpec task;
  task.kind = args.task_kind == "ner" ? TaskKind::token : TaskKind::sequence;
  task.classes = args.classes;
  task.train_examples = args.train_examples;
  task.eval_examples = args.eval_examples;
  task.vocab_size = args.vocab;
  task.seq_len = args.seq_len;
  task.noise = args.noise;
  task.seed = args.task_seed;
  return build_task(task);
}

TrainConfig sweep_train_config(const SweepArgs& args) {
  TrainConfig config;
  config.mode = train_mode_from_name(args.mode);
  config.learning_rate = args.learning_rate;
  config.batch_size = args.batch_size;
  config.max_epochs = args.max_epochs;
  config.eval_every = args.eval_every;
  config.seed = args.seed;
  config.dropout = args.dropout;
  config.metric_of_record = args.metric;
  return config;
}

LoraConfig sweep_lora_config(const SweepArgs& args) {
  LoraConfig lora;
  lora.rank = args.lora_rank;
  lora.alpha = args.lora_alpha;
  lora.dropout = args.lora_dropout;
  lora.targets.clear();
  for (const std::string& t : args.lora_targets) lora.targets.push_back(lora_target_from_name(t));
  return lora;
}

ModelConfig sweep_model_config(const SweepArgs& args, const TaskData& task) {
  ModelConfig config = tier_config(args.tier);
  config.vocab = task.train.vocab.size();
  config.num_labels = task.train.num_classes;
  config.head_kind = head_kind_for(task.train.kind);
  config.max_positions = std::max(config.max_positions, args.seq_len + 1);
  return config;
}

int run_generic_sweep(const SweepArgs& args, BudgetKind kind, const std::vector<double>& values,
                      const std::string& csv_name) {
  const TaskData task = sweep_task(args);
  const TrainConfig config = sweep_train_config(args);
  const ModelConfig model_config = sweep_model_config(args, task);
  const LoraConfig lora = sweep_lora_config(args);
  const TrainMode mode = train_mode_from_name(args.mode);

  std::vector<Budget> budgets;
  for (double v : values) budgets.push_back({kind, v});

  ModelFactory factory = [&](std::uint64_t cell_seed) {
    EncoderModel model = build_model(model_config, cell_seed);
    if (mode == TrainMode::lora) inject_lora(model, lora, Rng::mix(cell_seed, 0xadaull));
    if (mode == TrainMode::ia3) inject_ia3(model, Ia3Config{});
    return model;
  };
  const std::vector<SweepCell> cells =
      run_budget_sweep(factory, task.train, task.eval, budgets, config);

  std::vector<CellRow> rows;
  fs::create_directories(fs::path(args.out_dir) / "traces");
  for (const SweepCell& cell : cells) {
    MatrixCell mc;
    mc.model_name = args.tier;
    mc.config = model_config;
    mc.mode = mode;
    mc.budget = cell.budget;
    mc.seed = cell.seed;
    mc.index = cell.index;
    mc.id = args.tier + "__" + args.mode + "__" + budget_kind_name(cell.budget.kind) + "-" +
            std::to_string(cell.budget.value) + "__s" + std::to_string(args.seed);
    CellRow row = row_from_result(mc, cell.result);
    std::ofstream trace(fs::path(args.out_dir) / "traces" / (mc.id + ".json"));
    trace << cell_trace_json(row, cell.result).dump(2) << "\n";
    rows.push_back(std::move(row));
  }
  write_sweep_rows(fs::path(args.out_dir) / csv_name, rows);
  std::cout << "wrote " << (fs::path(args.out_dir) / csv_name).string() << " (" << rows.size()
            << " rows)\n";
  for (const CellRow& row : rows) {
    std::cout << "  " << row.budget_kind << "=" << row.budget_value
              << " peak=" << row.peak_metric << " T=" << row.time_to_peak << "s\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PEFT laboratory: adapters, budgets, and efficiency accounting"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Execute an experiment matrix from a spec file");
  std::string spec_path;
  run->add_option("spec", spec_path, "Experiment spec (JSON)")->required();
  std::string run_out;
  run->add_option("--out", run_out, "Override the output directory");
  std::size_t run_jobs = 0;
  run->add_option("--jobs", run_jobs, "Concurrent cells (overrides spec and PEFTLAB_JOBS)");

  // plot
  auto* plot = app.add_subcommand("plot", "Render a figure from a bundle");
  std::string plot_bundle, plot_kind;
  plot->add_option("--bundle", plot_bundle, "Bundle directory")->required();
  plot
      ->add_option("--kind", plot_kind,
                   "params_vs_performance | budget_curves | efficiency_scatter | rank_deltas")
      ->required();

  // accounting
  auto* acct = app.add_subcommand("accounting", "Parameter / VRAM / FLOPs / cost table");
  std::vector<std::string> acct_tiers;
  acct->add_option("--tiers", acct_tiers, "Model tiers (see --list-tiers)");
  bool acct_list = false;
  acct->add_flag("--list-tiers", acct_list, "List known tiers");
  std::string acct_precision = "fp32";
  acct->add_option("--precision", acct_precision, "fp32 | bf16 | fp16");
  std::size_t acct_tokens = 10;
  acct->add_option("--tokens", acct_tokens, "Token count for the FLOPs column");
  double acct_train_hours = 0.0, acct_infer_hours = 0.0;
  acct->add_option("--train-hours", acct_train_hours, "Projected training hours");
  acct->add_option("--infer-hours", acct_infer_hours, "Projected inference hours");
  std::string acct_out;
  acct->add_option("--out", acct_out, "Also write the table as CSV to this path");

  // sweep-rank
  auto* rank = app.add_subcommand("sweep-rank", "LoRA rank sweep with random search");
  SweepArgs rank_args;
  rank_args.out_dir = "out/rank_sweep";
  rank_args.tier = "wide";
  add_task_options(rank, rank_args);
  std::vector<std::size_t> rank_values = {8, 16, 32, 64, 128};
  rank->add_option("--ranks", rank_values, "Ranks to sweep (must include 8)");
  std::size_t rank_trials = 20;
  rank->add_option("--trials", rank_trials, "Random-search trials per rank");
  double rank_epochs = 2;
  rank->add_option("--epochs", rank_epochs, "Epoch budget per trial");

  // budget-sweep (time ladder)
  auto* bsweep = app.add_subcommand("budget-sweep", "Time-budget ladder");
  SweepArgs bs_args;
  bs_args.out_dir = "out/budget_sweep";
  add_task_options(bsweep, bs_args);
  bsweep->add_option("--mode", bs_args.mode, "full | lora | ia3");
  std::vector<double> bs_values = {1.0, 3.0, 9.0};
  bsweep->add_option("--seconds", bs_values, "Time budgets in seconds (ascending)");

  // few-shot-sweep (sample ladder)
  auto* fsweep = app.add_subcommand("few-shot-sweep", "Samples-per-class ladder");
  SweepArgs fs_args;
  fs_args.out_dir = "out/few_shot_sweep";
  add_task_options(fsweep, fs_args);
  fsweep->add_option("--mode", fs_args.mode, "full | lora | ia3");
  std::vector<double> fs_values;
  fsweep->add_option("--samples", fs_values,
                     "Samples per class (ascending; default: 8,16,... capped at the dataset)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints the message; --help exits cleanly
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (run->parsed()) {
      ExperimentSpec spec = load_spec(spec_path);
      if (!run_out.empty()) spec.output_dir = run_out;
      if (run_jobs > 0) spec.jobs = run_jobs;
      const RunBundle bundle = cmd_run(spec);
      std::cout << "bundle: " << bundle.dir.string() << "\n";
      std::cout << "completed " << bundle.rows.size() << " cells (" << bundle.reused.size()
                << " reused)\n";
      if (!bundle.failed.empty()) {
        for (const auto& [id, what] : bundle.failed) {
          std::cerr << "failed cell " << id << ": " << what << "\n";
        }
        return kExitData;
      }
      return 0;
    }

    if (plot->parsed()) {
      const PlotResult result = cmd_plot(plot_bundle, figure_kind_from_name(plot_kind));
      std::cout << "wrote " << result.svg_path.string() << " and " << result.csv_path.string()
                << " (" << result.points << " points)\n";
      return 0;
    }

    if (acct->parsed()) {
      if (acct_list) {
        for (const std::string& t : known_tiers()) std::cout << t << "\n";
        return 0;
      }
      AccountingOptions options;
      options.precision = precision_from_name(acct_precision);
      options.num_tokens = acct_tokens;
      options.train_hours = acct_train_hours;
      options.infer_hours = acct_infer_hours;
      const std::vector<AccountingRow> rows = cmd_accounting(acct_tiers, options);
      std::printf("%-16s %14s %10s %14s %10s\n", "tier", "params", "vram_gib", "flops", "cost");
      for (const AccountingRow& r : rows) {
        std::printf("%-16s %14.0f %10.4f %14.4g %10.2f\n", r.tier.c_str(), r.params, r.vram_gib,
                    r.flops, r.cost);
      }
      if (!acct_out.empty()) {
        std::ofstream out(acct_out);
        out << accounting_csv(rows);
        std::cout << "wrote " << acct_out << "\n";
      }
      return 0;
    }

    if (rank->parsed()) {
      const TaskData task = sweep_task(rank_args);
      TrainConfig config = sweep_train_config(rank_args);
      config.mode = TrainMode::lora;
      const ModelConfig model_config = sweep_model_config(rank_args, task);
      const RankSweepResult result = sweep_lora_rank(
          model_config, task.train, task.eval, rank_values, rank_trials, RankSearchSpace{},
          config, Budget{BudgetKind::epochs, rank_epochs}, sweep_lora_config(rank_args));
      write_rank_sweep(rank_args.out_dir, result);
      std::cout << "wrote " << (fs::path(rank_args.out_dir) / "rank_sweep.csv").string() << "\n";
      for (const RankSweepRow& row : result.rows) {
        std::cout << "  r=" << row.rank << " best=" << row.best.metric
                  << " delta=" << row.delta_vs_r8 << "\n";
      }
      return 0;
    }

    if (bsweep->parsed()) {
      return run_generic_sweep(bs_args, BudgetKind::time_seconds, bs_values, "budget_sweep.csv");
    }

    if (fsweep->parsed()) {
      std::vector<double> values = fs_values;
      if (values.empty()) {
        const TaskData task = sweep_task(fs_args);
        for (std::size_t k : few_shot_ladder(task.train)) {
          values.push_back(static_cast<double>(k));
        }
      }
      return run_generic_sweep(fs_args, BudgetKind::samples_per_class, values,
                               "few_shot_sweep.csv");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return classify_error(e);
  }
  return 0;
}
