#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "peftlab/data.hpp"
#include "peftlab/metrics.hpp"
#include "peftlab/model.hpp"
#include "peftlab/peft.hpp"

namespace peftlab {

enum class TrainMode { full, lora, ia3 };

const char* train_mode_name(TrainMode mode);
TrainMode train_mode_from_name(const std::string& name);

/// Shared training recipe; the same defaults apply to every mode.
struct TrainConfig {
  TrainMode mode = TrainMode::full;
  double learning_rate = 3e-4;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 5;
  std::size_t eval_every = 50;  // steps
  std::uint64_t seed = 0;
  double dropout = 0.1;  // hidden dropout in full fine-tuning
  std::string metric_of_record = "f1_macro";
};

enum class BudgetKind { time_seconds, samples_per_class, epochs };

const char* budget_kind_name(BudgetKind kind);
BudgetKind budget_kind_from_name(const std::string& name);

/// Training ceiling; time budgets are checked at step boundaries.
struct Budget {
  BudgetKind kind = BudgetKind::epochs;
  double value = 1.0;
};

/// Adam with bias correction; never writes to frozen tensors (their gradients
/// are absent by construction).
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                         double epsilon = 1e-8);
  void step(EncoderModel& model, const GradMap& grads, const std::vector<NodeId>& param_nodes);
  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainCheckpoint {
  std::size_t step = 0;
  double elapsed_seconds = 0.0;
  double train_loss = 0.0;
  Metrics eval;
};

struct TrainResult {
  std::vector<TrainCheckpoint> checkpoints;
  std::size_t peak_index = 0;
  double time_to_peak = 0.0;  // T in the efficiency index
  std::size_t trainable_params = 0;  // P
  std::size_t total_params = 0;      // S
  std::size_t steps = 0;
  std::size_t train_examples = 0;
  double elapsed_at_stop = 0.0;
  std::string metric_of_record;

  const TrainCheckpoint& peak() const { return checkpoints.at(peak_index); }
  double peak_metric() const { return peak().eval.get(metric_of_record); }
};

/// Runs the loop until budget exhaustion or max_epochs, evaluating at step 0,
/// every eval_every steps, and at stop. Peak is the argmax of the designated
/// metric with earliest-step tie-break.
TrainResult train(EncoderModel& model, const Dataset& train_data, const Dataset& eval_data,
                  const TrainConfig& config, const Budget& budget);

/// Deterministic evaluation over the full dataset.
Metrics evaluate(const EncoderModel& model, const Dataset& dataset, std::size_t batch_size = 64);

using ModelFactory = std::function<EncoderModel(std::uint64_t cell_seed)>;

struct SweepCell {
  std::size_t index = 0;
  Budget budget;
  std::uint64_t seed = 0;
  TrainResult result;
};

/// One fresh model per budget, shared eval split; cell RNG streams derive
/// only from (cell index, config seed).
std::vector<SweepCell> run_budget_sweep(const ModelFactory& factory, const Dataset& train_data,
                                        const Dataset& eval_data,
                                        const std::vector<Budget>& budgets,
                                        const TrainConfig& config);

struct RankTrial {
  std::size_t rank = 0;
  std::size_t trial = 0;
  double lora_dropout = 0.0;
  double alpha = 0.0;
  double learning_rate = 0.0;
  double metric = 0.0;
  std::uint64_t config_hash = 0;
};

struct RankSweepRow {
  std::size_t rank = 0;
  RankTrial best;
  double delta_vs_r8 = 0.0;
};

struct RankSweepResult {
  std::vector<RankSweepRow> rows;
  std::vector<RankTrial> trials;
};

struct RankSearchSpace {
  std::vector<double> dropouts = {0.1, 0.3, 0.5};
  std::vector<double> alphas = {0.3, 0.5, 1.0};
  double lr_low = 1e-5;   // log-uniform bounds
  double lr_high = 1e-3;
};

/// Seeded random search: `trials` configurations per rank, best validation
/// metric retained, deltas reported against the r=8 baseline.
RankSweepResult sweep_lora_rank(const ModelConfig& config, const Dataset& train_data,
                                const Dataset& eval_data, const std::vector<std::size_t>& ranks,
                                std::size_t trials, const RankSearchSpace& space,
                                const TrainConfig& train_config, const Budget& budget,
                                const LoraConfig& base_lora = {});

std::uint64_t fnv1a64(std::string_view text);

}  // namespace peftlab
