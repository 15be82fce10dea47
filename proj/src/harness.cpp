#include "peftlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace peftlab {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

bool better_metric(double candidate, double incumbent) {
  if (std::isnan(candidate)) return false;
  if (std::isnan(incumbent)) return true;
  return candidate > incumbent;  // ties keep the earlier checkpoint
}

}  // namespace

const char* train_mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::full: return "full";
    case TrainMode::lora: return "lora";
    case TrainMode::ia3: return "ia3";
  }
  return "unknown";
}

TrainMode train_mode_from_name(const std::string& name) {
  if (name == "full") return TrainMode::full;
  if (name == "lora") return TrainMode::lora;
  if (name == "ia3") return TrainMode::ia3;
  throw ConfigError("train: unknown mode '" + name + "'");
}

const char* budget_kind_name(BudgetKind kind) {
  switch (kind) {
    case BudgetKind::time_seconds: return "time_seconds";
    case BudgetKind::samples_per_class: return "samples_per_class";
    case BudgetKind::epochs: return "epochs";
  }
  return "unknown";
}

BudgetKind budget_kind_from_name(const std::string& name) {
  if (name == "time_seconds" || name == "time") return BudgetKind::time_seconds;
  if (name == "samples_per_class" || name == "samples") return BudgetKind::samples_per_class;
  if (name == "epochs") return BudgetKind::epochs;
  throw ConfigError("budget: unknown kind '" + name + "'");
}

AdamOptimizer::AdamOptimizer(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  if (!(learning_rate > 0.0)) throw ConfigError("adam: learning rate must be positive");
}

void AdamOptimizer::step(EncoderModel& model, const GradMap& grads,
                         const std::vector<NodeId>& param_nodes) {
  if (param_nodes.size() != model.params.size()) {
    throw ContractError("adam: parameter node list does not match registry");
  }
  if (m_.empty()) {
    m_.resize(model.params.size());
    v_.resize(model.params.size());
  }
  if (m_.size() != model.params.size()) {
    throw ContractError("adam: parameter registry changed during training");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    Param& p = model.params[i];
    if (!p.trainable) continue;  // frozen tensors are never touched
    const auto it = grads.find(param_nodes[i]);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    if (m_[i].empty()) {
      m_[i].assign(p.tensor.numel(), 0.0);
      v_[i].assign(p.tensor.numel(), 0.0);
    }
    for (std::size_t j = 0; j < p.tensor.numel(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      p.tensor[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

Metrics evaluate(const EncoderModel& model, const Dataset& dataset, std::size_t batch_size) {
  if (dataset.examples.empty()) throw DataError("evaluate: empty dataset");

  std::vector<std::int64_t> gold;
  std::vector<std::int64_t> pred;
  std::vector<double> scores;
  const std::size_t classes = dataset.num_classes;
  std::vector<std::vector<std::int64_t>> gold_tags;
  std::vector<std::vector<std::int64_t>> pred_tags;

  for (const TaskBatch& batch :
       make_batches(dataset, batch_size, model.config.max_positions)) {
    const Tensor logits = predict(model, batch);
    const Tensor probs = softmax_lastdim_value(logits);
    if (dataset.kind == TaskKind::sequence) {
      for (std::size_t b = 0; b < batch.batch_size; ++b) {
        const double* row = probs.data().data() + b * classes;
        gold.push_back(batch.labels[b]);
        pred.push_back(std::distance(row, std::max_element(row, row + classes)));
        scores.insert(scores.end(), row, row + classes);
      }
    } else {
      for (std::size_t b = 0; b < batch.batch_size; ++b) {
        std::vector<std::int64_t> grow, prow;
        for (std::size_t s = 0; s < batch.seq_len; ++s) {
          const std::size_t pos = b * batch.seq_len + s;
          if (batch.labels[pos] == kIgnoreLabel) continue;
          const double* row = probs.data().data() + pos * classes;
          const std::int64_t p = std::distance(row, std::max_element(row, row + classes));
          gold.push_back(batch.labels[pos]);
          pred.push_back(p);
          scores.insert(scores.end(), row, row + classes);
          grow.push_back(batch.labels[pos]);
          prow.push_back(p);
        }
        gold_tags.push_back(std::move(grow));
        pred_tags.push_back(std::move(prow));
      }
    }
  }

  const std::optional<std::size_t> exclude =
      dataset.kind == TaskKind::token ? std::optional<std::size_t>(0) : std::nullopt;
  Metrics m = compute_metrics(gold, pred, scores, classes, exclude);
  if (dataset.kind == TaskKind::token) m.span_f1 = span_f1_score(gold_tags, pred_tags);
  return m;
}

TrainResult train(EncoderModel& model, const Dataset& train_data, const Dataset& eval_data,
                  const TrainConfig& config, const Budget& budget) {
  if (train_data.examples.empty()) throw DataError("train: empty dataset");
  if (eval_data.examples.empty()) throw DataError("train: empty eval dataset");
  if (!(budget.value > 0.0)) throw ConfigError("train: budget value must be positive");
  if (config.batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (!(config.learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");

  const Dataset* working = &train_data;
  Dataset sampled;
  if (budget.kind == BudgetKind::samples_per_class) {
    sampled = sample_few_shot(
        train_data, {static_cast<std::size_t>(budget.value), config.seed});
    working = &sampled;
  }
  std::size_t epoch_cap = config.max_epochs;
  if (budget.kind == BudgetKind::epochs) {
    epoch_cap = std::min(epoch_cap, static_cast<std::size_t>(budget.value));
  }

  ForwardOptions train_opts;
  train_opts.training = true;
  train_opts.hidden_dropout = config.mode == TrainMode::full ? config.dropout : 0.0;

  TrainResult result;
  result.metric_of_record = config.metric_of_record;
  result.train_examples = working->examples.size();
  const TrainableCounts counts = count_trainable(model);
  result.trainable_params = counts.trainable;
  result.total_params = counts.total;

  const Clock::time_point start = Clock::now();
  double last_elapsed = -1.0;
  double loss_accum = 0.0;
  std::size_t loss_count = 0;

  auto record = [&](std::size_t step, double fallback_loss) {
    TrainCheckpoint cp;
    cp.step = step;
    cp.elapsed_seconds = seconds_since(start);
    if (cp.elapsed_seconds <= last_elapsed) cp.elapsed_seconds = last_elapsed + 1e-9;
    last_elapsed = cp.elapsed_seconds;
    cp.train_loss = loss_count > 0 ? loss_accum / static_cast<double>(loss_count) : fallback_loss;
    loss_accum = 0.0;
    loss_count = 0;
    cp.eval = evaluate(model, eval_data);
    result.checkpoints.push_back(std::move(cp));
  };

  std::vector<std::size_t> order(working->examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  // step-0 loss: forward over the first scheduled batch, no update
  {
    std::vector<std::size_t> first_order = order;
    Rng(Rng::mix(config.seed, 1)).shuffle(first_order);
    const std::size_t head = std::min(config.batch_size, first_order.size());
    const TaskBatch probe = make_batch(
        *working, std::span(first_order.data(), head), model.config.max_positions);
    record(0, loss_value(model, probe));
  }

  AdamOptimizer optimizer(config.learning_rate);
  std::size_t step = 0;
  bool stopped = false;
  for (std::size_t epoch = 0; epoch < epoch_cap && !stopped; ++epoch) {
    Rng(Rng::mix(config.seed, epoch + 1)).shuffle(order);
    for (std::size_t at = 0; at < order.size() && !stopped; at += config.batch_size) {
      if (budget.kind == BudgetKind::time_seconds && seconds_since(start) >= budget.value) {
        stopped = true;
        break;
      }
      const std::size_t len = std::min(config.batch_size, order.size() - at);
      const TaskBatch batch =
          make_batch(*working, std::span(order.data() + at, len), model.config.max_positions);

      ForwardOptions opts = train_opts;
      opts.dropout_seed = Rng::mix(config.seed, 0x1000 + step);
      ForwardGraph g;
      g.param_nodes = register_params(g.tape, model);
      g.out = build_graph(g.tape, model, g.param_nodes, batch, opts, true, true);
      const double loss = g.tape.value(g.out.loss)[0];
      if (!std::isfinite(loss)) {
        throw NumericError("train: non-finite loss at step " + std::to_string(step + 1) +
                           " (lr=" + std::to_string(config.learning_rate) + ")");
      }
      const GradMap grads = g.tape.backward(g.out.loss);
      optimizer.step(model, grads, g.param_nodes);
      ++step;
      loss_accum += loss;
      ++loss_count;
      if (config.eval_every > 0 && step % config.eval_every == 0) record(step, loss);
    }
  }
  result.steps = step;
  if (result.checkpoints.back().step != step) record(step, 0.0);
  result.elapsed_at_stop = result.checkpoints.back().elapsed_seconds;

  result.peak_index = 0;
  double best = result.checkpoints[0].eval.get(config.metric_of_record);
  for (std::size_t i = 1; i < result.checkpoints.size(); ++i) {
    const double v = result.checkpoints[i].eval.get(config.metric_of_record);
    if (better_metric(v, best)) {
      best = v;
      result.peak_index = i;
    }
  }
  result.time_to_peak = result.checkpoints[result.peak_index].elapsed_seconds;
  return result;
}

std::vector<SweepCell> run_budget_sweep(const ModelFactory& factory, const Dataset& train_data,
                                        const Dataset& eval_data,
                                        const std::vector<Budget>& budgets,
                                        const TrainConfig& config) {
  if (budgets.empty()) throw ConfigError("budget sweep: no budgets");
  for (std::size_t i = 1; i < budgets.size(); ++i) {
    if (budgets[i].kind != budgets[0].kind) {
      throw ConfigError("budget sweep: mixed budget kinds");
    }
    if (budgets[i].value < budgets[i - 1].value) {
      throw ConfigError("budget sweep: budgets must be sorted ascending");
    }
  }

  std::vector<SweepCell> cells;
  cells.reserve(budgets.size());
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    SweepCell cell;
    cell.index = i;
    cell.budget = budgets[i];
    cell.seed = Rng::mix(config.seed, i + 1);
    EncoderModel model = factory(cell.seed);
    TrainConfig cell_config = config;
    cell_config.seed = cell.seed;
    cell.result = train(model, train_data, eval_data, cell_config, budgets[i]);
    cells.push_back(std::move(cell));
  }
  return cells;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (const char c : text) {
    hash ^= static_cast<std::uint8_t>(c);
    hash *= 0x100000001b3ull;
  }
  return hash;
}

RankSweepResult sweep_lora_rank(const ModelConfig& config, const Dataset& train_data,
                                const Dataset& eval_data, const std::vector<std::size_t>& ranks,
                                std::size_t trials, const RankSearchSpace& space,
                                const TrainConfig& train_config, const Budget& budget,
                                const LoraConfig& base_lora) {
  if (trials < 1) throw ConfigError("rank sweep: trials must be >= 1");
  if (ranks.empty()) throw ConfigError("rank sweep: no ranks");
  if (std::find(ranks.begin(), ranks.end(), std::size_t{8}) == ranks.end()) {
    throw ConfigError("rank sweep: the r=8 baseline must be included");
  }

  RankSweepResult result;
  for (const std::size_t rank : ranks) {
    RankTrial best;
    bool have_best = false;
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng(Rng::mix(train_config.seed, fnv1a64("rank=" + std::to_string(rank) +
                                                  ";trial=" + std::to_string(t))));
      RankTrial trial;
      trial.rank = rank;
      trial.trial = t;
      trial.lora_dropout = space.dropouts[rng.uniform_int(space.dropouts.size())];
      trial.alpha = space.alphas[rng.uniform_int(space.alphas.size())];
      trial.learning_rate =
          std::exp(rng.uniform(std::log(space.lr_low), std::log(space.lr_high)));

      std::ostringstream key;
      key << "r=" << rank << ";d=" << trial.lora_dropout << ";a=" << trial.alpha
          << ";lr=" << trial.learning_rate;
      trial.config_hash = fnv1a64(key.str());

      EncoderModel model = build_model(config, train_config.seed);
      LoraConfig lora = base_lora;
      lora.rank = rank;
      lora.alpha = trial.alpha;
      lora.dropout = trial.lora_dropout;
      inject_lora(model, lora, rng.next_u64());

      TrainConfig cell = train_config;
      cell.mode = TrainMode::lora;
      cell.learning_rate = trial.learning_rate;
      cell.seed = Rng::mix(train_config.seed, trial.config_hash);
      const TrainResult run = train(model, train_data, eval_data, cell, budget);
      trial.metric = run.peak_metric();
      result.trials.push_back(trial);
      if (!have_best || better_metric(trial.metric, best.metric)) {
        best = trial;
        have_best = true;
      }
    }
    result.rows.push_back({rank, best, 0.0});
  }

  const auto baseline = std::find_if(result.rows.begin(), result.rows.end(),
                                     [](const RankSweepRow& r) { return r.rank == 8; });
  for (RankSweepRow& row : result.rows) {
    row.delta_vs_r8 = row.best.metric - baseline->best.metric;
  }
  return result;
}

}  // namespace peftlab
