#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <limits>

#include "doctest.h"
#include "peftlab/harness.hpp"
#include "test_util.hpp"

using namespace peftlab;

namespace {

ModelConfig task_model(const Dataset& d, std::size_t seq_len) {
  ModelConfig c;
  c.layers = 2;
  c.model_dim = 32;
  c.heads = 2;
  c.ffn_dim = 64;
  c.vocab = d.vocab.size();
  c.max_positions = seq_len + 1;
  c.num_labels = d.num_classes;
  c.head_kind = head_kind_for(d.kind);
  return c;
}

}  // namespace

TEST_CASE("perfect predictions score 1.0 on both F1 averages") {
  const std::vector<std::int64_t> gold = {0, 1, 2, 1, 0};
  const Metrics m = compute_metrics(gold, gold, {}, 3);
  CHECK(m.f1_micro == 1.0);
  CHECK(m.f1_macro == 1.0);
  CHECK(m.accuracy == 1.0);
}

TEST_CASE("hand confusion matrix: binary positive-class F1 is 0.5") {
  const std::vector<std::int64_t> gold = {1, 1, 0, 0};
  const std::vector<std::int64_t> pred = {1, 0, 1, 0};
  const Metrics m = compute_metrics(gold, pred, {}, 2);
  // TP=1, FP=1, FN=1 for class 1
  CHECK(m.per_class_f1[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.accuracy == doctest::Approx(0.5));
}

TEST_CASE("hand AUROC from pairwise concordance") {
  const std::vector<double> scores = {0.9, 0.8, 0.3};
  const std::vector<std::uint8_t> pos = {1, 0, 1};
  // one concordant pair of two -> 0.5
  CHECK(rank_auroc(scores, pos) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("AUROC handles ties by midpoint and ignores monotone rescaling") {
  const std::vector<double> tied = {0.7, 0.7};
  const std::vector<std::uint8_t> pos = {1, 0};
  CHECK(rank_auroc(tied, pos) == doctest::Approx(0.5));

  Rng rng(3);
  std::vector<double> scores(40);
  std::vector<std::uint8_t> labels(40);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.uniform();
    labels[i] = rng.uniform() < 0.4 ? 1 : 0;
  }
  labels[0] = 1;
  labels[1] = 0;
  const double base = rank_auroc(scores, labels);
  std::vector<double> warped = scores;
  for (double& s : warped) s = std::exp(3.0 * s) + 11.0;  // strictly monotone
  CHECK(rank_auroc(warped, labels) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("one-vs-rest AUROC skips classes missing from gold") {
  const std::vector<std::int64_t> gold = {0, 0, 1};
  const std::vector<std::int64_t> pred = {0, 1, 1};
  const std::vector<double> scores = {0.8, 0.1, 0.1, 0.4, 0.5, 0.1,
                                      0.2, 0.7, 0.1};  // [n=3, classes=3]
  const Metrics m = compute_metrics(gold, pred, scores, 3);
  REQUIRE(m.auroc_skipped.size() == 1);
  CHECK(m.auroc_skipped[0] == 2);
  CHECK(std::isfinite(m.auroc_macro));
}

TEST_CASE("span extraction and span F1") {
  const std::vector<std::int64_t> tags = {1, 2, 0, 3, 0, 1};
  const std::vector<TagSpan> spans = bio_spans(tags);
  REQUIRE(spans.size() == 3);
  CHECK(spans[0] == TagSpan{0, 0, 2});
  CHECK(spans[1] == TagSpan{1, 3, 1});
  CHECK(spans[2] == TagSpan{0, 5, 1});

  // one exact match, one miss, one spurious -> P = 1/2, R = 1/2
  const std::vector<std::vector<std::int64_t>> gold = {{1, 2, 0, 3}};
  const std::vector<std::vector<std::int64_t>> pred = {{1, 2, 0, 1}};
  CHECK(span_f1_score(gold, pred) == doctest::Approx(0.5));
}

TEST_CASE("degenerate time budget records only the step-0 evaluation") {
  const Dataset train_set = gen_sequence_task(1, 64, 2, 24, 8, 0.0);
  const Dataset eval_set = gen_sequence_task(2, 32, 2, 24, 8, 0.0);
  EncoderModel model = build_model(task_model(train_set, 8), 1);
  TrainConfig cfg;
  const TrainResult r = train(model, train_set, eval_set, cfg, {BudgetKind::time_seconds, 1e-9});
  REQUIRE(r.checkpoints.size() == 1);
  CHECK(r.checkpoints[0].step == 0);
  CHECK(r.steps == 0);
}

TEST_CASE("fixed seeds give bitwise-identical loss trajectories") {
  const Dataset train_set = gen_sequence_task(5, 96, 2, 24, 8, 0.1);
  const Dataset eval_set = gen_sequence_task(6, 48, 2, 24, 8, 0.1);
  const ModelConfig c = task_model(train_set, 8);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.eval_every = 3;
  cfg.seed = 123;
  cfg.dropout = 0.1;

  auto run = [&]() {
    EncoderModel model = build_model(c, 9);
    return train(model, train_set, eval_set, cfg, {BudgetKind::epochs, 2});
  };
  const TrainResult a = run();
  const TrainResult b = run();
  REQUIRE(a.checkpoints.size() == b.checkpoints.size());
  for (std::size_t i = 0; i < a.checkpoints.size(); ++i) {
    CHECK(a.checkpoints[i].step == b.checkpoints[i].step);
    CHECK(a.checkpoints[i].train_loss == b.checkpoints[i].train_loss);
    CHECK(a.checkpoints[i].eval.f1_macro == b.checkpoints[i].eval.f1_macro);
    CHECK(a.checkpoints[i].eval.auroc_macro == b.checkpoints[i].eval.auroc_macro);
  }
}

TEST_CASE("epoch budgets run exactly ceil(n/batch)*epochs steps") {
  const Dataset train_set = gen_sequence_task(7, 50, 2, 24, 8, 0.0);
  const Dataset eval_set = gen_sequence_task(8, 20, 2, 24, 8, 0.0);
  EncoderModel model = build_model(task_model(train_set, 8), 1);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.max_epochs = 10;
  cfg.eval_every = 1000;
  const TrainResult r = train(model, train_set, eval_set, cfg, {BudgetKind::epochs, 3});
  CHECK(r.steps == 4 * 3);  // ceil(50/16) = 4 steps per epoch
  CHECK(r.checkpoints.front().step == 0);
  CHECK(r.checkpoints.back().step == 12);
}

TEST_CASE("sample budgets train on exactly k per class") {
  const Dataset train_set = gen_sequence_task(9, 200, 2, 24, 8, 0.0);
  const Dataset eval_set = gen_sequence_task(10, 40, 2, 24, 8, 0.0);
  EncoderModel model = build_model(task_model(train_set, 8), 1);
  TrainConfig cfg;
  cfg.eval_every = 1000;
  const TrainResult r =
      train(model, train_set, eval_set, cfg, {BudgetKind::samples_per_class, 8});
  CHECK(r.train_examples == 16);
}

TEST_CASE("time budgets stop within one step of the limit") {
  const Dataset train_set = gen_sequence_task(11, 400, 2, 24, 12, 0.1);
  const Dataset eval_set = gen_sequence_task(12, 64, 2, 24, 12, 0.1);
  EncoderModel model = build_model(task_model(train_set, 12), 1);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 1000;
  cfg.eval_every = 100000;
  const double budget = 0.4;
  const TrainResult r =
      train(model, train_set, eval_set, cfg, {BudgetKind::time_seconds, budget});
  CHECK(r.steps > 0);
  // generous single-step allowance at this scale
  CHECK(r.elapsed_at_stop <= budget + 1.0);
  // elapsed strictly increasing along checkpoints
  for (std::size_t i = 1; i < r.checkpoints.size(); ++i) {
    CHECK(r.checkpoints[i].elapsed_seconds > r.checkpoints[i - 1].elapsed_seconds);
  }
}

TEST_CASE("peak selection takes the earliest checkpoint on ties") {
  const Dataset train_set = gen_sequence_task(13, 64, 2, 24, 8, 0.0);
  const Dataset eval_set = gen_sequence_task(14, 32, 2, 24, 8, 0.0);
  EncoderModel model = build_model(task_model(train_set, 8), 2);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.eval_every = 2;
  const TrainResult r = train(model, train_set, eval_set, cfg, {BudgetKind::epochs, 4});
  const double peak = r.peak_metric();
  for (std::size_t i = 0; i < r.checkpoints.size(); ++i) {
    const double v = r.checkpoints[i].eval.get(cfg.metric_of_record);
    CHECK(v <= peak);
    if (v == peak) {
      CHECK(r.peak_index == i);  // first occurrence wins
      break;
    }
  }
  CHECK(r.time_to_peak == r.checkpoints[r.peak_index].elapsed_seconds);
}

TEST_CASE("training errors: empty data, bad budget, NaN loss") {
  const Dataset train_set = gen_sequence_task(15, 32, 2, 24, 8, 0.0);
  const Dataset eval_set = gen_sequence_task(16, 16, 2, 24, 8, 0.0);
  Dataset empty = train_set;
  empty.examples.clear();
  EncoderModel model = build_model(task_model(train_set, 8), 3);
  TrainConfig cfg;
  CHECK_THROWS_AS((void)train(model, empty, eval_set, cfg, {BudgetKind::epochs, 1}), DataError);
  CHECK_THROWS_AS((void)train(model, train_set, eval_set, cfg, {BudgetKind::epochs, 0.0}),
                  ConfigError);

  TrainConfig hot = cfg;
  hot.eval_every = 100000;
  EncoderModel doomed = build_model(task_model(train_set, 8), 3);
  doomed.param("head.weight").tensor[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS((void)train(doomed, train_set, eval_set, hot, {BudgetKind::epochs, 1}),
                       doctest::Contains("non-finite loss"), NumericError);
}

TEST_CASE("full fine-tuning solves the desk-scale task") {
  const Dataset train_set = gen_sequence_task(21, 256, 2, 32, 12, 0.1);
  const Dataset eval_set = gen_sequence_task(22, 128, 2, 32, 12, 0.1);
  EncoderModel model = build_model(task_model(train_set, 12), 5);
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.max_epochs = 5;
  cfg.eval_every = 16;
  cfg.seed = 3;
  const TrainResult r = train(model, train_set, eval_set, cfg, {BudgetKind::epochs, 5});
  CHECK(r.peak_metric() >= 0.9);
}

TEST_CASE("evaluate is pure") {
  const Dataset eval_set = gen_sequence_task(23, 64, 2, 24, 8, 0.2);
  const EncoderModel model = build_model(task_model(eval_set, 8), 7);
  const Metrics a = evaluate(model, eval_set);
  const Metrics b = evaluate(model, eval_set);
  CHECK(a.f1_macro == b.f1_macro);
  CHECK(a.auroc_macro == b.auroc_macro);
  CHECK(a.accuracy == b.accuracy);
  CHECK_THROWS_AS((void)evaluate(model, Dataset{}), DataError);
}

TEST_CASE("budget sweeps produce one row per budget with fresh models") {
  const Dataset train_set = gen_sequence_task(25, 2 * 40, 2, 24, 8, 0.0);
  const Dataset eval_set = gen_sequence_task(26, 32, 2, 24, 8, 0.0);
  const ModelConfig c = task_model(train_set, 8);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.max_epochs = 1;
  cfg.eval_every = 1000;

  std::vector<Budget> ladder;
  for (std::size_t k : few_shot_ladder(train_set)) {
    ladder.push_back({BudgetKind::samples_per_class, static_cast<double>(k)});
  }
  REQUIRE(ladder.size() == 3);  // 8, 16, 32 at 40 per class

  ModelFactory factory = [&](std::uint64_t seed) { return build_model(c, seed); };
  const std::vector<SweepCell> cells =
      run_budget_sweep(factory, train_set, eval_set, ladder, cfg);
  REQUIRE(cells.size() == 3);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    CHECK(cells[i].result.train_examples == 2 * static_cast<std::size_t>(ladder[i].value));
  }

  std::vector<Budget> unsorted = {{BudgetKind::epochs, 3}, {BudgetKind::epochs, 1}};
  CHECK_THROWS_AS((void)run_budget_sweep(factory, train_set, eval_set, unsorted, cfg),
                  ConfigError);
}

TEST_CASE("rank sweep is reproducible and zero-delta at the baseline") {
  const Dataset train_set = gen_sequence_task(27, 64, 2, 24, 8, 0.0);
  const Dataset eval_set = gen_sequence_task(28, 32, 2, 24, 8, 0.0);
  const ModelConfig c = task_model(train_set, 8);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.max_epochs = 1;
  cfg.eval_every = 1000;
  cfg.seed = 5;

  const std::vector<std::size_t> ranks = {8, 16};
  const RankSweepResult a = sweep_lora_rank(c, train_set, eval_set, ranks, 2,
                                            RankSearchSpace{}, cfg, {BudgetKind::epochs, 1});
  const RankSweepResult b = sweep_lora_rank(c, train_set, eval_set, ranks, 2,
                                            RankSearchSpace{}, cfg, {BudgetKind::epochs, 1});
  REQUIRE(a.rows.size() == 2);
  CHECK(a.rows[0].rank == 8);
  CHECK(a.rows[0].delta_vs_r8 == 0.0);
  CHECK(a.rows[0].best.config_hash == b.rows[0].best.config_hash);
  CHECK(a.rows[1].best.config_hash == b.rows[1].best.config_hash);
  CHECK(a.rows[1].best.metric == b.rows[1].best.metric);
  // the searched hyperparameters come from the declared space
  for (const RankTrial& t : a.trials) {
    CHECK((t.lora_dropout == 0.1 || t.lora_dropout == 0.3 || t.lora_dropout == 0.5));
    CHECK((t.alpha == 0.3 || t.alpha == 0.5 || t.alpha == 1.0));
    CHECK(t.learning_rate >= 1e-5);
    CHECK(t.learning_rate <= 1e-3);
  }

  CHECK_THROWS_AS((void)sweep_lora_rank(c, train_set, eval_set, {16, 32}, 1, RankSearchSpace{},
                                        cfg, {BudgetKind::epochs, 1}),
                  ConfigError);
  CHECK_THROWS_AS((void)sweep_lora_rank(c, train_set, eval_set, ranks, 0, RankSearchSpace{},
                                        cfg, {BudgetKind::epochs, 1}),
                  ConfigError);
}
