#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "peftlab/checkpoint.hpp"
#include "peftlab/efficiency.hpp"
#include "peftlab/experiment.hpp"
#include "peftlab/harness.hpp"

namespace py = pybind11;
using namespace peftlab;

namespace {

py::dict counts_dict(const ParamCounts& c) {
  py::dict d;
  d["total"] = c.total;
  d["embeddings"] = c.embeddings;
  d["attention"] = c.attention;
  d["ffn"] = c.ffn;
  d["layernorm"] = c.layernorm;
  d["head"] = c.head;
  d["adapter"] = c.adapter;
  return d;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["accuracy"] = m.accuracy;
  d["f1_micro"] = m.f1_micro;
  d["f1_macro"] = m.f1_macro;
  d["auroc_macro"] = m.auroc_macro;
  d["auroc_binary"] = m.auroc_binary;
  d["span_f1"] = m.span_f1;
  d["per_class_f1"] = m.per_class_f1;
  d["auroc_skipped"] = m.auroc_skipped;
  return d;
}

HeadKind head_kind_from_string(const std::string& name) {
  if (name == "sequence") return HeadKind::sequence;
  if (name == "token") return HeadKind::token;
  throw ConfigError("head_kind must be 'sequence' or 'token'");
}

}  // namespace

PYBIND11_MODULE(peftlab, m) {
  m.doc() = "PEFT laboratory: LoRA/IA3 adapters on a small encoder, with budget "
            "training and efficiency accounting";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<BudgetError>(m, "BudgetError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<CohortError>(m, "CohortError", PyExc_ValueError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init([](std::size_t layers, std::size_t model_dim, std::size_t heads,
                       std::size_t ffn_dim, std::size_t vocab, std::size_t max_positions,
                       std::size_t num_labels, const std::string& head_kind) {
             ModelConfig c;
             c.layers = layers;
             c.model_dim = model_dim;
             c.heads = heads;
             c.ffn_dim = ffn_dim;
             c.vocab = vocab;
             c.max_positions = max_positions;
             c.num_labels = num_labels;
             c.head_kind = head_kind_from_string(head_kind);
             c.validate();
             return c;
           }),
           py::arg("layers") = 2, py::arg("model_dim") = 32, py::arg("heads") = 2,
           py::arg("ffn_dim") = 64, py::arg("vocab") = 100, py::arg("max_positions") = 64,
           py::arg("num_labels") = 2, py::arg("head_kind") = "sequence")
      .def_readwrite("layers", &ModelConfig::layers)
      .def_readwrite("model_dim", &ModelConfig::model_dim)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
      .def_readwrite("vocab", &ModelConfig::vocab)
      .def_readwrite("max_positions", &ModelConfig::max_positions)
      .def_readwrite("num_labels", &ModelConfig::num_labels);

  py::class_<LoraConfig>(m, "LoraConfig")
      .def(py::init([](std::size_t rank, double alpha, double dropout,
                       const std::vector<std::string>& targets) {
             LoraConfig c;
             c.rank = rank;
             c.alpha = alpha;
             c.dropout = dropout;
             c.targets.clear();
             for (const std::string& t : targets) c.targets.push_back(lora_target_from_name(t));
             return c;
           }),
           py::arg("rank") = 8, py::arg("alpha") = 8.0, py::arg("dropout") = 0.1,
           py::arg("targets") = std::vector<std::string>{"key", "value"})
      .def_readwrite("rank", &LoraConfig::rank)
      .def_readwrite("alpha", &LoraConfig::alpha)
      .def_readwrite("dropout", &LoraConfig::dropout)
      .def("scaling", &LoraConfig::scaling);

  py::class_<Ia3Config>(m, "Ia3Config")
      .def(py::init([](double dropout) {
             Ia3Config c;
             c.dropout = dropout;
             return c;
           }),
           py::arg("dropout") = 0.1)
      .def_readwrite("dropout", &Ia3Config::dropout);

  py::class_<EncoderModel>(m, "Model")
      .def_property_readonly("config", [](const EncoderModel& m2) { return m2.config; })
      .def("count_params", [](const EncoderModel& m2) { return counts_dict(count_params(m2)); })
      .def("count_trainable",
           [](const EncoderModel& m2) {
             const TrainableCounts c = count_trainable(m2);
             py::dict d;
             d["trainable"] = c.trainable;
             d["frozen"] = c.frozen;
             d["total"] = c.total;
             return d;
           })
      .def("has_adapter", [](const EncoderModel& m2) { return m2.adapter.has_value(); })
      .def("param_names", [](const EncoderModel& m2) {
        std::vector<std::string> names;
        for (const Param& p : m2.params) names.push_back(p.name);
        return names;
      });

  py::class_<Dataset>(m, "Dataset")
      .def("__len__", [](const Dataset& d) { return d.size(); })
      .def_property_readonly("num_classes", [](const Dataset& d) { return d.num_classes; })
      .def_property_readonly("vocab_size", [](const Dataset& d) { return d.vocab.size(); })
      .def("class_counts", &Dataset::class_counts);

  py::class_<FrozenSnapshot>(m, "FrozenSnapshot");

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init([](const std::string& mode, double learning_rate, std::size_t batch_size,
                       std::size_t max_epochs, std::size_t eval_every, std::uint64_t seed,
                       double dropout, const std::string& metric_of_record) {
             TrainConfig c;
             c.mode = train_mode_from_name(mode);
             c.learning_rate = learning_rate;
             c.batch_size = batch_size;
             c.max_epochs = max_epochs;
             c.eval_every = eval_every;
             c.seed = seed;
             c.dropout = dropout;
             c.metric_of_record = metric_of_record;
             return c;
           }),
           py::arg("mode") = "full", py::arg("learning_rate") = 3e-4,
           py::arg("batch_size") = 16, py::arg("max_epochs") = 5, py::arg("eval_every") = 50,
           py::arg("seed") = 0, py::arg("dropout") = 0.1,
           py::arg("metric_of_record") = "f1_macro");

  py::class_<Budget>(m, "Budget")
      .def(py::init([](const std::string& kind, double value) {
             return Budget{budget_kind_from_name(kind), value};
           }),
           py::arg("kind") = "epochs", py::arg("value") = 1.0);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("trainable_params", &TrainResult::trainable_params)
      .def_readonly("total_params", &TrainResult::total_params)
      .def_readonly("steps", &TrainResult::steps)
      .def_readonly("train_examples", &TrainResult::train_examples)
      .def_readonly("time_to_peak", &TrainResult::time_to_peak)
      .def_readonly("elapsed_at_stop", &TrainResult::elapsed_at_stop)
      .def_property_readonly("peak_step",
                             [](const TrainResult& r) { return r.peak().step; })
      .def("peak_metric", &TrainResult::peak_metric)
      .def("peak_metrics", [](const TrainResult& r) { return metrics_dict(r.peak().eval); })
      .def("checkpoints", [](const TrainResult& r) {
        py::list out;
        for (const TrainCheckpoint& cp : r.checkpoints) {
          py::dict d;
          d["step"] = cp.step;
          d["elapsed_seconds"] = cp.elapsed_seconds;
          d["train_loss"] = cp.train_loss;
          d["eval"] = metrics_dict(cp.eval);
          out.append(std::move(d));
        }
        return out;
      });

  m.def("count_params",
        [](const ModelConfig& c) { return counts_dict(count_params(c)); },
        py::arg("config"));
  m.def("build_model", &build_model, py::arg("config"), py::arg("seed") = 0);
  m.def("tier_config", &tier_config, py::arg("tier"));
  m.def("known_tiers", &known_tiers);

  m.def("inject_lora",
        [](EncoderModel& model, const LoraConfig& c, std::uint64_t seed) {
          inject_lora(model, c, seed);
        },
        py::arg("model"), py::arg("config") = LoraConfig{}, py::arg("seed") = 0);
  m.def("inject_ia3",
        [](EncoderModel& model, const Ia3Config& c) { inject_ia3(model, c); },
        py::arg("model"), py::arg("config") = Ia3Config{});
  m.def("merge_adapter", &merge_adapter, py::arg("model"));
  m.def("lora_param_count", &lora_param_count, py::arg("config"), py::arg("lora"));
  m.def("ia3_param_count", &ia3_param_count, py::arg("config"));
  m.def("snapshot_frozen", &snapshot_frozen, py::arg("model"));
  m.def("assert_frozen",
        [](const EncoderModel& model, const FrozenSnapshot& snap) {
          const FreezeReport r = assert_frozen(model, snap);
          py::dict d;
          d["ok"] = r.ok;
          d["violations"] = r.violations;
          return d;
        },
        py::arg("model"), py::arg("snapshot"));

  m.def("gen_sequence_task", &gen_sequence_task, py::arg("seed"), py::arg("n"),
        py::arg("num_classes"), py::arg("vocab_size"), py::arg("seq_len"), py::arg("noise"));
  m.def("gen_ner_task", &gen_ner_task, py::arg("seed"), py::arg("n"), py::arg("entity_types"),
        py::arg("seq_len"));
  m.def("load_jsonl",
        [](const std::string& path, const std::string& kind) {
          return load_jsonl(path, kind == "ner" || kind == "token" ? TaskKind::token
                                                                   : TaskKind::sequence,
                            VocabPolicy::build);
        },
        py::arg("path"), py::arg("kind") = "sequence");
  m.def("write_jsonl", &write_jsonl, py::arg("dataset"), py::arg("path"));
  m.def("sample_few_shot",
        [](const Dataset& d, std::size_t k, std::uint64_t seed) {
          return sample_few_shot(d, {k, seed});
        },
        py::arg("dataset"), py::arg("k_per_class"), py::arg("seed") = 0);

  m.def("model_config_for",
        [](const std::string& tier, const Dataset& d, std::size_t seq_len) {
          ModelConfig c = tier_config(tier);
          c.vocab = d.vocab.size();
          c.num_labels = d.num_classes;
          c.head_kind = head_kind_for(d.kind);
          c.max_positions = std::max(c.max_positions, seq_len + 1);
          return c;
        },
        py::arg("tier"), py::arg("dataset"), py::arg("seq_len") = 64);

  m.def("train",
        [](EncoderModel& model, const Dataset& train_data, const Dataset& eval_data,
           const TrainConfig& config, const Budget& budget) {
          return train(model, train_data, eval_data, config, budget);
        },
        py::arg("model"), py::arg("train_data"), py::arg("eval_data"),
        py::arg("config") = TrainConfig{}, py::arg("budget") = Budget{BudgetKind::epochs, 3});
  m.def("evaluate",
        [](const EncoderModel& model, const Dataset& d) { return metrics_dict(evaluate(model, d)); },
        py::arg("model"), py::arg("dataset"));
  m.def("predict_logits",
        [](const EncoderModel& model, const Dataset& d, std::size_t start, std::size_t count) {
          if (start >= d.size()) throw DataError("predict_logits: start beyond dataset");
          std::vector<std::size_t> idx;
          for (std::size_t i = start; i < std::min(start + count, d.size()); ++i) idx.push_back(i);
          const TaskBatch batch = make_batch(d, idx, model.config.max_positions);
          const Tensor logits = predict(model, batch);
          py::dict out;
          out["shape"] = logits.shape();
          out["data"] = std::vector<double>(logits.data().begin(), logits.data().end());
          return out;
        },
        py::arg("model"), py::arg("dataset"), py::arg("start") = 0, py::arg("count") = 8);

  m.def("save_model", &save_model, py::arg("model"), py::arg("path"));
  m.def("load_model", &load_model, py::arg("path"));
  m.def("save_adapter", &save_adapter, py::arg("model"), py::arg("path"));
  m.def("load_adapter", &load_adapter, py::arg("model"), py::arg("path"));

  m.def("estimate_vram_gib",
        [](double params, const std::string& precision) {
          return estimate_vram_gib(params, precision_from_name(precision));
        },
        py::arg("params"), py::arg("precision") = "fp32");
  m.def("estimate_flops",
        [](const ModelConfig& c, std::size_t tokens) { return estimate_flops(c, tokens); },
        py::arg("config"), py::arg("num_tokens") = 10);
  m.def("efficiency_index",
        [](const std::vector<std::tuple<std::string, double, double, double>>& cohort) {
          std::vector<RunStats> stats;
          for (const auto& [label, t, p, s] : cohort) stats.push_back({label, t, p, s});
          return efficiency_index(stats);
        },
        py::arg("cohort"));
  m.def("estimate_cost",
        [](double train_hours, double infer_hours, double train_rate, double infer_rate) {
          return estimate_cost(train_hours, infer_hours, {train_rate, infer_rate});
        },
        py::arg("train_hours"), py::arg("infer_hours"), py::arg("train_rate"),
        py::arg("infer_rate"));
  m.def("default_cost_rates", []() {
    const CostRates& r = default_cost_rates();
    return py::make_tuple(r.train_rate, r.infer_rate);
  });

  m.def("finite_diff_check_matmul_chain", [](std::uint64_t seed) {
    // quick self-test hook: gradient of sum((x @ w) * (x @ w)) wrt x
    Rng rng(seed);
    Tensor x({3, 4});
    Tensor w({4, 2});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.normal();
    auto f = [&](Tape& tape, Var xv) {
      Var wv = make_leaf(tape, w);
      Var y = matmul(xv, wv);
      return reduce_sum(elementwise_mul(y, y));
    };
    return finite_diff_check(f, x, 1e-5);
  });
}
