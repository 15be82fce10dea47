#include "peftlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "peftlab/svg.hpp"

namespace peftlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

json json_num(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

double num_from(const json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out << content;
  }
  fs::rename(tmp, path);
}

bool valid_name(const std::string& name) {
  if (name.empty()) return false;
  for (char c : name) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
  }
  return true;
}

[[noreturn]] void schema_fail(const std::string& path, const std::string& what) {
  throw SchemaError("spec: " + path + ": " + what);
}

}  // namespace

ModelConfig tier_config(const std::string& tier) {
  ModelConfig c;
  // desk tiers: same layer/width ratios as the reference family, laptop sized
  if (tier == "tiny") {
    c.layers = 2; c.model_dim = 32; c.heads = 2; c.ffn_dim = 64; c.max_positions = 64;
  } else if (tier == "mobile") {
    c.layers = 4; c.model_dim = 32; c.heads = 2; c.ffn_dim = 64; c.max_positions = 64;
  } else if (tier == "distil") {
    c.layers = 3; c.model_dim = 64; c.heads = 4; c.ffn_dim = 128; c.max_positions = 64;
  } else if (tier == "base") {
    c.layers = 6; c.model_dim = 64; c.heads = 4; c.ffn_dim = 128; c.max_positions = 64;
  } else if (tier == "wide") {
    // wide enough for the full LoRA rank ladder (r up to 128 needs d >= 128)
    c.layers = 2; c.model_dim = 128; c.heads = 4; c.ffn_dim = 256; c.max_positions = 64;
  } else if (tier == "tinybert-ref") {
    c.layers = 4; c.model_dim = 312; c.heads = 12; c.ffn_dim = 1200;
    c.vocab = 30522; c.max_positions = 512;
  } else if (tier == "distilbert-ref") {
    c.layers = 6; c.model_dim = 768; c.heads = 12; c.ffn_dim = 3072;
    c.vocab = 30522; c.max_positions = 512;
  } else if (tier == "bert-ref") {
    c.layers = 12; c.model_dim = 768; c.heads = 12; c.ffn_dim = 3072;
    c.vocab = 30522; c.max_positions = 512;
  } else {
    throw ConfigError("unknown tier '" + tier + "' (known: tiny, mobile, distil, base, "
                      "wide, tinybert-ref, distilbert-ref, bert-ref)");
  }
  return c;
}

std::vector<std::string> known_tiers() {
  return {"tiny", "mobile", "distil", "base", "wide", "tinybert-ref", "distilbert-ref", "bert-ref"};
}

TaskData build_task(const TaskSpec& spec) {
  TaskData data;
  if (!spec.train_jsonl.empty()) {
    if (spec.eval_jsonl.empty()) {
      throw SchemaError("spec: task.eval_jsonl is required when task.train_jsonl is set");
    }
    data.train = load_jsonl(spec.train_jsonl, spec.kind, VocabPolicy::build);
    data.eval = load_jsonl(spec.eval_jsonl, spec.kind, VocabPolicy::reuse, &data.train.vocab,
                           data.train.num_classes);
    return data;
  }
  if (spec.kind == TaskKind::sequence) {
    data.train = gen_sequence_task(spec.seed, spec.train_examples, spec.classes, spec.vocab_size,
                                   spec.seq_len, spec.noise);
    data.eval = gen_sequence_task(Rng::mix(spec.seed, 0xe7a1ull), spec.eval_examples,
                                  spec.classes, spec.vocab_size, spec.seq_len, spec.noise);
  } else {
    data.train = gen_ner_task(spec.seed, spec.train_examples, spec.entity_types, spec.seq_len);
    data.eval = gen_ner_task(Rng::mix(spec.seed, 0xe7a1ull), spec.eval_examples,
                             spec.entity_types, spec.seq_len);
  }
  return data;
}

ExperimentSpec spec_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("spec: top level must be a JSON object");
  static const std::vector<std::string> known = {
      "name", "seeds", "modes", "models", "task", "budgets",
      "train", "lora", "ia3", "output_dir", "jobs"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      schema_fail(key, "unknown field");
    }
  }

  ExperimentSpec spec;
  spec.name = j.value("name", spec.name);
  if (!valid_name(spec.name)) schema_fail("name", "must match [A-Za-z0-9_-]+");

  if (j.contains("seeds")) {
    spec.seeds.clear();
    if (!j["seeds"].is_array() || j["seeds"].empty()) schema_fail("seeds", "non-empty array");
    for (const json& s : j["seeds"]) spec.seeds.push_back(s.get<std::uint64_t>());
  }
  if (j.contains("modes")) {
    spec.modes.clear();
    if (!j["modes"].is_array() || j["modes"].empty()) schema_fail("modes", "non-empty array");
    for (const json& m : j["modes"]) {
      try {
        spec.modes.push_back(train_mode_from_name(m.get<std::string>()));
      } catch (const ConfigError& e) {
        schema_fail("modes", e.what());
      }
    }
  }

  if (!j.contains("models") || !j["models"].is_array() || j["models"].empty()) {
    schema_fail("models", "required non-empty array");
  }
  for (std::size_t i = 0; i < j["models"].size(); ++i) {
    const json& m = j["models"][i];
    const std::string path = "models[" + std::to_string(i) + "]";
    if (!m.is_object()) schema_fail(path, "must be an object");
    if (!m.contains("name")) schema_fail(path + ".name", "required");
    const std::string name = m["name"].get<std::string>();
    if (!valid_name(name)) schema_fail(path + ".name", "must match [A-Za-z0-9_-]+");
    ModelConfig config;
    if (m.contains("tier")) {
      try {
        config = tier_config(m["tier"].get<std::string>());
      } catch (const ConfigError& e) {
        schema_fail(path + ".tier", e.what());
      }
    } else {
      for (const char* field : {"layers", "model_dim", "heads", "ffn_dim"}) {
        if (!m.contains(field)) schema_fail(path + "." + field, "required without a tier");
      }
      config.layers = m["layers"].get<std::size_t>();
      config.model_dim = m["model_dim"].get<std::size_t>();
      config.heads = m["heads"].get<std::size_t>();
      config.ffn_dim = m["ffn_dim"].get<std::size_t>();
      config.max_positions = m.value("max_positions", std::size_t{64});
    }
    spec.models.emplace_back(name, config);
  }

  if (j.contains("task")) {
    const json& t = j["task"];
    const std::string kind = t.value("kind", "sequence");
    if (kind == "sequence") spec.task.kind = TaskKind::sequence;
    else if (kind == "ner" || kind == "token") spec.task.kind = TaskKind::token;
    else schema_fail("task.kind", "must be 'sequence' or 'ner'");
    spec.task.classes = t.value("classes", spec.task.classes);
    spec.task.entity_types = t.value("entity_types", spec.task.entity_types);
    spec.task.train_examples = t.value("train", spec.task.train_examples);
    spec.task.eval_examples = t.value("eval", spec.task.eval_examples);
    spec.task.vocab_size = t.value("vocab", spec.task.vocab_size);
    spec.task.seq_len = t.value("seq_len", spec.task.seq_len);
    spec.task.noise = t.value("noise", spec.task.noise);
    spec.task.seed = t.value("seed", spec.task.seed);
    spec.task.train_jsonl = t.value("train_jsonl", std::string());
    spec.task.eval_jsonl = t.value("eval_jsonl", std::string());
  }

  if (j.contains("budgets")) {
    spec.budgets.clear();
    if (!j["budgets"].is_array() || j["budgets"].empty()) schema_fail("budgets", "non-empty array");
    for (std::size_t i = 0; i < j["budgets"].size(); ++i) {
      const json& b = j["budgets"][i];
      const std::string path = "budgets[" + std::to_string(i) + "]";
      if (!b.contains("kind") || !b.contains("value")) schema_fail(path, "needs kind and value");
      Budget budget;
      try {
        budget.kind = budget_kind_from_name(b["kind"].get<std::string>());
      } catch (const ConfigError& e) {
        schema_fail(path + ".kind", e.what());
      }
      budget.value = b["value"].get<double>();
      if (!(budget.value > 0.0)) schema_fail(path + ".value", "must be positive");
      spec.budgets.push_back(budget);
    }
  }

  if (j.contains("train")) {
    const json& t = j["train"];
    spec.train.learning_rate = t.value("learning_rate", spec.train.learning_rate);
    spec.train.batch_size = t.value("batch_size", spec.train.batch_size);
    spec.train.max_epochs = t.value("max_epochs", spec.train.max_epochs);
    spec.train.eval_every = t.value("eval_every", spec.train.eval_every);
    spec.train.dropout = t.value("dropout", spec.train.dropout);
    spec.train.metric_of_record = t.value("metric_of_record", spec.train.metric_of_record);
    if (!(spec.train.learning_rate > 0.0)) schema_fail("train.learning_rate", "must be positive");
  }
  if (j.contains("lora")) {
    const json& l = j["lora"];
    spec.lora.rank = l.value("rank", spec.lora.rank);
    spec.lora.alpha = l.value("alpha", spec.lora.alpha);
    spec.lora.dropout = l.value("dropout", spec.lora.dropout);
    if (l.contains("targets")) {
      spec.lora.targets.clear();
      for (const json& t : l["targets"]) {
        try {
          spec.lora.targets.push_back(lora_target_from_name(t.get<std::string>()));
        } catch (const ConfigError& e) {
          schema_fail("lora.targets", e.what());
        }
      }
    }
    spec.lora.layers = l.value("layers", spec.lora.layers);
  }
  if (j.contains("ia3")) {
    spec.ia3.dropout = j["ia3"].value("dropout", spec.ia3.dropout);
  }

  spec.output_dir = j.value("output_dir", spec.output_dir);
  spec.jobs = j.value("jobs", spec.jobs);
  if (spec.jobs == 0) schema_fail("jobs", "must be >= 1");
  return spec;
}

ExperimentSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("spec: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError("spec: " + path + " is not valid JSON: " + e.what());
  }
  ExperimentSpec spec = spec_from_json(j);
  if (const char* out = std::getenv("PEFTLAB_OUT"); out != nullptr && *out != '\0') {
    spec.output_dir = out;
  }
  if (const char* jobs = std::getenv("PEFTLAB_JOBS"); jobs != nullptr && *jobs != '\0') {
    spec.jobs = static_cast<std::size_t>(std::strtoull(jobs, nullptr, 10));
    if (spec.jobs == 0) throw SchemaError("spec: PEFTLAB_JOBS must be >= 1");
  }
  return spec;
}

json spec_to_json(const ExperimentSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["seeds"] = spec.seeds;
  json modes = json::array();
  for (TrainMode m : spec.modes) modes.push_back(train_mode_name(m));
  j["modes"] = std::move(modes);
  json models = json::array();
  for (const auto& [name, config] : spec.models) {
    json m;
    m["name"] = name;
    m["layers"] = config.layers;
    m["model_dim"] = config.model_dim;
    m["heads"] = config.heads;
    m["ffn_dim"] = config.ffn_dim;
    m["max_positions"] = config.max_positions;
    models.push_back(std::move(m));
  }
  j["models"] = std::move(models);
  json task;
  task["kind"] = spec.task.kind == TaskKind::sequence ? "sequence" : "ner";
  task["classes"] = spec.task.classes;
  task["entity_types"] = spec.task.entity_types;
  task["train"] = spec.task.train_examples;
  task["eval"] = spec.task.eval_examples;
  task["vocab"] = spec.task.vocab_size;
  task["seq_len"] = spec.task.seq_len;
  task["noise"] = spec.task.noise;
  task["seed"] = spec.task.seed;
  if (!spec.task.train_jsonl.empty()) task["train_jsonl"] = spec.task.train_jsonl;
  if (!spec.task.eval_jsonl.empty()) task["eval_jsonl"] = spec.task.eval_jsonl;
  j["task"] = std::move(task);
  json budgets = json::array();
  for (const Budget& b : spec.budgets) {
    budgets.push_back({{"kind", budget_kind_name(b.kind)}, {"value", b.value}});
  }
  j["budgets"] = std::move(budgets);
  j["train"] = {{"learning_rate", spec.train.learning_rate},
                {"batch_size", spec.train.batch_size},
                {"max_epochs", spec.train.max_epochs},
                {"eval_every", spec.train.eval_every},
                {"dropout", spec.train.dropout},
                {"metric_of_record", spec.train.metric_of_record}};
  json targets = json::array();
  for (LoraTarget t : spec.lora.targets) targets.push_back(lora_target_name(t));
  j["lora"] = {{"rank", spec.lora.rank},
               {"alpha", spec.lora.alpha},
               {"dropout", spec.lora.dropout},
               {"targets", std::move(targets)},
               {"layers", spec.lora.layers}};
  j["ia3"] = {{"dropout", spec.ia3.dropout}};
  j["output_dir"] = spec.output_dir;
  j["jobs"] = spec.jobs;
  return j;
}

std::uint64_t spec_hash(const ExperimentSpec& spec) {
  json j = spec_to_json(spec);
  j.erase("output_dir");  // environment may override these two
  j.erase("jobs");
  return fnv1a64(j.dump());
}

std::vector<MatrixCell> make_matrix(const ExperimentSpec& spec, const TaskData& task) {
  std::vector<MatrixCell> cells;
  std::size_t index = 0;
  for (const auto& [name, base_config] : spec.models) {
    ModelConfig config = base_config;
    config.vocab = task.train.vocab.size();
    config.num_labels = task.train.num_classes;
    config.head_kind = head_kind_for(task.train.kind);
    // room for CLS on generated fixed-length tasks
    config.max_positions = std::max(config.max_positions, spec.task.seq_len + 1);
    config.validate();
    for (TrainMode mode : spec.modes) {
      for (const Budget& budget : spec.budgets) {
        for (std::uint64_t seed : spec.seeds) {
          MatrixCell cell;
          cell.model_name = name;
          cell.config = config;
          cell.mode = mode;
          cell.budget = budget;
          cell.index = index;
          cell.seed = Rng::mix(seed, index);
          std::ostringstream id;
          id << name << "__" << train_mode_name(mode) << "__" << budget_kind_name(budget.kind)
             << "-" << fmt_num(budget.value) << "__s" << seed;
          cell.id = id.str();
          cells.push_back(std::move(cell));
          ++index;
        }
      }
    }
  }
  return cells;
}

std::string matrix_csv_header() {
  return "cell_id,model,mode,budget_kind,budget_value,seed,trainable_params,total_params,"
         "train_examples,steps,peak_step,f1_micro,f1_macro,accuracy,auroc_macro,auroc_binary,"
         "span_f1,peak_metric,final_train_loss,time_to_peak_s,elapsed_s";
}

std::string cell_row_csv(const CellRow& r) {
  std::ostringstream os;
  os << r.cell_id << ',' << r.model << ',' << r.mode << ',' << r.budget_kind << ','
     << fmt_num(r.budget_value) << ',' << r.seed << ',' << r.trainable_params << ','
     << r.total_params << ',' << r.train_examples << ',' << r.steps << ',' << r.peak_step << ','
     << fmt_num(r.f1_micro) << ',' << fmt_num(r.f1_macro) << ',' << fmt_num(r.accuracy) << ','
     << fmt_num(r.auroc_macro) << ',' << fmt_num(r.auroc_binary) << ',' << fmt_num(r.span_f1)
     << ',' << fmt_num(r.peak_metric) << ',' << fmt_num(r.final_train_loss) << ','
     << fmt_num(r.time_to_peak) << ',' << fmt_num(r.elapsed);
  return os.str();
}

CellRow row_from_result(const MatrixCell& cell, const TrainResult& result) {
  CellRow row;
  row.cell_id = cell.id;
  row.model = cell.model_name;
  row.mode = train_mode_name(cell.mode);
  row.budget_kind = budget_kind_name(cell.budget.kind);
  row.budget_value = cell.budget.value;
  row.seed = cell.seed;
  row.trainable_params = result.trainable_params;
  row.total_params = result.total_params;
  row.train_examples = result.train_examples;
  row.steps = result.steps;
  const TrainCheckpoint& peak = result.peak();
  row.peak_step = peak.step;
  row.f1_micro = peak.eval.f1_micro;
  row.f1_macro = peak.eval.f1_macro;
  row.accuracy = peak.eval.accuracy;
  row.auroc_macro = peak.eval.auroc_macro;
  row.auroc_binary = peak.eval.auroc_binary;
  row.span_f1 = peak.eval.span_f1;
  row.peak_metric = result.peak_metric();
  row.final_train_loss = result.checkpoints.back().train_loss;
  row.time_to_peak = result.time_to_peak;
  row.elapsed = result.elapsed_at_stop;
  return row;
}

namespace {

json row_to_json(const CellRow& r) {
  json j;
  j["cell_id"] = r.cell_id;
  j["model"] = r.model;
  j["mode"] = r.mode;
  j["budget_kind"] = r.budget_kind;
  j["budget_value"] = r.budget_value;
  j["seed"] = r.seed;
  j["trainable_params"] = r.trainable_params;
  j["total_params"] = r.total_params;
  j["train_examples"] = r.train_examples;
  j["steps"] = r.steps;
  j["peak_step"] = r.peak_step;
  j["f1_micro"] = json_num(r.f1_micro);
  j["f1_macro"] = json_num(r.f1_macro);
  j["accuracy"] = json_num(r.accuracy);
  j["auroc_macro"] = json_num(r.auroc_macro);
  j["auroc_binary"] = json_num(r.auroc_binary);
  j["span_f1"] = json_num(r.span_f1);
  j["peak_metric"] = json_num(r.peak_metric);
  j["final_train_loss"] = json_num(r.final_train_loss);
  j["time_to_peak_s"] = r.time_to_peak;
  j["elapsed_s"] = r.elapsed;
  return j;
}

CellRow row_from_json(const json& j) {
  CellRow r;
  r.cell_id = j.at("cell_id").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  r.budget_kind = j.at("budget_kind").get<std::string>();
  r.budget_value = j.at("budget_value").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.trainable_params = j.at("trainable_params").get<std::size_t>();
  r.total_params = j.at("total_params").get<std::size_t>();
  r.train_examples = j.at("train_examples").get<std::size_t>();
  r.steps = j.at("steps").get<std::size_t>();
  r.peak_step = j.at("peak_step").get<std::size_t>();
  r.f1_micro = num_from(j.at("f1_micro"));
  r.f1_macro = num_from(j.at("f1_macro"));
  r.accuracy = num_from(j.at("accuracy"));
  r.auroc_macro = num_from(j.at("auroc_macro"));
  r.auroc_binary = num_from(j.at("auroc_binary"));
  r.span_f1 = num_from(j.at("span_f1"));
  r.peak_metric = num_from(j.at("peak_metric"));
  r.final_train_loss = num_from(j.at("final_train_loss"));
  r.time_to_peak = j.at("time_to_peak_s").get<double>();
  r.elapsed = j.at("elapsed_s").get<double>();
  return r;
}

json trace_json(const MatrixCell& cell, const TrainResult& result, std::uint64_t hash) {
  json j = cell_trace_json(row_from_result(cell, result), result);
  j["spec_hash"] = hex64(hash);
  return j;
}

}  // namespace

json cell_trace_json(const CellRow& row, const TrainResult& result) {
  json j;
  j["row"] = row_to_json(row);
  json cps = json::array();
  for (const TrainCheckpoint& cp : result.checkpoints) {
    json c;
    c["step"] = cp.step;
    c["elapsed_s"] = cp.elapsed_seconds;
    c["train_loss"] = json_num(cp.train_loss);
    c["f1_micro"] = json_num(cp.eval.f1_micro);
    c["f1_macro"] = json_num(cp.eval.f1_macro);
    c["accuracy"] = json_num(cp.eval.accuracy);
    c["auroc_macro"] = json_num(cp.eval.auroc_macro);
    c["auroc_binary"] = json_num(cp.eval.auroc_binary);
    c["span_f1"] = json_num(cp.eval.span_f1);
    cps.push_back(std::move(c));
  }
  j["checkpoints"] = std::move(cps);
  return j;
}

RunBundle cmd_run(const ExperimentSpec& spec) {
  const TaskData task = build_task(spec.task);
  const std::vector<MatrixCell> cells = make_matrix(spec, task);

  RunBundle bundle;
  bundle.dir = fs::path(spec.output_dir);
  fs::create_directories(bundle.dir / "traces");

  const std::uint64_t hash = spec_hash(spec);
  const fs::path hash_path = bundle.dir / "spec.hash";
  if (fs::exists(hash_path)) {
    std::ifstream in(hash_path);
    std::string existing;
    in >> existing;
    if (existing != hex64(hash)) {
      throw SchemaError("bundle " + bundle.dir.string() +
                        " was created from a different spec (hash " + existing + " vs " +
                        hex64(hash) + "); refusing to merge");
    }
  } else {
    write_file_atomic(hash_path, hex64(hash) + "\n");
  }
  write_file_atomic(bundle.dir / "spec.json", spec_to_json(spec).dump(2) + "\n");

  std::vector<std::optional<CellRow>> results(cells.size());
  std::mutex mu;
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const MatrixCell& cell = cells[i];
      const fs::path trace_path = bundle.dir / "traces" / (cell.id + ".json");
      if (fs::exists(trace_path)) {
        try {
          std::ifstream in(trace_path);
          const json j = json::parse(in);
          CellRow row = row_from_json(j.at("row"));
          std::lock_guard<std::mutex> lock(mu);
          results[i] = std::move(row);
          bundle.reused.push_back(cell.id);
          continue;
        } catch (const std::exception&) {
          // fall through and recompute a corrupt trace
        }
      }
      try {
        EncoderModel model = build_model(cell.config, cell.seed);
        if (cell.mode == TrainMode::lora) {
          inject_lora(model, spec.lora, Rng::mix(cell.seed, 0xadaull));
        } else if (cell.mode == TrainMode::ia3) {
          inject_ia3(model, spec.ia3);
        }
        TrainConfig config = spec.train;
        config.mode = cell.mode;
        config.seed = cell.seed;
        const TrainResult result = train(model, task.train, task.eval, config, cell.budget);
        write_file_atomic(trace_path, trace_json(cell, result, hash).dump(2) + "\n");
        CellRow row = row_from_result(cell, result);
        std::lock_guard<std::mutex> lock(mu);
        results[i] = std::move(row);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        bundle.failed.emplace_back(cell.id, e.what());
      }
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(spec.jobs, cells.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  std::ostringstream csv;
  csv << matrix_csv_header() << "\n";
  for (const auto& row : results) {
    if (row.has_value()) {
      bundle.rows.push_back(*row);
      csv << cell_row_csv(*row) << "\n";
    }
  }
  write_file_atomic(bundle.dir / "matrix.csv", csv.str());

  // efficiency cohort over (model, mode) aggregates
  json summary;
  summary["name"] = spec.name;
  summary["spec_hash"] = hex64(hash);
  summary["cells"] = cells.size();
  summary["completed"] = bundle.rows.size();
  json failed = json::array();
  for (const auto& [id, what] : bundle.failed) failed.push_back({{"cell", id}, {"error", what}});
  summary["failed"] = std::move(failed);

  std::map<std::string, std::vector<const CellRow*>> groups;
  for (const CellRow& row : bundle.rows) groups[row.model + "/" + row.mode].push_back(&row);
  if (groups.size() >= 2) {
    std::vector<RunStats> cohort;
    std::map<std::string, double> metric_by_label;
    for (const auto& [label, rows] : groups) {
      std::vector<double> times, metrics;
      for (const CellRow* r : rows) {
        times.push_back(r->time_to_peak);
        metrics.push_back(r->peak_metric);
      }
      cohort.push_back({label, median(times), static_cast<double>(rows.front()->trainable_params),
                        static_cast<double>(rows.front()->total_params)});
      metric_by_label[label] = median(metrics);
    }
    try {
      const std::map<std::string, double> eff = efficiency_index(cohort);
      json rows = json::array();
      for (const auto& [label, value] : eff) {
        rows.push_back({{"label", label},
                        {"efficiency", value},
                        {"peak_metric_median", metric_by_label.at(label)}});
      }
      summary["efficiency"] = std::move(rows);
    } catch (const CohortError& e) {
      summary["efficiency_note"] = e.what();
    }
  } else {
    summary["efficiency_note"] = "cohort needs at least two (model, mode) groups";
  }
  write_file_atomic(bundle.dir / "summary.json", summary.dump(2) + "\n");
  return bundle;
}

std::vector<AccountingRow> cmd_accounting(const std::vector<std::string>& tiers,
                                          const AccountingOptions& options) {
  std::vector<AccountingRow> rows;
  for (const std::string& tier : tiers) {
    const ModelConfig config = tier_config(tier);  // ConfigError on unknown tier
    AccountingRow row;
    row.tier = tier;
    row.params = static_cast<double>(count_params(config).total);
    row.vram_gib = estimate_vram_gib(row.params, options.precision);
    row.flops = estimate_flops(config, options.num_tokens);
    row.cost = estimate_cost(options.train_hours, options.infer_hours, options.rates);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string accounting_csv(const std::vector<AccountingRow>& rows) {
  std::ostringstream os;
  os << "tier,params,vram_gib,flops,cost\n";
  for (const AccountingRow& r : rows) {
    os << r.tier << ',' << fmt_num(r.params) << ',' << fmt_num(r.vram_gib) << ','
       << fmt_num(r.flops) << ',' << fmt_num(r.cost) << "\n";
  }
  return os.str();
}

FigureKind figure_kind_from_name(const std::string& name) {
  if (name == "params_vs_performance") return FigureKind::params_vs_performance;
  if (name == "budget_curves") return FigureKind::budget_curves;
  if (name == "efficiency_scatter") return FigureKind::efficiency_scatter;
  if (name == "rank_deltas") return FigureKind::rank_deltas;
  throw ConfigError("plot: unknown figure kind '" + name + "'");
}

const char* figure_kind_name(FigureKind kind) {
  switch (kind) {
    case FigureKind::params_vs_performance: return "params_vs_performance";
    case FigureKind::budget_curves: return "budget_curves";
    case FigureKind::efficiency_scatter: return "efficiency_scatter";
    case FigureKind::rank_deltas: return "rank_deltas";
  }
  return "unknown";
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median: empty input");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const std::string& figure) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw ReportError("plot: " + figure + " requires column '" + name + "'");
    }
    return static_cast<std::size_t>(std::distance(header.begin(), it));
  }
};

CsvTable read_csv(const fs::path& path, const std::string& figure) {
  std::ifstream in(path);
  if (!in) {
    throw ReportError("plot: " + figure + " requires " + path.string() +
                      " (run the producing command first)");
  }
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (first) {
      table.header = std::move(fields);
      first = false;
    } else {
      table.rows.push_back(std::move(fields));
    }
  }
  if (table.rows.empty()) {
    throw ReportError("plot: " + figure + ": " + path.string() + " has no data rows");
  }
  return table;
}

double to_num(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

}  // namespace

PlotResult cmd_plot(const fs::path& bundle_dir, FigureKind kind) {
  const std::string figure = figure_kind_name(kind);
  SvgPlot plot(figure, "", "");
  std::ostringstream points_csv;
  std::size_t n_points = 0;

  if (kind == FigureKind::rank_deltas) {
    const CsvTable table = read_csv(bundle_dir / "rank_sweep.csv", figure);
    const std::size_t c_rank = table.column("rank", figure);
    const std::size_t c_delta = table.column("delta_vs_r8", figure);
    std::vector<std::pair<double, double>> points;
    points_csv << "rank,delta_vs_r8\n";
    for (const auto& row : table.rows) {
      points.emplace_back(to_num(row[c_rank]), to_num(row[c_delta]));
      points_csv << row[c_rank] << ',' << row[c_delta] << "\n";
    }
    std::sort(points.begin(), points.end());
    n_points = points.size();
    plot = SvgPlot("LoRA rank vs metric delta (baseline r=8)", "rank", "metric delta");
    plot.set_log_x(true);
    plot.add_series("delta vs r=8", std::move(points), true);
  } else {
    const CsvTable table = read_csv(bundle_dir / "matrix.csv", figure);
    const std::size_t c_model = table.column("model", figure);
    const std::size_t c_mode = table.column("mode", figure);
    const std::size_t c_metric = table.column("peak_metric", figure);

    if (kind == FigureKind::params_vs_performance) {
      const std::size_t c_params = table.column("trainable_params", figure);
      std::map<std::string, std::pair<double, std::vector<double>>> groups;  // label -> (x, ys)
      for (const auto& row : table.rows) {
        auto& g = groups[row[c_model] + "/" + row[c_mode]];
        g.first = to_num(row[c_params]);
        g.second.push_back(to_num(row[c_metric]));
      }
      plot = SvgPlot("Trainable parameters vs performance", "trainable parameters",
                     "peak metric (median)");
      plot.set_log_x(true);
      points_csv << "label,trainable_params,peak_metric_median\n";
      std::map<std::string, std::vector<std::pair<double, double>>> by_mode;
      for (const auto& [label, g] : groups) {
        const double y = median(g.second);
        points_csv << label << ',' << fmt_num(g.first) << ',' << fmt_num(y) << "\n";
        by_mode[label.substr(label.find('/') + 1)].emplace_back(g.first, y);
        ++n_points;
      }
      for (auto& [mode, pts] : by_mode) {
        std::sort(pts.begin(), pts.end());
        plot.add_series(mode, std::move(pts), false);
      }
    } else if (kind == FigureKind::budget_curves) {
      const std::size_t c_budget = table.column("budget_value", figure);
      const std::size_t c_kind = table.column("budget_kind", figure);
      std::map<std::string, std::map<double, std::vector<double>>> series;
      std::string budget_kind = table.rows.front()[c_kind];
      for (const auto& row : table.rows) {
        series[row[c_model] + "/" + row[c_mode]][to_num(row[c_budget])].push_back(
            to_num(row[c_metric]));
      }
      plot = SvgPlot("Budget vs performance", budget_kind, "peak metric (median)");
      points_csv << "label,budget_value,peak_metric_median\n";
      for (auto& [label, by_budget] : series) {
        std::vector<std::pair<double, double>> pts;
        for (auto& [budget, metrics] : by_budget) {
          const double y = median(metrics);
          pts.emplace_back(budget, y);
          points_csv << label << ',' << fmt_num(budget) << ',' << fmt_num(y) << "\n";
          ++n_points;
        }
        plot.add_series(label, std::move(pts), true);
      }
    } else {  // efficiency_scatter
      const std::size_t c_time = table.column("time_to_peak_s", figure);
      const std::size_t c_trainable = table.column("trainable_params", figure);
      const std::size_t c_total = table.column("total_params", figure);
      std::map<std::string, std::vector<const std::vector<std::string>*>> groups;
      for (const auto& row : table.rows) groups[row[c_model] + "/" + row[c_mode]].push_back(&row);
      if (groups.size() < 2) {
        throw ReportError("plot: efficiency_scatter needs at least two (model, mode) groups");
      }
      std::vector<RunStats> cohort;
      std::map<std::string, double> metric_by_label;
      for (const auto& [label, rows] : groups) {
        std::vector<double> times, metrics;
        for (const auto* row : rows) {
          times.push_back(to_num((*row)[c_time]));
          metrics.push_back(to_num((*row)[c_metric]));
        }
        cohort.push_back({label, median(times), to_num((*rows.front())[c_trainable]),
                          to_num((*rows.front())[c_total])});
        metric_by_label[label] = median(metrics);
      }
      const std::map<std::string, double> eff = efficiency_index(cohort);
      plot = SvgPlot("Efficiency vs performance", "efficiency (1 = most efficient)",
                     "peak metric (median)");
      points_csv << "label,efficiency,peak_metric_median\n";
      for (const auto& [label, value] : eff) {
        plot.add_series(label, {{value, metric_by_label.at(label)}}, false);
        points_csv << label << ',' << fmt_num(value) << ',' << fmt_num(metric_by_label.at(label))
                   << "\n";
        ++n_points;
      }
    }
  }

  const fs::path plots_dir = bundle_dir / "plots";
  fs::create_directories(plots_dir);
  PlotResult result;
  result.svg_path = plots_dir / (figure + ".svg");
  result.csv_path = plots_dir / (figure + ".csv");
  result.points = n_points;
  plot.write(result.svg_path.string());
  write_file_atomic(result.csv_path, points_csv.str());
  return result;
}

void write_rank_sweep(const fs::path& bundle_dir, const RankSweepResult& result) {
  fs::create_directories(bundle_dir);
  std::ostringstream best;
  best << "rank,best_metric,delta_vs_r8,best_lr,best_alpha,best_dropout,best_config_hash\n";
  for (const RankSweepRow& row : result.rows) {
    best << row.rank << ',' << fmt_num(row.best.metric) << ',' << fmt_num(row.delta_vs_r8) << ','
         << fmt_num(row.best.learning_rate) << ',' << fmt_num(row.best.alpha) << ','
         << fmt_num(row.best.lora_dropout) << ',' << hex64(row.best.config_hash) << "\n";
  }
  write_file_atomic(bundle_dir / "rank_sweep.csv", best.str());

  std::ostringstream trials;
  trials << "rank,trial,lora_dropout,alpha,learning_rate,metric,config_hash\n";
  for (const RankTrial& t : result.trials) {
    trials << t.rank << ',' << t.trial << ',' << fmt_num(t.lora_dropout) << ','
           << fmt_num(t.alpha) << ',' << fmt_num(t.learning_rate) << ',' << fmt_num(t.metric)
           << ',' << hex64(t.config_hash) << "\n";
  }
  write_file_atomic(bundle_dir / "rank_sweep_trials.csv", trials.str());
}

void write_sweep_rows(const fs::path& path, const std::vector<CellRow>& rows) {
  fs::create_directories(path.parent_path());
  std::ostringstream csv;
  csv << matrix_csv_header() << "\n";
  for (const CellRow& row : rows) csv << cell_row_csv(row) << "\n";
  write_file_atomic(path, csv.str());
}

}  // namespace peftlab
