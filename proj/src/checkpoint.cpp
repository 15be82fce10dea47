#include "peftlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace peftlab {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'E', 'F', 'T', 'C', 'K', 'P', 'T'};

void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little) {
    throw Error("checkpoint: big-endian hosts are not supported");
  }
}

void write_file(const std::string& path, const json& manifest,
                const std::vector<const Param*>& tensors) {
  require_little_endian();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::string text = manifest.dump();
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Param* p : tensors) {
    out.write(reinterpret_cast<const char*>(p->tensor.data().data()),
              static_cast<std::streamsize>(p->tensor.numel() * sizeof(double)));
  }
  if (!out) throw DataError("checkpoint: short write to " + path);
}

json tensor_manifest(const std::vector<const Param*>& tensors) {
  json list = json::array();
  std::uint64_t offset = 0;
  for (const Param* p : tensors) {
    json t;
    t["name"] = p->name;
    t["shape"] = p->tensor.shape();
    t["offset"] = offset;
    t["trainable"] = p->trainable;
    list.push_back(std::move(t));
    offset += p->tensor.numel() * sizeof(double);
  }
  return list;
}

struct LoadedCheckpoint {
  json manifest;
  std::vector<double> payload;
};

LoadedCheckpoint read_file(const std::string& path) {
  require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("checkpoint: " + path + " is not a checkpoint file");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw DataError("checkpoint: truncated manifest length in " + path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("checkpoint: truncated manifest in " + path);

  LoadedCheckpoint ck;
  try {
    ck.manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("checkpoint: malformed manifest in " + path + ": " + e.what());
  }
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() % sizeof(double) != 0) {
    throw DataError("checkpoint: payload size not a multiple of 8 in " + path);
  }
  ck.payload.resize(raw.size() / sizeof(double));
  std::memcpy(ck.payload.data(), raw.data(), raw.size());
  return ck;
}

void restore_tensor(Param& param, const json& entry, const std::vector<double>& payload) {
  const std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
  if (shape != param.tensor.shape()) {
    throw DataError("checkpoint: tensor '" + param.name + "' has shape " + shape_str(shape) +
                    ", expected " + shape_str(param.tensor.shape()));
  }
  const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
  if (offset % sizeof(double) != 0) {
    throw DataError("checkpoint: misaligned offset for tensor '" + param.name + "'");
  }
  const std::size_t begin = offset / sizeof(double);
  if (begin + param.tensor.numel() > payload.size()) {
    throw DataError("checkpoint: payload too short for tensor '" + param.name + "'");
  }
  std::copy(payload.begin() + static_cast<std::ptrdiff_t>(begin),
            payload.begin() + static_cast<std::ptrdiff_t>(begin + param.tensor.numel()),
            param.tensor.data().begin());
  param.trainable = entry.value("trainable", param.trainable);
}

}  // namespace

json model_config_to_json(const ModelConfig& config) {
  json j;
  j["layers"] = config.layers;
  j["model_dim"] = config.model_dim;
  j["heads"] = config.heads;
  j["ffn_dim"] = config.ffn_dim;
  j["vocab"] = config.vocab;
  j["max_positions"] = config.max_positions;
  j["num_labels"] = config.num_labels;
  j["head_kind"] = head_kind_name(config.head_kind);
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.num_labels = j.at("num_labels").get<std::size_t>();
  const std::string head = j.value("head_kind", "sequence");
  c.head_kind = head == "token" ? HeadKind::token : HeadKind::sequence;
  return c;
}

json adapter_config_to_json(const AdapterState& state) {
  json j;
  if (state.kind == AdapterKind::lora) {
    j["kind"] = "lora";
    j["rank"] = state.lora.rank;
    j["alpha"] = state.lora.alpha;
    j["dropout"] = state.lora.dropout;
    json targets = json::array();
    for (LoraTarget t : state.lora.targets) targets.push_back(lora_target_name(t));
    j["targets"] = std::move(targets);
    j["layers"] = state.lora.layers;
  } else {
    j["kind"] = "ia3";
    j["dropout"] = state.ia3.dropout;
  }
  return j;
}

AdapterState adapter_config_from_json(const json& j) {
  AdapterState state;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "lora") {
    state.kind = AdapterKind::lora;
    state.lora.rank = j.at("rank").get<std::size_t>();
    state.lora.alpha = j.at("alpha").get<double>();
    state.lora.dropout = j.at("dropout").get<double>();
    state.lora.targets.clear();
    for (const json& t : j.at("targets")) {
      state.lora.targets.push_back(lora_target_from_name(t.get<std::string>()));
    }
    state.lora.layers = j.value("layers", std::vector<std::size_t>{});
  } else if (kind == "ia3") {
    state.kind = AdapterKind::ia3;
    state.ia3.dropout = j.at("dropout").get<double>();
  } else {
    throw DataError("checkpoint: unknown adapter kind '" + kind + "'");
  }
  return state;
}

void save_model(const EncoderModel& model, const std::string& path) {
  std::vector<const Param*> tensors;
  tensors.reserve(model.params.size());
  for (const Param& p : model.params) tensors.push_back(&p);

  json manifest;
  manifest["format"] = 1;
  manifest["kind"] = "model";
  manifest["config"] = model_config_to_json(model.config);
  if (model.adapter.has_value()) manifest["adapter"] = adapter_config_to_json(*model.adapter);
  manifest["tensors"] = tensor_manifest(tensors);
  write_file(path, manifest, tensors);
}

EncoderModel load_model(const std::string& path) {
  const LoadedCheckpoint ck = read_file(path);
  if (ck.manifest.value("kind", "") != "model") {
    throw DataError("checkpoint: " + path + " is not a model checkpoint");
  }
  const ModelConfig config = model_config_from_json(ck.manifest.at("config"));
  EncoderModel model = build_model(config, 0);
  if (ck.manifest.contains("adapter")) {
    AdapterState state = adapter_config_from_json(ck.manifest.at("adapter"));
    if (state.kind == AdapterKind::lora) {
      inject_lora(model, state.lora, 0);
    } else {
      inject_ia3(model, state.ia3);
    }
  }
  std::size_t restored = 0;
  for (const json& entry : ck.manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    restore_tensor(model.param(name), entry, ck.payload);
    ++restored;
  }
  if (restored != model.params.size()) {
    throw DataError("checkpoint: " + path + " restored " + std::to_string(restored) +
                    " tensors, model has " + std::to_string(model.params.size()));
  }
  return model;
}

void save_adapter(const EncoderModel& model, const std::string& path) {
  if (!model.adapter.has_value()) {
    throw StateError("save_adapter: model has no adapter");
  }
  std::vector<const Param*> tensors;
  for (const Param& p : model.params) {
    if (p.group == "adapter" || p.group == "head") tensors.push_back(&p);
  }
  json manifest;
  manifest["format"] = 1;
  manifest["kind"] = "adapter";
  manifest["config"] = model_config_to_json(model.config);
  manifest["adapter"] = adapter_config_to_json(*model.adapter);
  manifest["tensors"] = tensor_manifest(tensors);
  write_file(path, manifest, tensors);
}

void load_adapter(EncoderModel& model, const std::string& path) {
  const LoadedCheckpoint ck = read_file(path);
  if (ck.manifest.value("kind", "") != "adapter") {
    throw DataError("checkpoint: " + path + " is not an adapter checkpoint");
  }
  const ModelConfig stored = model_config_from_json(ck.manifest.at("config"));
  const json ours = model_config_to_json(model.config);
  if (model_config_to_json(stored) != ours) {
    throw DataError("load_adapter: base model config does not match checkpoint");
  }
  AdapterState state = adapter_config_from_json(ck.manifest.at("adapter"));
  if (state.kind == AdapterKind::lora) {
    inject_lora(model, state.lora, 0);
  } else {
    inject_ia3(model, state.ia3);
  }
  for (const json& entry : ck.manifest.at("tensors")) {
    restore_tensor(model.param(entry.at("name").get<std::string>()), entry, ck.payload);
  }
}

}  // namespace peftlab
