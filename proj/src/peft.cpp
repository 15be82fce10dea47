#include "peftlab/peft.hpp"

#include <algorithm>
#include <cstring>

#include "peftlab/model.hpp"

namespace peftlab {

namespace {

constexpr double kLoraInitStd = 0.02;

struct TargetMatrix {
  std::string stem;     // parameter name prefix, e.g. "layer.0.attn.key"
  std::size_t in = 0;   // input (k) dimension
  std::size_t out = 0;  // output (d) dimension
};

std::vector<std::size_t> targeted_layers(const ModelConfig& config, const LoraConfig& lora) {
  if (lora.layers.empty()) {
    std::vector<std::size_t> all(config.layers);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  for (std::size_t layer : lora.layers) {
    if (layer >= config.layers) {
      throw ConfigError("lora: layer " + std::to_string(layer) + " out of range for " +
                        std::to_string(config.layers) + " layers");
    }
  }
  return lora.layers;
}

// canonical order so injection is deterministic regardless of how the
// target list was written
std::vector<LoraTarget> canonical_targets(const LoraConfig& lora) {
  std::vector<LoraTarget> out;
  for (LoraTarget t : {LoraTarget::query, LoraTarget::key, LoraTarget::value, LoraTarget::ffn}) {
    if (std::find(lora.targets.begin(), lora.targets.end(), t) != lora.targets.end()) {
      out.push_back(t);
    }
  }
  if (out.empty()) throw ConfigError("lora: no target modules selected");
  return out;
}

std::vector<TargetMatrix> target_matrices(const ModelConfig& config, const LoraConfig& lora,
                                          std::size_t layer) {
  const std::size_t d = config.model_dim;
  const std::size_t dff = config.ffn_dim;
  const std::string base = "layer." + std::to_string(layer) + ".";
  std::vector<TargetMatrix> out;
  for (LoraTarget t : canonical_targets(lora)) {
    switch (t) {
      case LoraTarget::query: out.push_back({base + "attn.query", d, d}); break;
      case LoraTarget::key: out.push_back({base + "attn.key", d, d}); break;
      case LoraTarget::value: out.push_back({base + "attn.value", d, d}); break;
      case LoraTarget::ffn:
        out.push_back({base + "ffn.w1", d, dff});
        out.push_back({base + "ffn.w2", dff, d});
        break;
    }
  }
  return out;
}

void freeze_base(EncoderModel& model) {
  for (Param& p : model.params) p.trainable = (p.group == "head" || p.group == "adapter");
}

}  // namespace

const char* lora_target_name(LoraTarget target) {
  switch (target) {
    case LoraTarget::key: return "key";
    case LoraTarget::value: return "value";
    case LoraTarget::query: return "query";
    case LoraTarget::ffn: return "ffn";
  }
  return "unknown";
}

LoraTarget lora_target_from_name(const std::string& name) {
  if (name == "key") return LoraTarget::key;
  if (name == "value") return LoraTarget::value;
  if (name == "query") return LoraTarget::query;
  if (name == "ffn") return LoraTarget::ffn;
  throw ConfigError("lora: unknown target module '" + name + "'");
}

AdapterState& inject_lora(EncoderModel& model, const LoraConfig& config, std::uint64_t seed) {
  if (model.adapter.has_value()) {
    throw StateError("inject_lora: model already has an adapter");
  }
  if (config.rank == 0) throw ConfigError("lora: rank must be >= 1");
  if (!(config.dropout >= 0.0 && config.dropout < 1.0)) {
    throw ConfigError("lora: dropout must be in [0,1)");
  }

  const std::vector<std::size_t> layers = targeted_layers(model.config, config);
  // r <= min(d, k) for every targeted matrix
  for (std::size_t layer : layers) {
    for (const TargetMatrix& m : target_matrices(model.config, config, layer)) {
      const std::size_t bound = std::min(m.in, m.out);
      if (config.rank > bound) {
        throw ConfigError("lora: rank " + std::to_string(config.rank) + " exceeds min(d,k)=" +
                          std::to_string(bound) + " for " + m.stem);
      }
    }
  }

  freeze_base(model);
  Rng rng(Rng::mix(seed, 0x6c6f7261ull));
  for (std::size_t layer : layers) {
    for (const TargetMatrix& m : target_matrices(model.config, config, layer)) {
      Tensor a({m.in, config.rank});
      for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.truncated_normal(kLoraInitStd);
      Tensor b({config.rank, m.out});  // zero, so the update starts as exact identity
      model.params.push_back({m.stem + ".lora_a", std::move(a), true, "adapter"});
      model.params.push_back({m.stem + ".lora_b", std::move(b), true, "adapter"});
    }
  }

  AdapterState state;
  state.kind = AdapterKind::lora;
  state.lora = config;
  model.adapter = std::move(state);
  return *model.adapter;
}

AdapterState& inject_ia3(EncoderModel& model, const Ia3Config& config) {
  if (model.adapter.has_value()) {
    throw StateError("inject_ia3: model already has an adapter");
  }
  if (!(config.dropout >= 0.0 && config.dropout < 1.0)) {
    throw ConfigError("ia3: dropout must be in [0,1)");
  }

  freeze_base(model);
  const std::size_t d = model.config.model_dim;
  const std::size_t dff = model.config.ffn_dim;
  for (std::size_t l = 0; l < model.config.layers; ++l) {
    const std::string base = "layer." + std::to_string(l) + ".ia3.";
    model.params.push_back({base + "l_k", Tensor({d}, 1.0), true, "adapter"});
    model.params.push_back({base + "l_v", Tensor({d}, 1.0), true, "adapter"});
    model.params.push_back({base + "l_ff", Tensor({dff}, 1.0), true, "adapter"});
  }

  AdapterState state;
  state.kind = AdapterKind::ia3;
  state.ia3 = config;
  model.adapter = std::move(state);
  return *model.adapter;
}

void merge_adapter(EncoderModel& model) {
  if (!model.adapter.has_value()) {
    throw StateError("merge: no adapter present (never injected or already merged)");
  }
  AdapterState& state = *model.adapter;

  if (state.kind == AdapterKind::lora) {
    const double s = state.lora.scaling();
    for (std::size_t layer : targeted_layers(model.config, state.lora)) {
      for (const TargetMatrix& m : target_matrices(model.config, state.lora, layer)) {
        const Tensor& a = model.param(m.stem + ".lora_a").tensor;  // [in, r]
        const Tensor& b = model.param(m.stem + ".lora_b").tensor;  // [r, out]
        Tensor& w = model.param(m.stem + ".weight").tensor;        // [in, out]
        const std::size_t r = state.lora.rank;
        for (std::size_t i = 0; i < m.in; ++i) {
          for (std::size_t k = 0; k < r; ++k) {
            const double av = a[i * r + k] * s;
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < m.out; ++j) w[i * m.out + j] += av * b[k * m.out + j];
          }
        }
      }
    }
  } else {
    const std::size_t d = model.config.model_dim;
    const std::size_t dff = model.config.ffn_dim;
    for (std::size_t l = 0; l < model.config.layers; ++l) {
      const std::string base = "layer." + std::to_string(l) + ".";
      const Tensor& lk = model.param(base + "ia3.l_k").tensor;
      const Tensor& lv = model.param(base + "ia3.l_v").tensor;
      const Tensor& lff = model.param(base + "ia3.l_ff").tensor;
      // l ⊙ (xW + b) == x(W·diag(l)) + l ⊙ b: scale output columns and bias
      auto scale_projection = [&](const std::string& stem, const Tensor& l) {
        Tensor& w = model.param(stem + ".weight").tensor;
        Tensor& bias = model.param(stem + ".bias").tensor;
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t j = 0; j < d; ++j) w[i * d + j] *= l[j];
        }
        for (std::size_t j = 0; j < d; ++j) bias[j] *= l[j];
      };
      scale_projection(base + "attn.key", lk);
      scale_projection(base + "attn.value", lv);
      // (l_ff ⊙ g)·W2 == g·(diag(l_ff)·W2): scale W2 rows, bias untouched
      Tensor& w2 = model.param(base + "ffn.w2.weight").tensor;
      for (std::size_t i = 0; i < dff; ++i) {
        for (std::size_t j = 0; j < d; ++j) w2[i * d + j] *= lff[i];
      }
    }
  }

  state.merged = true;
  std::erase_if(model.params, [](const Param& p) { return p.group == "adapter"; });
  for (Param& p : model.params) p.trainable = true;
  model.adapter.reset();
}

TrainableCounts count_trainable(const EncoderModel& model) {
  TrainableCounts c;
  for (const Param& p : model.params) {
    c.total += p.tensor.numel();
    if (p.trainable) c.trainable += p.tensor.numel();
    else c.frozen += p.tensor.numel();
  }
  return c;
}

std::size_t lora_param_count(const ModelConfig& config, const LoraConfig& lora) {
  const std::size_t d = config.model_dim;
  const std::size_t dff = config.ffn_dim;
  std::size_t per_layer = 0;
  for (LoraTarget t : canonical_targets(lora)) {
    if (t == LoraTarget::ffn) {
      per_layer += lora.rank * (d + dff) + lora.rank * (dff + d);
    } else {
      per_layer += lora.rank * (d + d);
    }
  }
  const std::size_t layers = lora.layers.empty() ? config.layers : lora.layers.size();
  return per_layer * layers;
}

std::size_t ia3_param_count(const ModelConfig& config) {
  return config.layers * (config.model_dim + config.model_dim + config.ffn_dim);
}

FrozenSnapshot snapshot_frozen(const EncoderModel& model) {
  FrozenSnapshot snap;
  for (const Param& p : model.params) {
    if (!p.trainable) {
      snap.tensors.emplace_back(p.name,
                                std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()));
    }
  }
  return snap;
}

FreezeReport assert_frozen(const EncoderModel& model, const FrozenSnapshot& snapshot) {
  FreezeReport report;
  for (const auto& [name, data] : snapshot.tensors) {
    if (!model.has_param(name)) {
      report.violations.push_back(name + " (missing)");
      continue;
    }
    const Tensor& t = model.param(name).tensor;
    const bool same = t.numel() == data.size() &&
                      std::memcmp(t.data().data(), data.data(), data.size() * sizeof(double)) == 0;
    if (!same) report.violations.push_back(name);
  }
  report.ok = report.violations.empty();
  return report;
}

}  // namespace peftlab
