#include "peftlab/model.hpp"

#include <algorithm>
#include <cmath>

namespace peftlab {

namespace {

// additive score for masked keys; exp() underflows to exact zero
constexpr double kMaskedScore = -1e30;
constexpr double kInitStd = 0.02;

void fill_truncated_normal(Tensor& t, Rng& rng) {
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.truncated_normal(kInitStd);
}

}  // namespace

const char* head_kind_name(HeadKind kind) {
  return kind == HeadKind::sequence ? "sequence" : "token";
}

void ModelConfig::validate() const {
  if (model_dim == 0 || heads == 0 || ffn_dim == 0 || vocab == 0 || max_positions == 0 ||
      num_labels == 0) {
    throw ConfigError("model config: all dimensions must be >= 1");
  }
  if (model_dim % heads != 0) {
    throw ConfigError("model config: model_dim " + std::to_string(model_dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
}

ParamCounts count_params(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.model_dim;
  const std::size_t dff = config.ffn_dim;
  ParamCounts pc;
  pc.embeddings = config.vocab * d + config.max_positions * d;
  pc.attention = config.layers * 4 * (d * d + d);
  pc.ffn = config.layers * (d * dff + dff + dff * d + d);
  pc.layernorm = config.layers * 4 * d;
  pc.head = d * config.num_labels + config.num_labels;
  pc.total = pc.embeddings + pc.attention + pc.ffn + pc.layernorm + pc.head;
  return pc;
}

void TaskBatch::validate() const {
  if (batch_size == 0 || seq_len == 0) throw DataError("batch: empty batch");
  if (token_ids.size() != batch_size * seq_len) {
    throw DataError("batch: token_ids size " + std::to_string(token_ids.size()) +
                    " does not match batch " + std::to_string(batch_size) + " x seq " +
                    std::to_string(seq_len));
  }
  if (attention_mask.size() != token_ids.size()) {
    throw DataError("batch: attention_mask size mismatch");
  }
  const std::size_t expected_labels =
      head_kind == HeadKind::sequence ? batch_size : batch_size * seq_len;
  if (!labels.empty() && labels.size() != expected_labels) {
    throw DataError("batch: expected " + std::to_string(expected_labels) + " labels, got " +
                    std::to_string(labels.size()));
  }
  for (std::size_t b = 0; b < batch_size; ++b) {
    bool any = false;
    for (std::size_t s = 0; s < seq_len && !any; ++s) any = attention_mask[b * seq_len + s] != 0;
    if (!any) throw DataError("batch: attention mask row " + std::to_string(b) + " is empty");
  }
}

bool EncoderModel::has_param(std::string_view name) const {
  for (const Param& p : params) {
    if (p.name == name) return true;
  }
  return false;
}

std::size_t EncoderModel::param_index(std::string_view name) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name == name) return i;
  }
  throw ContractError("model: unknown parameter '" + std::string(name) + "'");
}

Param& EncoderModel::param(std::string_view name) { return params[param_index(name)]; }

const Param& EncoderModel::param(std::string_view name) const {
  return params[param_index(name)];
}

EncoderModel build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  EncoderModel model;
  model.config = config;
  Rng rng(Rng::mix(seed, 0x6d6f64656cull));  // one stream, fixed creation order

  const std::size_t d = config.model_dim;
  const std::size_t dff = config.ffn_dim;

  auto add_weight = [&](std::string name, std::vector<std::size_t> shape, std::string group) {
    Tensor t(std::move(shape));
    fill_truncated_normal(t, rng);
    model.params.push_back({std::move(name), std::move(t), true, std::move(group)});
  };
  auto add_zeros = [&](std::string name, std::vector<std::size_t> shape, std::string group) {
    model.params.push_back({std::move(name), Tensor(std::move(shape)), true, std::move(group)});
  };
  auto add_ones = [&](std::string name, std::vector<std::size_t> shape, std::string group) {
    model.params.push_back({std::move(name), Tensor(std::move(shape), 1.0), true, std::move(group)});
  };

  add_weight("embeddings.token", {config.vocab, d}, "embeddings");
  add_weight("embeddings.position", {config.max_positions, d}, "embeddings");
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string base = "layer." + std::to_string(l) + ".";
    add_ones(base + "ln1.gamma", {d}, "layernorm");
    add_zeros(base + "ln1.beta", {d}, "layernorm");
    for (const char* which : {"query", "key", "value", "output"}) {
      add_weight(base + "attn." + which + ".weight", {d, d}, "attention");
      add_zeros(base + "attn." + which + ".bias", {d}, "attention");
    }
    add_ones(base + "ln2.gamma", {d}, "layernorm");
    add_zeros(base + "ln2.beta", {d}, "layernorm");
    add_weight(base + "ffn.w1.weight", {d, dff}, "ffn");
    add_zeros(base + "ffn.w1.bias", {dff}, "ffn");
    add_weight(base + "ffn.w2.weight", {dff, d}, "ffn");
    add_zeros(base + "ffn.w2.bias", {d}, "ffn");
  }
  add_weight("head.weight", {d, config.num_labels}, "head");
  add_zeros("head.bias", {config.num_labels}, "head");
  return model;
}

ParamCounts count_params(const EncoderModel& model) {
  ParamCounts pc;
  for (const Param& p : model.params) {
    const std::size_t n = p.tensor.numel();
    pc.total += n;
    if (p.group == "embeddings") pc.embeddings += n;
    else if (p.group == "attention") pc.attention += n;
    else if (p.group == "ffn") pc.ffn += n;
    else if (p.group == "layernorm") pc.layernorm += n;
    else if (p.group == "head") pc.head += n;
    else pc.adapter += n;
  }
  return pc;
}

std::vector<NodeId> register_params(Tape& tape, const EncoderModel& model) {
  std::vector<NodeId> nodes;
  nodes.reserve(model.params.size());
  for (const Param& p : model.params) {
    Tensor t = p.tensor;
    t.set_requires_grad(p.trainable);
    nodes.push_back(tape.leaf(std::move(t)));
  }
  return nodes;
}

GraphOutputs build_graph(Tape& tape, const EncoderModel& model,
                         std::span<const NodeId> param_nodes, const TaskBatch& batch,
                         const ForwardOptions& opts, bool with_head, bool with_loss) {
  model.config.validate();
  batch.validate();
  const ModelConfig& cfg = model.config;
  const std::size_t b_dim = batch.batch_size;
  const std::size_t s_dim = batch.seq_len;
  const std::size_t d = cfg.model_dim;
  const std::size_t heads = cfg.heads;

  if (s_dim > cfg.max_positions) {
    throw DataError("encode: sequence length " + std::to_string(s_dim) +
                    " exceeds max positions " + std::to_string(cfg.max_positions));
  }
  if (param_nodes.size() != model.params.size()) {
    throw ContractError("build_graph: parameter node list does not match registry");
  }

  auto pnode = [&](const std::string& name) -> Var {
    return Var{&tape, param_nodes[model.param_index(name)]};
  };

  const AdapterState* adapter =
      model.adapter.has_value() ? &model.adapter.value() : nullptr;
  const bool use_ia3 = adapter != nullptr && adapter->kind == AdapterKind::ia3;
  const bool use_lora = adapter != nullptr && adapter->kind == AdapterKind::lora;
  const double hidden_rate =
      opts.training ? (use_ia3 ? adapter->ia3.dropout : opts.hidden_dropout) : 0.0;
  const double lora_rate = (use_lora && opts.training) ? adapter->lora.dropout : 0.0;

  std::uint64_t dropout_site = 0;
  auto site_dropout = [&](Var v, double rate) {
    ++dropout_site;
    if (rate <= 0.0) return v;
    return dropout(v, rate, Rng::mix(opts.dropout_seed, dropout_site));
  };

  auto lora_targets_layer = [&](std::size_t layer) {
    if (!use_lora) return false;
    const auto& layers = adapter->lora.layers;
    return layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end();
  };
  auto lora_on = [&](std::size_t layer, LoraTarget t) {
    if (!lora_targets_layer(layer)) return false;
    const auto& ts = adapter->lora.targets;
    return std::find(ts.begin(), ts.end(), t) != ts.end();
  };

  // token + learned position embeddings
  Var tok = embedding_lookup(pnode("embeddings.token"), batch.token_ids, {b_dim, s_dim});
  std::vector<std::int64_t> pos_ids(b_dim * s_dim);
  for (std::size_t b = 0; b < b_dim; ++b) {
    for (std::size_t s = 0; s < s_dim; ++s) pos_ids[b * s_dim + s] = static_cast<std::int64_t>(s);
  }
  Var pos = embedding_lookup(pnode("embeddings.position"), pos_ids, {b_dim, s_dim});
  Var x = add(tok, pos);

  Var mask_add{};
  if (cfg.layers > 0) {
    Tensor mask_scores({b_dim * heads, s_dim, s_dim});
    for (std::size_t b = 0; b < b_dim; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        double* block = mask_scores.data().data() + (b * heads + h) * s_dim * s_dim;
        for (std::size_t i = 0; i < s_dim; ++i) {
          for (std::size_t j = 0; j < s_dim; ++j) {
            block[i * s_dim + j] = batch.attention_mask[b * s_dim + j] ? 0.0 : kMaskedScore;
          }
        }
      }
    }
    mask_add = make_leaf(tape, std::move(mask_scores));
  }

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(d / heads));

  // LoRA path: y += (alpha/r) * dropout(input) @ lora_a @ lora_b
  auto lora_delta = [&](Var input, const std::string& stem) {
    Var inp = site_dropout(input, lora_rate);
    Var delta = matmul(matmul(inp, pnode(stem + ".lora_a")), pnode(stem + ".lora_b"));
    return scale(delta, adapter->lora.scaling());
  };

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string base = "layer." + std::to_string(l) + ".";

    Var n1 = layernorm(x, pnode(base + "ln1.gamma"), pnode(base + "ln1.beta"));
    auto projection = [&](const char* which, LoraTarget target) {
      const std::string stem = base + "attn." + which;
      Var y = add(matmul(n1, pnode(stem + ".weight")), pnode(stem + ".bias"));
      if (lora_on(l, target)) y = add(y, lora_delta(n1, stem));
      return y;
    };
    Var q = projection("query", LoraTarget::query);
    Var k = projection("key", LoraTarget::key);
    Var v = projection("value", LoraTarget::value);
    if (use_ia3) {
      k = elementwise_mul(k, pnode(base + "ia3.l_k"));
      v = elementwise_mul(v, pnode(base + "ia3.l_v"));
    }

    Var scores = scale(matmul(split_heads(q, heads), transpose(split_heads(k, heads))),
                       inv_sqrt_dh);
    scores = add(scores, mask_add);
    Var probs = site_dropout(softmax_lastdim(scores), hidden_rate);
    Var context = merge_heads(matmul(probs, split_heads(v, heads)), heads);
    Var attn_out = add(matmul(context, pnode(base + "attn.output.weight")),
                       pnode(base + "attn.output.bias"));
    x = add(x, attn_out);

    Var n2 = layernorm(x, pnode(base + "ln2.gamma"), pnode(base + "ln2.beta"));
    Var pre = add(matmul(n2, pnode(base + "ffn.w1.weight")), pnode(base + "ffn.w1.bias"));
    if (lora_on(l, LoraTarget::ffn)) pre = add(pre, lora_delta(n2, base + "ffn.w1"));
    Var act = gelu(pre);
    if (use_ia3) act = elementwise_mul(act, pnode(base + "ia3.l_ff"));
    act = site_dropout(act, hidden_rate);
    Var ffn_out = add(matmul(act, pnode(base + "ffn.w2.weight")), pnode(base + "ffn.w2.bias"));
    if (lora_on(l, LoraTarget::ffn)) ffn_out = add(ffn_out, lora_delta(act, base + "ffn.w2"));
    x = add(x, ffn_out);
  }

  GraphOutputs out;
  out.hidden = x.id;
  if (!with_head) return out;

  if (batch.head_kind != cfg.head_kind) {
    throw ContractError(std::string("predict: model has a ") + head_kind_name(cfg.head_kind) +
                        " head but batch is " + head_kind_name(batch.head_kind));
  }

  Var logits{};
  if (cfg.head_kind == HeadKind::sequence) {
    // masked mean pooling, then the linear head
    Tensor pool({b_dim, 1, s_dim});
    for (std::size_t b = 0; b < b_dim; ++b) {
      double count = 0.0;
      for (std::size_t s = 0; s < s_dim; ++s) count += batch.attention_mask[b * s_dim + s] ? 1 : 0;
      for (std::size_t s = 0; s < s_dim; ++s) {
        pool.data()[b * s_dim + s] = batch.attention_mask[b * s_dim + s] ? 1.0 / count : 0.0;
      }
    }
    Var pooled = reshape(matmul(make_leaf(tape, std::move(pool)), x), {b_dim, d});
    logits = add(matmul(pooled, pnode("head.weight")), pnode("head.bias"));
  } else {
    logits = add(matmul(x, pnode("head.weight")), pnode("head.bias"));
  }
  out.logits = logits.id;
  out.has_logits = true;

  if (with_loss) {
    if (batch.labels.empty()) throw ContractError("predict: loss requested without labels");
    Var flat = cfg.head_kind == HeadKind::sequence
                   ? logits
                   : reshape(logits, {b_dim * s_dim, cfg.num_labels});
    Var loss = cross_entropy(flat, batch.labels, kIgnoreLabel);
    out.loss = loss.id;
    out.has_loss = true;
  }
  return out;
}

ForwardGraph encode_graph(const EncoderModel& model, const TaskBatch& batch,
                          const ForwardOptions& opts) {
  ForwardGraph g;
  g.param_nodes = register_params(g.tape, model);
  g.out = build_graph(g.tape, model, g.param_nodes, batch, opts, false, false);
  return g;
}

ForwardGraph predict_graph(const EncoderModel& model, const TaskBatch& batch,
                           const ForwardOptions& opts, bool with_loss) {
  ForwardGraph g;
  g.param_nodes = register_params(g.tape, model);
  g.out = build_graph(g.tape, model, g.param_nodes, batch, opts, true, with_loss);
  return g;
}

Tensor encode(const EncoderModel& model, const TaskBatch& batch) {
  ForwardGraph g = encode_graph(model, batch);
  return g.tape.value(g.out.hidden);
}

Tensor predict(const EncoderModel& model, const TaskBatch& batch) {
  ForwardGraph g = predict_graph(model, batch);
  return g.tape.value(g.out.logits);
}

double loss_value(const EncoderModel& model, const TaskBatch& batch) {
  ForwardGraph g = predict_graph(model, batch, {}, true);
  return g.tape.value(g.out.loss)[0];
}

double model_grad_check(const EncoderModel& model, const TaskBatch& batch,
                        std::string_view param_name, double eps, bool use_loss) {
  const std::size_t target = model.param_index(param_name);
  auto f = [&](Tape& tape, Var probe) -> Var {
    std::vector<NodeId> nodes;
    nodes.reserve(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      if (i == target) {
        nodes.push_back(probe.id);
      } else {
        Tensor t = model.params[i].tensor;
        t.set_requires_grad(false);
        nodes.push_back(tape.leaf(std::move(t)));
      }
    }
    GraphOutputs out = build_graph(tape, model, nodes, batch, {}, use_loss, use_loss);
    if (use_loss) return Var{&tape, out.loss};
    return mean_all(Var{&tape, out.hidden});
  };
  return finite_diff_check(f, model.params[target].tensor, eps);
}

}  // namespace peftlab
