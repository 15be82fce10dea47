#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/autodiff.hpp"
#include "peftlab/peft.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

enum class HeadKind { sequence, token };

const char* head_kind_name(HeadKind kind);

/// Dimension recipe for the encoder. d_k = d_v = model_dim in this family.
struct ModelConfig {
  std::size_t layers = 2;
  std::size_t model_dim = 32;
  std::size_t heads = 2;
  std::size_t ffn_dim = 64;
  std::size_t vocab = 100;
  std::size_t max_positions = 64;
  std::size_t num_labels = 2;
  HeadKind head_kind = HeadKind::sequence;

  void validate() const;  // ConfigError on bad dims (model_dim % heads, zero sizes)
};

struct ParamCounts {
  std::size_t total = 0;
  std::size_t embeddings = 0;
  std::size_t attention = 0;
  std::size_t ffn = 0;
  std::size_t layernorm = 0;
  std::size_t head = 0;
  std::size_t adapter = 0;  // enumeration only; zero for plain configs
};

/// Closed-form parameter count:
///   V·d + P·d + L·(4(d²+d) + d·d_ff + d_ff + d_ff·d + d + 4d) + d·labels + labels
ParamCounts count_params(const ModelConfig& config);

/// Sentinel for positions excluded from the loss (outside [0, num_labels)).
inline constexpr std::int64_t kIgnoreLabel = -1;

struct TaskBatch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int64_t> token_ids;       // [batch*seq], row-major
  std::vector<std::uint8_t> attention_mask;  // [batch*seq], 1 = attend
  // sequence head: one label per row; token head: one per position with
  // kIgnoreLabel at padding/ignored positions
  std::vector<std::int64_t> labels;
  HeadKind head_kind = HeadKind::sequence;

  void validate() const;
};

struct Param {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  std::string group;  // embeddings | attention | ffn | layernorm | head | adapter
};

/// Transformer encoder (pre-norm residual blocks, learned positions) plus a
/// linear task head. Owns its parameter registry and optional adapter state.
struct EncoderModel {
  ModelConfig config;
  std::vector<Param> params;
  std::optional<AdapterState> adapter;

  bool has_param(std::string_view name) const;
  std::size_t param_index(std::string_view name) const;  // ContractError if missing
  Param& param(std::string_view name);
  const Param& param(std::string_view name) const;
};

/// Deterministic initialization: truncated-normal(0.02) weights and
/// embeddings, zero biases, unit layernorm gains.
EncoderModel build_model(const ModelConfig& config, std::uint64_t seed);

/// Enumerates instantiated tensors by group (matches count_params exactly for
/// plain models; adapted models add the adapter group on top).
ParamCounts count_params(const EncoderModel& model);

struct ForwardOptions {
  bool training = false;
  // hidden dropout (attention probabilities + FFN activation); active only
  // when training
  double hidden_dropout = 0.0;
  std::uint64_t dropout_seed = 0;
};

struct GraphOutputs {
  NodeId hidden = 0;
  NodeId logits = 0;
  NodeId loss = 0;
  bool has_logits = false;
  bool has_loss = false;
};

/// Records every model parameter as a tape leaf (requires_grad follows
/// Param::trainable). Returned ids align with model.params.
std::vector<NodeId> register_params(Tape& tape, const EncoderModel& model);

/// Assembles the encoder (and head/loss when requested) on the tape using the
/// given parameter leaves — callers may substitute individual leaves, which is
/// how the finite-difference checks probe single tensors.
GraphOutputs build_graph(Tape& tape, const EncoderModel& model,
                         std::span<const NodeId> param_nodes, const TaskBatch& batch,
                         const ForwardOptions& opts, bool with_head, bool with_loss);

struct ForwardGraph {
  Tape tape;
  std::vector<NodeId> param_nodes;
  GraphOutputs out;
};

ForwardGraph encode_graph(const EncoderModel& model, const TaskBatch& batch,
                          const ForwardOptions& opts = {});
ForwardGraph predict_graph(const EncoderModel& model, const TaskBatch& batch,
                           const ForwardOptions& opts = {}, bool with_loss = false);

/// Evaluation-mode hidden states [batch, seq, d].
Tensor encode(const EncoderModel& model, const TaskBatch& batch);
/// Evaluation-mode logits ([batch, labels] or [batch, seq, labels]).
Tensor predict(const EncoderModel& model, const TaskBatch& batch);
/// Evaluation-mode mean cross-entropy over non-ignored positions.
double loss_value(const EncoderModel& model, const TaskBatch& batch);

/// Max relative error between analytic and central-difference gradients of the
/// batch loss (or mean hidden state when use_loss is false) w.r.t. one named
/// parameter.
double model_grad_check(const EncoderModel& model, const TaskBatch& batch,
                        std::string_view param_name, double eps = 1e-5, bool use_loss = true);

}  // namespace peftlab
