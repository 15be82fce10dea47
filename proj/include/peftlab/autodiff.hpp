#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

using NodeId = std::size_t;

/// Differentiable primitives recorded on the tape. Every kind has a forward
/// definition and a matching vector-Jacobian product in Tape::backward.
enum class PrimitiveKind {
  leaf,
  matmul,
  add,
  elementwise_mul,
  softmax_lastdim,
  layernorm,
  gelu,
  embedding_lookup,
  dropout,
  cross_entropy,
  transpose,
  scale,
  reduce_sum,
  reshape,
  split_heads,
  merge_heads,
};

const char* kind_name(PrimitiveKind kind);

/// Per-op parameters. Only the fields relevant to the kind are read.
struct OpAttrs {
  double scalar = 0.0;                      // scale factor / dropout rate
  std::uint64_t seed = 0;                   // dropout mask stream
  std::size_t heads = 0;                    // split_heads / merge_heads
  double epsilon = 1e-12;                   // layernorm
  std::int64_t ignore_label = -1;           // cross_entropy sentinel
  std::vector<std::int64_t> indices;        // embedding_lookup ids (row-major)
  std::vector<std::int64_t> labels;         // cross_entropy targets
  std::vector<std::size_t> shape;           // embedding index shape / reshape target
};

struct TapeNode {
  PrimitiveKind kind = PrimitiveKind::leaf;
  std::vector<NodeId> inputs;
  Tensor value;
  bool requires_grad = false;
  OpAttrs attrs;
  std::vector<double> saved;  // op-specific buffers (dropout mask, softmax probs, LN stats)
};

using GradMap = std::unordered_map<NodeId, Tensor>;

/// Dynamic computation graph. Nodes are appended in execution order, so input
/// ids always precede their consumers; backward walks the list once in
/// reverse. A tape and its tensors belong to a single logical thread.
class Tape {
 public:
  NodeId leaf(Tensor t);
  NodeId forward(PrimitiveKind kind, std::span<const NodeId> inputs, OpAttrs attrs = {});

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const TapeNode& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar loss. Returns gradients for every
  /// requires_grad leaf on the tape (zero-filled when the leaf does not reach
  /// the loss); frozen leaves are absent from the map.
  GradMap backward(NodeId loss) const;

 private:
  std::vector<TapeNode> nodes_;
};

/// Handle pairing a node with its tape so forward graphs read like math.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;
  const Tensor& value() const { return tape->value(id); }
};

Var make_leaf(Tape& tape, Tensor t);
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var elementwise_mul(Var a, Var b);
Var softmax_lastdim(Var x);
Var layernorm(Var x, Var gamma, Var beta, double epsilon = 1e-12);
Var gelu(Var x);
Var embedding_lookup(Var table, const std::vector<std::int64_t>& ids,
                     std::vector<std::size_t> index_shape);
Var dropout(Var x, double rate, std::uint64_t seed);
Var cross_entropy(Var logits, const std::vector<std::int64_t>& labels,
                  std::int64_t ignore_label = -1);
Var transpose(Var x);
Var scale(Var x, double factor);
Var reduce_sum(Var x);
Var reshape(Var x, std::vector<std::size_t> shape);
Var split_heads(Var x, std::size_t heads);
Var merge_heads(Var x, std::size_t heads);
Var mean_all(Var x);

/// Plain (non-recording) softmax over the last axis; evaluation helper.
Tensor softmax_lastdim_value(const Tensor& x);

/// Max over coordinates of |analytic − central difference| relative error,
/// with denominator max(|analytic|, |cd|, 1e-12). `f` must be deterministic.
double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps);

}  // namespace peftlab
