#include "peftlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace peftlab {

namespace {

constexpr double kGeluCoeff = 0.044715;
// sqrt(2/pi) for the tanh approximation
const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);

// c[M,N] (+)= op(a) * op(b). a is [M,K] ([K,M] when trans_a), b is [K,N]
// ([N,K] when trans_b).
void gemm(bool trans_a, bool trans_b, std::size_t m_dim, std::size_t n_dim, std::size_t k_dim,
          const double* a, const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m_dim * n_dim, 0.0);
  for (std::size_t m = 0; m < m_dim; ++m) {
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double av = trans_a ? a[k * m_dim + m] : a[m * k_dim + k];
      if (av == 0.0) continue;
      const double* brow = trans_b ? b + k : b + k * n_dim;
      double* crow = c + m * n_dim;
      if (trans_b) {
        for (std::size_t n = 0; n < n_dim; ++n) crow[n] += av * brow[n * k_dim];
      } else {
        for (std::size_t n = 0; n < n_dim; ++n) crow[n] += av * brow[n];
      }
    }
  }
}

double gelu_forward(double x) {
  const double u = kGeluScale * (x + kGeluCoeff * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  const double u = kGeluScale * (x + kGeluCoeff * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluScale * (1.0 + 3.0 * kGeluCoeff * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

[[noreturn]] void shape_fail(PrimitiveKind kind, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(kind_name(kind)) + ": incompatible shapes " +
                   shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

[[noreturn]] void shape_fail(PrimitiveKind kind, const Tensor& a) {
  throw ShapeError(std::string(kind_name(kind)) + ": unsupported shape " + shape_str(a.shape()));
}

struct MatmulPlan {
  bool batched = false;
  std::size_t batch = 1;
  std::size_t m = 0, k = 0, n = 0;
};

MatmulPlan matmul_plan(const Tensor& a, const Tensor& b) {
  MatmulPlan plan;
  if (a.rank() >= 2 && b.rank() == 2) {
    if (a.shape().back() != b.dim(0)) shape_fail(PrimitiveKind::matmul, a, b);
    plan.k = a.shape().back();
    plan.n = b.dim(1);
    plan.m = a.numel() / plan.k;
    return plan;
  }
  if (a.rank() == b.rank() && a.rank() >= 3) {
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) {
      if (a.dim(i) != b.dim(i)) shape_fail(PrimitiveKind::matmul, a, b);
    }
    if (a.shape().back() != b.dim(b.rank() - 2)) shape_fail(PrimitiveKind::matmul, a, b);
    plan.batched = true;
    plan.m = a.dim(a.rank() - 2);
    plan.k = a.shape().back();
    plan.n = b.shape().back();
    plan.batch = a.numel() / (plan.m * plan.k);
    return plan;
  }
  shape_fail(PrimitiveKind::matmul, a, b);
}

}  // namespace

const char* kind_name(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::leaf: return "leaf";
    case PrimitiveKind::matmul: return "matmul";
    case PrimitiveKind::add: return "add";
    case PrimitiveKind::elementwise_mul: return "elementwise_mul";
    case PrimitiveKind::softmax_lastdim: return "softmax_lastdim";
    case PrimitiveKind::layernorm: return "layernorm";
    case PrimitiveKind::gelu: return "gelu";
    case PrimitiveKind::embedding_lookup: return "embedding_lookup";
    case PrimitiveKind::dropout: return "dropout";
    case PrimitiveKind::cross_entropy: return "cross_entropy";
    case PrimitiveKind::transpose: return "transpose";
    case PrimitiveKind::scale: return "scale";
    case PrimitiveKind::reduce_sum: return "reduce_sum";
    case PrimitiveKind::reshape: return "reshape";
    case PrimitiveKind::split_heads: return "split_heads";
    case PrimitiveKind::merge_heads: return "merge_heads";
  }
  return "unknown";
}

NodeId Tape::leaf(Tensor t) {
  TapeNode node;
  node.kind = PrimitiveKind::leaf;
  node.requires_grad = t.requires_grad();
  node.value = std::move(t);
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

NodeId Tape::forward(PrimitiveKind kind, std::span<const NodeId> inputs, OpAttrs attrs) {
  for (NodeId id : inputs) {
    if (id >= nodes_.size()) throw ContractError("forward: input node id out of range");
  }
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[inputs[i]].value; };
  auto expect_inputs = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ContractError(std::string(kind_name(kind)) + ": expected " + std::to_string(n) +
                          " inputs, got " + std::to_string(inputs.size()));
    }
  };

  Tensor value;
  std::vector<double> saved;

  switch (kind) {
    case PrimitiveKind::leaf:
      throw ContractError("forward: use Tape::leaf to record leaves");

    case PrimitiveKind::matmul: {
      expect_inputs(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const MatmulPlan p = matmul_plan(a, b);
      std::vector<std::size_t> out_shape;
      if (!p.batched) {
        out_shape = a.shape();
        out_shape.back() = p.n;
        value = Tensor(std::move(out_shape));
        gemm(false, false, p.m, p.n, p.k, a.data().data(), b.data().data(), value.data().data(),
             false);
      } else {
        out_shape = a.shape();
        out_shape[out_shape.size() - 1] = p.n;
        value = Tensor(std::move(out_shape));
        for (std::size_t i = 0; i < p.batch; ++i) {
          gemm(false, false, p.m, p.n, p.k, a.data().data() + i * p.m * p.k,
               b.data().data() + i * p.k * p.n, value.data().data() + i * p.m * p.n, false);
        }
      }
      break;
    }

    case PrimitiveKind::add: {
      expect_inputs(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.same_shape(b)) {
        value = Tensor(a.shape());
        for (std::size_t i = 0; i < a.numel(); ++i) value[i] = a[i] + b[i];
      } else if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.shape().back()) {
        // bias broadcast over the last axis
        value = Tensor(a.shape());
        const std::size_t d = b.dim(0);
        for (std::size_t i = 0; i < a.numel(); ++i) value[i] = a[i] + b[i % d];
      } else {
        shape_fail(kind, a, b);
      }
      break;
    }

    case PrimitiveKind::elementwise_mul: {
      expect_inputs(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.same_shape(b)) {
        value = Tensor(a.shape());
        for (std::size_t i = 0; i < a.numel(); ++i) value[i] = a[i] * b[i];
      } else if (b.rank() == 1 && b.dim(0) == a.shape().back()) {
        value = Tensor(a.shape());
        const std::size_t d = b.dim(0);
        for (std::size_t i = 0; i < a.numel(); ++i) value[i] = a[i] * b[i % d];
      } else if (a.rank() == 1 && a.dim(0) == b.shape().back()) {
        value = Tensor(b.shape());
        const std::size_t d = a.dim(0);
        for (std::size_t i = 0; i < b.numel(); ++i) value[i] = a[i % d] * b[i];
      } else {
        shape_fail(kind, a, b);
      }
      break;
    }

    case PrimitiveKind::softmax_lastdim: {
      expect_inputs(1);
      const Tensor& x = in(0);
      if (x.rank() < 1 || x.shape().back() == 0) shape_fail(kind, x);
      value = softmax_lastdim_value(x);
      break;
    }

    case PrimitiveKind::layernorm: {
      expect_inputs(3);
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const Tensor& beta = in(2);
      if (x.rank() < 1) shape_fail(kind, x);
      const std::size_t d = x.shape().back();
      if (gamma.rank() != 1 || gamma.dim(0) != d) shape_fail(kind, x, gamma);
      if (beta.rank() != 1 || beta.dim(0) != d) shape_fail(kind, x, beta);
      const std::size_t rows = x.numel() / d;
      value = Tensor(x.shape());
      saved.resize(rows * 2);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double c = xr[j] - mean;
          var += c * c;
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + attrs.epsilon);
        saved[r * 2] = mean;
        saved[r * 2 + 1] = rstd;
        double* yr = value.data().data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
          yr[j] = gamma[j] * ((xr[j] - mean) * rstd) + beta[j];
        }
      }
      break;
    }

    case PrimitiveKind::gelu: {
      expect_inputs(1);
      const Tensor& x = in(0);
      value = Tensor(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) value[i] = gelu_forward(x[i]);
      break;
    }

    case PrimitiveKind::embedding_lookup: {
      expect_inputs(1);
      const Tensor& table = in(0);
      if (table.rank() != 2) shape_fail(kind, table);
      const std::size_t vocab = table.dim(0);
      const std::size_t d = table.dim(1);
      if (attrs.indices.size() != shape_numel(attrs.shape)) {
        throw ContractError("embedding_lookup: index count does not match index shape");
      }
      std::vector<std::size_t> out_shape = attrs.shape;
      out_shape.push_back(d);
      value = Tensor(std::move(out_shape));
      for (std::size_t i = 0; i < attrs.indices.size(); ++i) {
        const std::int64_t id = attrs.indices[i];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
          throw DataError("embedding_lookup: token id " + std::to_string(id) +
                          " out of range for vocab " + std::to_string(vocab));
        }
        const double* row = table.data().data() + static_cast<std::size_t>(id) * d;
        std::copy(row, row + d, value.data().data() + i * d);
      }
      break;
    }

    case PrimitiveKind::dropout: {
      expect_inputs(1);
      const Tensor& x = in(0);
      const double rate = attrs.scalar;
      if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
      }
      value = Tensor(x.shape());
      if (rate == 0.0) {
        std::copy(x.data().begin(), x.data().end(), value.data().begin());
      } else {
        // inverted dropout with an explicit seeded mask so runs replay exactly
        Rng rng(attrs.seed);
        const double keep = 1.0 - rate;
        saved.resize(x.numel());
        for (std::size_t i = 0; i < x.numel(); ++i) {
          const double m = rng.uniform() >= rate ? 1.0 : 0.0;
          saved[i] = m;
          value[i] = x[i] * m / keep;
        }
      }
      break;
    }

    case PrimitiveKind::cross_entropy: {
      expect_inputs(1);
      const Tensor& logits = in(0);
      if (logits.rank() != 2) shape_fail(kind, logits);
      const std::size_t n = logits.dim(0);
      const std::size_t classes = logits.dim(1);
      if (attrs.labels.size() != n) {
        throw ContractError("cross_entropy: expected " + std::to_string(n) + " labels, got " +
                            std::to_string(attrs.labels.size()));
      }
      saved.resize(n * classes);
      double loss = 0.0;
      std::size_t counted = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data().data() + i * classes;
        double mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t c = 0; c < classes; ++c) saved[i * classes + c] = std::exp(row[c] - lse);
        const std::int64_t label = attrs.labels[i];
        if (label == attrs.ignore_label) continue;
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
          throw DataError("cross_entropy: label " + std::to_string(label) +
                          " out of range for " + std::to_string(classes) + " classes");
        }
        loss += lse - row[static_cast<std::size_t>(label)];
        ++counted;
      }
      if (counted == 0) throw DataError("cross_entropy: empty loss set");
      value = Tensor(std::vector<std::size_t>{}, loss / static_cast<double>(counted));
      break;
    }

    case PrimitiveKind::transpose: {
      expect_inputs(1);
      const Tensor& x = in(0);
      if (x.rank() < 2) shape_fail(kind, x);
      const std::size_t rows = x.dim(x.rank() - 2);
      const std::size_t cols = x.shape().back();
      const std::size_t batch = x.numel() / (rows * cols);
      std::vector<std::size_t> out_shape = x.shape();
      std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
      value = Tensor(std::move(out_shape));
      for (std::size_t bidx = 0; bidx < batch; ++bidx) {
        const double* src = x.data().data() + bidx * rows * cols;
        double* dst = value.data().data() + bidx * rows * cols;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
        }
      }
      break;
    }

    case PrimitiveKind::scale: {
      expect_inputs(1);
      const Tensor& x = in(0);
      value = Tensor(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) value[i] = x[i] * attrs.scalar;
      break;
    }

    case PrimitiveKind::reduce_sum: {
      expect_inputs(1);
      const Tensor& x = in(0);
      double sum = 0.0;
      for (std::size_t i = 0; i < x.numel(); ++i) sum += x[i];
      value = Tensor(std::vector<std::size_t>{}, sum);
      break;
    }

    case PrimitiveKind::reshape: {
      expect_inputs(1);
      const Tensor& x = in(0);
      if (shape_numel(attrs.shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(attrs.shape));
      }
      value = Tensor::from_data(attrs.shape, {x.data().begin(), x.data().end()});
      break;
    }

    case PrimitiveKind::split_heads: {
      expect_inputs(1);
      const Tensor& x = in(0);
      const std::size_t h = attrs.heads;
      if (x.rank() != 3 || h == 0 || x.shape().back() % h != 0) shape_fail(kind, x);
      const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2), dh = d / h;
      value = Tensor({b * h, s, dh});
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t si = 0; si < s; ++si) {
          const double* src = x.data().data() + (bi * s + si) * d;
          for (std::size_t q = 0; q < h; ++q) {
            double* dst = value.data().data() + (((bi * h + q) * s) + si) * dh;
            std::copy(src + q * dh, src + (q + 1) * dh, dst);
          }
        }
      }
      break;
    }

    case PrimitiveKind::merge_heads: {
      expect_inputs(1);
      const Tensor& x = in(0);
      const std::size_t h = attrs.heads;
      if (x.rank() != 3 || h == 0 || x.dim(0) % h != 0) shape_fail(kind, x);
      const std::size_t b = x.dim(0) / h, s = x.dim(1), dh = x.dim(2), d = dh * h;
      value = Tensor({b, s, d});
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t si = 0; si < s; ++si) {
          double* dst = value.data().data() + (bi * s + si) * d;
          for (std::size_t q = 0; q < h; ++q) {
            const double* src = x.data().data() + (((bi * h + q) * s) + si) * dh;
            std::copy(src, src + dh, dst + q * dh);
          }
        }
      }
      break;
    }
  }

  TapeNode node;
  node.kind = kind;
  node.inputs.assign(inputs.begin(), inputs.end());
  bool needs_grad = false;
  for (NodeId id : inputs) needs_grad = needs_grad || nodes_[id].requires_grad;
  node.requires_grad = needs_grad;
  node.value = std::move(value);
  node.attrs = std::move(attrs);
  node.saved = std::move(saved);
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

GradMap Tape::backward(NodeId loss) const {
  if (loss >= nodes_.size()) throw ContractError("backward: unknown node id");
  if (nodes_[loss].value.numel() != 1) {
    throw ContractError("backward: loss must be scalar-valued, got shape " +
                        shape_str(nodes_[loss].value.shape()));
  }

  std::vector<std::vector<double>> grads(nodes_.size());
  std::vector<char> present(nodes_.size(), 0);
  auto grad_of = [&](NodeId id) -> std::vector<double>& {
    if (!present[id]) {
      grads[id].assign(nodes_[id].value.numel(), 0.0);
      present[id] = 1;
    }
    return grads[id];
  };
  auto wants = [&](NodeId id) { return nodes_[id].requires_grad; };

  grad_of(loss)[0] = 1.0;

  for (NodeId i = loss + 1; i-- > 0;) {
    const TapeNode& n = nodes_[i];
    if (!present[i] || !n.requires_grad || n.kind == PrimitiveKind::leaf) continue;
    const std::vector<double>& g = grads[i];
    auto input = [&](std::size_t j) -> const Tensor& { return nodes_[n.inputs[j]].value; };

    switch (n.kind) {
      case PrimitiveKind::leaf:
        break;

      case PrimitiveKind::matmul: {
        const Tensor& a = input(0);
        const Tensor& b = input(1);
        const MatmulPlan p = matmul_plan(a, b);
        if (!p.batched) {
          if (wants(n.inputs[0])) {
            gemm(false, true, p.m, p.k, p.n, g.data(), b.data().data(),
                 grad_of(n.inputs[0]).data(), true);
          }
          if (wants(n.inputs[1])) {
            gemm(true, false, p.k, p.n, p.m, a.data().data(), g.data(),
                 grad_of(n.inputs[1]).data(), true);
          }
        } else {
          for (std::size_t bi = 0; bi < p.batch; ++bi) {
            const double* ga = g.data() + bi * p.m * p.n;
            if (wants(n.inputs[0])) {
              gemm(false, true, p.m, p.k, p.n, ga, b.data().data() + bi * p.k * p.n,
                   grad_of(n.inputs[0]).data() + bi * p.m * p.k, true);
            }
            if (wants(n.inputs[1])) {
              gemm(true, false, p.k, p.n, p.m, a.data().data() + bi * p.m * p.k, ga,
                   grad_of(n.inputs[1]).data() + bi * p.k * p.n, true);
            }
          }
        }
        break;
      }

      case PrimitiveKind::add: {
        const Tensor& a = input(0);
        const Tensor& b = input(1);
        if (wants(n.inputs[0])) {
          std::vector<double>& da = grad_of(n.inputs[0]);
          for (std::size_t i2 = 0; i2 < g.size(); ++i2) da[i2] += g[i2];
        }
        if (wants(n.inputs[1])) {
          std::vector<double>& db = grad_of(n.inputs[1]);
          if (a.same_shape(b)) {
            for (std::size_t i2 = 0; i2 < g.size(); ++i2) db[i2] += g[i2];
          } else {
            const std::size_t d = b.dim(0);
            for (std::size_t i2 = 0; i2 < g.size(); ++i2) db[i2 % d] += g[i2];
          }
        }
        break;
      }

      case PrimitiveKind::elementwise_mul: {
        const Tensor& a = input(0);
        const Tensor& b = input(1);
        if (a.same_shape(b)) {
          if (wants(n.inputs[0])) {
            std::vector<double>& da = grad_of(n.inputs[0]);
            for (std::size_t i2 = 0; i2 < g.size(); ++i2) da[i2] += g[i2] * b[i2];
          }
          if (wants(n.inputs[1])) {
            std::vector<double>& db = grad_of(n.inputs[1]);
            for (std::size_t i2 = 0; i2 < g.size(); ++i2) db[i2] += g[i2] * a[i2];
          }
        } else if (b.rank() == 1) {
          const std::size_t d = b.dim(0);
          if (wants(n.inputs[0])) {
            std::vector<double>& da = grad_of(n.inputs[0]);
            for (std::size_t i2 = 0; i2 < g.size(); ++i2) da[i2] += g[i2] * b[i2 % d];
          }
          if (wants(n.inputs[1])) {
            std::vector<double>& db = grad_of(n.inputs[1]);
            for (std::size_t i2 = 0; i2 < g.size(); ++i2) db[i2 % d] += g[i2] * a[i2];
          }
        } else {
          const std::size_t d = a.dim(0);
          if (wants(n.inputs[0])) {
            std::vector<double>& da = grad_of(n.inputs[0]);
            for (std::size_t i2 = 0; i2 < g.size(); ++i2) da[i2 % d] += g[i2] * b[i2];
          }
          if (wants(n.inputs[1])) {
            std::vector<double>& db = grad_of(n.inputs[1]);
            for (std::size_t i2 = 0; i2 < g.size(); ++i2) db[i2] += g[i2] * a[i2 % d];
          }
        }
        break;
      }

      case PrimitiveKind::softmax_lastdim: {
        if (!wants(n.inputs[0])) break;
        const Tensor& y = n.value;
        const std::size_t d = y.shape().back();
        const std::size_t rows = y.numel() / d;
        std::vector<double>& dx = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = y.data().data() + r * d;
          const double* gr = g.data() + r * d;
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
          double* dxr = dx.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) dxr[j] += yr[j] * (gr[j] - dot);
        }
        break;
      }

      case PrimitiveKind::layernorm: {
        const Tensor& x = input(0);
        const Tensor& gamma = input(1);
        const std::size_t d = x.shape().back();
        const std::size_t rows = x.numel() / d;
        for (std::size_t r = 0; r < rows; ++r) {
          const double mean = n.saved[r * 2];
          const double rstd = n.saved[r * 2 + 1];
          const double* xr = x.data().data() + r * d;
          const double* gr = g.data() + r * d;
          if (wants(n.inputs[1]) || wants(n.inputs[2])) {
            for (std::size_t j = 0; j < d; ++j) {
              const double xhat = (xr[j] - mean) * rstd;
              if (wants(n.inputs[1])) grad_of(n.inputs[1])[j] += gr[j] * xhat;
              if (wants(n.inputs[2])) grad_of(n.inputs[2])[j] += gr[j];
            }
          }
          if (wants(n.inputs[0])) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double xhat = (xr[j] - mean) * rstd;
              const double dxhat = gr[j] * gamma[j];
              m1 += dxhat;
              m2 += dxhat * xhat;
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            std::vector<double>& dx = grad_of(n.inputs[0]);
            for (std::size_t j = 0; j < d; ++j) {
              const double xhat = (xr[j] - mean) * rstd;
              const double dxhat = gr[j] * gamma[j];
              dx[r * d + j] += rstd * (dxhat - m1 - xhat * m2);
            }
          }
        }
        break;
      }

      case PrimitiveKind::gelu: {
        if (!wants(n.inputs[0])) break;
        const Tensor& x = input(0);
        std::vector<double>& dx = grad_of(n.inputs[0]);
        for (std::size_t i2 = 0; i2 < g.size(); ++i2) dx[i2] += g[i2] * gelu_derivative(x[i2]);
        break;
      }

      case PrimitiveKind::embedding_lookup: {
        if (!wants(n.inputs[0])) break;
        const Tensor& table = input(0);
        const std::size_t d = table.dim(1);
        std::vector<double>& dt = grad_of(n.inputs[0]);
        for (std::size_t i2 = 0; i2 < n.attrs.indices.size(); ++i2) {
          const std::size_t id = static_cast<std::size_t>(n.attrs.indices[i2]);
          const double* gr = g.data() + i2 * d;
          double* row = dt.data() + id * d;
          for (std::size_t j = 0; j < d; ++j) row[j] += gr[j];
        }
        break;
      }

      case PrimitiveKind::dropout: {
        if (!wants(n.inputs[0])) break;
        std::vector<double>& dx = grad_of(n.inputs[0]);
        if (n.saved.empty()) {
          for (std::size_t i2 = 0; i2 < g.size(); ++i2) dx[i2] += g[i2];
        } else {
          const double keep = 1.0 - n.attrs.scalar;
          for (std::size_t i2 = 0; i2 < g.size(); ++i2) dx[i2] += g[i2] * n.saved[i2] / keep;
        }
        break;
      }

      case PrimitiveKind::cross_entropy: {
        if (!wants(n.inputs[0])) break;
        const Tensor& logits = input(0);
        const std::size_t classes = logits.dim(1);
        const std::size_t rows = logits.dim(0);
        std::size_t counted = 0;
        for (std::int64_t label : n.attrs.labels) {
          if (label != n.attrs.ignore_label) ++counted;
        }
        const double gd = g[0] / static_cast<double>(counted);
        std::vector<double>& dx = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::int64_t label = n.attrs.labels[r];
          if (label == n.attrs.ignore_label) continue;
          const double* pr = n.saved.data() + r * classes;
          double* dxr = dx.data() + r * classes;
          for (std::size_t c = 0; c < classes; ++c) {
            dxr[c] += gd * (pr[c] - (static_cast<std::size_t>(label) == c ? 1.0 : 0.0));
          }
        }
        break;
      }

      case PrimitiveKind::transpose: {
        if (!wants(n.inputs[0])) break;
        const Tensor& x = input(0);
        const std::size_t rows = x.dim(x.rank() - 2);
        const std::size_t cols = x.shape().back();
        const std::size_t batch = x.numel() / (rows * cols);
        std::vector<double>& dx = grad_of(n.inputs[0]);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const double* gsrc = g.data() + bi * rows * cols;  // [cols, rows]
          double* dst = dx.data() + bi * rows * cols;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] += gsrc[c * rows + r];
          }
        }
        break;
      }

      case PrimitiveKind::scale: {
        if (!wants(n.inputs[0])) break;
        std::vector<double>& dx = grad_of(n.inputs[0]);
        for (std::size_t i2 = 0; i2 < g.size(); ++i2) dx[i2] += g[i2] * n.attrs.scalar;
        break;
      }

      case PrimitiveKind::reduce_sum: {
        if (!wants(n.inputs[0])) break;
        std::vector<double>& dx = grad_of(n.inputs[0]);
        for (double& v : dx) v += g[0];
        break;
      }

      case PrimitiveKind::reshape: {
        if (!wants(n.inputs[0])) break;
        std::vector<double>& dx = grad_of(n.inputs[0]);
        for (std::size_t i2 = 0; i2 < g.size(); ++i2) dx[i2] += g[i2];
        break;
      }

      case PrimitiveKind::split_heads: {
        if (!wants(n.inputs[0])) break;
        const Tensor& x = input(0);
        const std::size_t h = n.attrs.heads;
        const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2), dh = d / h;
        std::vector<double>& dx = grad_of(n.inputs[0]);
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t si = 0; si < s; ++si) {
            double* dst = dx.data() + (bi * s + si) * d;
            for (std::size_t q = 0; q < h; ++q) {
              const double* src = g.data() + (((bi * h + q) * s) + si) * dh;
              for (std::size_t j = 0; j < dh; ++j) dst[q * dh + j] += src[j];
            }
          }
        }
        break;
      }

      case PrimitiveKind::merge_heads: {
        if (!wants(n.inputs[0])) break;
        const Tensor& x = input(0);
        const std::size_t h = n.attrs.heads;
        const std::size_t b = x.dim(0) / h, s = x.dim(1), dh = x.dim(2), d = dh * h;
        std::vector<double>& dx = grad_of(n.inputs[0]);
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t si = 0; si < s; ++si) {
            const double* src = g.data() + (bi * s + si) * d;
            for (std::size_t q = 0; q < h; ++q) {
              double* dst = dx.data() + (((bi * h + q) * s) + si) * dh;
              for (std::size_t j = 0; j < dh; ++j) dst[j] += src[q * dh + j];
            }
          }
        }
        break;
      }
    }
  }

  GradMap out;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind != PrimitiveKind::leaf || !nodes_[i].value.requires_grad()) continue;
    std::vector<double> gv = present[i]
                                 ? std::move(grads[i])
                                 : std::vector<double>(nodes_[i].value.numel(), 0.0);
    out.emplace(i, Tensor::from_data(nodes_[i].value.shape(), std::move(gv)));
  }
  return out;
}

Var make_leaf(Tape& tape, Tensor t) { return Var{&tape, tape.leaf(std::move(t))}; }

namespace {
Var apply1(PrimitiveKind kind, Var x, OpAttrs attrs = {}) {
  const NodeId in[] = {x.id};
  return Var{x.tape, x.tape->forward(kind, in, std::move(attrs))};
}
Var apply2(PrimitiveKind kind, Var a, Var b, OpAttrs attrs = {}) {
  const NodeId in[] = {a.id, b.id};
  return Var{a.tape, a.tape->forward(kind, in, std::move(attrs))};
}
}  // namespace

Var matmul(Var a, Var b) { return apply2(PrimitiveKind::matmul, a, b); }
Var add(Var a, Var b) { return apply2(PrimitiveKind::add, a, b); }
Var elementwise_mul(Var a, Var b) { return apply2(PrimitiveKind::elementwise_mul, a, b); }
Var softmax_lastdim(Var x) { return apply1(PrimitiveKind::softmax_lastdim, x); }

Var layernorm(Var x, Var gamma, Var beta, double epsilon) {
  OpAttrs attrs;
  attrs.epsilon = epsilon;
  const NodeId in[] = {x.id, gamma.id, beta.id};
  return Var{x.tape, x.tape->forward(PrimitiveKind::layernorm, in, std::move(attrs))};
}

Var gelu(Var x) { return apply1(PrimitiveKind::gelu, x); }

Var embedding_lookup(Var table, const std::vector<std::int64_t>& ids,
                     std::vector<std::size_t> index_shape) {
  OpAttrs attrs;
  attrs.indices = ids;
  attrs.shape = std::move(index_shape);
  return apply1(PrimitiveKind::embedding_lookup, table, std::move(attrs));
}

Var dropout(Var x, double rate, std::uint64_t seed) {
  OpAttrs attrs;
  attrs.scalar = rate;
  attrs.seed = seed;
  return apply1(PrimitiveKind::dropout, x, std::move(attrs));
}

Var cross_entropy(Var logits, const std::vector<std::int64_t>& labels,
                  std::int64_t ignore_label) {
  OpAttrs attrs;
  attrs.labels = labels;
  attrs.ignore_label = ignore_label;
  return apply1(PrimitiveKind::cross_entropy, logits, std::move(attrs));
}

Var transpose(Var x) { return apply1(PrimitiveKind::transpose, x); }

Var scale(Var x, double factor) {
  OpAttrs attrs;
  attrs.scalar = factor;
  return apply1(PrimitiveKind::scale, x, std::move(attrs));
}

Var reduce_sum(Var x) { return apply1(PrimitiveKind::reduce_sum, x); }

Var reshape(Var x, std::vector<std::size_t> shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return apply1(PrimitiveKind::reshape, x, std::move(attrs));
}

Var split_heads(Var x, std::size_t heads) {
  OpAttrs attrs;
  attrs.heads = heads;
  return apply1(PrimitiveKind::split_heads, x, std::move(attrs));
}

Var merge_heads(Var x, std::size_t heads) {
  OpAttrs attrs;
  attrs.heads = heads;
  return apply1(PrimitiveKind::merge_heads, x, std::move(attrs));
}

Var mean_all(Var x) {
  const double inv = 1.0 / static_cast<double>(x.value().numel());
  return scale(reduce_sum(x), inv);
}

Tensor softmax_lastdim_value(const Tensor& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double* yr = y.data().data() + r * d;
    double mx = xr[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < d; ++j) yr[j] /= sum;
  }
  return y;
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");

  Tape tape;
  Tensor probe = x;
  probe.set_requires_grad(true);
  Var xv = make_leaf(tape, std::move(probe));
  Var y = f(tape, xv);
  if (y.value().numel() != 1) {
    throw ContractError("finite_diff_check: f must be scalar-valued");
  }
  if (!std::isfinite(y.value()[0])) {
    throw NumericError("finite_diff_check: non-finite value in f(x)");
  }
  GradMap grads = tape.backward(y.id);
  const auto it = grads.find(xv.id);
  const Tensor analytic = it != grads.end() ? it->second : Tensor(x.shape(), 0.0);

  auto eval = [&f](const Tensor& point) {
    Tape t;
    Var v = make_leaf(t, point);
    const double val = f(t, v).value()[0];
    if (!std::isfinite(val)) {
      throw NumericError("finite_diff_check: non-finite value in f(x)");
    }
    return val;
  };

  Tensor perturbed = x;
  perturbed.set_requires_grad(false);
  double max_err = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = perturbed[i];
    perturbed[i] = orig + eps;
    const double fp = eval(perturbed);
    perturbed[i] = orig - eps;
    const double fm = eval(perturbed);
    perturbed[i] = orig;
    const double cd = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double denom = std::max({std::fabs(a), std::fabs(cd), 1e-12});
    max_err = std::max(max_err, std::fabs(a - cd) / denom);
  }
  return max_err;
}

}  // namespace peftlab
