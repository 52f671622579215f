#include "neuronalloc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fmt/format.h>
#include <unordered_set>

namespace nalloc {

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void check_finite(std::span<const float> v, std::string_view where) {
  for (float x : v) {
    if (!std::isfinite(x)) {
      throw numeric_error(fmt::format("{} produced a non-finite value", where));
    }
  }
}

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw shape_error("tensor dimensions must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

using detail::TensorImpl;

Tensor make_node(OpKind op, std::vector<int> shape, std::vector<float> values,
                 std::vector<Tensor> parents, detail::OpMeta meta = {}) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  bool track = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) track = track || p.requires_grad();
  }
  if (track) {
    impl->requires_grad = true;
    impl->op = op;
    impl->parents.reserve(parents.size());
    for (const Tensor& p : parents) impl->parents.push_back(p.impl());
    impl->meta = std::move(meta);
  }
  check_finite(impl->values, op_name(op));
  return Tensor(std::move(impl));
}

// C += A * B, row major. k-ascending accumulation per output element.
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;  // masked and post-relu rows are often sparse
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T  (A: m x k, B: n x k, C: m x n)
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<std::size_t>(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C += A^T * B  (A: m x k, B: m x n, C: k x n)
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int p = 0; p < m; ++p) {
    const float* arow = a + static_cast<std::size_t>(p) * k;
    const float* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < k; ++i) {
      const float av = arow[i];
      if (av == 0.0f) continue;
      float* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct Dims2 {
  int rows, cols;
};

Dims2 as_2d(const TensorImpl& t, std::string_view where) {
  if (t.shape.size() == 1) return {1, t.shape[0]};
  if (t.shape.size() == 2) return {t.shape[0], t.shape[1]};
  throw shape_error(fmt::format("{}: expected a 1-d or 2-d tensor, got {}", where,
                                shape_str(t.shape)));
}

// Broadcast classification for add/mask_mul second operands.
enum class RowBroadcast { none, per_column };

RowBroadcast classify_broadcast(const TensorImpl& a, const TensorImpl& b,
                                std::string_view where) {
  if (a.shape == b.shape) return RowBroadcast::none;
  const Dims2 da = as_2d(a, where);
  const Dims2 db = as_2d(b, where);
  if (db.rows == 1 && db.cols == da.cols) return RowBroadcast::per_column;
  throw shape_error(fmt::format("{}: incompatible shapes {} and {}", where,
                                shape_str(a.shape), shape_str(b.shape)));
}

double row_logsumexp(const float* row, int n) {
  float mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double s = 0.0;
  for (int j = 0; j < n; ++j) s += std::exp(static_cast<double>(row[j] - mx));
  return static_cast<double>(mx) + std::log(s);
}

}  // namespace

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::concat: return "concat";
    case OpKind::transpose: return "transpose";
    case OpKind::mask_mul: return "mask_mul";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "?";
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<float> values,
                           bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  if (n != values.size()) {
    throw shape_error(fmt::format("leaf: {} values for shape {}", values.size(),
                                  shape_str(shape)));
  }
  check_finite(values, "leaf");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_values(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

int Tensor::rows() const { return as_2d(*impl_, "rows").rows; }
int Tensor::cols() const { return as_2d(*impl_, "cols").cols; }

float Tensor::item() const {
  if (numel() != 1) throw shape_error("item() on a non-scalar tensor");
  return impl_->values[0];
}

std::span<const float> Tensor::grad() const {
  if (impl_->grad.empty()) throw usage_error("tensor has no gradient");
  return impl_->grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw shape_error(fmt::format("matmul: expected 2-d tensors, got {} and {}",
                                  shape_str(a.shape()), shape_str(b.shape())));
  }
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw shape_error(fmt::format("matmul: inner dimensions differ, {} vs {}",
                                  shape_str(a.shape()), shape_str(b.shape())));
  }
  std::vector<float> out(static_cast<std::size_t>(m) * n, 0.0f);
  gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_node(OpKind::matmul, {m, n}, std::move(out), {a, b});
}

Tensor add(const Tensor& a, const Tensor& b) {
  const RowBroadcast bc = classify_broadcast(*a.impl(), *b.impl(), "add");
  std::vector<float> out(a.values().begin(), a.values().end());
  if (bc == RowBroadcast::none) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  } else {
    const Dims2 d = as_2d(*a.impl(), "add");
    for (int r = 0; r < d.rows; ++r) {
      float* orow = out.data() + static_cast<std::size_t>(r) * d.cols;
      for (int j = 0; j < d.cols; ++j) orow[j] += b.values()[j];
    }
  }
  return make_node(OpKind::add, a.shape(), std::move(out), {a, b});
}

Tensor scale(const Tensor& x, float alpha) {
  if (!std::isfinite(alpha)) throw numeric_error("scale: non-finite factor");
  std::vector<float> out(x.values().begin(), x.values().end());
  for (float& v : out) v *= alpha;
  detail::OpMeta meta;
  meta.alpha = alpha;
  return make_node(OpKind::scale, x.shape(), std::move(out), {x}, std::move(meta));
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.values().begin(), x.values().end());
  for (float& v : out) v = v > 0.0f ? v : 0.0f;
  return make_node(OpKind::relu, x.shape(), std::move(out), {x});
}

Tensor softmax(const Tensor& x) {
  const Dims2 d = as_2d(*x.impl(), "softmax");
  std::vector<float> out(x.numel());
  for (int r = 0; r < d.rows; ++r) {
    const float* row = x.values().data() + static_cast<std::size_t>(r) * d.cols;
    float* orow = out.data() + static_cast<std::size_t>(r) * d.cols;
    float mx = row[0];
    for (int j = 1; j < d.cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < d.cols; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int j = 0; j < d.cols; ++j) orow[j] *= inv;
  }
  return make_node(OpKind::softmax, x.shape(), std::move(out), {x});
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const Dims2 d = as_2d(*x.impl(), "layer_norm");
  const Dims2 dg = as_2d(*gain.impl(), "layer_norm");
  const Dims2 db = as_2d(*bias.impl(), "layer_norm");
  if (dg.rows != 1 || dg.cols != d.cols || db.rows != 1 || db.cols != d.cols) {
    throw shape_error(fmt::format("layer_norm: gain/bias must have {} columns, got {}",
                                  d.cols, shape_str(gain.shape())));
  }
  std::vector<float> out(x.numel());
  for (int r = 0; r < d.rows; ++r) {
    const float* row = x.values().data() + static_cast<std::size_t>(r) * d.cols;
    float* orow = out.data() + static_cast<std::size_t>(r) * d.cols;
    double mean = 0.0;
    for (int j = 0; j < d.cols; ++j) mean += row[j];
    mean /= d.cols;
    double var = 0.0;
    for (int j = 0; j < d.cols; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= d.cols;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d.cols; ++j) {
      const float xh = static_cast<float>((row[j] - mean) * inv);
      orow[j] = xh * gain.values()[j] + bias.values()[j];
    }
  }
  detail::OpMeta meta;
  meta.eps = eps;
  return make_node(OpKind::layer_norm, x.shape(), std::move(out), {x, gain, bias},
                   std::move(meta));
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  if (table.shape().size() != 2) {
    throw shape_error("embedding_lookup: table must be 2-d");
  }
  const int vocab = table.shape()[0], dim = table.shape()[1];
  std::vector<float> out(ids.size() * static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= vocab) {
      throw data_error(fmt::format("embedding_lookup: id {} outside vocabulary of {}",
                                   id, vocab));
    }
    std::memcpy(out.data() + i * dim,
                table.values().data() + static_cast<std::size_t>(id) * dim,
                sizeof(float) * dim);
  }
  detail::OpMeta meta;
  meta.ints.assign(ids.begin(), ids.end());
  return make_node(OpKind::embedding_lookup, {static_cast<int>(ids.size()), dim},
                   std::move(out), {table}, std::move(meta));
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw shape_error("concat: no inputs");
  const Dims2 d0 = as_2d(*parts[0].impl(), "concat");
  int total_cols = 0;
  detail::OpMeta meta;
  for (const Tensor& p : parts) {
    const Dims2 dp = as_2d(*p.impl(), "concat");
    if (dp.rows != d0.rows) {
      throw shape_error(fmt::format("concat: row counts differ, {} vs {}",
                                    shape_str(parts[0].shape()), shape_str(p.shape())));
    }
    meta.ints.push_back(total_cols);
    total_cols += dp.cols;
  }
  std::vector<float> out(static_cast<std::size_t>(d0.rows) * total_cols);
  for (int r = 0; r < d0.rows; ++r) {
    float* orow = out.data() + static_cast<std::size_t>(r) * total_cols;
    int off = 0;
    for (const Tensor& p : parts) {
      const int pc = as_2d(*p.impl(), "concat").cols;
      std::memcpy(orow + off, p.values().data() + static_cast<std::size_t>(r) * pc,
                  sizeof(float) * pc);
      off += pc;
    }
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_node(OpKind::concat, {d0.rows, total_cols}, std::move(out),
                   std::move(parents), std::move(meta));
}

Tensor transpose(const Tensor& x) {
  if (x.shape().size() != 2) throw shape_error("transpose: expected a 2-d tensor");
  const int r = x.shape()[0], c = x.shape()[1];
  std::vector<float> out(x.numel());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out[static_cast<std::size_t>(j) * r + i] =
          x.values()[static_cast<std::size_t>(i) * c + j];
    }
  }
  return make_node(OpKind::transpose, {c, r}, std::move(out), {x});
}

Tensor mask_mul(const Tensor& x, const Tensor& mask) {
  if (mask.requires_grad()) {
    throw usage_error("mask_mul: the mask operand must not require gradients");
  }
  const RowBroadcast bc = classify_broadcast(*x.impl(), *mask.impl(), "mask_mul");
  std::vector<float> out(x.values().begin(), x.values().end());
  if (bc == RowBroadcast::none) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask.values()[i];
  } else {
    const Dims2 d = as_2d(*x.impl(), "mask_mul");
    for (int r = 0; r < d.rows; ++r) {
      float* orow = out.data() + static_cast<std::size_t>(r) * d.cols;
      for (int j = 0; j < d.cols; ++j) orow[j] *= mask.values()[j];
    }
  }
  return make_node(OpKind::mask_mul, x.shape(), std::move(out), {x, mask});
}

Tensor slice_cols(const Tensor& x, int begin, int end) {
  const Dims2 d = as_2d(*x.impl(), "slice_cols");
  if (begin < 0 || end > d.cols || begin >= end) {
    throw shape_error(fmt::format("slice_cols: bounds [{}, {}) invalid for {} columns",
                                  begin, end, d.cols));
  }
  const int w = end - begin;
  std::vector<float> out(static_cast<std::size_t>(d.rows) * w);
  for (int r = 0; r < d.rows; ++r) {
    std::memcpy(out.data() + static_cast<std::size_t>(r) * w,
                x.values().data() + static_cast<std::size_t>(r) * d.cols + begin,
                sizeof(float) * w);
  }
  detail::OpMeta meta;
  meta.ints = {begin, end};
  return make_node(OpKind::slice_cols, {d.rows, w}, std::move(out), {x}, std::move(meta));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int pad_id,
                     bool mean_reduce) {
  if (logits.shape().size() != 2) {
    throw shape_error("cross_entropy: logits must be [tokens x vocab]");
  }
  const int n = logits.shape()[0], vocab = logits.shape()[1];
  if (static_cast<int>(targets.size()) != n) {
    throw shape_error(fmt::format("cross_entropy: {} targets for {} logit rows",
                                  targets.size(), n));
  }
  double total = 0.0;
  std::int64_t support = 0;
  for (int t = 0; t < n; ++t) {
    const int y = targets[t];
    if (y == pad_id) continue;
    if (y < 0 || y >= vocab) {
      throw data_error(fmt::format("cross_entropy: target id {} outside vocabulary of {}",
                                   y, vocab));
    }
    const float* row = logits.values().data() + static_cast<std::size_t>(t) * vocab;
    total += row_logsumexp(row, vocab) - static_cast<double>(row[y]);
    ++support;
  }
  if (support == 0) throw data_error("cross_entropy: empty loss support");
  detail::OpMeta meta;
  meta.ints.assign(targets.begin(), targets.end());
  meta.pad_id = pad_id;
  meta.mean_reduce = mean_reduce;
  meta.support = support;
  const float value = static_cast<float>(mean_reduce ? total / support : total);
  return make_node(OpKind::cross_entropy, {1}, {value}, {logits}, std::move(meta));
}

Tensor forward_primitive(Primitive kind, std::span<const Tensor> inputs,
                         const PrimitiveArgs& args) {
  const auto want = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw usage_error(fmt::format("forward_primitive: expected {} inputs, got {}", n,
                                    inputs.size()));
    }
  };
  switch (kind) {
    case Primitive::matmul: want(2); return matmul(inputs[0], inputs[1]);
    case Primitive::add: want(2); return add(inputs[0], inputs[1]);
    case Primitive::scale: want(1); return scale(inputs[0], args.alpha);
    case Primitive::relu: want(1); return relu(inputs[0]);
    case Primitive::softmax: want(1); return softmax(inputs[0]);
    case Primitive::layer_norm:
      want(3);
      return layer_norm(inputs[0], inputs[1], inputs[2], args.eps);
    case Primitive::embedding_lookup: want(1); return embedding_lookup(inputs[0], args.ids);
    case Primitive::concat: return concat(inputs);
    case Primitive::transpose: want(1); return transpose(inputs[0]);
    case Primitive::mask_mul: want(2); return mask_mul(inputs[0], inputs[1]);
  }
  throw usage_error("forward_primitive: unknown primitive");
}

namespace {

void accumulate_backward(TensorImpl& node) {
  using detail::OpMeta;
  const std::vector<float>& g = node.grad;
  const auto parent_grad = [&](std::size_t idx) -> std::vector<float>* {
    TensorImpl& p = *node.parents[idx];
    if (!p.requires_grad) return nullptr;
    return &p.grad;
  };

  switch (node.op) {
    case OpKind::leaf:
      return;
    case OpKind::matmul: {
      TensorImpl& a = *node.parents[0];
      TensorImpl& b = *node.parents[1];
      const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
      if (auto* ga = parent_grad(0)) {
        gemm_nt(g.data(), b.values.data(), ga->data(), m, n, k);
      }
      if (auto* gb = parent_grad(1)) {
        gemm_tn(a.values.data(), g.data(), gb->data(), m, k, n);
      }
      return;
    }
    case OpKind::add: {
      if (auto* ga = parent_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      }
      if (auto* gb = parent_grad(1)) {
        TensorImpl& a = *node.parents[0];
        TensorImpl& b = *node.parents[1];
        if (a.shape == b.shape) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
        } else {
          const Dims2 d = as_2d(a, "add");
          for (int r = 0; r < d.rows; ++r) {
            const float* grow = g.data() + static_cast<std::size_t>(r) * d.cols;
            for (int j = 0; j < d.cols; ++j) (*gb)[j] += grow[j];
          }
        }
      }
      return;
    }
    case OpKind::scale: {
      if (auto* gx = parent_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += node.meta.alpha * g[i];
      }
      return;
    }
    case OpKind::relu: {
      if (auto* gx = parent_grad(0)) {
        const TensorImpl& x = *node.parents[0];
        // derivative at exactly 0 is defined as 0
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x.values[i] > 0.0f) (*gx)[i] += g[i];
        }
      }
      return;
    }
    case OpKind::softmax: {
      if (auto* gx = parent_grad(0)) {
        const Dims2 d = as_2d(node, "softmax");
        for (int r = 0; r < d.rows; ++r) {
          const float* y = node.values.data() + static_cast<std::size_t>(r) * d.cols;
          const float* gy = g.data() + static_cast<std::size_t>(r) * d.cols;
          float* gxr = gx->data() + static_cast<std::size_t>(r) * d.cols;
          double dot = 0.0;
          for (int j = 0; j < d.cols; ++j) dot += static_cast<double>(gy[j]) * y[j];
          for (int j = 0; j < d.cols; ++j) {
            gxr[j] += y[j] * (gy[j] - static_cast<float>(dot));
          }
        }
      }
      return;
    }
    case OpKind::layer_norm: {
      const TensorImpl& x = *node.parents[0];
      const TensorImpl& gain = *node.parents[1];
      const Dims2 d = as_2d(x, "layer_norm");
      auto* gx = parent_grad(0);
      auto* gg = parent_grad(1);
      auto* gb = parent_grad(2);
      std::vector<float> xh(static_cast<std::size_t>(d.cols));
      for (int r = 0; r < d.rows; ++r) {
        const float* row = x.values.data() + static_cast<std::size_t>(r) * d.cols;
        const float* gy = g.data() + static_cast<std::size_t>(r) * d.cols;
        double mean = 0.0;
        for (int j = 0; j < d.cols; ++j) mean += row[j];
        mean /= d.cols;
        double var = 0.0;
        for (int j = 0; j < d.cols; ++j) {
          const double c = row[j] - mean;
          var += c * c;
        }
        var /= d.cols;
        const double inv = 1.0 / std::sqrt(var + node.meta.eps);
        for (int j = 0; j < d.cols; ++j) {
          xh[j] = static_cast<float>((row[j] - mean) * inv);
        }
        if (gb) {
          for (int j = 0; j < d.cols; ++j) (*gb)[j] += gy[j];
        }
        if (gg) {
          for (int j = 0; j < d.cols; ++j) (*gg)[j] += gy[j] * xh[j];
        }
        if (gx) {
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int j = 0; j < d.cols; ++j) {
            const double dxh = static_cast<double>(gy[j]) * gain.values[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
          }
          const double m1 = sum_dxh / d.cols;
          const double m2 = sum_dxh_xh / d.cols;
          float* gxr = gx->data() + static_cast<std::size_t>(r) * d.cols;
          for (int j = 0; j < d.cols; ++j) {
            const double dxh = static_cast<double>(gy[j]) * gain.values[j];
            gxr[j] += static_cast<float>(inv * (dxh - m1 - xh[j] * m2));
          }
        }
      }
      return;
    }
    case OpKind::embedding_lookup: {
      if (auto* gt = parent_grad(0)) {
        const int dim = node.shape[1];
        for (std::size_t i = 0; i < node.meta.ints.size(); ++i) {
          const int id = node.meta.ints[i];
          float* dst = gt->data() + static_cast<std::size_t>(id) * dim;
          const float* src = g.data() + i * dim;
          for (int j = 0; j < dim; ++j) dst[j] += src[j];
        }
      }
      return;
    }
    case OpKind::concat: {
      const int rows = node.shape[0], total = node.shape[1];
      for (std::size_t p = 0; p < node.parents.size(); ++p) {
        auto* gp = parent_grad(p);
        if (!gp) continue;
        const int off = node.meta.ints[p];
        const int w = as_2d(*node.parents[p], "concat").cols;
        for (int r = 0; r < rows; ++r) {
          const float* grow = g.data() + static_cast<std::size_t>(r) * total + off;
          float* dst = gp->data() + static_cast<std::size_t>(r) * w;
          for (int j = 0; j < w; ++j) dst[j] += grow[j];
        }
      }
      return;
    }
    case OpKind::transpose: {
      if (auto* gx = parent_grad(0)) {
        const int r = node.shape[0], c = node.shape[1];  // output dims
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) {
            (*gx)[static_cast<std::size_t>(j) * r + i] +=
                g[static_cast<std::size_t>(i) * c + j];
          }
        }
      }
      return;
    }
    case OpKind::mask_mul: {
      if (auto* gx = parent_grad(0)) {
        const TensorImpl& x = *node.parents[0];
        const TensorImpl& m = *node.parents[1];
        if (x.shape == m.shape) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * m.values[i];
        } else {
          const Dims2 d = as_2d(x, "mask_mul");
          for (int r = 0; r < d.rows; ++r) {
            const float* grow = g.data() + static_cast<std::size_t>(r) * d.cols;
            float* gxr = gx->data() + static_cast<std::size_t>(r) * d.cols;
            for (int j = 0; j < d.cols; ++j) gxr[j] += grow[j] * m.values[j];
          }
        }
      }
      return;
    }
    case OpKind::slice_cols: {
      if (auto* gx = parent_grad(0)) {
        const int begin = node.meta.ints[0];
        const int rows = node.shape[0], w = node.shape[1];
        const int src_cols = as_2d(*node.parents[0], "slice_cols").cols;
        for (int r = 0; r < rows; ++r) {
          const float* grow = g.data() + static_cast<std::size_t>(r) * w;
          float* dst = gx->data() + static_cast<std::size_t>(r) * src_cols + begin;
          for (int j = 0; j < w; ++j) dst[j] += grow[j];
        }
      }
      return;
    }
    case OpKind::cross_entropy: {
      if (auto* gl = parent_grad(0)) {
        const TensorImpl& logits = *node.parents[0];
        const int n = logits.shape[0], vocab = logits.shape[1];
        const double gscale =
            static_cast<double>(g[0]) *
            (node.meta.mean_reduce ? 1.0 / static_cast<double>(node.meta.support) : 1.0);
        for (int t = 0; t < n; ++t) {
          const int y = node.meta.ints[t];
          if (y == node.meta.pad_id) continue;
          const float* row = logits.values.data() + static_cast<std::size_t>(t) * vocab;
          const double lse = row_logsumexp(row, vocab);
          float* grow = gl->data() + static_cast<std::size_t>(t) * vocab;
          for (int j = 0; j < vocab; ++j) {
            const double p = std::exp(static_cast<double>(row[j]) - lse);
            grow[j] += static_cast<float>(gscale * (p - (j == y ? 1.0 : 0.0)));
          }
        }
      }
      return;
    }
  }
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw usage_error("backward: loss must be a scalar tensor");
  }
  TensorImpl* root = loss.impl().get();
  if (!root->requires_grad) {
    throw usage_error("backward: tensor is not part of a tracked graph");
  }

  // Iterative post-order DFS; the resulting order is deterministic.
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are rebuilt per call; leaf gradients accumulate.
  for (TensorImpl* node : topo) {
    if (node->is_leaf()) {
      if (node->grad.empty()) node->grad.assign(node->numel(), 0.0f);
    } else {
      node->grad.assign(node->numel(), 0.0f);
    }
  }
  root->grad[0] += 1.0f;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    accumulate_backward(**it);
  }
  for (TensorImpl* node : topo) {
    check_finite(node->grad, "backward");
  }
}

Parameter::Parameter(std::string n, Tensor t)
    : name(std::move(n)),
      tensor(std::move(t)),
      moment1(tensor.numel(), 0.0f),
      moment2(tensor.numel(), 0.0f) {}

void adam_step(std::span<Parameter> params, const AdamConfig& cfg,
               std::int64_t step_count) {
  if (step_count < 1) throw usage_error("adam_step: step_count must be >= 1");
  for (const Parameter& p : params) {
    if (p.moment1.size() != p.tensor.numel() || p.moment2.size() != p.tensor.numel()) {
      throw shape_error("adam_step: moment arrays do not match parameter " + p.name);
    }
    if (p.tensor.has_grad()) {
      for (float gv : p.tensor.grad()) {
        if (!std::isfinite(gv)) {
          throw numeric_error("adam_step: non-finite gradient in " + p.name);
        }
      }
    }
  }
  const double c1 = 1.0 / (1.0 - std::pow(cfg.beta1, static_cast<double>(step_count)));
  const double c2 = 1.0 / (1.0 - std::pow(cfg.beta2, static_cast<double>(step_count)));
  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  for (Parameter& p : params) {
    std::span<float> v = p.tensor.mutable_values();
    const bool has_grad = p.tensor.has_grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float g = has_grad ? p.tensor.grad()[i] : 0.0f;
      p.moment1[i] = b1 * p.moment1[i] + (1.0f - b1) * g;
      p.moment2[i] = b2 * p.moment2[i] + (1.0f - b2) * g * g;
      const double mhat = static_cast<double>(p.moment1[i]) * c1;
      const double vhat = static_cast<double>(p.moment2[i]) * c2;
      v[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
    check_finite(v, "adam_step");
  }
}

void zero_grad(std::span<Parameter> params) {
  for (Parameter& p : params) p.tensor.clear_grad();
}

}  // namespace nalloc
