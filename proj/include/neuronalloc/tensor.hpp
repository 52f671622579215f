#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "neuronalloc/common.hpp"

namespace nalloc {

// Dense float32 tensors with define-by-run reverse-mode differentiation.
// The graph is rebuilt on every forward pass; kernels are single threaded
// with a fixed summation order, so identical inputs give bit-identical
// outputs and gradients.

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  scale,
  relu,
  softmax,
  layer_norm,
  embedding_lookup,
  concat,
  transpose,
  mask_mul,
  slice_cols,
  cross_entropy,
};

std::string_view op_name(OpKind op);

namespace detail {

struct OpMeta {
  float alpha = 0.0f;            // scale factor
  float eps = 0.0f;              // layer_norm epsilon
  std::vector<int> ints;         // embedding ids / targets / column bounds
  int pad_id = -1;               // cross_entropy padding id
  bool mean_reduce = true;       // cross_entropy reduction
  std::int64_t support = 0;      // cross_entropy: non-pad positions (set on forward)
};

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> values;
  std::vector<float> grad;  // empty until backward touches this node
  bool requires_grad = false;
  OpKind op = OpKind::leaf;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  OpMeta meta;

  std::size_t numel() const { return values.size(); }
  bool is_leaf() const { return op == OpKind::leaf; }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  // Leaf construction. Values must be finite.
  static Tensor from_values(std::vector<int> shape, std::vector<float> values,
                            bool requires_grad = false);
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->values.size(); }
  int rows() const;  // 2-d views; a 1-d tensor is one row
  int cols() const;

  std::span<const float> values() const { return impl_->values; }
  std::span<float> mutable_values() { return impl_->values; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const float> grad() const;
  void clear_grad() { impl_->grad.clear(); }

  OpKind op() const { return impl_->op; }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// While a guard is alive, newly built ops do not record graph nodes and
// their results never require gradients. Used for decoding and evaluation.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Primitives. Shapes are validated and outputs are checked for NaN/Inf;
// violations throw shape_error / numeric_error naming the primitive.
Tensor matmul(const Tensor& a, const Tensor& b);
// add accepts equal shapes, or broadcasts a 1-d / [1 x n] bias over rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float alpha);
Tensor relu(const Tensor& x);
// Row-wise softmax over the last dimension.
Tensor softmax(const Tensor& x);
// Row-wise normalization followed by elementwise gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
// Column-wise concatenation of 2-d tensors with equal row counts.
Tensor concat(std::span<const Tensor> parts);
Tensor transpose(const Tensor& x);
// Elementwise product with a constant factor tensor (equal shape or a
// per-column vector broadcast over rows). No gradient flows into the mask.
Tensor mask_mul(const Tensor& x, const Tensor& mask);
Tensor slice_cols(const Tensor& x, int begin, int end);

// Mean (or sum) negative log-likelihood over non-pad positions of
// [tokens x vocab] logits.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     int pad_id, bool mean_reduce = true);

// Uniform dispatcher over the named primitives, mirroring their individual
// signatures. scale/layer_norm/embedding_lookup parameters travel in args.
enum class Primitive : std::uint8_t {
  matmul,
  add,
  scale,
  relu,
  softmax,
  layer_norm,
  embedding_lookup,
  concat,
  transpose,
  mask_mul,
};
struct PrimitiveArgs {
  float alpha = 1.0f;
  float eps = 1e-5f;
  std::vector<int> ids;
};
Tensor forward_primitive(Primitive kind, std::span<const Tensor> inputs,
                         const PrimitiveArgs& args = {});

// Reverse-mode differentiation from a scalar loss. Leaf gradients
// accumulate across calls until cleared; interior nodes are overwritten.
void backward(const Tensor& loss);

// A named trainable tensor with Adam moment state.
struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<float> moment1;
  std::vector<float> moment2;

  Parameter() = default;
  Parameter(std::string n, Tensor t);
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Bias-corrected Adam, applied in place. Gradients are validated as finite
// before any parameter is touched and are left untouched by the update.
void adam_step(std::span<Parameter> params, const AdamConfig& cfg,
               std::int64_t step_count);
void zero_grad(std::span<Parameter> params);

}  // namespace nalloc
