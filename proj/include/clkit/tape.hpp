#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "clkit/param_store.hpp"
#include "clkit/rng.hpp"
#include "clkit/tensor.hpp"

namespace clkit {

struct ValueRef {
  std::uint32_t id = 0;
};

/// Reverse-mode autodiff tape over dense float64 tensors.
///
/// Values are computed eagerly as ops are recorded; backward() walks the tape
/// in reverse and accumulates parameter gradients into a caller-provided flat
/// buffer aligned with the ParameterStore. One tape instance is meant to be
/// reset and reused across samples; node storage is recycled.
class Tape {
 public:
  explicit Tape(const ParameterStore& store) : store_(&store) {}

  void reset() { nodes_.clear(); }
  const ParameterStore& store() const { return *store_; }

  /// Enables dropout sampling for ops that use it. Null disables (default).
  void set_dropout_rng(RandomSource* rng) { dropout_rng_ = rng; }
  RandomSource* dropout_rng() const { return dropout_rng_; }

  // Leaves.
  ValueRef param(std::size_t entry_id);
  ValueRef constant(Tensor value);

  // Linear algebra. Shapes: matmul [m,k]x[k,n] -> [m,n];
  // matmul_nt [m,k]x[n,k] -> [m,n] (second operand transposed).
  ValueRef matmul(ValueRef a, ValueRef b);
  ValueRef matmul_nt(ValueRef a, ValueRef b);

  // Elementwise / broadcast.
  ValueRef add(ValueRef a, ValueRef b);           // same shape
  ValueRef add_bias(ValueRef mat, ValueRef bias); // bias broadcast over rows
  ValueRef mul(ValueRef a, ValueRef b);           // same shape
  ValueRef scale(ValueRef a, double s);
  ValueRef tanh_act(ValueRef a);
  ValueRef gelu(ValueRef a);
  ValueRef dropout(ValueRef a, double rate);      // identity when rng unset or rate==0

  // Structure.
  ValueRef slice_cols(ValueRef a, std::size_t col0, std::size_t ncols);
  ValueRef concat_cols(const std::vector<ValueRef>& parts);
  ValueRef embed_rows(ValueRef table, std::vector<int> ids);
  ValueRef sum_all(ValueRef a);                   // scalar [1]

  // Normalization / attention / objectives.
  ValueRef layer_norm(ValueRef x, ValueRef weight, ValueRef bias, double eps);
  ValueRef causal_softmax(ValueRef scores);       // row-wise, cols > row masked

  /// Mean over supervised rows of log softmax(logits)[label]. Rows with
  /// label < 0 are ignored. Scalar output; this is the per-sample mean
  /// log-likelihood (its negation is the cross-entropy).
  ValueRef mean_label_log_prob(ValueRef logits, std::vector<int> labels);

  /// Mean over rows of -sum_c q_c * log softmax(z/T)_c, teacher_probs constant.
  ValueRef soft_cross_entropy(ValueRef logits, ValueRef teacher_probs, double temperature);

  const Tensor& value(ValueRef r) const { return nodes_[r.id].value; }

  /// Accumulates d(root)/d(theta) into param_grad (length |theta|); the
  /// caller zeroes the buffer. Root must be scalar.
  void backward(ValueRef root, std::span<double> param_grad);

 private:
  enum class Op : std::uint8_t {
    kParam,
    kConst,
    kMatMul,
    kMatMulNT,
    kAdd,
    kAddBias,
    kMul,
    kScale,
    kTanh,
    kGelu,
    kDropout,
    kSliceCols,
    kConcatCols,
    kEmbedRows,
    kSumAll,
    kLayerNorm,
    kCausalSoftmax,
    kMeanLabelLogProb,
    kSoftCrossEntropy,
  };

  static constexpr std::uint32_t kNone = 0xffffffffu;

  struct Node {
    Tensor value;
    Tensor grad;   // allocated on demand during backward
    Tensor aux;    // op-specific cache (normalized rows, probs, dropout mask)
    std::vector<double> aux2;
    Op op = Op::kConst;
    std::uint32_t a = kNone, b = kNone, c = kNone;
    std::vector<std::uint32_t> inputs;  // concat
    std::vector<int> ids;               // embed rows / labels
    double scalar = 0.0;
    std::size_t entry_id = 0;
    std::size_t col0 = 0;
  };

  Node& node(ValueRef r) { return nodes_[r.id]; }
  ValueRef push(Node&& n) {
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
  }
  void ensure_grad(Node& n) {
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
  }
  Tensor& grad_of(std::uint32_t id) {
    ensure_grad(nodes_[id]);
    return nodes_[id].grad;
  }

  const ParameterStore* store_;
  RandomSource* dropout_rng_ = nullptr;
  std::vector<Node> nodes_;
};

}  // namespace clkit
