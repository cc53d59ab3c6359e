#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <unordered_map>
#include <vector>

#include "npattack/tensor.hpp"

// Reverse-mode differentiation over a linear tape of primitive operations.
//
// A Tape is single-owner: record on one thread, then call backward() once.
// Distinct tapes may be recorded concurrently, including tapes that read the
// same parameter tensors, as long as they do not write into the parameters'
// gradient buffers at the same time (see GradientSink).
namespace npattack::ad {

class Tape;

enum class Op {
  Leaf,
  Constant,
  MatMul,
  Affine,
  Relu,
  Sigmoid,
  Softplus,
  LogSoftmax,
  Add,
  Sub,
  Mul,
  AddRow,
  Scale,
  ConcatCols,
  BroadcastRows,
  SliceCols,
  Attention,
  MeanRows,
  Sum,
  GaussianLogDensity,
  DiagGaussianKl,
};

const char* op_name(Op op);

// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

// Where leaf gradients go after backward().
enum class GradientSink {
  Parameters,  // added into each leaf Tensor's grad buffer
  TapeOnly,    // kept on the tape; read back with leaf_gradient()
};

class Tape {
 public:
  explicit Tape(GradientSink sink = GradientSink::Parameters) : sink_(sink) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable reference to an externally owned tensor. The tensor must
  // outlive the tape and stay unmodified until backward() returns.
  Var leaf(Tensor& param);
  Var constant(Tensor value);

  // Populates d(loss)/d(leaf) for every leaf on this tape. Leaves the loss
  // does not reach receive a zero gradient.
  void backward(Var loss);

  std::span<const double> leaf_gradient(const Tensor& param) const;

  std::size_t size() const { return nodes_.size(); }
  Op op(std::size_t i) const { return nodes_[i].op; }
  std::span<const std::size_t> parents(std::size_t i) const {
    return {nodes_[i].parents.data(), nodes_[i].parent_count};
  }
  const Tensor& value(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.leaf != nullptr ? *n.leaf : n.value;
  }

 private:
  friend class Recorder;

  struct Node {
    Op op = Op::Constant;
    Tensor value;
    Tensor* leaf = nullptr;
    std::array<std::size_t, 4> parents{};
    std::size_t parent_count = 0;
    double param = 0.0;         // op-specific scalar (scale factor, slice start, sigma)
    std::vector<double> saved;  // op-specific saved forward values
    std::vector<double> adjoint;
  };

  Var push(Node node);
  void propagate(std::size_t i);
  std::vector<double>& adjoint(std::size_t i);

  GradientSink sink_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> leaf_index_;
  bool backward_done_ = false;
};

// ---- primitives ------------------------------------------------------------

Var matmul(Var a, Var b);
// x·w + b with x n×in, w in×out, b 1×out.
Var affine(Var x, Var w, Var b);
Var relu(Var x);
Var sigmoid(Var x);
Var softplus(Var x);
Var log_softmax_rows(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// x (n×m) plus a 1×m row broadcast over every row.
Var add_row(Var x, Var row);
Var scale(Var x, double factor);
Var concat_cols(std::span<const Var> parts);
Var broadcast_rows(Var row, std::size_t n);
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var scaled_dot_attention(Var queries, Var keys, Var values);
Var mean_rows(Var x);
Var sum(Var x);
Var mean(Var x);
// Sum over entries of log N(observed | mean, sigma²) for a fixed scalar sigma.
Var gaussian_log_density(Var mean, const Tensor& observed, double sigma);
// Sum over dimensions of KL(N(mu_q, sigma_q²) || N(mu_p, sigma_p²)).
Var diag_gaussian_kl(Var mu_q, Var sigma_q, Var mu_p, Var sigma_p);

}  // namespace npattack::ad
