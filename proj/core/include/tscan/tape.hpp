#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tscan/tensor.hpp"

namespace tscan {

class Tape;

// Handle to a value recorded on a tape. Cheap to copy. Valid until the
// owning tape is reset or destroyed.
class Var {
 public:
  Var() = default;

  int rows() const;
  int cols() const;
  std::span<const double> value() const;
  double scalar() const;  // 1x1 nodes only
  Tensor to_tensor() const;

  Tape* tape() const { return tape_; }
  int index() const { return idx_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  friend struct OpImpl;
  Var(Tape* t, int i) : tape_(t), idx_(i) {}
  Tape* tape_ = nullptr;
  int idx_ = -1;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kMatmul,
  kTranspose,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kReshape,
  kAdd,
  kSub,
  kMul,
  kAddBias,
  kScale,
  kAddConst,
  kSigmoid,
  kSoftplus,
  kRelu,
  kElu,
  kSoftmaxRows,
  kMeanPoolRows,
  kSum,
  kSumSquares,
  kMse,
  kWeightedSum,
  kGradReverse,
  kMmdRbf,
};

// Define-by-run computation graph. Ops execute eagerly; backward() replays
// the node list in reverse creation order (a valid topological order, since
// parents always precede children). Values and gradients live in flat arenas
// that are reused across reset() calls, so steady-state recording allocates
// nothing.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Drops all nodes but keeps arena capacity for the next batch.
  void reset();

  Var leaf(const Tensor& t);      // tracked iff t.requires_grad
  Var constant(const Tensor& t);  // never tracked
  Var constant_scalar(double v);

  // Reverse pass from a scalar loss. Gradients of every tracked node are
  // accumulated in the gradient arena; nodes that do not influence the loss
  // keep zero gradient.
  void backward(Var loss);

  std::span<const double> grad(Var v) const;
  bool has_grads() const { return !grads_.empty(); }
  std::size_t node_count() const { return nodes_.size(); }

  // Layout of a recorded node. Public so the op builders can fill in their
  // parameters; not part of the supported API surface.
  struct Node {
    OpKind op;
    bool requires_grad;
    int a = -1, b = -1;            // primary parents
    int rows = 0, cols = 0;
    std::size_t off = 0;           // offset into the value/grad arenas
    double p0 = 0.0, p1 = 0.0;     // scalar parameters
    int i0 = 0, i1 = 0;            // integer parameters
    int aux_begin = 0, aux_count = 0;  // extra parents (concat, weighted sum)
  };

 private:
  friend class Var;
  friend struct OpImpl;

  int push(OpKind op, int rows, int cols, int a, int b);
  double* val(int idx) { return values_.data() + nodes_[idx].off; }
  const double* val(int idx) const { return values_.data() + nodes_[idx].off; }
  double* gval(int idx) { return grads_.data() + nodes_[idx].off; }
  std::size_t len(int idx) const {
    return static_cast<std::size_t>(nodes_[idx].rows) * nodes_[idx].cols;
  }

  void backward_node(int idx);

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> grads_;
  std::vector<int> aux_parents_;
  std::vector<double> aux_doubles_;
};

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var concat_rows(Tape& tape, std::span<const Var> parts);
Var concat_cols(Tape& tape, std::span<const Var> parts);
Var slice_rows(Var a, int begin, int end);
Var reshape(Var a, int rows, int cols);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise; either operand may be a 1x1 scalar
Var add_bias(Var x, Var bias);
Var scale(Var a, double k);
Var add_const(Var a, double k);
Var sigmoid(Var a);
Var softplus(Var a);
Var relu(Var a);
Var elu(Var a);
Var softmax_rows(Var a);
Var mean_pool_rows(Var a);
Var sum(Var a);
Var sum_squares(Var a);
Var mse(Var a, Var b);
Var weighted_sum(Tape& tape, std::span<const Var> terms, std::span<const double> weights);

// Identity forward; backward multiplies incoming gradients by -lambda.
Var gradient_reversal(Var a, double lambda);

// Biased squared-MMD estimator with an RBF kernel exp(-d^2 / two_sigma_sq),
// means taken over all pairs including the diagonal.
Var mmd_rbf(Var a, Var b, double two_sigma_sq);

// Scaled dot-product attention softmax(q k^T / sqrt(d_k)) v, composed from
// the primitive ops above.
Var attention(Var q, Var k, Var v);

}  // namespace tscan
