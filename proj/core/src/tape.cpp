#include "tscan/tape.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <string>

#include "tscan/errors.hpp"

namespace tscan {

namespace {

std::string dims(int r, int c) { return std::to_string(r) + "x" + std::to_string(c); }

double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_stable(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

// Op builders need raw access to tape internals; everything funnels through
// this friend so the public surface of Tape stays small.
struct OpImpl {
  static Tape& tp(Var v) {
    if (!v.valid()) throw ContractError("op: uninitialized var");
    return *v.tape_;
  }
  static void same_tape(Tape& t, Var v) {
    if (v.tape_ != &t) throw ContractError("op: vars belong to different tapes");
  }
  static Tape::Node& nd(Tape& t, int i) { return t.nodes_[i]; }
  static int push(Tape& t, OpKind op, int r, int c, int a, int b) {
    return t.push(op, r, c, a, b);
  }
  static double* val(Tape& t, int i) { return t.val(i); }
  static std::vector<int>& aux(Tape& t) { return t.aux_parents_; }
  static std::vector<double>& auxd(Tape& t) { return t.aux_doubles_; }
  static Var var(Tape& t, int i) { return Var(&t, i); }
};

namespace {

// Shorthand used by every builder below.
struct Ctx {
  Tape& t;
  int out;
  double* y;
};

Ctx unary(Var a, OpKind op, int r, int c) {
  Tape& t = OpImpl::tp(a);
  int out = OpImpl::push(t, op, r, c, a.index(), -1);
  return {t, out, OpImpl::val(t, out)};
}

Ctx binary(Var a, Var b, OpKind op, int r, int c) {
  Tape& t = OpImpl::tp(a);
  OpImpl::same_tape(t, b);
  int out = OpImpl::push(t, op, r, c, a.index(), b.index());
  return {t, out, OpImpl::val(t, out)};
}

}  // namespace

// ---- Var ---------------------------------------------------------------

int Var::rows() const { return tape_->nodes_[idx_].rows; }
int Var::cols() const { return tape_->nodes_[idx_].cols; }

std::span<const double> Var::value() const {
  const Tape::Node& n = tape_->nodes_[idx_];
  return {tape_->values_.data() + n.off, static_cast<std::size_t>(n.rows) * n.cols};
}

double Var::scalar() const {
  const Tape::Node& n = tape_->nodes_[idx_];
  if (n.rows != 1 || n.cols != 1)
    throw ContractError("scalar: node is " + dims(n.rows, n.cols) + ", not 1x1");
  return tape_->values_[n.off];
}

Tensor Var::to_tensor() const {
  auto v = value();
  return Tensor::from(rows(), cols(), std::vector<double>(v.begin(), v.end()));
}

// ---- Tape --------------------------------------------------------------

void Tape::reset() {
  nodes_.clear();
  values_.clear();
  grads_.clear();
  aux_parents_.clear();
  aux_doubles_.clear();
}

int Tape::push(OpKind op, int rows, int cols, int a, int b) {
  grads_.clear();  // any recorded gradients no longer match the node list
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.rows = rows;
  n.cols = cols;
  n.off = values_.size();
  bool rg = false;
  if (a >= 0) rg = nodes_[a].requires_grad;
  if (b >= 0) rg = rg || nodes_[b].requires_grad;
  n.requires_grad = rg;
  nodes_.push_back(n);
  values_.resize(n.off + static_cast<std::size_t>(rows) * cols, 0.0);
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(const Tensor& t) {
  if (t.size() == 0) throw ContractError("leaf: empty tensor");
  int i = push(OpKind::kLeaf, t.rows(), t.cols(), -1, -1);
  nodes_[i].requires_grad = t.requires_grad;
  std::copy(t.values().begin(), t.values().end(), val(i));
  return Var(this, i);
}

Var Tape::constant(const Tensor& t) {
  if (t.size() == 0) throw ContractError("constant: empty tensor");
  int i = push(OpKind::kConstant, t.rows(), t.cols(), -1, -1);
  std::copy(t.values().begin(), t.values().end(), val(i));
  return Var(this, i);
}

Var Tape::constant_scalar(double v) {
  int i = push(OpKind::kConstant, 1, 1, -1, -1);
  *val(i) = v;
  return Var(this, i);
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this || loss.idx_ < 0)
    throw ContractError("backward: loss is not on this tape");
  const Node& ln = nodes_[loss.idx_];
  if (ln.rows != 1 || ln.cols != 1)
    throw ContractError("backward: loss must be 1x1, got " + dims(ln.rows, ln.cols));
  grads_.assign(values_.size(), 0.0);
  grads_[ln.off] = 1.0;
  // Reverse creation order is a topological order; nodes created after the
  // loss cannot be its ancestors, so start there.
  for (int i = loss.idx_; i >= 0; --i) {
    if (nodes_[i].requires_grad) backward_node(i);
  }
}

std::span<const double> Tape::grad(Var v) const {
  if (v.tape_ != this || v.idx_ < 0) throw ContractError("grad: var is not on this tape");
  if (grads_.size() != values_.size())
    throw ContractError("grad: backward() has not run on the current graph");
  const Node& n = nodes_[v.idx_];
  return {grads_.data() + n.off, static_cast<std::size_t>(n.rows) * n.cols};
}

// ---- forward builders ---------------------------------------------------

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + dims(a.rows(), a.cols()) + " vs " + dims(b.rows(), b.cols()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  auto [t, out, y] = binary(a, b, OpKind::kMatmul, m, n);
  const double* pa = OpImpl::val(t, a.index());
  const double* pb = OpImpl::val(t, b.index());
  for (int i = 0; i < m; ++i) {
    double* yrow = y + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) yrow[j] = 0.0;
    for (int p = 0; p < k; ++p) {
      const double av = pa[static_cast<std::size_t>(i) * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
    }
  }
  return OpImpl::var(t, out);
}

Var transpose(Var a) {
  const int r = a.rows(), c = a.cols();
  auto [t, out, y] = unary(a, OpKind::kTranspose, c, r);
  const double* pa = OpImpl::val(t, a.index());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      y[static_cast<std::size_t>(j) * r + i] = pa[static_cast<std::size_t>(i) * c + j];
  return OpImpl::var(t, out);
}

Var concat_rows(Tape& tape, std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  int c = parts[0].cols(), r = 0;
  for (const Var& p : parts) {
    OpImpl::same_tape(tape, p);
    if (p.cols() != c)
      throw ShapeError("concat_rows: column mismatch " + std::to_string(p.cols()) + " vs " +
                       std::to_string(c));
    r += p.rows();
  }
  int out = OpImpl::push(tape, OpKind::kConcatRows, r, c, -1, -1);
  auto& aux = OpImpl::aux(tape);
  Tape::Node& n = OpImpl::nd(tape, out);
  n.aux_begin = static_cast<int>(aux.size());
  n.aux_count = static_cast<int>(parts.size());
  bool rg = false;
  for (const Var& p : parts) {
    aux.push_back(p.index());
    rg = rg || OpImpl::nd(tape, p.index()).requires_grad;
  }
  n.requires_grad = rg;
  double* y = OpImpl::val(tape, out);
  for (const Var& p : parts) {
    auto v = p.value();
    std::copy(v.begin(), v.end(), y);
    y += v.size();
  }
  return OpImpl::var(tape, out);
}

Var concat_cols(Tape& tape, std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  int r = parts[0].rows(), c = 0;
  for (const Var& p : parts) {
    OpImpl::same_tape(tape, p);
    if (p.rows() != r)
      throw ShapeError("concat_cols: row mismatch " + std::to_string(p.rows()) + " vs " +
                       std::to_string(r));
    c += p.cols();
  }
  int out = OpImpl::push(tape, OpKind::kConcatCols, r, c, -1, -1);
  auto& aux = OpImpl::aux(tape);
  Tape::Node& n = OpImpl::nd(tape, out);
  n.aux_begin = static_cast<int>(aux.size());
  n.aux_count = static_cast<int>(parts.size());
  bool rg = false;
  for (const Var& p : parts) {
    aux.push_back(p.index());
    rg = rg || OpImpl::nd(tape, p.index()).requires_grad;
  }
  n.requires_grad = rg;
  double* y = OpImpl::val(tape, out);
  int col0 = 0;
  for (const Var& p : parts) {
    const double* pv = OpImpl::val(tape, p.index());
    const int pc = p.cols();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < pc; ++j)
        y[static_cast<std::size_t>(i) * c + col0 + j] = pv[static_cast<std::size_t>(i) * pc + j];
    col0 += pc;
  }
  return OpImpl::var(tape, out);
}

Var slice_rows(Var a, int begin, int end) {
  if (begin < 0 || end > a.rows() || begin >= end)
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of " + std::to_string(a.rows()) + " rows");
  const int c = a.cols();
  auto [t, out, y] = unary(a, OpKind::kSliceRows, end - begin, c);
  OpImpl::nd(t, out).i0 = begin;
  const double* pa = OpImpl::val(t, a.index()) + static_cast<std::size_t>(begin) * c;
  std::copy(pa, pa + static_cast<std::size_t>(end - begin) * c, y);
  return OpImpl::var(t, out);
}

Var reshape(Var a, int rows, int cols) {
  if (static_cast<std::int64_t>(rows) * cols != static_cast<std::int64_t>(a.rows()) * a.cols())
    throw ShapeError("reshape: " + dims(a.rows(), a.cols()) + " to " + dims(rows, cols));
  auto [t, out, y] = unary(a, OpKind::kReshape, rows, cols);
  auto v = a.value();
  std::copy(v.begin(), v.end(), y);
  return OpImpl::var(t, out);
}

namespace {

void require_same_shape(const char* op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": " + dims(a.rows(), a.cols()) + " vs " +
                     dims(b.rows(), b.cols()));
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  auto [t, out, y] = binary(a, b, OpKind::kAdd, a.rows(), a.cols());
  const double* pa = OpImpl::val(t, a.index());
  const double* pb = OpImpl::val(t, b.index());
  const std::size_t n = static_cast<std::size_t>(a.rows()) * a.cols();
  for (std::size_t i = 0; i < n; ++i) y[i] = pa[i] + pb[i];
  return OpImpl::var(t, out);
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  auto [t, out, y] = binary(a, b, OpKind::kSub, a.rows(), a.cols());
  const double* pa = OpImpl::val(t, a.index());
  const double* pb = OpImpl::val(t, b.index());
  const std::size_t n = static_cast<std::size_t>(a.rows()) * a.cols();
  for (std::size_t i = 0; i < n; ++i) y[i] = pa[i] - pb[i];
  return OpImpl::var(t, out);
}

Var mul(Var a, Var b) {
  // i0 records the broadcast case: 0 same-shape, 1 scalar a, 2 scalar b.
  int mode = 0;
  if (a.rows() == 1 && a.cols() == 1 && (b.rows() != 1 || b.cols() != 1)) mode = 1;
  else if (b.rows() == 1 && b.cols() == 1 && (a.rows() != 1 || a.cols() != 1)) mode = 2;
  else require_same_shape("mul", a, b);
  const Var& big = (mode == 1) ? b : a;
  auto [t, out, y] = binary(a, b, OpKind::kMul, big.rows(), big.cols());
  OpImpl::nd(t, out).i0 = mode;
  const double* pa = OpImpl::val(t, a.index());
  const double* pb = OpImpl::val(t, b.index());
  const std::size_t n = static_cast<std::size_t>(big.rows()) * big.cols();
  if (mode == 0)
    for (std::size_t i = 0; i < n; ++i) y[i] = pa[i] * pb[i];
  else if (mode == 1)
    for (std::size_t i = 0; i < n; ++i) y[i] = pa[0] * pb[i];
  else
    for (std::size_t i = 0; i < n; ++i) y[i] = pa[i] * pb[0];
  return OpImpl::var(t, out);
}

Var add_bias(Var x, Var bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols())
    throw ShapeError("add_bias: bias " + dims(bias.rows(), bias.cols()) + " for input " +
                     dims(x.rows(), x.cols()));
  auto [t, out, y] = binary(x, bias, OpKind::kAddBias, x.rows(), x.cols());
  const double* px = OpImpl::val(t, x.index());
  const double* pb = OpImpl::val(t, bias.index());
  const int r = x.rows(), c = x.cols();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      y[static_cast<std::size_t>(i) * c + j] = px[static_cast<std::size_t>(i) * c + j] + pb[j];
  return OpImpl::var(t, out);
}

namespace {

template <typename F>
Var unary_map(Var a, OpKind op, F f) {
  auto [t, out, y] = unary(a, op, a.rows(), a.cols());
  const double* pa = OpImpl::val(t, a.index());
  const std::size_t n = static_cast<std::size_t>(a.rows()) * a.cols();
  for (std::size_t i = 0; i < n; ++i) y[i] = f(pa[i]);
  return OpImpl::var(t, out);
}

}  // namespace

Var scale(Var a, double k) {
  Var out = unary_map(a, OpKind::kScale, [k](double x) { return k * x; });
  OpImpl::nd(*out.tape(), out.index()).p0 = k;
  return out;
}

Var add_const(Var a, double k) {
  return unary_map(a, OpKind::kAddConst, [k](double x) { return x + k; });
}

Var sigmoid(Var a) { return unary_map(a, OpKind::kSigmoid, sigmoid_stable); }

Var softplus(Var a) { return unary_map(a, OpKind::kSoftplus, softplus_stable); }

Var relu(Var a) {
  return unary_map(a, OpKind::kRelu, [](double x) { return x > 0.0 ? x : 0.0; });
}

Var elu(Var a) {
  return unary_map(a, OpKind::kElu, [](double x) { return x > 0.0 ? x : std::expm1(x); });
}

Var softmax_rows(Var a) {
  auto [t, out, y] = unary(a, OpKind::kSoftmaxRows, a.rows(), a.cols());
  const double* pa = OpImpl::val(t, a.index());
  const int r = a.rows(), c = a.cols();
  for (int i = 0; i < r; ++i) {
    const double* xr = pa + static_cast<std::size_t>(i) * c;
    double* yr = y + static_cast<std::size_t>(i) * c;
    double mx = xr[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (int j = 0; j < c; ++j) yr[j] /= s;
  }
  return OpImpl::var(t, out);
}

Var mean_pool_rows(Var a) {
  auto [t, out, y] = unary(a, OpKind::kMeanPoolRows, 1, a.cols());
  const double* pa = OpImpl::val(t, a.index());
  const int r = a.rows(), c = a.cols();
  for (int j = 0; j < c; ++j) y[j] = 0.0;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y[j] += pa[static_cast<std::size_t>(i) * c + j];
  for (int j = 0; j < c; ++j) y[j] /= r;
  return OpImpl::var(t, out);
}

Var sum(Var a) {
  auto [t, out, y] = unary(a, OpKind::kSum, 1, 1);
  const double* pa = OpImpl::val(t, a.index());
  const std::size_t n = static_cast<std::size_t>(a.rows()) * a.cols();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += pa[i];
  *y = s;
  return OpImpl::var(t, out);
}

Var sum_squares(Var a) {
  auto [t, out, y] = unary(a, OpKind::kSumSquares, 1, 1);
  const double* pa = OpImpl::val(t, a.index());
  const std::size_t n = static_cast<std::size_t>(a.rows()) * a.cols();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += pa[i] * pa[i];
  *y = s;
  return OpImpl::var(t, out);
}

Var mse(Var a, Var b) {
  require_same_shape("mse", a, b);
  auto [t, out, y] = binary(a, b, OpKind::kMse, 1, 1);
  const double* pa = OpImpl::val(t, a.index());
  const double* pb = OpImpl::val(t, b.index());
  const std::size_t n = static_cast<std::size_t>(a.rows()) * a.cols();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pa[i] - pb[i];
    s += d * d;
  }
  *y = s / static_cast<double>(n);
  return OpImpl::var(t, out);
}

Var weighted_sum(Tape& tape, std::span<const Var> terms, std::span<const double> weights) {
  if (terms.empty()) throw ContractError("weighted_sum: no terms");
  if (terms.size() != weights.size())
    throw ContractError("weighted_sum: " + std::to_string(terms.size()) + " terms vs " +
                        std::to_string(weights.size()) + " weights");
  for (const Var& v : terms) {
    OpImpl::same_tape(tape, v);
    if (v.rows() != 1 || v.cols() != 1)
      throw ShapeError("weighted_sum: term is " + dims(v.rows(), v.cols()) + ", not 1x1");
  }
  int out = OpImpl::push(tape, OpKind::kWeightedSum, 1, 1, -1, -1);
  auto& aux = OpImpl::aux(tape);
  auto& auxd = OpImpl::auxd(tape);
  Tape::Node& n = OpImpl::nd(tape, out);
  n.aux_begin = static_cast<int>(aux.size());
  n.aux_count = static_cast<int>(terms.size());
  n.i0 = static_cast<int>(auxd.size());
  bool rg = false;
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    aux.push_back(terms[i].index());
    auxd.push_back(weights[i]);
    rg = rg || OpImpl::nd(tape, terms[i].index()).requires_grad;
    s += weights[i] * terms[i].scalar();
  }
  n.requires_grad = rg;
  *OpImpl::val(tape, out) = s;
  return OpImpl::var(tape, out);
}

Var gradient_reversal(Var a, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("gradient_reversal: lambda must be >= 0");
  Var out = unary_map(a, OpKind::kGradReverse, [](double x) { return x; });
  OpImpl::nd(*out.tape(), out.index()).p0 = lambda;
  return out;
}

Var mmd_rbf(Var a, Var b, double two_sigma_sq) {
  if (!(two_sigma_sq > 0.0)) throw ContractError("mmd_rbf: bandwidth must be positive");
  if (a.cols() != b.cols())
    throw ShapeError("mmd_rbf: " + dims(a.rows(), a.cols()) + " vs " + dims(b.rows(), b.cols()));
  auto [t, out, y] = binary(a, b, OpKind::kMmdRbf, 1, 1);
  OpImpl::nd(t, out).p0 = two_sigma_sq;
  const double* pa = OpImpl::val(t, a.index());
  const double* pb = OpImpl::val(t, b.index());
  const int na = a.rows(), nb = b.rows(), d = a.cols();
  auto kmean = [d, two_sigma_sq](const double* u, int nu, const double* v, int nv) {
    double s = 0.0;
    for (int i = 0; i < nu; ++i) {
      const double* ui = u + static_cast<std::size_t>(i) * d;
      for (int j = 0; j < nv; ++j) {
        const double* vj = v + static_cast<std::size_t>(j) * d;
        double d2 = 0.0;
        for (int k = 0; k < d; ++k) {
          const double diff = ui[k] - vj[k];
          d2 += diff * diff;
        }
        s += std::exp(-d2 / two_sigma_sq);
      }
    }
    return s / (static_cast<double>(nu) * nv);
  };
  // Canonical operand order for the cross term keeps the value symmetric in
  // the arguments down to the last bit (the self terms commute exactly).
  const std::size_t asz = static_cast<std::size_t>(na) * d, bsz = static_cast<std::size_t>(nb) * d;
  const bool swap_cross = na != nb ? na > nb
                                   : std::lexicographical_compare(pb, pb + bsz, pa, pa + asz);
  const double cross = swap_cross ? kmean(pb, nb, pa, na) : kmean(pa, na, pb, nb);
  *y = kmean(pa, na, pa, na) + kmean(pb, nb, pb, nb) - 2.0 * cross;
  return OpImpl::var(t, out);
}

Var attention(Var q, Var k, Var v) {
  if (q.cols() != k.cols())
    throw ShapeError("attention: query " + dims(q.rows(), q.cols()) + " vs key " +
                     dims(k.rows(), k.cols()));
  if (k.rows() != v.rows())
    throw ShapeError("attention: key " + dims(k.rows(), k.cols()) + " vs value " +
                     dims(v.rows(), v.cols()));
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(k.cols())));
  return matmul(softmax_rows(scores), v);
}

// ---- backward ----------------------------------------------------------

void Tape::backward_node(int idx) {
  const Node& n = nodes_[idx];
  const double* g = grads_.data() + n.off;
  const std::size_t sz = len(idx);
  switch (n.op) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      break;
    case OpKind::kMatmul: {
      const Node& na = nodes_[n.a];
      const Node& nb = nodes_[n.b];
      const int m = na.rows, k = na.cols, c = n.cols;
      if (na.requires_grad) {
        // dA = dY * B^T
        double* ga = gval(n.a);
        const double* pb = val(n.b);
        for (int i = 0; i < m; ++i) {
          const double* grow = g + static_cast<std::size_t>(i) * c;
          double* garow = ga + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const double* brow = pb + static_cast<std::size_t>(p) * c;
            double s = 0.0;
            for (int j = 0; j < c; ++j) s += grow[j] * brow[j];
            garow[p] += s;
          }
        }
      }
      if (nb.requires_grad) {
        // dB = A^T * dY
        double* gb = gval(n.b);
        const double* pa = val(n.a);
        for (int i = 0; i < m; ++i) {
          const double* arow = pa + static_cast<std::size_t>(i) * k;
          const double* grow = g + static_cast<std::size_t>(i) * c;
          for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* gbrow = gb + static_cast<std::size_t>(p) * c;
            for (int j = 0; j < c; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
      break;
    }
    case OpKind::kTranspose: {
      double* ga = gval(n.a);
      const int r = nodes_[n.a].rows, c = nodes_[n.a].cols;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          ga[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(j) * r + i];
      break;
    }
    case OpKind::kConcatRows: {
      const double* gp = g;
      for (int k = 0; k < n.aux_count; ++k) {
        const int p = aux_parents_[n.aux_begin + k];
        const std::size_t plen = len(p);
        if (nodes_[p].requires_grad) {
          double* gq = gval(p);
          for (std::size_t i = 0; i < plen; ++i) gq[i] += gp[i];
        }
        gp += plen;
      }
      break;
    }
    case OpKind::kConcatCols: {
      int col0 = 0;
      for (int k = 0; k < n.aux_count; ++k) {
        const int p = aux_parents_[n.aux_begin + k];
        const int pc = nodes_[p].cols;
        if (nodes_[p].requires_grad) {
          double* gq = gval(p);
          for (int i = 0; i < n.rows; ++i)
            for (int j = 0; j < pc; ++j)
              gq[static_cast<std::size_t>(i) * pc + j] +=
                  g[static_cast<std::size_t>(i) * n.cols + col0 + j];
        }
        col0 += pc;
      }
      break;
    }
    case OpKind::kSliceRows: {
      double* ga = gval(n.a) + static_cast<std::size_t>(n.i0) * n.cols;
      for (std::size_t i = 0; i < sz; ++i) ga[i] += g[i];
      break;
    }
    case OpKind::kReshape:
    case OpKind::kAddConst: {
      double* ga = gval(n.a);
      for (std::size_t i = 0; i < sz; ++i) ga[i] += g[i];
      break;
    }
    case OpKind::kAdd: {
      double* ga = gval(n.a);
      double* gb = gval(n.b);
      for (std::size_t i = 0; i < sz; ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
      break;
    }
    case OpKind::kSub: {
      double* ga = gval(n.a);
      double* gb = gval(n.b);
      for (std::size_t i = 0; i < sz; ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
      break;
    }
    case OpKind::kMul: {
      const double* pa = val(n.a);
      const double* pb = val(n.b);
      double* ga = gval(n.a);
      double* gb = gval(n.b);
      if (n.i0 == 0) {
        for (std::size_t i = 0; i < sz; ++i) {
          ga[i] += g[i] * pb[i];
          gb[i] += g[i] * pa[i];
        }
      } else if (n.i0 == 1) {  // a is scalar
        double s = 0.0;
        for (std::size_t i = 0; i < sz; ++i) {
          s += g[i] * pb[i];
          gb[i] += g[i] * pa[0];
        }
        ga[0] += s;
      } else {  // b is scalar
        double s = 0.0;
        for (std::size_t i = 0; i < sz; ++i) {
          s += g[i] * pa[i];
          ga[i] += g[i] * pb[0];
        }
        gb[0] += s;
      }
      break;
    }
    case OpKind::kAddBias: {
      double* gx = gval(n.a);
      double* gb = gval(n.b);
      for (int i = 0; i < n.rows; ++i)
        for (int j = 0; j < n.cols; ++j) {
          const double gv = g[static_cast<std::size_t>(i) * n.cols + j];
          gx[static_cast<std::size_t>(i) * n.cols + j] += gv;
          gb[j] += gv;
        }
      break;
    }
    case OpKind::kScale: {
      double* ga = gval(n.a);
      for (std::size_t i = 0; i < sz; ++i) ga[i] += n.p0 * g[i];
      break;
    }
    case OpKind::kSigmoid: {
      const double* y = val(idx);
      double* ga = gval(n.a);
      for (std::size_t i = 0; i < sz; ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case OpKind::kSoftplus: {
      const double* x = val(n.a);
      double* ga = gval(n.a);
      for (std::size_t i = 0; i < sz; ++i) ga[i] += g[i] * sigmoid_stable(x[i]);
      break;
    }
    case OpKind::kRelu: {
      const double* x = val(n.a);
      double* ga = gval(n.a);
      for (std::size_t i = 0; i < sz; ++i)
        if (x[i] > 0.0) ga[i] += g[i];
      break;
    }
    case OpKind::kElu: {
      const double* x = val(n.a);
      const double* y = val(idx);
      double* ga = gval(n.a);
      for (std::size_t i = 0; i < sz; ++i) ga[i] += g[i] * (x[i] > 0.0 ? 1.0 : y[i] + 1.0);
      break;
    }
    case OpKind::kSoftmaxRows: {
      const double* y = val(idx);
      double* ga = gval(n.a);
      for (int i = 0; i < n.rows; ++i) {
        const double* yr = y + static_cast<std::size_t>(i) * n.cols;
        const double* gr = g + static_cast<std::size_t>(i) * n.cols;
        double dot = 0.0;
        for (int j = 0; j < n.cols; ++j) dot += yr[j] * gr[j];
        double* gar = ga + static_cast<std::size_t>(i) * n.cols;
        for (int j = 0; j < n.cols; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
      break;
    }
    case OpKind::kMeanPoolRows: {
      double* ga = gval(n.a);
      const int r = nodes_[n.a].rows;
      const double inv = 1.0 / r;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < n.cols; ++j)
          ga[static_cast<std::size_t>(i) * n.cols + j] += g[j] * inv;
      break;
    }
    case OpKind::kSum: {
      double* ga = gval(n.a);
      const std::size_t an = len(n.a);
      for (std::size_t i = 0; i < an; ++i) ga[i] += g[0];
      break;
    }
    case OpKind::kSumSquares: {
      const double* x = val(n.a);
      double* ga = gval(n.a);
      const std::size_t an = len(n.a);
      for (std::size_t i = 0; i < an; ++i) ga[i] += 2.0 * x[i] * g[0];
      break;
    }
    case OpKind::kMse: {
      const double* pa = val(n.a);
      const double* pb = val(n.b);
      double* ga = gval(n.a);
      double* gb = gval(n.b);
      const std::size_t an = len(n.a);
      const double c = 2.0 * g[0] / static_cast<double>(an);
      for (std::size_t i = 0; i < an; ++i) {
        const double d = c * (pa[i] - pb[i]);
        ga[i] += d;
        gb[i] -= d;
      }
      break;
    }
    case OpKind::kWeightedSum: {
      for (int k = 0; k < n.aux_count; ++k) {
        const int p = aux_parents_[n.aux_begin + k];
        gval(p)[0] += aux_doubles_[n.i0 + k] * g[0];
      }
      break;
    }
    case OpKind::kGradReverse: {
      double* ga = gval(n.a);
      for (std::size_t i = 0; i < sz; ++i) ga[i] -= n.p0 * g[i];
      break;
    }
    case OpKind::kMmdRbf: {
      const Node& na = nodes_[n.a];
      const Node& nb = nodes_[n.b];
      const int ra = na.rows, rb = nb.rows, d = na.cols;
      const double* pa = val(n.a);
      const double* pb = val(n.b);
      const double c = n.p0;
      const double g0 = g[0];
      // d/dx exp(-|x-y|^2/c) = exp(...) * (-2/c) * (x - y); within-group
      // terms appear twice by symmetry.
      auto scatter = [&](const double* u, int nu, const double* v, int nv, double coef,
                         double* gu) {
        for (int i = 0; i < nu; ++i) {
          const double* ui = u + static_cast<std::size_t>(i) * d;
          double* gi = gu + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < nv; ++j) {
            const double* vj = v + static_cast<std::size_t>(j) * d;
            double d2 = 0.0;
            for (int k = 0; k < d; ++k) {
              const double diff = ui[k] - vj[k];
              d2 += diff * diff;
            }
            const double w = coef * std::exp(-d2 / c) * (-2.0 / c);
            for (int k = 0; k < d; ++k) gi[k] += w * (ui[k] - vj[k]);
          }
        }
      };
      if (na.requires_grad) {
        double* ga = gval(n.a);
        scatter(pa, ra, pa, ra, g0 * 2.0 / (static_cast<double>(ra) * ra), ga);
        scatter(pa, ra, pb, rb, g0 * -2.0 / (static_cast<double>(ra) * rb), ga);
      }
      if (nb.requires_grad) {
        double* gb = gval(n.b);
        scatter(pb, rb, pb, rb, g0 * 2.0 / (static_cast<double>(rb) * rb), gb);
        scatter(pb, rb, pa, ra, g0 * -2.0 / (static_cast<double>(ra) * rb), gb);
      }
      break;
    }
  }
}

}  // namespace tscan
