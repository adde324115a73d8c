#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "swingup/tensor.hpp"

namespace swingup {

/// Compute-graph op kinds. Forward values are computed eagerly at node
/// creation and cached; backward() replays the recorded graph in reverse.
enum class Op : std::uint8_t {
  Leaf,
  Add, Sub, Mul, Div,
  Neg, Exp, Log, Tanh, Softplus, Sigmoid, Sin, Cos, Abs, Square, Sqrt,
  SignZero, Clamp, ClampMask,
  ScalarMul, ScalarAdd,
  AddRowVec, MulBatchScalar,
  MatMul, BatchMatMul, TransposeLast, SolveSpd,
  SumAll, MeanAll, SumLast,
  Reshape, SliceLast, SliceRows, GatherCols, ConcatLast, ConcatRows,
  TrilAssemble, Detach,
};

struct Node {
  Op op = Op::Leaf;
  bool rg = false;  // participates in differentiation
  std::vector<std::int32_t> in;
  Tensor val;
  double s0 = 0.0, s1 = 0.0;       // scalar payload (clamp bounds, scale, shift)
  std::vector<std::int64_t> ints;  // index payload (reshape dims, slice, gather)
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Gradients from one backward pass, indexed by node id.
class Grads {
 public:
  explicit Grads(std::size_t n) : g_(n) {}
  bool has(Var v) const {
    return v.id >= 0 && static_cast<std::size_t>(v.id) < g_.size() &&
           g_[static_cast<std::size_t>(v.id)].numel() > 0;
  }
  /// Gradient of the root w.r.t. node v; zeros of v's shape if no path.
  Tensor get(Var v) const;
  Tensor& slot(std::int32_t id) { return g_[static_cast<std::size_t>(id)]; }
  const Tensor& slot(std::int32_t id) const { return g_[static_cast<std::size_t>(id)]; }

 private:
  std::vector<Tensor> g_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].val; }

  /// New leaf holding a copy of t. rg=true makes it a differentiation root
  /// (parameter or input); rg=false is a constant.
  Var leaf(Tensor t, bool rg) {
    Node n;
    n.op = Op::Leaf;
    n.rg = rg;
    n.val = std::move(t);
    return push(std::move(n));
  }
  Var constant(Tensor t) { return leaf(std::move(t), false); }
  Var zeros(std::vector<std::int64_t> shape) { return constant(Tensor(std::move(shape))); }

  // ---- op constructors ----

  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
  Var div(Var a, Var b) { return binary(Op::Div, a, b); }

  Var neg(Var a) { return unary(Op::Neg, a); }
  Var exp(Var a) { return unary(Op::Exp, a); }
  Var log(Var a) { return unary(Op::Log, a); }
  Var tanh(Var a) { return unary(Op::Tanh, a); }
  Var softplus(Var a) { return unary(Op::Softplus, a); }
  Var sigmoid(Var a) { return unary(Op::Sigmoid, a); }
  Var sin(Var a) { return unary(Op::Sin, a); }
  Var cos(Var a) { return unary(Op::Cos, a); }
  Var abs(Var a) { return unary(Op::Abs, a); }
  Var square(Var a) { return unary(Op::Square, a); }
  Var sqrt(Var a) { return unary(Op::Sqrt, a); }
  /// sign(x) with sign(0)=0. Not differentiated (piecewise-constant).
  Var sign_zero(Var a) { return unary_nograd(Op::SignZero, a); }

  Var clamp(Var a, double lo, double hi) {
    if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
    Node n = unary_node(Op::Clamp, a);
    n.s0 = lo;
    n.s1 = hi;
    return push_eval(std::move(n));
  }
  /// 1 where lo <= x <= hi else 0. Not differentiated.
  Var clamp_mask(Var a, double lo, double hi) {
    Node n = unary_node(Op::ClampMask, a);
    n.rg = false;
    n.s0 = lo;
    n.s1 = hi;
    return push_eval(std::move(n));
  }

  Var scalar_mul(Var a, double c) {
    Node n = unary_node(Op::ScalarMul, a);
    n.s0 = c;
    return push_eval(std::move(n));
  }
  Var scalar_add(Var a, double c) {
    Node n = unary_node(Op::ScalarAdd, a);
    n.s0 = c;
    return push_eval(std::move(n));
  }

  /// x [B,n] + v [n], broadcast over rows.
  Var add_rowvec(Var x, Var v) {
    const Tensor& xt = val(x);
    const Tensor& vt = val(v);
    if (xt.rank() != 2 || vt.rank() != 1 || xt.dim(1) != vt.dim(0))
      throw ContractError("add_rowvec: want [B,n] + [n], got " + xt.shape_str() + " + " +
                          vt.shape_str());
    return binary_raw(Op::AddRowVec, x, v, Tensor(xt.shape()));
  }

  /// x [B,...] scaled per batch entry by s [B].
  Var mul_batch_scalar(Var x, Var s) {
    const Tensor& xt = val(x);
    const Tensor& st = val(s);
    if (st.rank() != 1 || xt.dim(0) != st.dim(0))
      throw ContractError("mul_batch_scalar: want x [B,...], s [B], got " + xt.shape_str() +
                          ", " + st.shape_str());
    return binary_raw(Op::MulBatchScalar, x, s, Tensor(xt.shape()));
  }

  /// [a,b] x [b,c] -> [a,c].
  Var matmul(Var a, Var b) {
    const Tensor& at = val(a);
    const Tensor& bt = val(b);
    if (at.rank() != 2 || bt.rank() != 2 || at.dim(1) != bt.dim(0))
      throw ContractError("matmul: bad shapes " + at.shape_str() + " x " + bt.shape_str());
    return binary_raw(Op::MatMul, a, b, Tensor({at.dim(0), bt.dim(1)}));
  }

  /// [B,a,b] x [B,b,c] -> [B,a,c].
  Var bmm(Var a, Var b) {
    const Tensor& at = val(a);
    const Tensor& bt = val(b);
    if (at.rank() != 3 || bt.rank() != 3 || at.dim(0) != bt.dim(0) || at.dim(2) != bt.dim(1))
      throw ContractError("bmm: bad shapes " + at.shape_str() + " x " + bt.shape_str());
    return binary_raw(Op::BatchMatMul, a, b, Tensor({at.dim(0), at.dim(1), bt.dim(2)}));
  }

  /// Swap the last two axes of a rank-2 or rank-3 tensor.
  Var transpose_last(Var a) {
    const Tensor& at = val(a);
    Tensor out = at.rank() == 2 ? Tensor({at.dim(1), at.dim(0)})
                                : Tensor({at.dim(0), at.dim(2), at.dim(1)});
    if (at.rank() < 2) throw ContractError("transpose_last: need rank>=2");
    Node n = unary_node(Op::TransposeLast, a);
    n.val = std::move(out);
    return push_eval(std::move(n));
  }

  /// Solve A z = rhs per batch with SPD A. A [B,n,n], rhs [B,n,1] -> [B,n,1].
  Var solve_spd(Var a, Var rhs) {
    const Tensor& at = val(a);
    const Tensor& rt = val(rhs);
    if (at.rank() != 3 || rt.rank() != 3 || at.dim(1) != at.dim(2) ||
        at.dim(0) != rt.dim(0) || rt.dim(1) != at.dim(1) || rt.dim(2) != 1)
      throw ContractError("solve_spd: want A [B,n,n], rhs [B,n,1], got " + at.shape_str() +
                          ", " + rt.shape_str());
    return binary_raw(Op::SolveSpd, a, rhs, Tensor(rt.shape()));
  }

  Var sum_all(Var a) {
    Node n = unary_node(Op::SumAll, a);
    n.val = Tensor({1});
    return push_eval(std::move(n));
  }
  Var mean_all(Var a) {
    Node n = unary_node(Op::MeanAll, a);
    n.val = Tensor({1});
    return push_eval(std::move(n));
  }
  /// [B,n] -> [B], summing the last axis.
  Var sum_last(Var a) {
    const Tensor& at = val(a);
    if (at.rank() != 2) throw ContractError("sum_last: want rank-2, got " + at.shape_str());
    Node n = unary_node(Op::SumLast, a);
    n.val = Tensor({at.dim(0)});
    return push_eval(std::move(n));
  }

  Var reshape(Var a, std::vector<std::int64_t> shape) {
    const Tensor& at = val(a);
    if (Tensor::numel_from(shape) != at.numel())
      throw ContractError("reshape: numel mismatch " + at.shape_str());
    Node n = unary_node(Op::Reshape, a);
    n.ints = shape;
    n.val = Tensor(std::move(shape));
    return push_eval(std::move(n));
  }

  /// Columns [start, start+len) of a [B,n] tensor.
  Var slice_last(Var a, std::int64_t start, std::int64_t len) {
    const Tensor& at = val(a);
    if (at.rank() != 2 || start < 0 || len <= 0 || start + len > at.dim(1))
      throw ContractError("slice_last: bad range on " + at.shape_str());
    Node n = unary_node(Op::SliceLast, a);
    n.ints = {start, len};
    n.val = Tensor({at.dim(0), len});
    return push_eval(std::move(n));
  }

  /// Rows [start, start+len) of a [R,n] tensor.
  Var slice_rows(Var a, std::int64_t start, std::int64_t len) {
    const Tensor& at = val(a);
    if (at.rank() != 2 || start < 0 || len <= 0 || start + len > at.dim(0))
      throw ContractError("slice_rows: bad range on " + at.shape_str());
    Node n = unary_node(Op::SliceRows, a);
    n.ints = {start, len};
    n.val = Tensor({len, at.dim(1)});
    return push_eval(std::move(n));
  }

  /// Select columns of a [B,n] tensor in the given order.
  Var gather_cols(Var a, std::vector<std::int64_t> idx) {
    const Tensor& at = val(a);
    if (at.rank() != 2) throw ContractError("gather_cols: want rank-2");
    for (auto i : idx)
      if (i < 0 || i >= at.dim(1)) throw ContractError("gather_cols: index out of range");
    Node n = unary_node(Op::GatherCols, a);
    n.val = Tensor({at.dim(0), static_cast<std::int64_t>(idx.size())});
    n.ints = std::move(idx);
    return push_eval(std::move(n));
  }

  /// Concatenate [B,n_i] tensors along the last axis.
  Var concat_last(const std::vector<Var>& xs) { return concat(Op::ConcatLast, xs); }
  /// Concatenate [R_i,n] tensors along the first axis.
  Var concat_rows(const std::vector<Var>& xs) { return concat(Op::ConcatRows, xs); }

  /// Build [B,n,n] lower-triangular matrices: diag [B,n] on the diagonal,
  /// off [B,n(n-1)/2] filling the strict lower triangle row by row.
  Var tril_assemble(Var diag, Var off) {
    const Tensor& dt = val(diag);
    const Tensor& ot = val(off);
    if (dt.rank() != 2) throw ContractError("tril_assemble: diag must be [B,n]");
    std::int64_t n = dt.dim(1);
    std::int64_t k = n * (n - 1) / 2;
    if (k == 0) {
      if (ot.numel() != dt.dim(0))  // placeholder column is allowed for n=1
        throw ContractError("tril_assemble: off must be [B,1] when n=1");
    } else if (ot.rank() != 2 || ot.dim(0) != dt.dim(0) || ot.dim(1) != k) {
      throw ContractError("tril_assemble: off must be [B," + std::to_string(k) + "]");
    }
    return binary_raw(Op::TrilAssemble, diag, off, Tensor({dt.dim(0), n, n}));
  }

  /// Identity forward; gradients and tangents stop here.
  Var detach(Var a) {
    Node n;
    n.op = Op::Detach;
    n.rg = false;
    n.in = {a.id};
    n.val = val(a);
    return push(std::move(n));
  }

  // ---- differentiation ----

  /// Reverse pass from a scalar root. Returns gradients w.r.t. every node
  /// that the root depends on (leaves included).
  Grads backward(Var root) const;

  /// Forward tangent of `out` w.r.t. node `in` seeded with `seed` (holding
  /// everything upstream of `in` fixed), emitted as new graph ops so the
  /// result can itself be differentiated. Returns an invalid Var if out does
  /// not depend on in.
  Var jvp(Var out, Var in, Var seed);

  /// Jacobian d out / d in as a [m,n] graph node, built from n jvp passes.
  /// out and in must be [1,m] and [1,n] (or rank-1 [m], [n]).
  Var input_jacobian(Var out, Var in);

 private:
  Node unary_node(Op op, Var a) {
    Node n;
    n.op = op;
    n.in = {a.id};
    n.rg = nodes_[static_cast<std::size_t>(a.id)].rg;
    n.val = Tensor(nodes_[static_cast<std::size_t>(a.id)].val.shape());
    return n;
  }
  Var unary(Op op, Var a) { return push_eval(unary_node(op, a)); }
  Var unary_nograd(Op op, Var a) {
    Node n = unary_node(op, a);
    n.rg = false;
    return push_eval(std::move(n));
  }
  Var binary(Op op, Var a, Var b) {
    const Tensor& at = val(a);
    const Tensor& bt = val(b);
    if (!at.same_shape(bt))
      throw ContractError("elementwise op: shape mismatch " + at.shape_str() + " vs " +
                          bt.shape_str());
    return binary_raw(op, a, b, Tensor(at.shape()));
  }
  Var binary_raw(Op op, Var a, Var b, Tensor out) {
    Node n;
    n.op = op;
    n.in = {a.id, b.id};
    n.rg = nodes_[static_cast<std::size_t>(a.id)].rg || nodes_[static_cast<std::size_t>(b.id)].rg;
    n.val = std::move(out);
    return push_eval(std::move(n));
  }
  Var concat(Op op, const std::vector<Var>& xs) {
    if (xs.empty()) throw ContractError("concat: no inputs");
    const Tensor& first = val(xs[0]);
    if (first.rank() != 2) throw ContractError("concat: want rank-2 inputs");
    std::int64_t fixed = op == Op::ConcatLast ? first.dim(0) : first.dim(1);
    std::int64_t acc = 0;
    Node n;
    n.op = op;
    for (Var v : xs) {
      const Tensor& t = val(v);
      if (t.rank() != 2) throw ContractError("concat: want rank-2 inputs");
      std::int64_t f = op == Op::ConcatLast ? t.dim(0) : t.dim(1);
      if (f != fixed) throw ContractError("concat: mismatched shapes");
      acc += op == Op::ConcatLast ? t.dim(1) : t.dim(0);
      n.in.push_back(v.id);
      n.rg = n.rg || nodes_[static_cast<std::size_t>(v.id)].rg;
    }
    n.val = op == Op::ConcatLast ? Tensor({fixed, acc}) : Tensor({acc, fixed});
    return push_eval(std::move(n));
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }
  Var push_eval(Node n) {
    Var v = push(std::move(n));
    eval(nodes_.back());
    return v;
  }

  void eval(Node& n);
  void backward_node(std::int32_t id, Grads& g) const;
  Tensor& acc(Grads& g, std::int32_t id) const {
    Tensor& slot = g.slot(id);
    if (slot.numel() == 0) slot = Tensor(nodes_[static_cast<std::size_t>(id)].val.shape());
    return slot;
  }

  // deque: node references and cached values stay valid as ops are added
  std::deque<Node> nodes_;
};

inline Tensor Grads::get(Var v) const {
  if (has(v)) return g_[static_cast<std::size_t>(v.id)];
  return Tensor(v.tape->val(v).shape());
}

// ---- forward evaluation ----

inline void Tape::eval(Node& n) {
  auto& N = nodes_;
  auto in0 = [&]() -> const Tensor& { return N[static_cast<std::size_t>(n.in[0])].val; };
  auto in1 = [&]() -> const Tensor& { return N[static_cast<std::size_t>(n.in[1])].val; };

  switch (n.op) {
    case Op::Leaf:
    case Op::Detach:
      return;
    case Op::Add: {
      n.val.flat() = in0().flat() + in1().flat();
      return;
    }
    case Op::Sub: {
      n.val.flat() = in0().flat() - in1().flat();
      return;
    }
    case Op::Mul: {
      n.val.flat() = in0().flat().cwiseProduct(in1().flat());
      return;
    }
    case Op::Div: {
      n.val.flat() = in0().flat().cwiseQuotient(in1().flat());
      return;
    }
    case Op::Neg: {
      n.val.flat() = -in0().flat();
      return;
    }
    case Op::Exp: {
      n.val.flat() = in0().flat().array().exp();
      return;
    }
    case Op::Log: {
      const Tensor& x = in0();
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        if (!(x[i] > 0.0)) throw NumericError("log: non-positive argument");
        n.val[i] = std::log(x[i]);
      }
      return;
    }
    case Op::Tanh: {
      n.val.flat() = in0().flat().array().tanh();
      return;
    }
    case Op::Softplus: {
      const Tensor& x = in0();
      for (std::int64_t i = 0; i < x.numel(); ++i)
        n.val[i] = std::max(x[i], 0.0) + std::log1p(std::exp(-std::fabs(x[i])));
      return;
    }
    case Op::Sigmoid: {
      const Tensor& x = in0();
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        double v = x[i];
        if (v >= 0.0) {
          n.val[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
          double e = std::exp(v);
          n.val[i] = e / (1.0 + e);
        }
      }
      return;
    }
    case Op::Sin: {
      n.val.flat() = in0().flat().array().sin();
      return;
    }
    case Op::Cos: {
      n.val.flat() = in0().flat().array().cos();
      return;
    }
    case Op::Abs: {
      n.val.flat() = in0().flat().array().abs();
      return;
    }
    case Op::Square: {
      n.val.flat() = in0().flat().array().square();
      return;
    }
    case Op::Sqrt: {
      const Tensor& x = in0();
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        if (x[i] < 0.0) throw NumericError("sqrt: negative argument");
        n.val[i] = std::sqrt(x[i]);
      }
      return;
    }
    case Op::SignZero: {
      const Tensor& x = in0();
      for (std::int64_t i = 0; i < x.numel(); ++i)
        n.val[i] = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
      return;
    }
    case Op::Clamp: {
      const Tensor& x = in0();
      for (std::int64_t i = 0; i < x.numel(); ++i)
        n.val[i] = std::min(std::max(x[i], n.s0), n.s1);
      return;
    }
    case Op::ClampMask: {
      const Tensor& x = in0();
      for (std::int64_t i = 0; i < x.numel(); ++i)
        n.val[i] = (x[i] >= n.s0 && x[i] <= n.s1) ? 1.0 : 0.0;
      return;
    }
    case Op::ScalarMul: {
      n.val.flat() = in0().flat() * n.s0;
      return;
    }
    case Op::ScalarAdd: {
      n.val.flat() = in0().flat().array() + n.s0;
      return;
    }
    case Op::AddRowVec: {
      const Tensor& x = in0();
      const Tensor& v = in1();
      n.val.mat() = x.mat().rowwise() + v.flat().transpose();
      return;
    }
    case Op::MulBatchScalar: {
      const Tensor& x = in0();
      const Tensor& s = in1();
      std::int64_t B = x.dim(0);
      std::int64_t stride = x.numel() / B;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < stride; ++i)
          n.val[b * stride + i] = x[b * stride + i] * s[b];
      return;
    }
    case Op::MatMul: {
      n.val.mat().noalias() = in0().mat() * in1().mat();
      return;
    }
    case Op::BatchMatMul: {
      const Tensor& a = in0();
      const Tensor& b = in1();
      for (std::int64_t i = 0; i < a.dim(0); ++i)
        n.val.mat_of(i).noalias() = a.mat_of(i) * b.mat_of(i);
      return;
    }
    case Op::TransposeLast: {
      const Tensor& a = in0();
      if (a.rank() == 2) {
        n.val.mat() = a.mat().transpose();
      } else {
        for (std::int64_t b = 0; b < a.dim(0); ++b)
          n.val.mat_of(b) = a.mat_of(b).transpose();
      }
      return;
    }
    case Op::SolveSpd: {
      const Tensor& a = in0();
      const Tensor& r = in1();
      std::int64_t nn = a.dim(1);
      for (std::int64_t b = 0; b < a.dim(0); ++b) {
        Eigen::MatrixXd A = a.mat_of(b);
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        if (llt.info() != Eigen::Success)
          throw NumericError("solve_spd: factorization failed (matrix not SPD)");
        Eigen::VectorXd rhs = r.mat_of(b).col(0);
        Eigen::VectorXd z = llt.solve(rhs);
        for (std::int64_t i = 0; i < nn; ++i) n.val[b * nn + i] = z(i);
      }
      return;
    }
    case Op::SumAll: {
      n.val[0] = in0().flat().sum();
      return;
    }
    case Op::MeanAll: {
      n.val[0] = in0().flat().mean();
      return;
    }
    case Op::SumLast: {
      const Tensor& x = in0();
      for (std::int64_t b = 0; b < x.dim(0); ++b) {
        double s = 0.0;
        for (std::int64_t j = 0; j < x.dim(1); ++j) s += x[b * x.dim(1) + j];
        n.val[b] = s;
      }
      return;
    }
    case Op::Reshape: {
      const Tensor& x = in0();
      std::copy(x.data(), x.data() + x.numel(), n.val.data());
      return;
    }
    case Op::SliceLast: {
      const Tensor& x = in0();
      std::int64_t start = n.ints[0], len = n.ints[1], w = x.dim(1);
      for (std::int64_t b = 0; b < x.dim(0); ++b)
        std::copy(x.data() + b * w + start, x.data() + b * w + start + len,
                  n.val.data() + b * len);
      return;
    }
    case Op::SliceRows: {
      const Tensor& x = in0();
      std::int64_t start = n.ints[0], len = n.ints[1], w = x.dim(1);
      std::copy(x.data() + start * w, x.data() + (start + len) * w, n.val.data());
      return;
    }
    case Op::GatherCols: {
      const Tensor& x = in0();
      std::int64_t w = x.dim(1), k = static_cast<std::int64_t>(n.ints.size());
      for (std::int64_t b = 0; b < x.dim(0); ++b)
        for (std::int64_t j = 0; j < k; ++j)
          n.val[b * k + j] = x[b * w + n.ints[static_cast<std::size_t>(j)]];
      return;
    }
    case Op::ConcatLast: {
      std::int64_t w = n.val.dim(1);
      std::int64_t off = 0;
      for (auto id : n.in) {
        const Tensor& x = N[static_cast<std::size_t>(id)].val;
        for (std::int64_t b = 0; b < x.dim(0); ++b)
          std::copy(x.data() + b * x.dim(1), x.data() + (b + 1) * x.dim(1),
                    n.val.data() + b * w + off);
        off += x.dim(1);
      }
      return;
    }
    case Op::ConcatRows: {
      std::int64_t off = 0;
      for (auto id : n.in) {
        const Tensor& x = N[static_cast<std::size_t>(id)].val;
        std::copy(x.data(), x.data() + x.numel(), n.val.data() + off);
        off += x.numel();
      }
      return;
    }
    case Op::TrilAssemble: {
      const Tensor& d = in0();
      const Tensor& o = in1();
      std::int64_t B = d.dim(0), nn = d.dim(1);
      for (std::int64_t b = 0; b < B; ++b) {
        std::int64_t p = 0;
        for (std::int64_t i = 0; i < nn; ++i) {
          for (std::int64_t j = 0; j < i; ++j)
            n.val[(b * nn + i) * nn + j] = o[b * o.dim(1) + p++];
          n.val[(b * nn + i) * nn + i] = d[b * nn + i];
        }
      }
      return;
    }
  }
  throw UnsupportedOpError("eval: unhandled op");
}

// ---- reverse pass ----

inline Grads Tape::backward(Var root) const {
  if (!root.valid() || root.tape != this) throw ContractError("backward: foreign root");
  const Node& rn = nodes_[static_cast<std::size_t>(root.id)];
  if (rn.val.numel() != 1) throw ContractError("backward: root must be scalar");
  Grads g(static_cast<std::size_t>(root.id) + 1);
  if (!rn.rg) return g;
  g.slot(root.id) = Tensor::full(rn.val.shape(), 1.0);
  for (std::int32_t id = root.id; id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.rg || n.op == Op::Leaf) continue;
    if (g.slot(id).numel() == 0) continue;
    backward_node(id, g);
  }
  return g;
}

inline void Tape::backward_node(std::int32_t id, Grads& g) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  const Tensor& go = g.slot(id);
  auto rg = [&](int k) { return nodes_[static_cast<std::size_t>(n.in[k])].rg; };
  auto inv = [&](int k) -> const Tensor& {
    return nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(k)])].val;
  };

  switch (n.op) {
    case Op::Leaf:
    case Op::Detach:
    case Op::SignZero:
    case Op::ClampMask:
      return;
    case Op::Add: {
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat();
      if (rg(1)) acc(g, n.in[1]).flat() += go.flat();
      return;
    }
    case Op::Sub: {
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat();
      if (rg(1)) acc(g, n.in[1]).flat() -= go.flat();
      return;
    }
    case Op::Mul: {
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat().cwiseProduct(inv(1).flat());
      if (rg(1)) acc(g, n.in[1]).flat() += go.flat().cwiseProduct(inv(0).flat());
      return;
    }
    case Op::Div: {
      // z = a/b: da += g/b, db -= g*z/b
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat().cwiseQuotient(inv(1).flat());
      if (rg(1))
        acc(g, n.in[1]).flat() -=
            go.flat().cwiseProduct(n.val.flat()).cwiseQuotient(inv(1).flat());
      return;
    }
    case Op::Neg: {
      if (rg(0)) acc(g, n.in[0]).flat() -= go.flat();
      return;
    }
    case Op::Exp: {
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat().cwiseProduct(n.val.flat());
      return;
    }
    case Op::Log: {
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat().cwiseQuotient(inv(0).flat());
      return;
    }
    case Op::Tanh: {
      if (rg(0))
        acc(g, n.in[0]).flat().array() +=
            go.flat().array() * (1.0 - n.val.flat().array().square());
      return;
    }
    case Op::Softplus: {
      if (!rg(0)) return;
      Tensor& gx = acc(g, n.in[0]);
      const Tensor& x = inv(0);
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        double v = x[i];
        double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        gx[i] += go[i] * s;
      }
      return;
    }
    case Op::Sigmoid: {
      if (rg(0))
        acc(g, n.in[0]).flat().array() +=
            go.flat().array() * n.val.flat().array() * (1.0 - n.val.flat().array());
      return;
    }
    case Op::Sin: {
      if (rg(0)) acc(g, n.in[0]).flat().array() += go.flat().array() * inv(0).flat().array().cos();
      return;
    }
    case Op::Cos: {
      if (rg(0)) acc(g, n.in[0]).flat().array() -= go.flat().array() * inv(0).flat().array().sin();
      return;
    }
    case Op::Abs: {
      if (!rg(0)) return;
      Tensor& gx = acc(g, n.in[0]);
      const Tensor& x = inv(0);
      for (std::int64_t i = 0; i < x.numel(); ++i)
        gx[i] += go[i] * (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
      return;
    }
    case Op::Square: {
      if (rg(0))
        acc(g, n.in[0]).flat().array() += 2.0 * go.flat().array() * inv(0).flat().array();
      return;
    }
    case Op::Sqrt: {
      if (rg(0))
        acc(g, n.in[0]).flat().array() += go.flat().array() / (2.0 * n.val.flat().array());
      return;
    }
    case Op::Clamp: {
      if (!rg(0)) return;
      Tensor& gx = acc(g, n.in[0]);
      const Tensor& x = inv(0);
      for (std::int64_t i = 0; i < x.numel(); ++i)
        if (x[i] >= n.s0 && x[i] <= n.s1) gx[i] += go[i];
      return;
    }
    case Op::ScalarMul: {
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat() * n.s0;
      return;
    }
    case Op::ScalarAdd: {
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat();
      return;
    }
    case Op::AddRowVec: {
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat();
      if (rg(1)) acc(g, n.in[1]).flat() += go.mat().colwise().sum().transpose();
      return;
    }
    case Op::MulBatchScalar: {
      const Tensor& x = inv(0);
      const Tensor& s = inv(1);
      std::int64_t B = x.dim(0);
      std::int64_t stride = x.numel() / B;
      if (rg(0)) {
        Tensor& gx = acc(g, n.in[0]);
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t i = 0; i < stride; ++i)
            gx[b * stride + i] += go[b * stride + i] * s[b];
      }
      if (rg(1)) {
        Tensor& gs = acc(g, n.in[1]);
        for (std::int64_t b = 0; b < B; ++b) {
          double acc2 = 0.0;
          for (std::int64_t i = 0; i < stride; ++i)
            acc2 += go[b * stride + i] * x[b * stride + i];
          gs[b] += acc2;
        }
      }
      return;
    }
    case Op::MatMul: {
      if (rg(0)) acc(g, n.in[0]).mat().noalias() += go.mat() * inv(1).mat().transpose();
      if (rg(1)) acc(g, n.in[1]).mat().noalias() += inv(0).mat().transpose() * go.mat();
      return;
    }
    case Op::BatchMatMul: {
      const Tensor& a = inv(0);
      const Tensor& b = inv(1);
      if (rg(0)) {
        Tensor& ga = acc(g, n.in[0]);
        for (std::int64_t i = 0; i < a.dim(0); ++i)
          ga.mat_of(i).noalias() += go.mat_of(i) * b.mat_of(i).transpose();
      }
      if (rg(1)) {
        Tensor& gb = acc(g, n.in[1]);
        for (std::int64_t i = 0; i < a.dim(0); ++i)
          gb.mat_of(i).noalias() += a.mat_of(i).transpose() * go.mat_of(i);
      }
      return;
    }
    case Op::TransposeLast: {
      if (!rg(0)) return;
      Tensor& gx = acc(g, n.in[0]);
      if (gx.rank() == 2) {
        gx.mat() += go.mat().transpose();
      } else {
        for (std::int64_t b = 0; b < gx.dim(0); ++b) gx.mat_of(b) += go.mat_of(b).transpose();
      }
      return;
    }
    case Op::SolveSpd: {
      // z = A^{-1} r, A symmetric: gr = A^{-1} go, gA = -gr z^T
      const Tensor& a = inv(0);
      std::int64_t B = a.dim(0), nn = a.dim(1);
      for (std::int64_t b = 0; b < B; ++b) {
        Eigen::MatrixXd A = a.mat_of(b);
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        if (llt.info() != Eigen::Success)
          throw NumericError("solve_spd backward: factorization failed");
        Eigen::VectorXd gob = Eigen::Map<const Eigen::VectorXd>(go.data() + b * nn, nn);
        Eigen::VectorXd gr = llt.solve(gob);
        if (rg(1)) {
          Tensor& grs = acc(g, n.in[1]);
          for (std::int64_t i = 0; i < nn; ++i) grs[b * nn + i] += gr(i);
        }
        if (rg(0)) {
          Tensor& ga = acc(g, n.in[0]);
          Eigen::Map<const Eigen::VectorXd> z(n.val.data() + b * nn, nn);
          ga.mat_of(b).noalias() -= gr * z.transpose();
        }
      }
      return;
    }
    case Op::SumAll: {
      if (rg(0)) acc(g, n.in[0]).flat().array() += go[0];
      return;
    }
    case Op::MeanAll: {
      if (rg(0))
        acc(g, n.in[0]).flat().array() += go[0] / static_cast<double>(inv(0).numel());
      return;
    }
    case Op::SumLast: {
      if (!rg(0)) return;
      Tensor& gx = acc(g, n.in[0]);
      std::int64_t w = gx.dim(1);
      for (std::int64_t b = 0; b < gx.dim(0); ++b)
        for (std::int64_t j = 0; j < w; ++j) gx[b * w + j] += go[b];
      return;
    }
    case Op::Reshape: {
      if (rg(0)) acc(g, n.in[0]).flat() += go.flat();
      return;
    }
    case Op::SliceLast: {
      if (!rg(0)) return;
      Tensor& gx = acc(g, n.in[0]);
      std::int64_t start = n.ints[0], len = n.ints[1], w = gx.dim(1);
      for (std::int64_t b = 0; b < gx.dim(0); ++b)
        for (std::int64_t j = 0; j < len; ++j) gx[b * w + start + j] += go[b * len + j];
      return;
    }
    case Op::SliceRows: {
      if (!rg(0)) return;
      Tensor& gx = acc(g, n.in[0]);
      std::int64_t start = n.ints[0], w = gx.dim(1);
      for (std::int64_t i = 0; i < go.numel(); ++i) gx[start * w + i] += go[i];
      return;
    }
    case Op::GatherCols: {
      if (!rg(0)) return;
      Tensor& gx = acc(g, n.in[0]);
      std::int64_t w = gx.dim(1), k = static_cast<std::int64_t>(n.ints.size());
      for (std::int64_t b = 0; b < gx.dim(0); ++b)
        for (std::int64_t j = 0; j < k; ++j)
          gx[b * w + n.ints[static_cast<std::size_t>(j)]] += go[b * k + j];
      return;
    }
    case Op::ConcatLast: {
      std::int64_t w = n.val.dim(1);
      std::int64_t off = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        const Tensor& x = nodes_[static_cast<std::size_t>(n.in[k])].val;
        if (nodes_[static_cast<std::size_t>(n.in[k])].rg) {
          Tensor& gx = acc(g, n.in[k]);
          for (std::int64_t b = 0; b < x.dim(0); ++b)
            for (std::int64_t j = 0; j < x.dim(1); ++j)
              gx[b * x.dim(1) + j] += go[b * w + off + j];
        }
        off += x.dim(1);
      }
      return;
    }
    case Op::ConcatRows: {
      std::int64_t off = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        const Tensor& x = nodes_[static_cast<std::size_t>(n.in[k])].val;
        if (nodes_[static_cast<std::size_t>(n.in[k])].rg) {
          Tensor& gx = acc(g, n.in[k]);
          for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += go[off + i];
        }
        off += x.numel();
      }
      return;
    }
    case Op::TrilAssemble: {
      const Tensor& d = inv(0);
      std::int64_t B = d.dim(0), nn = d.dim(1);
      if (rg(0)) {
        Tensor& gd = acc(g, n.in[0]);
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t i = 0; i < nn; ++i) gd[b * nn + i] += go[(b * nn + i) * nn + i];
      }
      if (rg(1)) {
        Tensor& goff = acc(g, n.in[1]);
        std::int64_t kw = goff.dim(1);
        for (std::int64_t b = 0; b < B; ++b) {
          std::int64_t p = 0;
          for (std::int64_t i = 0; i < nn; ++i)
            for (std::int64_t j = 0; j < i; ++j)
              goff[b * kw + p++] += go[(b * nn + i) * nn + j];
        }
      }
      return;
    }
    default:
      throw UnsupportedOpError("backward: unhandled op");
  }
}

// ---- forward tangents, emitted as graph ops ----

inline Var Tape::jvp(Var out, Var in, Var seed) {
  if (out.tape != this || in.tape != this || seed.tape != this)
    throw ContractError("jvp: foreign vars");
  if (!val(seed).same_shape(val(in))) throw ContractError("jvp: seed shape mismatch");
  if (out.id < in.id) return Var{};

  const std::int32_t lo = in.id, hi = out.id;
  std::vector<std::int32_t> tan(static_cast<std::size_t>(hi - lo + 1), -1);
  auto tan_of = [&](std::int32_t id) -> std::int32_t {
    return id < lo ? -1 : tan[static_cast<std::size_t>(id - lo)];
  };
  tan[0] = seed.id;
  auto mk = [&](std::int32_t id) { return Var{this, id}; };

  for (std::int32_t id = lo + 1; id <= hi; ++id) {
    // copied so emission below cannot touch what we iterate over
    const Op op = nodes_[static_cast<std::size_t>(id)].op;
    const std::vector<std::int32_t> in_ids = nodes_[static_cast<std::size_t>(id)].in;
    const double s0 = nodes_[static_cast<std::size_t>(id)].s0;
    const double s1 = nodes_[static_cast<std::size_t>(id)].s1;
    const std::vector<std::int64_t> ints = nodes_[static_cast<std::size_t>(id)].ints;

    bool touched = false;
    for (auto i : in_ids)
      if (tan_of(i) >= 0) touched = true;
    if (!touched || op == Op::Leaf || op == Op::Detach || op == Op::SignZero ||
        op == Op::ClampMask)
      continue;

    Var self = mk(id);
    auto t0 = [&]() { return mk(tan_of(in_ids[0])); };
    auto t1 = [&]() { return mk(tan_of(in_ids[1])); };
    auto has0 = [&]() { return tan_of(in_ids[0]) >= 0; };
    auto has1 = [&]() { return tan_of(in_ids[1]) >= 0; };
    Var r{};

    switch (op) {
      case Op::Add:
        r = has0() && has1() ? add(t0(), t1()) : (has0() ? t0() : t1());
        break;
      case Op::Sub:
        r = has0() && has1() ? sub(t0(), t1()) : (has0() ? t0() : neg(t1()));
        break;
      case Op::Mul: {
        Var p0 = has0() ? mul(t0(), mk(in_ids[1])) : Var{};
        Var p1 = has1() ? mul(mk(in_ids[0]), t1()) : Var{};
        r = p0.valid() && p1.valid() ? add(p0, p1) : (p0.valid() ? p0 : p1);
        break;
      }
      case Op::Div: {
        // z = a/b: dz = (da - z*db)/b
        Var num = has0() ? t0() : Var{};
        if (has1()) {
          Var zdb = mul(self, t1());
          num = num.valid() ? sub(num, zdb) : neg(zdb);
        }
        r = div(num, mk(in_ids[1]));
        break;
      }
      case Op::Neg:
        r = neg(t0());
        break;
      case Op::Exp:
        r = mul(self, t0());
        break;
      case Op::Log:
        r = div(t0(), mk(in_ids[0]));
        break;
      case Op::Tanh:
        r = mul(scalar_add(neg(square(self)), 1.0), t0());
        break;
      case Op::Softplus:
        r = mul(sigmoid(mk(in_ids[0])), t0());
        break;
      case Op::Sigmoid:
        r = mul(mul(self, scalar_add(neg(self), 1.0)), t0());
        break;
      case Op::Sin:
        r = mul(cos(mk(in_ids[0])), t0());
        break;
      case Op::Cos:
        r = neg(mul(sin(mk(in_ids[0])), t0()));
        break;
      case Op::Abs:
        r = mul(sign_zero(mk(in_ids[0])), t0());
        break;
      case Op::Square:
        r = scalar_mul(mul(mk(in_ids[0]), t0()), 2.0);
        break;
      case Op::Sqrt:
        r = div(t0(), scalar_mul(self, 2.0));
        break;
      case Op::Clamp:
        r = mul(clamp_mask(mk(in_ids[0]), s0, s1), t0());
        break;
      case Op::ScalarMul:
        r = scalar_mul(t0(), s0);
        break;
      case Op::ScalarAdd:
        r = t0();
        break;
      case Op::AddRowVec: {
        if (has0() && has1())
          r = add_rowvec(t0(), t1());
        else if (has0())
          r = t0();
        else {
          Var zb = zeros(val(mk(in_ids[0])).shape());
          r = add_rowvec(zb, t1());
        }
        break;
      }
      case Op::MulBatchScalar: {
        Var p0 = has0() ? mul_batch_scalar(t0(), mk(in_ids[1])) : Var{};
        Var p1 = has1() ? mul_batch_scalar(mk(in_ids[0]), t1()) : Var{};
        r = p0.valid() && p1.valid() ? add(p0, p1) : (p0.valid() ? p0 : p1);
        break;
      }
      case Op::MatMul: {
        Var p0 = has0() ? matmul(t0(), mk(in_ids[1])) : Var{};
        Var p1 = has1() ? matmul(mk(in_ids[0]), t1()) : Var{};
        r = p0.valid() && p1.valid() ? add(p0, p1) : (p0.valid() ? p0 : p1);
        break;
      }
      case Op::BatchMatMul: {
        Var p0 = has0() ? bmm(t0(), mk(in_ids[1])) : Var{};
        Var p1 = has1() ? bmm(mk(in_ids[0]), t1()) : Var{};
        r = p0.valid() && p1.valid() ? add(p0, p1) : (p0.valid() ? p0 : p1);
        break;
      }
      case Op::TransposeLast:
        r = transpose_last(t0());
        break;
      case Op::SolveSpd: {
        // dz = A^{-1}(dr - dA z)
        Var rhs{};
        if (has1()) rhs = t1();
        if (has0()) {
          Var dAz = bmm(t0(), self);
          rhs = rhs.valid() ? sub(rhs, dAz) : neg(dAz);
        }
        r = solve_spd(mk(in_ids[0]), rhs);
        break;
      }
      case Op::SumAll:
        r = sum_all(t0());
        break;
      case Op::MeanAll:
        r = mean_all(t0());
        break;
      case Op::SumLast:
        r = sum_last(t0());
        break;
      case Op::Reshape:
        r = reshape(t0(), ints);
        break;
      case Op::SliceLast:
        r = slice_last(t0(), ints[0], ints[1]);
        break;
      case Op::SliceRows:
        r = slice_rows(t0(), ints[0], ints[1]);
        break;
      case Op::GatherCols:
        r = gather_cols(t0(), ints);
        break;
      case Op::ConcatLast:
      case Op::ConcatRows: {
        std::vector<Var> parts;
        for (auto i : in_ids) {
          std::int32_t ti = tan_of(i);
          parts.push_back(ti >= 0 ? mk(ti) : zeros(val(mk(i)).shape()));
        }
        r = op == Op::ConcatLast ? concat_last(parts) : concat_rows(parts);
        break;
      }
      case Op::TrilAssemble: {
        Var td = has0() ? t0() : zeros(val(mk(in_ids[0])).shape());
        Var to = has1() ? t1() : zeros(val(mk(in_ids[1])).shape());
        r = tril_assemble(td, to);
        break;
      }
      default:
        throw UnsupportedOpError("jvp: unhandled op");
    }
    tan[static_cast<std::size_t>(id - lo)] = r.id;
  }
  std::int32_t res = tan_of(hi);
  return res >= 0 ? mk(res) : Var{};
}

inline Var Tape::input_jacobian(Var out, Var in) {
  const Tensor& ot = val(out);
  const Tensor& it = val(in);
  std::int64_t m = ot.numel(), n = it.numel();
  if (ot.rank() > 2 || it.rank() > 2 || (ot.rank() == 2 && ot.dim(0) != 1) ||
      (it.rank() == 2 && it.dim(0) != 1))
    throw ContractError("input_jacobian: out/in must be vectors or [1,k] rows");
  std::vector<Var> cols;
  cols.reserve(static_cast<std::size_t>(n));
  for (std::int64_t j = 0; j < n; ++j) {
    Tensor e(it.shape());
    e[j] = 1.0;
    Var t = jvp(out, in, constant(std::move(e)));
    cols.push_back(t.valid() ? reshape(t, {m, 1}) : zeros({m, 1}));
  }
  return concat_last(cols);
}

// ---- operator sugar ----

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }
inline Var operator-(Var a) { return a.tape->neg(a); }

}  // namespace swingup
