#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "swingup/common.hpp"
#include "swingup/graph.hpp"
#include "swingup/tensor.hpp"

namespace swingup {

enum class Act { Tanh, Softplus };

/// Fully connected net: affine layers with `hidden` activation between them,
/// linear output. Weights are [in,out], applied as x @ W + b.
struct Mlp {
  std::vector<Tensor> W;
  std::vector<Tensor> b;
  Act hidden = Act::Tanh;

  /// widths = {in, h1, ..., out}. Weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
  /// biases zero.
  static Mlp init(const std::vector<std::int64_t>& widths, Act act, Rng& rng) {
    if (widths.size() < 2) throw ContractError("mlp: need at least in/out widths");
    Mlp m;
    m.hidden = act;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      std::int64_t fi = widths[l], fo = widths[l + 1];
      Tensor w({fi, fo});
      double s = 1.0 / std::sqrt(static_cast<double>(fi));
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-s, s);
      m.W.push_back(std::move(w));
      m.b.push_back(Tensor({fo}));
    }
    return m;
  }

  std::int64_t in_dim() const { return W.front().dim(0); }
  std::int64_t out_dim() const { return W.back().dim(1); }
  std::size_t layers() const { return W.size(); }

  /// Flat list of parameter tensors, in a fixed order (layer 0 W, b, ...).
  std::vector<Tensor*> params() {
    std::vector<Tensor*> p;
    for (std::size_t l = 0; l < W.size(); ++l) {
      p.push_back(&W[l]);
      p.push_back(&b[l]);
    }
    return p;
  }
  std::vector<const Tensor*> params() const {
    std::vector<const Tensor*> p;
    for (std::size_t l = 0; l < W.size(); ++l) {
      p.push_back(&W[l]);
      p.push_back(&b[l]);
    }
    return p;
  }
  /// Parameter names matching params() order, prefixed: "<prefix>.layer0.weight".
  static std::vector<std::string> param_names(const std::string& prefix, std::size_t layers) {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < layers; ++l) {
      names.push_back(prefix + ".layer" + std::to_string(l) + ".weight");
      names.push_back(prefix + ".layer" + std::to_string(l) + ".bias");
    }
    return names;
  }
};

/// Per-tape view of an Mlp: each parameter becomes one leaf node. Bind once
/// per tape so gradients of repeated forwards accumulate on the same leaves.
struct BoundMlp {
  std::vector<Var> W;
  std::vector<Var> b;
  Act hidden = Act::Tanh;

  /// Leaf vars in params() order.
  std::vector<Var> param_vars() const {
    std::vector<Var> p;
    for (std::size_t l = 0; l < W.size(); ++l) {
      p.push_back(W[l]);
      p.push_back(b[l]);
    }
    return p;
  }
};

inline BoundMlp bind(Tape& tape, const Mlp& m, bool rg) {
  BoundMlp bm;
  bm.hidden = m.hidden;
  for (std::size_t l = 0; l < m.W.size(); ++l) {
    bm.W.push_back(tape.leaf(m.W[l], rg));
    bm.b.push_back(tape.leaf(m.b[l], rg));
  }
  return bm;
}

/// x [B,in] -> [B,out]. Raises NumericError naming the first layer whose
/// output is non-finite.
inline Var mlp_forward(Tape& tape, const BoundMlp& m, Var x) {
  Var h = x;
  for (std::size_t l = 0; l < m.W.size(); ++l) {
    h = tape.add_rowvec(tape.matmul(h, m.W[l]), m.b[l]);
    if (!tape.val(h).all_finite())
      throw NumericError("mlp_forward: layer " + std::to_string(l) +
                         " produced non-finite values");
    if (l + 1 < m.W.size())
      h = m.hidden == Act::Tanh ? tape.tanh(h) : tape.softplus(h);
  }
  return h;
}

/// Convenience: bind fresh leaves and run. Repeated calls on one tape create
/// independent leaves; training code should bind() once instead.
inline Var mlp_forward(Tape& tape, const Mlp& m, Var x, bool rg = true) {
  return mlp_forward(tape, bind(tape, m, rg), x);
}

/// Tape-free forward for single vectors (evaluation, control loops).
inline Eigen::VectorXd mlp_forward_plain(const Mlp& m, const Eigen::VectorXd& x) {
  if (x.size() != m.in_dim()) throw ContractError("mlp_forward_plain: input size mismatch");
  Eigen::VectorXd h = x;
  for (std::size_t l = 0; l < m.W.size(); ++l) {
    CMapRM W(m.W[l].data(), m.W[l].dim(0), m.W[l].dim(1));
    CMapVec b(m.b[l].data(), m.b[l].dim(0));
    h = (W.transpose() * h + b).eval();
    if (!h.allFinite())
      throw NumericError("mlp_forward_plain: layer " + std::to_string(l) +
                         " produced non-finite values");
    if (l + 1 < m.W.size()) {
      for (Eigen::Index i = 0; i < h.size(); ++i)
        h(i) = m.hidden == Act::Tanh ? std::tanh(h(i)) : softplus_stable(h(i));
    }
  }
  return h;
}

}  // namespace swingup
