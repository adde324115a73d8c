#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "swingup/chain.hpp"
#include "swingup/env.hpp"
#include "swingup/graph.hpp"
#include "swingup/nn.hpp"
#include "swingup/optim.hpp"

namespace swingup {

enum class ModelKind { Dnn, Lnn };

inline ModelKind model_kind_of(const std::string& s) {
  if (s == "dnn") return ModelKind::Dnn;
  if (s == "lnn") return ModelKind::Lnn;
  throw ConfigError("unknown model kind '" + s + "' (want dnn|lnn)");
}
inline std::string to_string(ModelKind k) { return k == ModelKind::Dnn ? "dnn" : "lnn"; }

/// Learned one-step dynamics (black-box net or Lagrangian net) plus a reward
/// net. The dynamics map (s, tau) to the next state; the reward net scores a
/// next state.
struct WorldModel {
  ModelKind kind = ModelKind::Lnn;
  int dof = 0;
  double dt = 0.02;
  double mass_eps = 1e-4;  // SPD floor on the learned inertia diagonal

  Mlp dnn;   // [2n+n] -> [2n]
  Mlp lnet;  // [n] -> n(n+1)/2, lower-triangle entries of L
  Mlp vnet;  // [n] -> 1, potential
  Mlp rew;   // [2n] -> 1

  static WorldModel init(ModelKind kind, int dof, double dt, Rng& rng) {
    WorldModel m;
    m.kind = kind;
    m.dof = dof;
    m.dt = dt;
    std::int64_t n = dof;
    if (kind == ModelKind::Dnn) {
      m.dnn = Mlp::init({3 * n, 64, 64, 2 * n}, Act::Tanh, rng);
    } else {
      m.lnet = Mlp::init({n, 64, 64, n * (n + 1) / 2}, Act::Softplus, rng);
      m.vnet = Mlp::init({n, 64, 64, 1}, Act::Softplus, rng);
    }
    m.rew = Mlp::init({2 * n, 64, 64, 1}, Act::Tanh, rng);
    return m;
  }

  /// Dynamics parameters (reward net excluded).
  std::vector<Tensor*> dyn_params() {
    std::vector<Tensor*> p;
    if (kind == ModelKind::Dnn) {
      p = dnn.params();
    } else {
      p = lnet.params();
      for (Tensor* t : vnet.params()) p.push_back(t);
    }
    return p;
  }
  std::vector<Tensor*> rew_params() { return rew.params(); }
};

/// Per-tape view of a WorldModel.
struct BoundWorldModel {
  const WorldModel* model = nullptr;
  BoundMlp dnn, lnet, vnet, rew;

  std::vector<Var> dyn_param_vars() const {
    std::vector<Var> p;
    if (model->kind == ModelKind::Dnn) {
      p = dnn.param_vars();
    } else {
      p = lnet.param_vars();
      for (Var v : vnet.param_vars()) p.push_back(v);
    }
    return p;
  }
};

inline BoundWorldModel bind(Tape& t, const WorldModel& m, bool rg) {
  BoundWorldModel b;
  b.model = &m;
  if (m.kind == ModelKind::Dnn) {
    b.dnn = bind(t, m.dnn, rg);
  } else {
    b.lnet = bind(t, m.lnet, rg);
    b.vnet = bind(t, m.vnet, rg);
  }
  b.rew = bind(t, m.rew, rg);
  return b;
}

namespace model {

/// Learned inertia matrix M(q) = L L^T with softplus-plus-eps diagonal.
inline Var lnn_mass(Tape& t, const BoundMlp& lnet, Var q, double eps) {
  std::int64_t B = t.val(q).dim(0), n = t.val(q).dim(1);
  Var out = mlp_forward(t, lnet, q);
  Var diag = t.scalar_add(t.softplus(t.slice_last(out, 0, n)), eps);
  Var off = n > 1 ? t.slice_last(out, n, n * (n - 1) / 2) : t.zeros({B, 1});
  Var L = t.tril_assemble(diag, off);
  return t.bmm(L, t.transpose_last(L));
}

inline Var lnn_potential(Tape& t, const BoundMlp& vnet, Var q) {
  return mlp_forward(t, vnet, q);
}

/// Joint accelerations of the Lagrangian model.
inline Var lnn_accel(Tape& t, const BoundWorldModel& m, Var q, Var qd, Var tau) {
  double eps = m.model->mass_eps;
  const BoundMlp& lnet = m.lnet;
  const BoundMlp& vnet = m.vnet;
  return lagrangian_accel(
      t, q, qd, tau, [&](Tape& tt, Var qq) { return lnn_mass(tt, lnet, qq, eps); },
      [&](Tape& tt, Var qq) { return lnn_potential(tt, vnet, qq); });
}

/// One-step prediction: s [B,2n], tau [B,n] -> next state [B,2n].
/// DNN: direct map. LNN: explicit-midpoint integration of the learned
/// Euler-Lagrange dynamics.
inline Var predict_next(Tape& t, const BoundWorldModel& m, Var s, Var tau) {
  std::int64_t n = m.model->dof;
  if (t.val(s).rank() != 2 || t.val(s).dim(1) != 2 * n)
    throw ContractError("predict_next: state must be [B," + std::to_string(2 * n) + "]");
  if (m.model->kind == ModelKind::Dnn) return mlp_forward(t, m.dnn, t.concat_last({s, tau}));

  double h = m.model->dt;
  Var q = t.slice_last(s, 0, n);
  Var qd = t.slice_last(s, n, n);
  Var a1 = lnn_accel(t, m, q, qd, tau);
  Var qm = t.add(q, t.scalar_mul(qd, 0.5 * h));
  Var qdm = t.add(qd, t.scalar_mul(a1, 0.5 * h));
  Var a2 = lnn_accel(t, m, qm, qdm, tau);
  Var q_next = t.add(q, t.scalar_mul(qdm, h));
  Var qd_next = t.add(qd, t.scalar_mul(a2, h));
  return t.concat_last({q_next, qd_next});
}

/// Predicted reward of a (next) state: [B,2n] -> [B,1].
inline Var predict_reward(Tape& t, const BoundWorldModel& m, Var next) {
  return mlp_forward(t, m.rew, next);
}

/// L1 regression loss: sum over dims, mean over batch.
inline Var l1_loss(Tape& t, Var pred, Var target) {
  return t.mean_all(t.sum_last(t.abs(t.sub(pred, target))));
}

struct TransitionBatch {
  Tensor s;     // [B,2n]
  Tensor tau;   // [B,n]
  Tensor next;  // [B,2n]
  Tensor r;     // [B,1]
};

struct ModelLosses {
  double dyn = 0.0;
  double rew = 0.0;
  double dyn_grad_norm = 0.0;
  double rew_grad_norm = 0.0;
};

/// One gradient step on the dynamics and reward nets (L1 losses, shared
/// backward pass, per-group clipping, one AdamW step each).
inline ModelLosses model_update(WorldModel& m, const TransitionBatch& batch, AdamW& dyn_opt,
                                AdamW& rew_opt, double grad_clip = 100.0) {
  std::int64_t B = batch.s.dim(0);
  if (batch.tau.dim(0) != B || batch.next.dim(0) != B || batch.r.dim(0) != B)
    throw ContractError("model_update: batch fields disagree on size");

  Tape t;
  BoundWorldModel bm = bind(t, m, true);
  Var s = t.constant(batch.s);
  Var tau = t.constant(batch.tau);
  Var target = t.constant(batch.next);
  Var r_target = t.constant(batch.r);

  Var pred = predict_next(t, bm, s, tau);
  Var dyn_loss = l1_loss(t, pred, target);
  // reward net learns on observed transitions
  Var rew_pred = predict_reward(t, bm, t.constant(batch.next));
  Var rew_loss = l1_loss(t, rew_pred, r_target);

  ModelLosses out;
  out.dyn = t.val(dyn_loss)[0];
  out.rew = t.val(rew_loss)[0];
  if (!std::isfinite(out.dyn) || !std::isfinite(out.rew))
    throw NumericError("model_update: non-finite loss");

  Grads g = t.backward(t.add(dyn_loss, rew_loss));

  auto apply = [&](std::vector<Tensor*> params, const std::vector<Var>& vars, AdamW& opt,
                   double& norm_out) {
    std::vector<Tensor> grads;
    grads.reserve(vars.size());
    for (Var v : vars) grads.push_back(g.get(v));
    norm_out = clip_grad_norm(grads, grad_clip);
    if (!opt.attached()) opt.attach(params);
    opt.step(params, grads);
  };
  apply(m.dyn_params(), bm.dyn_param_vars(), dyn_opt, out.dyn_grad_norm);
  apply(m.rew_params(), bm.rew.param_vars(), rew_opt, out.rew_grad_norm);
  return out;
}

/// Plain one-step prediction (no gradients), for rollout diagnostics.
inline Eigen::VectorXd predict_next_plain(const WorldModel& m, const Eigen::VectorXd& s,
                                          const Eigen::VectorXd& tau) {
  int n = m.dof;
  Tape t;
  Tensor st({1, 2 * n}), taut({1, n});
  for (int i = 0; i < 2 * n; ++i) st[i] = s(i);
  for (int i = 0; i < n; ++i) taut[i] = tau(i);
  BoundWorldModel bm = bind(t, m, false);
  const Tensor& out = t.val(predict_next(t, bm, t.constant(st), t.constant(taut)));
  Eigen::VectorXd next(2 * n);
  for (int i = 0; i < 2 * n; ++i) next(i) = out[i];
  return next;
}

inline double predict_reward_plain(const WorldModel& m, const Eigen::VectorXd& next) {
  Tape t;
  Tensor st({1, 2 * m.dof});
  for (int i = 0; i < 2 * m.dof; ++i) st[i] = next(i);
  BoundWorldModel bm = bind(t, m, false);
  return t.val(predict_reward(t, bm, t.constant(st)))[0];
}

}  // namespace model
}  // namespace swingup
