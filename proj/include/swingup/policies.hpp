#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "swingup/actor_critic.hpp"
#include "swingup/chain.hpp"
#include "swingup/env.hpp"
#include "swingup/graph.hpp"

namespace swingup {

/// A state-feedback controller that can also be recorded onto a tape so its
/// state Jacobian da/ds exists. Actions are in [-1,1]^act_dim, pre-scaling.
/// Time-varying controllers override the _at variants; for time-invariant
/// ones the step index is ignored.
struct Policy {
  virtual ~Policy() = default;
  virtual std::string id() const = 0;
  virtual Eigen::VectorXd act(const Eigen::VectorXd& s) const = 0;
  /// s is a [1,2n] node; returns a [1,act_dim] node. Policies without a
  /// well-defined state derivative throw UnsupportedOpError.
  virtual Var record(Tape& t, Var s) const = 0;
  virtual Eigen::VectorXd act_at(const Eigen::VectorXd& s, int step) const {
    (void)step;
    return act(s);
  }
  virtual Var record_at(Tape& t, Var s, int step) const {
    (void)step;
    return record(t, s);
  }
};

struct ZeroPolicy : Policy {
  int act_dim;
  explicit ZeroPolicy(const EnvSpec& e) : act_dim(e.act_dim()) {}
  std::string id() const override { return "zero"; }
  Eigen::VectorXd act(const Eigen::VectorXd&) const override {
    return Eigen::VectorXd::Zero(act_dim);
  }
  Var record(Tape& t, Var) const override { return t.zeros({1, act_dim}); }
};

/// Mean-mode head of a trained stochastic actor: a = tanh(mu(s)).
struct ActorMeanPolicy : Policy {
  Mlp actor;
  std::int64_t act_dim;
  std::string name;
  ActorMeanPolicy(Mlp actor_, std::int64_t act_dim_, std::string name_ = "actor")
      : actor(std::move(actor_)), act_dim(act_dim_), name(std::move(name_)) {}
  std::string id() const override { return name; }
  Eigen::VectorXd act(const Eigen::VectorXd& s) const override {
    Eigen::VectorXd head = mlp_forward_plain(actor, s);
    Eigen::VectorXd a(act_dim);
    for (std::int64_t k = 0; k < act_dim; ++k) a(k) = std::tanh(head(k));
    return a;
  }
  Var record(Tape& t, Var s) const override {
    Var head = mlp_forward(t, bind(t, actor, false), s);
    return t.tanh(t.slice_last(head, 0, act_dim));
  }
};

/// Jacobians A = df/ds, B = df/da of the true closed-form dynamics
/// f(s,a) = [qd, accel] at one point, via tangent propagation.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> linearize_dynamics(const EnvSpec& e,
                                                                      const Eigen::VectorXd& s,
                                                                      const Eigen::VectorXd& a) {
  int n = e.dof(), A = e.act_dim();
  if (s.size() != 2 * n || a.size() != A) throw ContractError("linearize_dynamics: bad sizes");
  Tape t;
  Tensor st({1, 2 * n}), at({1, A});
  for (int i = 0; i < 2 * n; ++i) st[i] = s(i);
  for (int i = 0; i < A; ++i) at[i] = a(i);
  Var sv = t.leaf(st, false);
  Var av = t.leaf(at, false);
  Var q = t.slice_last(sv, 0, n);
  Var qd = t.slice_last(sv, n, n);
  Var tau = t.matmul(av, t.constant(env::action_matrix(e)));
  Var f = t.concat_last(std::vector<Var>{qd, record_chain_accel(t, e.chain, q, qd, tau)});
  const Tensor& Js = t.val(t.input_jacobian(f, sv));
  const Tensor& Ja = t.val(t.input_jacobian(f, av));
  Eigen::MatrixXd Am = Js.mat(), Bm = Ja.mat();
  return {Am, Bm};
}

/// Infinite-horizon continuous LQR gain K = R^-1 B' P, with P from running
/// the Riccati ODE to its fixed point. Throws if A - BK is not Hurwitz.
inline Eigen::MatrixXd lqr_gain(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R) {
  Eigen::MatrixXd Rinv = R.inverse();
  auto rhs = [&](const Eigen::MatrixXd& P) -> Eigen::MatrixXd {
    return A.transpose() * P + P * A - P * B * Rinv * B.transpose() * P + Q;
  };
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(A.rows(), A.cols());
  double h = 1e-3;
  for (int i = 0; i < 200000; ++i) {
    Eigen::MatrixXd k1 = rhs(P);
    Eigen::MatrixXd k2 = rhs(P + 0.5 * h * k1);
    Eigen::MatrixXd k3 = rhs(P + 0.5 * h * k2);
    Eigen::MatrixXd k4 = rhs(P + h * k3);
    Eigen::MatrixXd dP = h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    P += dP;
    if (dP.norm() < 1e-12 * std::max(1.0, P.norm())) break;
  }
  Eigen::MatrixXd K = Rinv * B.transpose() * P;
  Eigen::EigenSolver<Eigen::MatrixXd> es(A - B * K);
  if (es.eigenvalues().real().maxCoeff() >= 0.0)
    throw ContractError("lqr_gain: closed loop not stable; system may be uncontrollable here");
  return K;
}

/// Balance gain at the upright rest configuration: strong angle weighting,
/// mild cart recentering, unit action cost.
inline Eigen::MatrixXd upright_lqr_gain(const EnvSpec& e) {
  int n = e.dof(), A = e.act_dim();
  auto [Am, Bm] = linearize_dynamics(e, Eigen::VectorXd::Zero(2 * n), Eigen::VectorXd::Zero(A));
  Eigen::VectorXd qdiag(2 * n);
  for (int i = 0; i < n; ++i) qdiag(i) = (e.chain.has_cart && i == 0) ? 2.0 : 10.0;
  for (int i = n; i < 2 * n; ++i) qdiag(i) = 1.0;
  return lqr_gain(Am, Bm, qdiag.asDiagonal(), Eigen::MatrixXd::Identity(A, A));
}

/// LQR feature vector [x | sin(angles), qd]: sin keeps the feedback smooth
/// and 2pi-periodic away from the linearization point.
inline Eigen::VectorXd balance_features(const EnvSpec& e, const Eigen::VectorXd& s) {
  int n = e.dof();
  Eigen::VectorXd ds(2 * n);
  for (int j = 0; j < n; ++j)
    ds(j) = (e.chain.has_cart && j == 0) ? s(j) : std::sin(s(j));
  ds.tail(n) = s.tail(n);
  return ds;
}

inline Var record_balance_features(Tape& t, const EnvSpec& e, Var s) {
  int n = e.dof();
  auto at = [&](Var v, int j) { return t.slice_last(v, j, 1); };
  std::vector<Var> parts;
  for (int j = 0; j < n; ++j)
    parts.push_back((e.chain.has_cart && j == 0) ? at(s, j) : t.sin(at(s, j)));
  for (int j = n; j < 2 * n; ++j) parts.push_back(at(s, j));
  return t.concat_last(parts);
}

/// Hand-designed swing-up controllers: smooth energy pumping far from the
/// goal, blended into an LQR balance law near the upright configuration.
/// Every term is built from smooth primitives so record() is exact.
class ScriptedPolicy : public Policy {
 public:
  struct Gains {
    double pump = 1.0;       // energy-error gain
    double pump_vel = 1.0;   // steepness of the velocity direction term
    double cart_kx = 0.25;   // cart recentering (cart systems)
    double cart_kv = 0.35;
    double swing_amp = 1.0;  // outer-joint swing reference amplitude (rad)
    double servo_kp = 2.0;   // outer-joint servo gains
    double servo_kd = 0.5;
    double kick = 0.0;       // swing-reference bias active only near rest
    double blend_d = 0.25;   // upright-distance gate
    double blend_v = 4.0;    // squared-speed gate
    double beta_d = 24.0;   // gate steepness
    double beta_v = 2.0;
  };

  explicit ScriptedPolicy(const EnvSpec& e) : ScriptedPolicy(e, pick_gains(e)) {}

  ScriptedPolicy(const EnvSpec& e, Gains g) : e_(e), g_(g) {
    n_ = e.dof();
    A_ = e.act_dim();
    off_ = e.chain.has_cart ? 1 : 0;
    // target energy: potential of the upright rest configuration
    e_star_ = 0.0;
    for (int j = 0; j < e.chain.links(); ++j)
      e_star_ += e.chain.g * e.chain.mu(j) * e.chain.lengths[static_cast<std::size_t>(j)];
    if (e.name != "reacher") K_ = upright_lqr_gain(e);
  }

  static Gains pick_gains(const EnvSpec& e);

  std::string id() const override { return "scripted_" + e_.name; }

  Eigen::VectorXd act(const Eigen::VectorXd& s) const override;
  Var record(Tape& t, Var s) const override;

  const Eigen::MatrixXd& balance_gain() const { return K_; }
  double target_energy() const { return e_star_; }
  const Gains& gains() const { return g_; }

 private:
  EnvSpec e_;
  Gains g_;
  int n_ = 0, A_ = 0, off_ = 0;
  Eigen::MatrixXd K_;
  double e_star_ = 0.0;
};

inline ScriptedPolicy::Gains ScriptedPolicy::pick_gains(const EnvSpec& e) {
  Gains g;
  if (e.name == "pendulum") {
    g.pump = 0.8;
    g.pump_vel = 1.5;
    g.blend_d = 0.3;
  } else if (e.name == "cartpole") {
    g.pump = 1.0;
    g.cart_kx = 0.1;
    g.cart_kv = 0.15;
    g.blend_d = 0.25;
  } else if (e.name == "acrobot") {
    g.pump = 0.5;
    g.pump_vel = 2.0;
    // saturated joint-torque recoveries swing wide and fast before settling,
    // so the balance gate must stay open through those transients
    g.blend_d = 0.5;
    g.blend_v = 8.0;
    g.beta_d = 8.0;
    g.beta_v = 1.0;
  } else if (e.name == "cart2pole") {
    g.pump = 0.35;
    g.blend_d = 0.12;
    g.blend_v = 2.0;
  } else if (e.name == "cart3pole") {
    g.pump = 0.3;
    g.blend_d = 0.1;
    g.blend_v = 1.5;
  } else if (e.name == "acro3bot") {
    g.pump = 0.4;
    g.pump_vel = 2.0;
    g.blend_d = 0.1;
    g.blend_v = 1.5;
  }
  return g;
}

inline Eigen::VectorXd ScriptedPolicy::act(const Eigen::VectorXd& s) const {
  Eigen::VectorXd q = s.head(n_), qd = s.tail(n_);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(A_);

  if (e_.name == "reacher") {
    // PD toward the joint configuration whose tip is the goal
    const double q0 = M_PI / 2, q1 = -M_PI / 2;
    a(0) = std::clamp(2.0 * std::sin(q0 - q(0)) - 0.8 * qd(0), -1.0, 1.0);
    a(1) = std::clamp(2.0 * std::sin(q1 - q(1)) - 0.8 * qd(1), -1.0, 1.0);
    return a;
  }

  // absolute link angles and their rates
  Eigen::VectorXd aa = Eigen::VectorXd::Zero(n_ - off_), ad = Eigen::VectorXd::Zero(n_ - off_);
  double acc_a = 0.0, acc_d = 0.0;
  for (int j = off_; j < n_; ++j) {
    acc_a += q(j);
    acc_d += qd(j);
    aa(j - off_) = acc_a;
    ad(j - off_) = acc_d;
  }

  double energy = chain::total_energy(e_.chain, q, qd);
  double e_err = e_star_ - energy;
  double d_up = 0.0;
  for (int j = 0; j < n_ - off_; ++j) d_up += 1.0 - std::cos(aa(j));
  double v_sq = qd.squaredNorm();

  // pump phase: a base joint torques with its own velocity while energy is
  // missing (dE/dt = tau qd >= 0); the cart pushes against the links'
  // horizontal sway (dE_links/dt = -xdd * sway) and recenters itself; outer
  // joints servo toward a swing reference in phase with the base momentum
  // (smooth under internal torques), which pumps the swing mode while
  // damping relative spin
  Eigen::VectorXd pump = Eigen::VectorXd::Zero(A_);
  double p_swing = chain::mass_matrix(e_.chain, q).row(off_).dot(qd);
  for (int k = 0; k < A_; ++k) {
    int coord = e_.actuated[static_cast<std::size_t>(k)];
    if (e_.chain.has_cart && coord == 0) {
      double sway = 0.0;
      for (int j = 0; j < n_ - off_; ++j) sway += ad(j) * std::cos(aa(j));
      pump(k) = -std::tanh(g_.pump * e_err * sway) - g_.cart_kx * q(0) - g_.cart_kv * qd(0);
    } else if (coord == off_) {
      pump(k) = std::tanh(g_.pump * e_err * std::tanh(g_.pump_vel * qd(coord)));
    } else {
      double phase = g_.pump_vel * p_swing + g_.kick / (1.0 + std::exp(-20.0 * (0.05 - v_sq)));
      double q_ref = g_.swing_amp * std::tanh(g_.pump * e_err) * std::tanh(phase);
      pump(k) = g_.servo_kp * (q_ref - q(coord)) - g_.servo_kd * qd(coord);
    }
  }

  // balance phase: LQR on [sin(angles)|x, qd]
  Eigen::VectorXd bal = -K_ * balance_features(e_, s);

  auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  double w = sigmoid(g_.beta_d * (g_.blend_d - d_up)) * sigmoid(g_.beta_v * (g_.blend_v - v_sq));
  for (int k = 0; k < A_; ++k)
    a(k) = std::clamp(w * bal(k) + (1.0 - w) * pump(k), -1.0, 1.0);
  return a;
}

inline Var ScriptedPolicy::record(Tape& t, Var s) const {
  Var q = t.slice_last(s, 0, n_);
  Var qd = t.slice_last(s, n_, n_);

  auto at = [&](Var v, int j) { return t.slice_last(v, j, 1); };  // [1,1]

  if (e_.name == "reacher") {
    const double q0 = M_PI / 2, q1 = -M_PI / 2;
    Var a0 = t.clamp(t.sub(t.scalar_mul(t.sin(t.scalar_add(t.neg(at(q, 0)), q0)), 2.0),
                           t.scalar_mul(at(qd, 0), 0.8)),
                     -1.0, 1.0);
    Var a1 = t.clamp(t.sub(t.scalar_mul(t.sin(t.scalar_add(t.neg(at(q, 1)), q1)), 2.0),
                           t.scalar_mul(at(qd, 1), 0.8)),
                     -1.0, 1.0);
    return t.concat_last({a0, a1});
  }

  // absolute angles/rates as running sums
  std::vector<Var> aa, ad;
  Var acc_a, acc_d;
  for (int j = off_; j < n_; ++j) {
    acc_a = j == off_ ? at(q, j) : t.add(acc_a, at(q, j));
    acc_d = j == off_ ? at(qd, j) : t.add(acc_d, at(qd, j));
    aa.push_back(acc_a);
    ad.push_back(acc_d);
  }

  // total energy: 1/2 qd' M qd + V
  Var M = chain::record_mass_matrix(t, e_.chain, q);            // [1,n,n]
  Var qd_row = t.reshape(qd, {1, 1, n_});
  Var qd_col = t.reshape(qd, {1, n_, 1});
  Var kin = t.scalar_mul(t.reshape(t.bmm(t.bmm(qd_row, M), qd_col), {1, 1}), 0.5);
  Var energy = t.add(kin, chain::record_potential(t, e_.chain, q));  // [1,1]
  Var e_err = t.scalar_add(t.neg(energy), e_star_);

  Var d_up, v_sq;
  for (std::size_t j = 0; j < aa.size(); ++j) {
    Var c = t.scalar_add(t.neg(t.cos(aa[j])), 1.0);
    d_up = j == 0 ? c : t.add(d_up, c);
  }
  for (int j = 0; j < n_; ++j) {
    Var sq = t.square(at(qd, j));
    v_sq = j == 0 ? sq : t.add(v_sq, sq);
  }

  std::vector<Var> pump(static_cast<std::size_t>(A_));
  for (int k = 0; k < A_; ++k) {
    int coord = e_.actuated[static_cast<std::size_t>(k)];
    if (e_.chain.has_cart && coord == 0) {
      Var sway;
      for (std::size_t j = 0; j < aa.size(); ++j) {
        Var term = t.mul(ad[j], t.cos(aa[j]));
        sway = j == 0 ? term : t.add(sway, term);
      }
      pump[k] = t.sub(t.neg(t.tanh(t.scalar_mul(t.mul(e_err, sway), g_.pump))),
                      t.add(t.scalar_mul(at(q, 0), g_.cart_kx),
                            t.scalar_mul(at(qd, 0), g_.cart_kv)));
    } else if (coord == off_) {
      pump[k] = t.tanh(
          t.scalar_mul(t.mul(e_err, t.tanh(t.scalar_mul(at(qd, coord), g_.pump_vel))), g_.pump));
    } else {
      Var p_all = t.reshape(t.bmm(M, qd_col), {1, n_});  // generalized momentum
      Var gate = t.sigmoid(t.scalar_mul(t.scalar_add(t.neg(v_sq), 0.05), 20.0));
      Var phase =
          t.add(t.scalar_mul(at(p_all, off_), g_.pump_vel), t.scalar_mul(gate, g_.kick));
      Var q_ref = t.scalar_mul(t.mul(t.tanh(t.scalar_mul(e_err, g_.pump)), t.tanh(phase)),
                               g_.swing_amp);
      pump[k] = t.sub(t.scalar_mul(t.sub(q_ref, at(q, coord)), g_.servo_kp),
                      t.scalar_mul(at(qd, coord), g_.servo_kd));
    }
  }

  Var ds = record_balance_features(t, e_, s);  // [1,2n]
  Tensor negKT({2 * n_, A_});
  for (int r = 0; r < A_; ++r)
    for (int c = 0; c < 2 * n_; ++c) negKT[c * A_ + r] = -K_(r, c);
  Var bal = t.matmul(ds, t.constant(negKT));  // [1,A]

  Var w = t.mul(t.sigmoid(t.scalar_mul(t.scalar_add(t.neg(d_up), g_.blend_d), g_.beta_d)),
                t.sigmoid(t.scalar_mul(t.scalar_add(t.neg(v_sq), g_.blend_v), g_.beta_v)));

  std::vector<Var> out(static_cast<std::size_t>(A_));
  for (int k = 0; k < A_; ++k) {
    Var mix = t.add(t.mul(w, at(bal, k)),
                    t.mul(t.scalar_add(t.neg(w), 1.0), pump[static_cast<std::size_t>(k)]));
    out[static_cast<std::size_t>(k)] = t.clamp(mix, -1.0, 1.0);
  }
  return t.concat_last(out);
}

/// Named policy lookup for the CLI: "zero", "scripted", or a checkpoint path
/// handled by the caller.
inline std::unique_ptr<Policy> make_test_policy(const EnvSpec& e, const std::string& name) {
  if (name == "zero") return std::make_unique<ZeroPolicy>(e);
  if (name == "scripted") return std::make_unique<ScriptedPolicy>(e);
  throw ConfigError("unknown policy '" + name + "' (want zero|scripted|<checkpoint path>)");
}

}  // namespace swingup
