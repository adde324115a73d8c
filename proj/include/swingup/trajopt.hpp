#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "swingup/chain.hpp"
#include "swingup/env.hpp"
#include "swingup/graph.hpp"
#include "swingup/policies.hpp"

namespace swingup {
namespace trajopt {

/// One control step of the true dynamics without angle wrapping, so the
/// discrete map stays smooth for trajectory optimization.
inline Eigen::VectorXd step_unwrapped(const EnvSpec& e, const Eigen::VectorXd& s,
                                      const Eigen::VectorXd& action) {
  int n = e.dof();
  Eigen::VectorXd tau = env::actuation(e, action);
  auto deriv = [&](const Eigen::VectorXd& y) {
    Eigen::VectorXd d(2 * n);
    d.head(n) = y.tail(n);
    d.tail(n) = chain::forward_dynamics(e.chain, y.head(n), y.tail(n), tau);
    return d;
  };
  Eigen::VectorXd y = s;
  double h = e.dt / e.substeps;
  for (int ss = 0; ss < e.substeps; ++ss) {
    Eigen::VectorXd k1 = deriv(y);
    Eigen::VectorXd k2 = deriv(y + 0.5 * h * k1);
    Eigen::VectorXd k3 = deriv(y + 0.5 * h * k2);
    Eigen::VectorXd k4 = deriv(y + h * k3);
    y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  if (!y.allFinite()) throw SimulationFault("step_unwrapped: non-finite state in '" + e.name + "'");
  return y;
}

/// The same RK4 step recorded on a tape: s and a are [1,2n] and [1,A] nodes.
inline Var record_env_step(Tape& t, const EnvSpec& e, Var s, Var a) {
  int n = e.dof();
  Var tau = t.matmul(a, t.constant(env::action_matrix(e)));
  auto rhs = [&](Var y) {
    Var q = t.slice_last(y, 0, n);
    Var qd = t.slice_last(y, n, n);
    return t.concat_last(std::vector<Var>{qd, record_chain_accel(t, e.chain, q, qd, tau)});
  };
  double h = e.dt / e.substeps;
  Var y = s;
  for (int ss = 0; ss < e.substeps; ++ss) {
    Var k1 = rhs(y);
    Var k2 = rhs(t.add(y, t.scalar_mul(k1, 0.5 * h)));
    Var k3 = rhs(t.add(y, t.scalar_mul(k2, 0.5 * h)));
    Var k4 = rhs(t.add(y, t.scalar_mul(k3, h)));
    Var sum = t.add(t.add(k1, k4), t.scalar_mul(t.add(k2, k3), 2.0));
    y = t.add(y, t.scalar_mul(sum, h / 6.0));
  }
  return y;
}

struct StepJac {
  Eigen::VectorXd next;
  Eigen::MatrixXd Fs;  // [2n,2n]
  Eigen::MatrixXd Fa;  // [2n,A]
};

/// Exact Jacobians of the discrete step map next = F(s, a).
inline StepJac discrete_jacobians(const EnvSpec& e, const Eigen::VectorXd& s,
                                  const Eigen::VectorXd& a) {
  int n2 = e.state_dim(), A = e.act_dim();
  Tape t;
  Tensor st({1, n2}), at({1, A});
  for (int i = 0; i < n2; ++i) st[i] = s(i);
  for (int i = 0; i < A; ++i) at[i] = a(i);
  Var sv = t.leaf(st, false);
  Var av = t.leaf(at, false);
  Var next = record_env_step(t, e, sv, av);
  StepJac out;
  const Tensor& nv = t.val(next);
  out.next.resize(n2);
  for (int i = 0; i < n2; ++i) out.next(i) = nv[i];
  out.Fs = t.val(t.input_jacobian(next, sv)).mat();
  out.Fa = t.val(t.input_jacobian(next, av)).mat();
  return out;
}

/// Smooth cost shaping for swing-up: heavy terminal pull to the upright rest
/// configuration, light running shaping, quadratic action effort, and soft
/// penalties for actuator saturation and cart rail overrun.
struct Weights {
  double action = 0.05;  // running |a|^2
  double limit = 25.0;   // running penalty beyond |a_i| = 0.95
  double track = 2e-3;   // running scale on the terminal shape (velocities off)
  double rail = 4.0;     // running cart overrun beyond rail_half
  double angle = 60.0;   // terminal per-angle 1-cos
  double cart = 10.0;    // terminal cart x^2
  double vel = 6.0;      // terminal per-coordinate qd^2
};

namespace detail {

/// Upright-rest quadratic-ish shape: value, gradient, and a positive diagonal
/// Hessian approximation (angles use 1-cos with a floored curvature).
inline double upright_shape(const EnvSpec& e, const Eigen::VectorXd& s, double wa, double wc,
                            double wv, Eigen::VectorXd& grad, Eigen::VectorXd& hdiag) {
  int n = e.dof(), off = e.chain.has_cart ? 1 : 0;
  double c = 0.0;
  grad.setZero(2 * n);
  hdiag.setZero(2 * n);
  if (e.chain.has_cart) {
    c += wc * s(0) * s(0);
    grad(0) = 2.0 * wc * s(0);
    hdiag(0) = 2.0 * wc;
  }
  for (int j = off; j < n; ++j) {
    c += wa * (1.0 - std::cos(s(j)));
    grad(j) = wa * std::sin(s(j));
    hdiag(j) = wa * std::max(std::cos(s(j)), 0.05);
  }
  for (int j = n; j < 2 * n; ++j) {
    c += wv * s(j) * s(j);
    grad(j) = 2.0 * wv * s(j);
    hdiag(j) = 2.0 * wv;
  }
  return c;
}

}  // namespace detail

/// Running cost with analytic derivatives; state Hessian is diagonal.
inline double running_cost(const EnvSpec& e, const Weights& w, const Eigen::VectorXd& s,
                           const Eigen::VectorXd& a, Eigen::VectorXd& gx, Eigen::VectorXd& hx,
                           Eigen::VectorXd& gu, Eigen::VectorXd& hu) {
  double c = detail::upright_shape(e, s, w.track * w.angle, w.track * w.cart, 0.0, gx, hx);
  if (e.chain.has_cart && e.rail_half > 0.0) {
    double over = std::fabs(s(0)) - e.rail_half;
    if (over > 0.0) {
      double sg = s(0) >= 0.0 ? 1.0 : -1.0;
      c += w.rail * over * over;
      gx(0) += 2.0 * w.rail * over * sg;
      hx(0) += 2.0 * w.rail;
    }
  }
  int A = e.act_dim();
  gu.setZero(A);
  hu.setZero(A);
  for (int k = 0; k < A; ++k) {
    c += w.action * a(k) * a(k);
    gu(k) = 2.0 * w.action * a(k);
    hu(k) = 2.0 * w.action;
    double over = std::fabs(a(k)) - 0.95;
    if (over > 0.0) {
      double sg = a(k) >= 0.0 ? 1.0 : -1.0;
      c += w.limit * over * over;
      gu(k) += 2.0 * w.limit * over * sg;
      hu(k) += 2.0 * w.limit;
    }
  }
  return c;
}

inline double terminal_cost(const EnvSpec& e, const Weights& w, const Eigen::VectorXd& s,
                            Eigen::VectorXd& gx, Eigen::VectorXd& hx) {
  return detail::upright_shape(e, s, w.angle, w.cart, w.vel, gx, hx);
}

/// Time-varying LQR tracking gains along a nominal trajectory, computed from
/// a stagewise quadratic cost chosen for tube stiffness rather than the
/// optimization weights. Returned gains are in feedback form: a = a_nom + K ds.
inline std::vector<Eigen::MatrixXd> tvlqr_gains(const EnvSpec& e, const Eigen::MatrixXd& X,
                                                const Eigen::MatrixXd& U,
                                                const Eigen::VectorXd& q_diag, double r,
                                                double terminal_scale = 50.0) {
  int T = static_cast<int>(U.rows());
  int n2 = e.state_dim(), A = e.act_dim();
  if (X.rows() != T + 1 || X.cols() != n2 || U.cols() != A || q_diag.size() != n2)
    throw ContractError("tvlqr_gains: bad shapes");
  if (r <= 0.0) throw ContractError("tvlqr_gains: r must be > 0");

  Eigen::MatrixXd Q = q_diag.asDiagonal();
  Eigen::MatrixXd R = r * Eigen::MatrixXd::Identity(A, A);
  Eigen::MatrixXd P = terminal_scale * Q;
  std::vector<Eigen::MatrixXd> K(static_cast<std::size_t>(T));
  for (int t = T - 1; t >= 0; --t) {
    StepJac j = discrete_jacobians(e, X.row(t).transpose(), U.row(t).transpose());
    Eigen::MatrixXd G = R + j.Fa.transpose() * P * j.Fa;
    Eigen::LLT<Eigen::MatrixXd> llt(G);
    if (llt.info() != Eigen::Success) throw SimulationFault("tvlqr_gains: indefinite gain system");
    Eigen::MatrixXd Kt = llt.solve(j.Fa.transpose() * P * j.Fs);
    Eigen::MatrixXd Acl = j.Fs - j.Fa * Kt;
    P = Q + Kt.transpose() * R * Kt + Acl.transpose() * P * Acl;
    P = 0.5 * (P + P.transpose());
    K[static_cast<std::size_t>(t)] = -Kt;
  }
  return K;
}

struct IlqrOptions {
  int max_iters = 150;
  double tol = 1e-7;  // relative cost improvement considered converged
  double mu_init = 1e-6;
  double mu_max = 1e8;
  bool verbose = false;
};

struct IlqrResult {
  Eigen::MatrixXd X;                // [T+1, 2n] unwrapped states
  Eigen::MatrixXd U;                // [T, A]
  std::vector<Eigen::MatrixXd> K;   // T feedback gains [A, 2n]
  double cost = 0.0;
  int iters = 0;
  bool converged = false;
};

namespace detail {

inline double rollout(const EnvSpec& e, const Weights& w, const Eigen::VectorXd& s0,
                      const Eigen::MatrixXd& U, Eigen::MatrixXd& X) {
  int T = static_cast<int>(U.rows());
  Eigen::VectorXd gx, hx, gu, hu;
  double cost = 0.0;
  X.row(0) = s0.transpose();
  for (int t = 0; t < T; ++t) {
    Eigen::VectorXd s = X.row(t).transpose(), a = U.row(t).transpose();
    cost += running_cost(e, w, s, a, gx, hx, gu, hu);
    X.row(t + 1) = step_unwrapped(e, s, a).transpose();
  }
  cost += terminal_cost(e, w, X.row(T).transpose(), gx, hx);
  return cost;
}

}  // namespace detail

/// Iterative LQR with Levenberg-style regularization and a backtracking
/// forward pass. Actions are clamped to [-1,1] during rollouts; the soft
/// limit penalty keeps optima interior.
inline IlqrResult ilqr(const EnvSpec& e, const Eigen::VectorXd& s0, const Eigen::MatrixXd& U0,
                       const Weights& w = {}, const IlqrOptions& opt = {}) {
  int n2 = e.state_dim(), A = e.act_dim();
  int T = static_cast<int>(U0.rows());
  if (s0.size() != n2 || U0.cols() != A) throw ContractError("ilqr: bad shapes");
  if (T < 1) throw ContractError("ilqr: empty horizon");

  IlqrResult res;
  res.U = U0.cwiseMax(-1.0).cwiseMin(1.0);
  res.X.resize(T + 1, n2);
  res.K.assign(static_cast<std::size_t>(T), Eigen::MatrixXd::Zero(A, n2));
  res.cost = detail::rollout(e, w, s0, res.U, res.X);

  std::vector<Eigen::MatrixXd> Fs(static_cast<std::size_t>(T)), Fa(static_cast<std::size_t>(T));
  std::vector<Eigen::VectorXd> kff(static_cast<std::size_t>(T), Eigen::VectorXd::Zero(A));
  double mu = opt.mu_init;
  int quiet_rounds = 0;

  for (res.iters = 0; res.iters < opt.max_iters; ++res.iters) {
    for (int t = 0; t < T; ++t) {
      StepJac j = discrete_jacobians(e, res.X.row(t).transpose(), res.U.row(t).transpose());
      Fs[static_cast<std::size_t>(t)] = j.Fs;
      Fa[static_cast<std::size_t>(t)] = j.Fa;
    }

    // backward pass, retried with more regularization on indefinite Quu
    bool backward_ok = false;
    while (!backward_ok && mu <= opt.mu_max) {
      backward_ok = true;
      Eigen::VectorXd gx, hx, gu, hu;
      Eigen::VectorXd Vx(n2);
      Eigen::MatrixXd Vxx(n2, n2);
      terminal_cost(e, w, res.X.row(T).transpose(), gx, hx);
      Vx = gx;
      Vxx = hx.asDiagonal();
      for (int t = T - 1; t >= 0; --t) {
        const Eigen::MatrixXd& fs = Fs[static_cast<std::size_t>(t)];
        const Eigen::MatrixXd& fa = Fa[static_cast<std::size_t>(t)];
        running_cost(e, w, res.X.row(t).transpose(), res.U.row(t).transpose(), gx, hx, gu, hu);
        Eigen::VectorXd Qx = gx + fs.transpose() * Vx;
        Eigen::VectorXd Qu = gu + fa.transpose() * Vx;
        Eigen::MatrixXd Qxx = Eigen::MatrixXd(hx.asDiagonal()) + fs.transpose() * Vxx * fs;
        Eigen::MatrixXd Quu = Eigen::MatrixXd(hu.asDiagonal()) + fa.transpose() * Vxx * fa;
        Eigen::MatrixXd Qux = fa.transpose() * Vxx * fs;
        Eigen::LLT<Eigen::MatrixXd> llt(Quu + mu * Eigen::MatrixXd::Identity(A, A));
        if (llt.info() != Eigen::Success) {
          mu *= 8.0;
          backward_ok = false;
          break;
        }
        kff[static_cast<std::size_t>(t)] = -llt.solve(Qu);
        res.K[static_cast<std::size_t>(t)] = -llt.solve(Qux);
        const Eigen::VectorXd& kv = kff[static_cast<std::size_t>(t)];
        const Eigen::MatrixXd& Kv = res.K[static_cast<std::size_t>(t)];
        Vx = Qx + Kv.transpose() * Quu * kv + Kv.transpose() * Qu + Qux.transpose() * kv;
        Vxx = Qxx + Kv.transpose() * Quu * Kv + Kv.transpose() * Qux + Qux.transpose() * Kv;
        Vxx = 0.5 * (Vxx + Vxx.transpose());
      }
    }
    if (!backward_ok) break;

    // forward pass: backtracking on the feedforward scale
    bool accepted = false;
    Eigen::MatrixXd Xn(T + 1, n2), Un(T, A);
    for (double alpha = 1.0; alpha > 1e-3; alpha *= 0.5) {
      Xn.row(0) = s0.transpose();
      Eigen::VectorXd gx, hx, gu, hu;
      double cost = 0.0;
      bool blew_up = false;
      for (int t = 0; t < T; ++t) {
        Eigen::VectorXd ds = (Xn.row(t) - res.X.row(t)).transpose();
        Eigen::VectorXd a = res.U.row(t).transpose() +
                            alpha * kff[static_cast<std::size_t>(t)] +
                            res.K[static_cast<std::size_t>(t)] * ds;
        a = a.cwiseMax(-1.0).cwiseMin(1.0);
        Un.row(t) = a.transpose();
        Eigen::VectorXd s = Xn.row(t).transpose();
        cost += running_cost(e, w, s, a, gx, hx, gu, hu);
        Eigen::VectorXd nx;
        try {
          nx = step_unwrapped(e, s, a);
        } catch (const SimulationFault&) {
          blew_up = true;
          break;
        }
        Xn.row(t + 1) = nx.transpose();
      }
      if (blew_up) continue;
      cost += terminal_cost(e, w, Xn.row(T).transpose(), gx, hx);
      if (cost < res.cost - 1e-12) {
        double rel = (res.cost - cost) / std::max(1.0, std::fabs(res.cost));
        quiet_rounds = rel < opt.tol ? quiet_rounds + 1 : 0;
        res.cost = cost;
        res.X = Xn;
        res.U = Un;
        accepted = true;
        break;
      }
    }

    if (opt.verbose && res.iters % 10 == 0)
      std::fprintf(stderr, "ilqr[%s] iter %3d cost %.6f mu %.1e%s\n", e.name.c_str(), res.iters,
                   res.cost, mu, accepted ? "" : " (no step)");
    if (accepted) {
      mu = std::max(mu / 3.0, 1e-9);
      if (quiet_rounds >= 2) {
        res.converged = true;
        break;
      }
    } else {
      mu *= 8.0;
      if (mu > opt.mu_max) break;
    }
  }
  return res;
}

}  // namespace trajopt
}  // namespace swingup
