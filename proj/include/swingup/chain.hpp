#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "swingup/common.hpp"
#include "swingup/graph.hpp"

namespace swingup {

/// Planar chain of point-mass links, optionally mounted on a cart that slides
/// along a horizontal rail. Generalized coordinates are [x,] theta_1..theta_N:
/// x is cart position, theta_1 is the first link's angle from the upward
/// vertical (counterclockwise), theta_j (j>1) is relative to link j-1. Each
/// link is a massless rod of length l_j with its mass at the tip.
struct ChainSpec {
  bool has_cart = false;
  double cart_mass = 1.0;
  std::vector<double> masses;
  std::vector<double> lengths;
  double g = 9.81;

  int links() const { return static_cast<int>(masses.size()); }
  int dof() const { return links() + (has_cart ? 1 : 0); }

  /// Mass hanging at or below joint j (0-based): sum of masses j..N-1.
  double mu(int j) const {
    double s = 0.0;
    for (int i = j; i < links(); ++i) s += masses[static_cast<std::size_t>(i)];
    return s;
  }
};

namespace chain {

/// Absolute link angles from the relative coordinates.
inline Eigen::VectorXd abs_angles(const ChainSpec& c, const Eigen::VectorXd& q) {
  int off = c.has_cart ? 1 : 0;
  Eigen::VectorXd a(c.links());
  double acc = 0.0;
  for (int j = 0; j < c.links(); ++j) {
    acc += q(off + j);
    a(j) = acc;
  }
  return a;
}

/// Inertia matrix in absolute-angle coordinates [x,] a_1..a_N.
inline Eigen::MatrixXd mass_matrix_abs(const ChainSpec& c, const Eigen::VectorXd& a) {
  int N = c.links(), off = c.has_cart ? 1 : 0, n = c.dof();
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
  if (c.has_cart) {
    M(0, 0) = c.cart_mass;
    for (int i = 0; i < N; ++i) M(0, 0) += c.masses[static_cast<std::size_t>(i)];
    for (int j = 0; j < N; ++j) {
      double v = c.mu(j) * c.lengths[static_cast<std::size_t>(j)] * std::cos(a(j));
      M(0, off + j) = v;
      M(off + j, 0) = v;
    }
  }
  for (int j = 0; j < N; ++j)
    for (int k = 0; k < N; ++k) {
      double m = c.mu(std::max(j, k)) * c.lengths[static_cast<std::size_t>(j)] *
                 c.lengths[static_cast<std::size_t>(k)] * std::cos(a(j) - a(k));
      M(off + j, off + k) = m;
    }
  return M;
}

/// d(mass_matrix_abs)/d a_m.
inline Eigen::MatrixXd dmass_abs(const ChainSpec& c, const Eigen::VectorXd& a, int m) {
  int N = c.links(), off = c.has_cart ? 1 : 0, n = c.dof();
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n, n);
  if (c.has_cart) {
    double v = -c.mu(m) * c.lengths[static_cast<std::size_t>(m)] * std::sin(a(m));
    D(0, off + m) = v;
    D(off + m, 0) = v;
  }
  for (int j = 0; j < N; ++j)
    for (int k = 0; k < N; ++k) {
      if (j == k) continue;
      double s = c.mu(std::max(j, k)) * c.lengths[static_cast<std::size_t>(j)] *
                 c.lengths[static_cast<std::size_t>(k)] * std::sin(a(j) - a(k));
      double d = 0.0;
      if (j == m) d -= s;
      if (k == m) d += s;
      D(off + j, off + k) = d;
    }
  return D;
}

/// Constant map from relative to absolute coordinates: [x, a] = J [x, theta].
inline Eigen::MatrixXd rel_to_abs(const ChainSpec& c) {
  int n = c.dof(), off = c.has_cart ? 1 : 0;
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  if (c.has_cart) J(0, 0) = 1.0;
  for (int j = 0; j < c.links(); ++j)
    for (int k = 0; k <= j; ++k) J(off + j, off + k) = 1.0;
  return J;
}

inline Eigen::MatrixXd mass_matrix(const ChainSpec& c, const Eigen::VectorXd& q) {
  Eigen::MatrixXd J = rel_to_abs(c);
  return J.transpose() * mass_matrix_abs(c, abs_angles(c, q)) * J;
}

inline Eigen::VectorXd gravity(const ChainSpec& c, const Eigen::VectorXd& q) {
  Eigen::VectorXd a = abs_angles(c, q);
  int off = c.has_cart ? 1 : 0;
  Eigen::VectorXd Gabs = Eigen::VectorXd::Zero(c.dof());
  for (int j = 0; j < c.links(); ++j)
    Gabs(off + j) = -c.g * c.mu(j) * c.lengths[static_cast<std::size_t>(j)] * std::sin(a(j));
  return rel_to_abs(c).transpose() * Gabs;
}

/// Coriolis/centrifugal force C(q,qd) qd, from Mdot qd - 0.5 d(qd' M qd)/dq.
inline Eigen::VectorXd coriolis_times_qdot(const ChainSpec& c, const Eigen::VectorXd& q,
                                           const Eigen::VectorXd& qd) {
  int n = c.dof(), off = c.has_cart ? 1 : 0;
  Eigen::VectorXd a = abs_angles(c, q);
  Eigen::MatrixXd J = rel_to_abs(c);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd Mdot = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k < n; ++k) {
    if (k == 0 && c.has_cart) continue;  // M does not depend on x
    // dM_rel/d theta_k = J' (sum_{m>=k} dM_abs/da_m) J
    Eigen::MatrixXd Dabs = Eigen::MatrixXd::Zero(n, n);
    for (int m = k - off; m < c.links(); ++m) Dabs += dmass_abs(c, a, m);
    Eigen::MatrixXd Dk = J.transpose() * Dabs * J;
    Mdot += Dk * qd(k);
    out(k) -= 0.5 * qd.dot(Dk * qd);
  }
  out += Mdot * qd;
  return out;
}

inline double potential_energy(const ChainSpec& c, const Eigen::VectorXd& q) {
  Eigen::VectorXd a = abs_angles(c, q);
  double V = 0.0;
  for (int j = 0; j < c.links(); ++j)
    V += c.g * c.mu(j) * c.lengths[static_cast<std::size_t>(j)] * std::cos(a(j));
  return V;
}

inline double kinetic_energy(const ChainSpec& c, const Eigen::VectorXd& q,
                             const Eigen::VectorXd& qd) {
  return 0.5 * qd.dot(mass_matrix(c, q) * qd);
}

inline double total_energy(const ChainSpec& c, const Eigen::VectorXd& q,
                           const Eigen::VectorXd& qd) {
  return kinetic_energy(c, q, qd) + potential_energy(c, q);
}

/// Joint accelerations: solve M qdd = tau - C qd - G.
inline Eigen::VectorXd forward_dynamics(const ChainSpec& c, const Eigen::VectorXd& q,
                                        const Eigen::VectorXd& qd,
                                        const Eigen::VectorXd& tau) {
  Eigen::MatrixXd M = mass_matrix(c, q);
  Eigen::VectorXd rhs = tau - coriolis_times_qdot(c, q, qd) - gravity(c, q);
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  if (llt.info() != Eigen::Success)
    throw NumericError("forward_dynamics: inertia matrix not SPD");
  return llt.solve(rhs);
}

/// Positions of the cart (if any) and each link tip.
inline std::vector<Eigen::Vector2d> link_positions(const ChainSpec& c,
                                                   const Eigen::VectorXd& q) {
  Eigen::VectorXd a = abs_angles(c, q);
  std::vector<Eigen::Vector2d> pts;
  double x = c.has_cart ? q(0) : 0.0, y = 0.0;
  pts.emplace_back(x, y);
  for (int j = 0; j < c.links(); ++j) {
    x += c.lengths[static_cast<std::size_t>(j)] * std::sin(a(j));
    y += c.lengths[static_cast<std::size_t>(j)] * std::cos(a(j));
    pts.emplace_back(x, y);
  }
  return pts;
}

inline Eigen::Vector2d tip_position(const ChainSpec& c, const Eigen::VectorXd& q) {
  return link_positions(c, q).back();
}

}  // namespace chain

// ---- graph-recorded chain dynamics (batched) ----

namespace chain {

/// Batched constant [B,n,n] from one matrix.
inline Var tile_const(Tape& t, const Eigen::MatrixXd& m, std::int64_t B) {
  Tensor out({B, m.rows(), m.cols()});
  for (std::int64_t b = 0; b < B; ++b) out.mat_of(b) = m;
  return t.constant(std::move(out));
}

/// Rank-2 tensor from an Eigen matrix (layout-safe).
inline Tensor to_tensor(const Eigen::MatrixXd& m) {
  Tensor out({m.rows(), m.cols()});
  out.mat() = m;
  return out;
}

/// Inertia matrix in relative coordinates as a graph node. q is [B,n].
inline Var record_mass_matrix(Tape& t, const ChainSpec& c, Var q) {
  std::int64_t B = t.val(q).dim(0);
  int N = c.links(), off = c.has_cart ? 1 : 0, n = c.dof();
  // absolute angles: a = q_theta @ U with U upper-triangular ones
  Eigen::MatrixXd U = Eigen::MatrixXd::Zero(N, N);
  for (int j = 0; j < N; ++j)
    for (int k = 0; k <= j; ++k) U(k, j) = 1.0;
  Var th = t.slice_last(q, off, N);
  Var a = t.matmul(th, t.constant(to_tensor(U)));

  // build lower-triangle entries of M_abs, then symmetrize
  std::vector<Var> diag_cols, off_cols;
  auto col = [&](Var m, int j) { return t.slice_last(m, j, 1); };
  Var ca = t.cos(a);
  // diag: [m_tot?, mu_j l_j^2...]
  if (c.has_cart) {
    double mtot = c.cart_mass;
    for (double m : c.masses) mtot += m;
    diag_cols.push_back(t.constant(Tensor::full({B, 1}, mtot)));
  }
  for (int j = 0; j < N; ++j) {
    double v = c.mu(j) * c.lengths[static_cast<std::size_t>(j)] *
               c.lengths[static_cast<std::size_t>(j)];
    diag_cols.push_back(t.constant(Tensor::full({B, 1}, v)));
  }
  // strict lower rows (i>j) in row-major order over full coord set
  for (int i = 1; i < n; ++i)
    for (int j = 0; j < i; ++j) {
      int li = i - off;  // link index of row
      if (j == 0 && c.has_cart) {
        // cart coupling: mu_li l_li cos a_li
        double w = c.mu(li) * c.lengths[static_cast<std::size_t>(li)];
        off_cols.push_back(t.scalar_mul(col(ca, li), w));
      } else {
        int lj = j - off;
        double w = c.mu(std::max(li, lj)) * c.lengths[static_cast<std::size_t>(li)] *
                   c.lengths[static_cast<std::size_t>(lj)];
        Var diff = t.sub(col(a, li), col(a, lj));
        off_cols.push_back(t.scalar_mul(t.cos(diff), w));
      }
    }
  Var d = t.concat_last(diag_cols);
  Var tr;
  if (off_cols.empty()) {
    tr = t.tril_assemble(d, t.zeros({B, 1}));
  } else {
    tr = t.tril_assemble(d, t.concat_last(off_cols));
  }
  Var dembed = t.tril_assemble(d, t.zeros({B, n > 1 ? static_cast<std::int64_t>(n) * (n - 1) / 2
                                                    : 1}));
  Var Mabs = t.sub(t.add(tr, t.transpose_last(tr)), dembed);

  Eigen::MatrixXd J = rel_to_abs(c);
  Var Jb = tile_const(t, J, B);
  Var Jtb = tile_const(t, J.transpose(), B);
  return t.bmm(Jtb, t.bmm(Mabs, Jb));
}

/// Potential energy as a [B,1] graph node.
inline Var record_potential(Tape& t, const ChainSpec& c, Var q) {
  int N = c.links(), off = c.has_cart ? 1 : 0;
  Eigen::MatrixXd U = Eigen::MatrixXd::Zero(N, N);
  for (int j = 0; j < N; ++j)
    for (int k = 0; k <= j; ++k) U(k, j) = 1.0;
  Var th = t.slice_last(q, off, N);
  Var a = t.matmul(th, t.constant(to_tensor(U)));
  std::vector<double> w(static_cast<std::size_t>(N));
  for (int j = 0; j < N; ++j)
    w[static_cast<std::size_t>(j)] = c.g * c.mu(j) * c.lengths[static_cast<std::size_t>(j)];
  return t.matmul(t.cos(a), t.constant(Tensor({N, 1}, std::move(w))));
}

}  // namespace chain

/// Euler-Lagrange acceleration from arbitrary graph builders for M(q) and
/// V(q). Computes qdd = M^{-1} (tau - C qd - G) where C qd and G come from
/// directional derivatives of the builders, so the whole expression stays
/// differentiable (including through the derivative terms).
///
/// mass: q [B,n] -> [B,n,n] SPD; potential: q [B,n] -> [B,1].
inline Var lagrangian_accel(Tape& t, Var q, Var qd, Var tau,
                            const std::function<Var(Tape&, Var)>& mass,
                            const std::function<Var(Tape&, Var)>& potential) {
  const Tensor& qt = t.val(q);
  std::int64_t B = qt.dim(0), n = qt.dim(1);
  Var M = mass(t, q);
  Var V = potential(t, q);
  Var qd3 = t.reshape(qd, {B, n, 1});

  // dM/dq_k and dV/dq_k via basis tangents
  std::vector<Var> dM(static_cast<std::size_t>(n));
  std::vector<Var> dV(static_cast<std::size_t>(n));
  for (std::int64_t k = 0; k < n; ++k) {
    Tensor e({B, n});
    for (std::int64_t b = 0; b < B; ++b) e[b * n + k] = 1.0;
    Var seed = t.constant(std::move(e));
    dM[static_cast<std::size_t>(k)] = t.jvp(M, q, seed);
    dV[static_cast<std::size_t>(k)] = t.jvp(V, q, seed);
  }

  // Mdot = sum_k dM_k qd_k ; quad_k = 0.5 qd' dM_k qd ; G_k = dV_k
  Var mdot{};
  std::vector<Var> quad_cols, g_cols;
  for (std::int64_t k = 0; k < n; ++k) {
    Var qdk = t.reshape(t.slice_last(qd, k, 1), {B});
    if (dM[static_cast<std::size_t>(k)].valid()) {
      Var term = t.mul_batch_scalar(dM[static_cast<std::size_t>(k)], qdk);
      mdot = mdot.valid() ? t.add(mdot, term) : term;
      Var quad = t.bmm(t.transpose_last(qd3), t.bmm(dM[static_cast<std::size_t>(k)], qd3));
      quad_cols.push_back(t.scalar_mul(t.reshape(quad, {B, 1}), 0.5));
    } else {
      quad_cols.push_back(t.zeros({B, 1}));
    }
    g_cols.push_back(dV[static_cast<std::size_t>(k)].valid()
                         ? dV[static_cast<std::size_t>(k)]
                         : t.zeros({B, 1}));
  }
  Var cqd = mdot.valid() ? t.reshape(t.bmm(mdot, qd3), {B, n}) : t.zeros({B, n});
  cqd = t.sub(cqd, t.concat_last(quad_cols));
  Var G = t.concat_last(g_cols);

  Var rhs = t.sub(t.sub(tau, cqd), G);
  return t.reshape(t.solve_spd(M, t.reshape(rhs, {B, n, 1})), {B, n});
}

/// Recorded ground-truth acceleration for a chain, batched.
inline Var record_chain_accel(Tape& t, const ChainSpec& c, Var q, Var qd, Var tau) {
  return lagrangian_accel(
      t, q, qd, tau, [&c](Tape& tt, Var qq) { return chain::record_mass_matrix(tt, c, qq); },
      [&c](Tape& tt, Var qq) { return chain::record_potential(tt, c, qq); });
}

}  // namespace swingup
