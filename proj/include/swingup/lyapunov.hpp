#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "swingup/env.hpp"
#include "swingup/policies.hpp"

namespace swingup {
namespace lyap {

/// Jacobian of the closed-loop flow s' = f(s, pi(s)): df/ds + df/da * da/ds,
/// assembled from the true dynamics and the recorded policy.
inline Eigen::MatrixXd closed_loop_jacobian(const EnvSpec& e, const Policy& pi,
                                            const Eigen::VectorXd& s, int step = 0) {
  int n = e.dof(), A = e.act_dim();
  Eigen::VectorXd a = pi.act_at(s, step);
  auto [Js, Ja] = linearize_dynamics(e, s, a);

  Tape t;
  Tensor st({1, 2 * n});
  for (int i = 0; i < 2 * n; ++i) st[i] = s(i);
  Var sv = t.leaf(st, false);
  Var av = pi.record_at(t, sv, step);
  if (t.val(av).numel() != A)
    throw ContractError("closed_loop_jacobian: policy emitted wrong action width");
  Eigen::MatrixXd D = t.val(t.input_jacobian(av, sv)).mat();  // [A,2n]
  return Js + Ja * D;
}

/// Closed-loop drift f(s, pi(s)) evaluated in plain arithmetic.
inline Eigen::VectorXd closed_loop_rhs(const EnvSpec& e, const Policy& pi,
                                       const Eigen::VectorXd& s, int step = 0) {
  int n = e.dof();
  Eigen::VectorXd tau = env::actuation(e, pi.act_at(s, step));
  Eigen::VectorXd d(2 * n);
  d.head(n) = s.tail(n);
  d.tail(n) = chain::forward_dynamics(e.chain, s.head(n), s.tail(n), tau);
  return d;
}

struct VariationalPath {
  Eigen::MatrixXd states;  // (steps+1) x 2n
  Eigen::MatrixXd u;       // (steps+1) x 2n
};

/// Jointly integrate sdot = f(s, pi(s)) and the separation dynamics
/// udot = J(s) u with RK4 (spec.substeps stages per recorded step).
/// Angles are not wrapped: the path must stay differentiable in time.
/// `step0` is the control-step index of s0, for time-varying policies.
inline VariationalPath evolve_variational(const EnvSpec& e, const Policy& pi,
                                          const Eigen::VectorXd& s0, const Eigen::VectorXd& u0,
                                          double dt, int steps, int step0 = 0) {
  int n2 = e.state_dim();
  if (s0.size() != n2 || u0.size() != n2) throw ContractError("evolve_variational: bad sizes");
  if (std::fabs(u0.norm() - 1.0) > 1e-9)
    throw ContractError("evolve_variational: u0 must be a unit vector");

  VariationalPath out;
  out.states.resize(steps + 1, n2);
  out.u.resize(steps + 1, n2);
  Eigen::VectorXd s = s0, u = u0;
  out.states.row(0) = s;
  out.u.row(0) = u;

  int step_idx = step0;
  auto deriv = [&](const Eigen::VectorXd& sc, const Eigen::VectorXd& uc,
                   Eigen::VectorXd& dsv, Eigen::VectorXd& duv) {
    dsv = closed_loop_rhs(e, pi, sc, step_idx);
    duv = closed_loop_jacobian(e, pi, sc, step_idx) * uc;
  };

  double h = dt / e.substeps;
  for (int k = 1; k <= steps; ++k) {
    step_idx = step0 + k - 1;
    for (int ss = 0; ss < e.substeps; ++ss) {
      Eigen::VectorXd ds1, du1, ds2, du2, ds3, du3, ds4, du4;
      deriv(s, u, ds1, du1);
      deriv(s + 0.5 * h * ds1, u + 0.5 * h * du1, ds2, du2);
      deriv(s + 0.5 * h * ds2, u + 0.5 * h * du2, ds3, du3);
      deriv(s + h * ds3, u + h * du3, ds4, du4);
      s += h / 6.0 * (ds1 + 2.0 * ds2 + 2.0 * ds3 + ds4);
      u += h / 6.0 * (du1 + 2.0 * du2 + 2.0 * du3 + du4);
    }
    if (!s.allFinite() || !u.allFinite())
      throw SimulationFault("evolve_variational: non-finite state in '" + e.name + "'");
    out.states.row(k) = s;
    out.u.row(k) = u;
  }
  return out;
}

/// Goal test: chain tip within `dist` of the goal point at overall speed
/// below `speed`, sustained for `hold_steps` consecutive steps.
struct GoalPredicate {
  double dist = 0.2;
  double speed = 1.0;
  int hold_steps = 50;

  bool instant(const EnvSpec& e, const Eigen::VectorXd& s) const {
    int n = e.dof();
    Eigen::Vector2d tip = chain::tip_position(e.chain, s.head(n));
    double dx = tip(0) - e.goal[0], dy = tip(1) - e.goal[1];
    return dx * dx + dy * dy < dist * dist && s.tail(n).norm() < speed;
  }
};

enum class MleMode { FiniteTime, Standard };

struct MleOptions {
  MleMode mode = MleMode::FiniteTime;
  int renorm_period = 10;      // control steps between renormalizations
  int max_steps = 1000;        // horizon in control steps
  double renorm_target = 1.0;  // norm the separation vector is reset to
  GoalPredicate goal;
  double converge_tol = 1e-3;  // standard mode: running-average drift bound
  int converge_window = 100;   // over this many renormalizations
  std::uint64_t seed = 0;      // for the random initial direction
};

struct MleReport {
  std::string env;
  std::string policy_id;
  std::uint64_t seed = 0;
  double mle = 0.0;
  std::vector<double> trace;  // running average after each renormalization
  std::string stop_reason;    // goal_reached | converged | horizon
  int renorm_period = 10;
  double dt = 0.02;
  int steps_run = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["env"] = env;
    j["policy_checkpoint"] = policy_id;
    j["seed"] = seed;
    j["mle"] = mle;
    j["trace"] = trace;
    j["stop_reason"] = stop_reason;
    j["renorm_period"] = renorm_period;
    j["dt"] = dt;
    return j;
  }
};

/// Maximal-Lyapunov-exponent estimate along one closed-loop trajectory:
/// average of per-interval log growth rates of the separation vector,
/// renormalized every `renorm_period` steps. Finite-time mode stops at the
/// goal, standard mode on running-average convergence.
inline MleReport finite_time_mle(const EnvSpec& e, const Policy& pi, const Eigen::VectorXd& s0,
                                 const MleOptions& opt = {}) {
  if (opt.renorm_period < 1) throw ContractError("finite_time_mle: renorm_period must be >= 1");
  if (opt.renorm_target <= 0.0) throw ContractError("finite_time_mle: renorm_target must be > 0");
  int n2 = e.state_dim();
  if (s0.size() != n2) throw ContractError("finite_time_mle: bad state size");

  Rng rng(opt.seed, "mle_u0");
  Eigen::VectorXd u(n2);
  for (int i = 0; i < n2; ++i) u(i) = rng.normal();
  u *= opt.renorm_target / u.norm();

  MleReport rep;
  rep.env = e.name;
  rep.policy_id = pi.id();
  rep.seed = opt.seed;
  rep.renorm_period = opt.renorm_period;
  rep.dt = e.dt;
  rep.stop_reason = "horizon";

  Eigen::VectorXd s = s0;
  double rate_sum = 0.0;
  int intervals = 0, held = 0, step = 0;
  bool done = false;

  while (step < opt.max_steps && !done) {
    int steps_this = 0;
    bool goal_hit = false;
    for (int k = 0; k < opt.renorm_period && step < opt.max_steps; ++k) {
      // the variational equation is linear in u, so integrate a unit copy
      // and carry the accumulated scale alongside
      double scale = u.norm();
      VariationalPath p = evolve_variational(e, pi, s, u / scale, e.dt, 1, step);
      s = p.states.row(1).transpose();
      u = p.u.row(1).transpose() * scale;
      ++step;
      ++steps_this;
      if (opt.mode == MleMode::FiniteTime) {
        held = opt.goal.instant(e, s) ? held + 1 : 0;
        if (held >= opt.goal.hold_steps) {
          goal_hit = true;
          break;
        }
      }
    }
    double span = steps_this * e.dt;
    rate_sum += std::log(u.norm() / opt.renorm_target) / span;
    ++intervals;
    rep.trace.push_back(rate_sum / intervals);
    u *= opt.renorm_target / u.norm();

    if (goal_hit) {
      rep.stop_reason = "goal_reached";
      done = true;
    } else if (opt.mode == MleMode::Standard && intervals > opt.converge_window) {
      double prev = rep.trace[static_cast<std::size_t>(intervals - 1 - opt.converge_window)];
      if (std::fabs(rep.trace.back() - prev) < opt.converge_tol) {
        rep.stop_reason = "converged";
        done = true;
      }
    }
  }
  rep.mle = intervals > 0 ? rate_sum / intervals : 0.0;
  rep.steps_run = step;
  return rep;
}

struct MleBatchReport {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<MleReport> runs;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mean"] = mean;
    j["stddev"] = stddev;
    j["runs"] = nlohmann::json::array();
    for (const MleReport& r : runs) j["runs"].push_back(r.to_json());
    return j;
  }
};

/// Average finite_time_mle over policies x initial states. Start states come
/// from env::reset with per-run rng streams derived from opt.seed.
inline MleBatchReport mle_batch(const EnvSpec& e, const std::vector<const Policy*>& policies,
                                int n_starts, const MleOptions& opt = {}) {
  if (policies.empty()) throw ContractError("mle_batch: need at least one policy");
  if (n_starts < 1) throw ContractError("mle_batch: need at least one start");
  MleBatchReport br;
  for (std::size_t p = 0; p < policies.size(); ++p) {
    for (int i = 0; i < n_starts; ++i) {
      std::uint64_t run_seed = opt.seed + 1000003 * p + static_cast<std::uint64_t>(i);
      Rng srng(run_seed, "mle_start");
      Eigen::VectorXd s0 = env::reset(e, srng);
      MleOptions ro = opt;
      ro.seed = run_seed;
      br.runs.push_back(finite_time_mle(e, *policies[p], s0, ro));
    }
  }
  double sum = 0.0;
  for (const MleReport& r : br.runs) sum += r.mle;
  br.mean = sum / static_cast<double>(br.runs.size());
  double ss = 0.0;
  for (const MleReport& r : br.runs) ss += (r.mle - br.mean) * (r.mle - br.mean);
  br.stddev = std::sqrt(ss / static_cast<double>(br.runs.size()));
  return br;
}

}  // namespace lyap
}  // namespace swingup
