#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "swingup/env.hpp"
#include "swingup/models.hpp"
#include "swingup/policies.hpp"

namespace swingup {
namespace diag {

/// One recorded closed-loop segment. Row 0 is the wrapped start state; later
/// rows continue it without angle wrapping so state comparisons stay smooth
/// across the boundary. Torques are already scaled onto the joints.
struct Segment {
  Eigen::MatrixXd states;  // [T+1, 2n]
  Eigen::MatrixXd taus;    // [T, n]
  Eigen::VectorXd works;   // [T] env-integrated actuator work per step
};

/// Run the policy from env::reset (after `warmup` unrecorded steps) and
/// record T steps. The policy always sees the wrapped episode state.
inline Segment collect_segment(const EnvSpec& e, const Policy& pi, Rng& rng, int T,
                               int warmup = 0) {
  if (T < 1) throw ContractError("collect_segment: need T >= 1");
  if (warmup < 0) throw ContractError("collect_segment: negative warmup");
  int n = e.dof();
  Eigen::VectorXd s = env::reset(e, rng);
  for (int k = 0; k < warmup; ++k) s = env::step(e, s, pi.act_at(s, k)).next;

  Segment seg;
  seg.states.resize(T + 1, 2 * n);
  seg.taus.resize(T, n);
  seg.works.resize(T);
  Eigen::VectorXd u = s;
  seg.states.row(0) = u.transpose();
  for (int k = 0; k < T; ++k) {
    Eigen::VectorXd a = pi.act_at(s, warmup + k);
    env::StepResult r = env::step(e, s, a);
    seg.taus.row(k) = env::actuation(e, a).transpose();
    seg.works(k) = r.work;
    u += r.next_unwrapped - s;
    s = r.next;
    seg.states.row(k + 1) = u.transpose();
  }
  return seg;
}

/// Open-loop model rollout from the segment's start along its torques.
inline Eigen::MatrixXd model_rollout(const WorldModel& m, const Segment& seg) {
  int T = static_cast<int>(seg.taus.rows());
  Eigen::MatrixXd out(T + 1, seg.states.cols());
  out.row(0) = seg.states.row(0);
  Eigen::VectorXd s = seg.states.row(0).transpose();
  for (int k = 0; k < T; ++k) {
    s = model::predict_next_plain(m, s, seg.taus.row(k).transpose());
    if (!s.allFinite()) throw NumericError("model_rollout: non-finite prediction");
    out.row(k + 1) = s.transpose();
  }
  return out;
}

/// Per-step L1 distance between a predicted path and the true segment.
inline Eigen::VectorXd rollout_l1_profile(const Eigen::MatrixXd& pred, const Segment& seg) {
  int T = static_cast<int>(seg.taus.rows());
  if (pred.rows() != T + 1 || pred.cols() != seg.states.cols())
    throw ContractError("rollout_l1_profile: path shape mismatch");
  Eigen::VectorXd out(T);
  for (int k = 1; k <= T; ++k)
    out(k - 1) = (pred.row(k) - seg.states.row(k)).cwiseAbs().sum();
  return out;
}

/// Summed L1 distance along the whole rollout.
inline double trajectory_error(const Eigen::MatrixXd& pred, const Segment& seg) {
  return rollout_l1_profile(pred, seg).sum();
}

/// Work-energy residual |E_k - E_0 - W_k| along a path, with the true
/// mechanical energy evaluated on the path's states and trapezoidal work from
/// the recorded torques and the path's own velocities. Exact dynamics keep
/// this near zero; learned models expose their energy drift here.
inline Eigen::VectorXd energy_residual_profile(const EnvSpec& e, const Eigen::MatrixXd& path,
                                               const Eigen::MatrixXd& taus) {
  int T = static_cast<int>(taus.rows());
  int n = e.dof();
  if (path.rows() != T + 1 || path.cols() != 2 * n)
    throw ContractError("energy_residual_profile: path shape mismatch");
  auto energy = [&](int row) { return env::total_energy(e, path.row(row).transpose()); };
  double e0 = energy(0), w = 0.0;
  Eigen::VectorXd out(T);
  for (int k = 0; k < T; ++k) {
    Eigen::VectorXd qd0 = path.row(k).tail(n).transpose();
    Eigen::VectorXd qd1 = path.row(k + 1).tail(n).transpose();
    w += 0.5 * e.dt * (taus.row(k).dot(qd0) + taus.row(k).dot(qd1));
    out(k) = std::fabs(energy(k + 1) - e0 - w);
  }
  return out;
}

/// Mean one-step L1 (sum over dims, mean over rows) of the model on a
/// transition set, teacher-forced. Chunked to bound tape size.
inline double one_step_l1(const WorldModel& m, const model::TransitionBatch& b) {
  std::int64_t N = b.s.dim(0);
  if (N < 1) throw ContractError("one_step_l1: empty batch");
  if (b.tau.dim(0) != N || b.next.dim(0) != N)
    throw ContractError("one_step_l1: batch fields disagree on size");
  const std::int64_t chunk = 1024;
  double acc = 0.0;
  for (std::int64_t at = 0; at < N; at += chunk) {
    std::int64_t B = std::min(chunk, N - at);
    Tensor s({B, b.s.dim(1)}), tau({B, b.tau.dim(1)}), next({B, b.next.dim(1)});
    for (std::int64_t i = 0; i < B; ++i) {
      for (std::int64_t k = 0; k < b.s.dim(1); ++k)
        s[i * b.s.dim(1) + k] = b.s[(at + i) * b.s.dim(1) + k];
      for (std::int64_t k = 0; k < b.tau.dim(1); ++k)
        tau[i * b.tau.dim(1) + k] = b.tau[(at + i) * b.tau.dim(1) + k];
      for (std::int64_t k = 0; k < b.next.dim(1); ++k)
        next[i * b.next.dim(1) + k] = b.next[(at + i) * b.next.dim(1) + k];
    }
    Tape t;
    BoundWorldModel bm = bind(t, m, false);
    Var pred = model::predict_next(t, bm, t.constant(s), t.constant(tau));
    double mean = t.val(model::l1_loss(t, pred, t.constant(next)))[0];
    acc += mean * static_cast<double>(B);
  }
  return acc / static_cast<double>(N);
}

/// Roll episodes and collect transitions with the same field conventions as
/// the training replay (wrapped input state, unwrapped next, scaled torques).
/// Zero-mean Gaussian action noise widens the visited set.
inline model::TransitionBatch collect_transitions(const EnvSpec& e, const Policy& pi, int count,
                                                  Rng& rng, double action_noise = 0.0) {
  if (count < 1) throw ContractError("collect_transitions: need count >= 1");
  int n = e.dof(), n2 = e.state_dim(), A = e.act_dim();
  model::TransitionBatch b;
  b.s = Tensor({count, n2});
  b.tau = Tensor({count, n});
  b.next = Tensor({count, n2});
  b.r = Tensor({count, 1});

  Eigen::VectorXd s;
  int in_episode = e.episode_len;  // force a reset on the first transition
  int step_idx = 0;
  for (int i = 0; i < count; ++i) {
    if (in_episode >= e.episode_len) {
      s = env::reset(e, rng);
      in_episode = 0;
      step_idx = 0;
    }
    Eigen::VectorXd a = pi.act_at(s, step_idx);
    if (action_noise > 0.0) {
      for (int k = 0; k < A; ++k) a(k) += action_noise * rng.normal();
      a = a.cwiseMax(-1.0).cwiseMin(1.0);
    }
    env::StepResult r = env::step(e, s, a);
    Eigen::VectorXd tau = env::actuation(e, a);
    for (int k = 0; k < n2; ++k) {
      b.s[i * n2 + k] = s(k);
      b.next[i * n2 + k] = r.next_unwrapped(k);
    }
    for (int k = 0; k < n; ++k) b.tau[i * n + k] = tau(k);
    b.r[i] = r.reward;
    s = r.next;
    ++in_episode;
    ++step_idx;
  }
  return b;
}

struct PolicyEval {
  double mean = 0.0;
  double stddev = 0.0;
  int solved = 0;  // episodes whose return clears the threshold
  std::vector<double> returns;
};

/// Greedy closed-loop evaluation over full episodes.
inline PolicyEval evaluate_policy(const EnvSpec& e, const Policy& pi, int episodes, Rng& rng,
                                  double solved_threshold = 780.0) {
  if (episodes < 1) throw ContractError("evaluate_policy: need episodes >= 1");
  PolicyEval ev;
  for (int ep = 0; ep < episodes; ++ep) {
    Eigen::VectorXd s = env::reset(e, rng);
    double ret = 0.0;
    for (int i = 0; i < e.episode_len; ++i) {
      env::StepResult r = env::step(e, s, pi.act_at(s, i));
      s = r.next;
      ret += r.reward;
    }
    ev.returns.push_back(ret);
    if (ret >= solved_threshold) ++ev.solved;
  }
  double sum = 0.0;
  for (double r : ev.returns) sum += r;
  ev.mean = sum / static_cast<double>(episodes);
  double ss = 0.0;
  for (double r : ev.returns) ss += (r - ev.mean) * (r - ev.mean);
  ev.stddev = std::sqrt(ss / static_cast<double>(episodes));
  return ev;
}

}  // namespace diag
}  // namespace swingup
