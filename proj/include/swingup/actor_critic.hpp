#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "swingup/common.hpp"
#include "swingup/env.hpp"
#include "swingup/models.hpp"
#include "swingup/nn.hpp"
#include "swingup/optim.hpp"

namespace swingup {

/// Stochastic tanh-Gaussian policy plus value function, trained by
/// differentiating imagined world-model rollouts.
struct Agent {
  Mlp actor;   // s -> [mu, pre_sigma] per action dim
  Mlp critic;  // s -> value
  Mlp target;  // frozen copy of critic used for return targets
  std::int64_t act_dim = 0;

  double gamma = 0.99;
  double lam = 0.95;
  double eta = 1e-4;  // entropy regularizer weight
  double sigma_min = 1e-3;
  double sigma_max = 2.0;
  int horizon = 16;
  int target_sync = 100;  // hard target update period, in updates
  std::int64_t updates = 0;

  static Agent init(std::int64_t state_dim, std::int64_t act_dim, Rng& rng) {
    Agent a;
    a.act_dim = act_dim;
    a.actor = Mlp::init({state_dim, 256, 256, 2 * act_dim}, Act::Tanh, rng);
    a.critic = Mlp::init({state_dim, 256, 256, 1}, Act::Tanh, rng);
    a.target = a.critic;
    return a;
  }
};

namespace policy {

struct Sample {
  Var action;  // [B,A] in (-1,1)
  Var logp;    // [B,1]
};

/// Reparameterized draw from the tanh-Gaussian policy. `eps` is a [B,A]
/// standard normal tensor supplied by the caller; the log density includes
/// the tanh change of variables.
inline Sample sample_action(Tape& t, const BoundMlp& actor, Var s, const Tensor& eps,
                            double sigma_min, double sigma_max) {
  std::int64_t A = eps.dim(1);
  Var out = mlp_forward(t, actor, s);
  if (t.val(out).dim(1) != 2 * A)
    throw ContractError("sample_action: actor head must emit 2 values per action dim");
  Var mu = t.slice_last(out, 0, A);
  Var sigma = t.clamp(t.softplus(t.slice_last(out, A, A)), sigma_min, sigma_max);
  Var x = t.add(mu, t.mul(sigma, t.constant(eps)));
  Var a = t.tanh(x);

  // log N(x; mu, sigma) - log(1 - a^2 + 1e-6), summed over action dims
  Var z = t.div(t.sub(x, mu), sigma);
  Var gauss = t.sub(t.scalar_mul(t.square(z), -0.5), t.log(sigma));
  Var squash = t.log(t.scalar_add(t.neg(t.square(a)), 1.0 + 1e-6));
  Var elem = t.scalar_add(t.sub(gauss, squash), -0.5 * std::log(2.0 * M_PI));
  return {a, t.reshape(t.sum_last(elem), {eps.dim(0), 1})};
}

/// Mean action (and optional exploration noise) without a tape, for acting
/// in the real environment.
inline Eigen::VectorXd act_plain(const Agent& ag, const Eigen::VectorXd& s, bool stochastic,
                                 Rng* rng = nullptr) {
  Eigen::VectorXd head = mlp_forward_plain(ag.actor, s);
  Eigen::VectorXd a(ag.act_dim);
  for (std::int64_t k = 0; k < ag.act_dim; ++k) {
    double x = head(k);
    if (stochastic) {
      if (rng == nullptr) throw ContractError("act_plain: stochastic draw needs an rng");
      double sigma = std::clamp(softplus_stable(head(ag.act_dim + k)), ag.sigma_min, ag.sigma_max);
      x += sigma * rng->normal();
    }
    a(k) = std::tanh(x);
  }
  return a;
}

}  // namespace policy

namespace behaviour {

/// Discounted lambda-returns, computed back to front on the graph.
/// rewards[k] and values[k] belong to the state reached after k+1 steps;
/// the result[k] is the return target for the state k steps in.
inline std::vector<Var> lambda_returns(Tape& t, const std::vector<Var>& rewards,
                                       const std::vector<Var>& values, double gamma,
                                       double lambda) {
  if (rewards.empty() || rewards.size() != values.size())
    throw ContractError("lambda_returns: rewards/values must be equal-length and non-empty");
  std::size_t T = rewards.size();
  std::vector<Var> g(T);
  g[T - 1] = t.add(rewards[T - 1], t.scalar_mul(values[T - 1], gamma));
  for (std::size_t k = T - 1; k-- > 0;) {
    Var mix = t.add(t.scalar_mul(values[k], 1.0 - lambda), t.scalar_mul(g[k + 1], lambda));
    g[k] = t.add(rewards[k], t.scalar_mul(mix, gamma));
  }
  return g;
}

struct Stats {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double actor_grad_norm = 0.0;
  double critic_grad_norm = 0.0;
  double mean_return = 0.0;   // batch-mean lambda-return of the start states
  double mean_entropy = 0.0;  // batch/time-mean of -log pi
};

/// One behaviour update: imagine `horizon` steps from `start`, build
/// lambda-returns from the target critic, descend the actor on the negated
/// returns (entropy-regularized) and the critic on squared distance to the
/// stopped targets. World model and target critic stay fixed; their outputs
/// still carry gradients back through states and actions to the actor.
inline Stats update(Agent& ag, const WorldModel& m, const EnvSpec& e, const Tensor& start,
                    AdamW& actor_opt, AdamW& critic_opt, Rng& rng, double grad_clip = 100.0) {
  if (start.rank() != 2 || start.dim(1) != 2 * m.dof)
    throw ContractError("behaviour update: start states must be [B," + std::to_string(2 * m.dof) +
                        "]");
  std::int64_t B = start.dim(0);

  Tape t;
  BoundWorldModel bm = bind(t, m, false);
  BoundMlp actor = bind(t, ag.actor, true);
  BoundMlp critic = bind(t, ag.critic, true);
  BoundMlp target = bind(t, ag.target, false);
  Var scatter = t.constant(env::action_matrix(e));

  std::vector<Var> states{t.constant(start)};
  std::vector<Var> rewards, values, logps;
  for (int k = 0; k < ag.horizon; ++k) {
    Tensor eps({B, ag.act_dim});
    for (std::int64_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal();
    policy::Sample ps =
        policy::sample_action(t, actor, states.back(), eps, ag.sigma_min, ag.sigma_max);
    Var tau = t.matmul(ps.action, scatter);
    Var next = model::predict_next(t, bm, states.back(), tau);
    states.push_back(next);
    rewards.push_back(model::predict_reward(t, bm, next));
    values.push_back(mlp_forward(t, target, next));
    logps.push_back(ps.logp);
  }
  std::vector<Var> lam = lambda_returns(t, rewards, values, ag.gamma, ag.lam);

  Var actor_acc = t.sub(lam[0], t.scalar_mul(logps[0], ag.eta));
  for (int k = 1; k < ag.horizon; ++k)
    actor_acc = t.add(actor_acc, t.sub(lam[k], t.scalar_mul(logps[k], ag.eta)));
  Var actor_loss = t.neg(t.mean_all(actor_acc));

  Var critic_acc;
  for (int k = 0; k < ag.horizon; ++k) {
    Var pred = mlp_forward(t, critic, t.detach(states[static_cast<std::size_t>(k)]));
    Var sq = t.square(t.sub(pred, t.detach(lam[static_cast<std::size_t>(k)])));
    critic_acc = k == 0 ? sq : t.add(critic_acc, sq);
  }
  Var critic_loss = t.scalar_mul(t.mean_all(critic_acc), 0.5 / ag.horizon);

  Stats st;
  st.actor_loss = t.val(actor_loss)[0];
  st.critic_loss = t.val(critic_loss)[0];
  if (!std::isfinite(st.actor_loss) || !std::isfinite(st.critic_loss))
    throw NumericError("behaviour update: non-finite loss");
  st.mean_return = t.val(t.mean_all(lam[0]))[0];
  double ent = 0.0;
  for (const Var& lp : logps) ent -= t.val(t.mean_all(lp))[0];
  st.mean_entropy = ent / ag.horizon;

  Grads g = t.backward(t.add(actor_loss, critic_loss));
  auto apply = [&](std::vector<Tensor*> params, const std::vector<Var>& vars, AdamW& opt,
                   double& norm) {
    std::vector<Tensor> grads;
    grads.reserve(vars.size());
    for (const Var& v : vars) grads.push_back(g.get(v));
    norm = clip_grad_norm(grads, grad_clip);
    if (!opt.attached()) opt.attach(params);
    opt.step(params, grads);
  };
  apply(ag.actor.params(), actor.param_vars(), actor_opt, st.actor_grad_norm);
  apply(ag.critic.params(), critic.param_vars(), critic_opt, st.critic_grad_norm);

  ++ag.updates;
  if (ag.updates % ag.target_sync == 0) ag.target = ag.critic;
  return st;
}

}  // namespace behaviour
}  // namespace swingup
