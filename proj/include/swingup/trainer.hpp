#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "swingup/actor_critic.hpp"
#include "swingup/checkpoint.hpp"
#include "swingup/env.hpp"
#include "swingup/models.hpp"
#include "swingup/replay.hpp"

namespace swingup {

struct TrainConfig {
  std::string env = "pendulum";
  ModelKind kind = ModelKind::Lnn;
  std::uint64_t seed = 0;
  int episodes = 125;          // total environment episodes, seeding included
  int seed_episodes = 10;      // initial episodes with uniform random actions
  int model_updates = 10000;   // model gradient steps per episode
  int behaviour_updates = 1000;  // behaviour gradient steps per episode
  std::int64_t batch = 64;
  std::int64_t replay_capacity = 100000;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double grad_clip = 100.0;
  int horizon = 16;
  double gamma = 0.99;
  double lam = 0.95;
  double eta = 1e-4;
  int eval_every = 5;        // episodes between greedy evaluations (0 = never)
  double stop_return = 700;  // stop once a greedy episode reaches this (<=0 = never)
  int max_nan_skips = 50;    // consecutive skipped batches before giving up
};

/// Serialize model (+ optional agent) with enough metadata to rebuild both.
inline void save_checkpoint(const std::string& path, const WorldModel& m, const Agent* agent,
                            const TrainConfig& cfg, int episode, std::int64_t env_steps) {
  Container c;
  nlohmann::json meta;
  meta["env"] = cfg.env;
  meta["model"] = to_string(m.kind);
  meta["dof"] = m.dof;
  meta["dt"] = m.dt;
  meta["seed"] = cfg.seed;
  meta["episode"] = episode;
  meta["env_steps"] = env_steps;
  meta["has_agent"] = agent != nullptr;
  if (agent != nullptr) meta["act_dim"] = agent->act_dim;
  c.meta = meta.dump();

  auto put = [&](const std::string& prefix, const Mlp& net) {
    auto names = Mlp::param_names(prefix, net.layers());
    auto params = net.params();
    for (std::size_t i = 0; i < params.size(); ++i) c.tensors.emplace_back(names[i], *params[i]);
  };
  if (m.kind == ModelKind::Dnn) {
    put("model.dnn", m.dnn);
  } else {
    put("model.lnet", m.lnet);
    put("model.vnet", m.vnet);
  }
  put("model.rew", m.rew);
  if (agent != nullptr) {
    put("agent.actor", agent->actor);
    put("agent.critic", agent->critic);
    put("agent.target", agent->target);
  }
  save_container(path, c);
}

struct LoadedRun {
  WorldModel model;
  Agent agent;
  bool has_agent = false;
  std::string env;
  nlohmann::json meta;
};

inline LoadedRun load_checkpoint(const std::string& path) {
  Container c = load_container(path);
  nlohmann::json meta = nlohmann::json::parse(c.meta);

  auto take = [&](const std::string& prefix, Mlp& net) {
    auto names = Mlp::param_names(prefix, net.layers());
    auto params = net.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor& t = c.tensor(names[i]);
      if (!params[i]->same_shape(t))
        throw LoadError("checkpoint tensor '" + names[i] + "' has unexpected shape");
      *params[i] = t;
    }
  };

  LoadedRun r;
  r.env = meta.at("env").get<std::string>();
  r.meta = meta;
  int dof = meta.at("dof").get<int>();
  double dt = meta.at("dt").get<double>();
  ModelKind kind = model_kind_of(meta.at("model").get<std::string>());
  Rng scratch(0);
  r.model = WorldModel::init(kind, dof, dt, scratch);
  if (kind == ModelKind::Dnn) {
    take("model.dnn", r.model.dnn);
  } else {
    take("model.lnet", r.model.lnet);
    take("model.vnet", r.model.vnet);
  }
  take("model.rew", r.model.rew);

  r.has_agent = meta.value("has_agent", false);
  if (r.has_agent) {
    std::int64_t act_dim = meta.at("act_dim").get<std::int64_t>();
    r.agent = Agent::init(2 * dof, act_dim, scratch);
    take("agent.actor", r.agent.actor);
    take("agent.critic", r.agent.critic);
    take("agent.target", r.agent.target);
  }
  return r;
}

/// Model-based training loop: seed the replay buffer with random-action
/// episodes, then alternate model fitting, behaviour fitting on imagined
/// rollouts, and one real episode with the current policy.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const std::string& out_dir)
      : cfg_(cfg),
        env_(EnvSpec::make(cfg.env)),
        replay_(env_.state_dim(), env_.dof(), cfg.replay_capacity),
        env_rng_(cfg.seed, "env"),
        sample_rng_(cfg.seed, "sample"),
        policy_rng_(cfg.seed, "policy"),
        init_rng_(cfg.seed, "init"),
        dyn_opt_(cfg.lr, cfg.weight_decay),
        rew_opt_(cfg.lr, cfg.weight_decay),
        actor_opt_(cfg.lr, cfg.weight_decay),
        critic_opt_(cfg.lr, cfg.weight_decay),
        out_(out_dir) {
    model_ = WorldModel::init(cfg.kind, env_.dof(), env_.dt, init_rng_);
    agent_ = Agent::init(env_.state_dim(), env_.act_dim(), init_rng_);
    agent_.horizon = cfg.horizon;
    agent_.gamma = cfg.gamma;
    agent_.lam = cfg.lam;
    agent_.eta = cfg.eta;

    std::filesystem::create_directories(out_);
    metrics_.open(out_ + "/metrics.csv");
    metrics_ << "episode,env_steps,return,dyn_loss,rew_loss,actor_loss,critic_loss,mean_return\n";
    evals_.open(out_ + "/eval.csv");
    evals_ << "episode,return\n";
    log_.open(out_ + "/run.log");
  }

  const WorldModel& model() const { return model_; }
  const Agent& agent() const { return agent_; }
  std::int64_t env_steps() const { return env_steps_; }
  double best_eval() const { return best_eval_; }

  /// Returns the number of episodes actually run (early stop counts as done).
  int run() {
    int ep = 0;
    for (; ep < cfg_.episodes; ++ep) {
      auto t0 = std::chrono::steady_clock::now();
      bool seeding = ep < cfg_.seed_episodes;

      double dyn = 0.0, rew = 0.0, aloss = 0.0, closs = 0.0, mret = 0.0;
      if (!seeding) {
        dyn = model_phase(rew);
        aloss = behaviour_phase(closs, mret);
      }
      double ret = collect_episode(seeding);

      metrics_ << ep << ',' << env_steps_ << ',' << ret << ',' << dyn << ',' << rew << ','
               << aloss << ',' << closs << ',' << mret << '\n';
      metrics_.flush();
      auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log_ << "episode " << ep << (seeding ? " (seed)" : "") << ": return " << ret << ", "
           << dt << "s\n";
      log_.flush();

      if (!seeding && cfg_.eval_every > 0 && (ep + 1) % cfg_.eval_every == 0) {
        double ev = evaluate();
        evals_ << ep << ',' << ev << '\n';
        evals_.flush();
        if (ev > best_eval_) {
          best_eval_ = ev;
          save_checkpoint(out_ + "/best.ckpt", model_, &agent_, cfg_, ep, env_steps_);
        }
        log_ << "eval at episode " << ep << ": return " << ev << "\n";
        log_.flush();
        if (cfg_.stop_return > 0 && ev >= cfg_.stop_return) {
          log_ << "stop: eval return reached " << ev << "\n";
          ++ep;
          break;
        }
      }
    }
    save_checkpoint(out_ + "/last.ckpt", model_, &agent_, cfg_, ep, env_steps_);
    return ep;
  }

  /// One greedy (mean-action) episode, no exploration, no replay push.
  double evaluate() {
    Eigen::VectorXd s = env::reset(env_, env_rng_);
    double ret = 0.0;
    for (int i = 0; i < env_.episode_len; ++i) {
      Eigen::VectorXd a = policy::act_plain(agent_, s, false);
      env::StepResult r = env::step(env_, s, a);
      ret += r.reward;
      s = r.next;
    }
    return ret;
  }

 private:
  double model_phase(double& rew_out) {
    double dyn = 0.0, rew = 0.0;
    int done = 0, skips = 0;
    for (int i = 0; i < cfg_.model_updates; ++i) {
      model::TransitionBatch b = replay_.sample(sample_rng_, cfg_.batch);
      try {
        model::ModelLosses l = model::model_update(model_, b, dyn_opt_, rew_opt_, cfg_.grad_clip);
        dyn += l.dyn;
        rew += l.rew;
        ++done;
        skips = 0;
      } catch (const NumericError& err) {
        log_ << "model batch skipped: " << err.what() << "\n";
        if (++skips > cfg_.max_nan_skips)
          throw NumericError("model training unstable: too many skipped batches");
      }
    }
    rew_out = done > 0 ? rew / done : 0.0;
    return done > 0 ? dyn / done : 0.0;
  }

  double behaviour_phase(double& critic_out, double& mean_return_out) {
    double aloss = 0.0, closs = 0.0, mret = 0.0;
    int done = 0, skips = 0;
    for (int i = 0; i < cfg_.behaviour_updates; ++i) {
      Tensor start = replay_.sample_states(sample_rng_, cfg_.batch);
      try {
        behaviour::Stats st = behaviour::update(agent_, model_, env_, start, actor_opt_,
                                                critic_opt_, policy_rng_, cfg_.grad_clip);
        aloss += st.actor_loss;
        closs += st.critic_loss;
        mret += st.mean_return;
        ++done;
        skips = 0;
      } catch (const NumericError& err) {
        log_ << "behaviour batch skipped: " << err.what() << "\n";
        if (++skips > cfg_.max_nan_skips)
          throw NumericError("behaviour training unstable: too many skipped batches");
      }
    }
    critic_out = done > 0 ? closs / done : 0.0;
    mean_return_out = done > 0 ? mret / done : 0.0;
    return done > 0 ? aloss / done : 0.0;
  }

  double collect_episode(bool random_actions) {
    Eigen::VectorXd s = env::reset(env_, env_rng_);
    double ret = 0.0;
    for (int i = 0; i < env_.episode_len; ++i) {
      Eigen::VectorXd a(env_.act_dim());
      if (random_actions) {
        for (int k = 0; k < env_.act_dim(); ++k) a(k) = env_rng_.uniform(-1.0, 1.0);
      } else {
        a = policy::act_plain(agent_, s, true, &policy_rng_);
      }
      env::StepResult r = env::step(env_, s, a);
      // learn on the unwrapped next state: continuous with s even when the
      // wrapped episode state crosses the angle boundary
      replay_.push(s, env::actuation(env_, a), r.next_unwrapped, r.reward);
      ret += r.reward;
      s = r.next;
      ++env_steps_;
    }
    return ret;
  }

  TrainConfig cfg_;
  EnvSpec env_;
  WorldModel model_;
  Agent agent_;
  Replay replay_;
  Rng env_rng_, sample_rng_, policy_rng_, init_rng_;
  AdamW dyn_opt_, rew_opt_, actor_opt_, critic_opt_;
  std::string out_;
  std::ofstream metrics_, evals_, log_;
  std::int64_t env_steps_ = 0;
  double best_eval_ = -1.0;
};

}  // namespace swingup
