#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "swingup/actor_critic.hpp"
#include "swingup/replay.hpp"
#include "swingup/trainer.hpp"

#include "fd_util.hpp"

using namespace swingup;
using testutil::random_tensor;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x(i++) = d;
  return x;
}

TEST(Replay, RingOverwritesOldest) {
  Replay rep(1, 1, 4);
  for (int i = 1; i <= 6; ++i)
    rep.push(vec({static_cast<double>(i)}), vec({0.0}), vec({0.0}), 0.0);
  EXPECT_EQ(rep.size(), 4);
  Rng rng(0);
  std::set<double> seen;
  for (int i = 0; i < 200; ++i) seen.insert(rep.sample(rng, 1).s[0]);
  EXPECT_EQ(seen, (std::set<double>{3.0, 4.0, 5.0, 6.0}));
}

TEST(Replay, SamplesUniformly) {
  Replay rep(1, 1, 16);
  for (int i = 0; i < 10; ++i)
    rep.push(vec({static_cast<double>(i)}), vec({0.0}), vec({0.0}), 0.0);
  Rng rng(1);
  std::vector<int> counts(10, 0);
  int draws = 20000;
  model::TransitionBatch b = rep.sample(rng, draws);
  for (int i = 0; i < draws; ++i) ++counts[static_cast<int>(b.s[i])];
  for (int c : counts) {
    EXPECT_GT(c, 1700);
    EXPECT_LT(c, 2300);
  }
}

TEST(Replay, Contracts) {
  Replay rep(2, 1, 8);
  Rng rng(2);
  EXPECT_THROW(rep.sample(rng, 4), ContractError);
  EXPECT_THROW(rep.push(vec({1.0}), vec({0.0}), vec({1.0}), 0.0), ContractError);
  rep.push(vec({1.0, 2.0}), vec({0.5}), vec({3.0, 4.0}), 0.25);
  model::TransitionBatch b = rep.sample(rng, 3);
  EXPECT_EQ(b.s.dim(1), 2);
  EXPECT_DOUBLE_EQ(b.r[0], 0.25);
  EXPECT_DOUBLE_EQ(b.tau[0], 0.5);
}

TEST(LambdaReturns, HandCase) {
  Tape t;
  std::vector<Var> r = {t.constant(Tensor::scalar(1.0)), t.constant(Tensor::scalar(2.0))};
  std::vector<Var> v = {t.constant(Tensor::scalar(10.0)), t.constant(Tensor::scalar(20.0))};
  std::vector<Var> g = behaviour::lambda_returns(t, r, v, 0.9, 0.5);
  EXPECT_NEAR(t.val(g[1])[0], 20.0, 1e-12);
  EXPECT_NEAR(t.val(g[0])[0], 14.5, 1e-12);
}

// Brute force from the n-step definition:
//   V^n = sum_{k<n} gamma^k r_k + gamma^n v_{n-1}
//   V_lambda = (1-lambda) sum_{n<T} lambda^{n-1} V^n + lambda^{T-1} V^T
TEST(LambdaReturns, MatchesBruteForce) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    int T = 1 + static_cast<int>(rng.index(8));
    double gamma = rng.uniform(0.5, 1.0);
    double lambda = trial % 3 == 0 ? (trial % 2) : rng.uniform(0.0, 1.0);
    std::vector<double> rv, vv;
    Tape t;
    std::vector<Var> r, v;
    for (int k = 0; k < T; ++k) {
      rv.push_back(rng.uniform(-2.0, 2.0));
      vv.push_back(rng.uniform(-2.0, 2.0));
      r.push_back(t.constant(Tensor::scalar(rv.back())));
      v.push_back(t.constant(Tensor::scalar(vv.back())));
    }
    std::vector<Var> g = behaviour::lambda_returns(t, r, v, gamma, lambda);

    for (int start = 0; start < T; ++start) {
      int H = T - start;
      auto nstep = [&](int n) {
        double acc = 0.0, gk = 1.0;
        for (int k = 0; k < n; ++k) {
          acc += gk * rv[start + k];
          gk *= gamma;
        }
        return acc + gk * vv[start + n - 1];
      };
      double expect = 0.0, lw = 1.0;
      for (int n = 1; n < H; ++n) {
        expect += (1.0 - lambda) * lw * nstep(n);
        lw *= lambda;
      }
      expect += lw * nstep(H);
      EXPECT_NEAR(t.val(g[start])[0], expect, 1e-12) << "trial " << trial << " start " << start;
    }
  }
}

TEST(Policy, LogDensityHandCase) {
  Rng rng(4);
  Mlp actor = Mlp::init({1, 2}, Act::Tanh, rng);
  actor.W[0] = Tensor({1, 2});
  actor.b[0] = Tensor({2}, {0.3, -0.2});

  Tape t;
  Tensor eps({1, 1}, std::vector<double>{0.7});
  policy::Sample ps = policy::sample_action(t, bind(t, actor, false),
                                            t.constant(Tensor({1, 1}, std::vector<double>{0.0})),
                                            eps, 1e-3, 2.0);
  double sigma = softplus_stable(-0.2);
  double x = 0.3 + sigma * 0.7;
  double a = std::tanh(x);
  double logp = -0.5 * 0.49 - std::log(sigma) - 0.5 * std::log(2.0 * M_PI) -
                std::log(1.0 - a * a + 1e-6);
  EXPECT_NEAR(t.val(ps.action)[0], a, 1e-12);
  EXPECT_NEAR(t.val(ps.logp)[0], logp, 1e-12);

  Eigen::VectorXd mean = policy::act_plain(Agent{actor, actor, actor, 1}, vec({0.0}), false);
  EXPECT_NEAR(mean(0), std::tanh(0.3), 1e-12);
}

TEST(Policy, LogDensityGradientsMatchFd) {
  Rng rng(5);
  Mlp actor = Mlp::init({2, 8, 4}, Act::Tanh, rng);
  Tensor s = random_tensor({3, 2}, rng);
  Tensor eps = random_tensor({3, 2}, rng);

  auto scalar = [&](const Mlp& m) {
    Tape t;
    policy::Sample ps = policy::sample_action(t, bind(t, m, false), t.constant(s), eps, 1e-3, 2.0);
    return t.val(t.sum_all(ps.logp))[0];
  };

  Tape t;
  BoundMlp bm = bind(t, actor, true);
  policy::Sample ps = policy::sample_action(t, bm, t.constant(s), eps, 1e-3, 2.0);
  Grads g = t.backward(t.sum_all(ps.logp));

  Rng pick(6);
  auto params = actor.params();
  auto vars = bm.param_vars();
  for (int probe = 0; probe < 10; ++probe) {
    std::size_t pi = pick.index(params.size());
    std::int64_t ei = static_cast<std::int64_t>(pick.index(
        static_cast<std::uint64_t>(params[pi]->numel())));
    double eps_fd = 1e-6;
    Mlp mp = actor, mm = actor;
    (*mp.params()[pi])[ei] += eps_fd;
    (*mm.params()[pi])[ei] -= eps_fd;
    double fd = (scalar(mp) - scalar(mm)) / (2.0 * eps_fd);
    EXPECT_NEAR(g.get(vars[pi])[ei], fd, 1e-5 * std::max(1.0, std::fabs(fd)));
  }
}

TEST(Policy, ActionMatrixMatchesActuation) {
  EnvSpec e = EnvSpec::make("cart3pole");
  Tensor S = env::action_matrix(e);
  ASSERT_EQ(S.dim(0), 2);
  ASSERT_EQ(S.dim(1), 4);
  Eigen::VectorXd a = vec({0.25, -0.5});
  Eigen::VectorXd tau = env::actuation(e, a);
  Eigen::VectorXd via = S.mat().transpose() * a;
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(via(i), tau(i));
}

// Critic regression happens on stopped states: its loss must not reach the
// actor through the imagined trajectory.
TEST(Behaviour, DetachedCriticLeavesActorAlone) {
  Rng rng(7);
  EnvSpec e = EnvSpec::make("pendulum");
  WorldModel m = WorldModel::init(ModelKind::Dnn, e.dof(), e.dt, rng);
  Agent ag = Agent::init(e.state_dim(), e.act_dim(), rng);

  Tape t;
  BoundWorldModel bm = bind(t, m, false);
  BoundMlp actor = bind(t, ag.actor, true);
  BoundMlp critic = bind(t, ag.critic, true);
  Tensor start = random_tensor({4, 2}, rng);
  Tensor eps = random_tensor({4, 1}, rng);
  policy::Sample ps = policy::sample_action(t, actor, t.constant(start), eps, 1e-3, 2.0);
  Var next = model::predict_next(t, bm, t.constant(start), t.matmul(ps.action, t.constant(env::action_matrix(e))));
  Var loss = t.mean_all(t.square(mlp_forward(t, critic, t.detach(next))));
  Grads g = t.backward(loss);

  for (const Var& v : actor.param_vars()) EXPECT_NEAR(g.get(v).flat().norm(), 0.0, 0.0);
  double critic_norm = 0.0;
  for (const Var& v : critic.param_vars()) critic_norm += g.get(v).flat().squaredNorm();
  EXPECT_GT(critic_norm, 0.0);
}

TEST(Behaviour, UpdateMovesPolicyAndFreezesModel) {
  Rng rng(8);
  EnvSpec e = EnvSpec::make("pendulum");
  WorldModel m = WorldModel::init(ModelKind::Dnn, e.dof(), e.dt, rng);
  Agent ag = Agent::init(e.state_dim(), e.act_dim(), rng);
  ag.horizon = 4;
  ag.eta = 0.0;  // gradient can only arrive through the imagined dynamics
  ag.target_sync = 1000000;
  WorldModel m_before = m;
  Mlp target_before = ag.target;

  AdamW aopt, copt;
  Rng noise(9);
  Tensor start = random_tensor({8, 2}, rng);
  behaviour::Stats st = behaviour::update(ag, m, e, start, aopt, copt, noise);

  EXPECT_TRUE(std::isfinite(st.actor_loss));
  EXPECT_GT(st.actor_grad_norm, 0.0);
  EXPECT_GT(st.critic_grad_norm, 0.0);

  auto equal = [](const Mlp& a, const Mlp& b) {
    auto pa = a.params(), pb = b.params();
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (std::int64_t k = 0; k < pa[i]->numel(); ++k)
        if ((*pa[i])[k] != (*pb[i])[k]) return false;
    return true;
  };
  EXPECT_TRUE(equal(m.dnn, m_before.dnn));
  EXPECT_TRUE(equal(m.rew, m_before.rew));
  EXPECT_TRUE(equal(ag.target, target_before));
  EXPECT_FALSE(equal(ag.actor, Agent::init(e.state_dim(), e.act_dim(), rng).actor));
}

TEST(Behaviour, TargetSyncsOnSchedule) {
  Rng rng(10);
  EnvSpec e = EnvSpec::make("pendulum");
  WorldModel m = WorldModel::init(ModelKind::Dnn, e.dof(), e.dt, rng);
  Agent ag = Agent::init(e.state_dim(), e.act_dim(), rng);
  ag.horizon = 2;
  ag.target_sync = 2;

  auto equal = [](const Mlp& a, const Mlp& b) {
    auto pa = a.params(), pb = b.params();
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (std::int64_t k = 0; k < pa[i]->numel(); ++k)
        if ((*pa[i])[k] != (*pb[i])[k]) return false;
    return true;
  };

  AdamW aopt, copt;
  Rng noise(11);
  Tensor start = random_tensor({4, 2}, rng);
  behaviour::update(ag, m, e, start, aopt, copt, noise);
  EXPECT_FALSE(equal(ag.target, ag.critic));
  behaviour::update(ag, m, e, start, aopt, copt, noise);
  EXPECT_TRUE(equal(ag.target, ag.critic));
}

TEST(Checkpoint, RunRoundTrip) {
  Rng rng(12);
  TrainConfig cfg;
  cfg.env = "acrobot";
  cfg.kind = ModelKind::Lnn;
  cfg.seed = 5;
  EnvSpec e = EnvSpec::make(cfg.env);
  WorldModel m = WorldModel::init(cfg.kind, e.dof(), e.dt, rng);
  Agent ag = Agent::init(e.state_dim(), e.act_dim(), rng);

  auto path = std::filesystem::temp_directory_path() / "swingup_run_roundtrip.ckpt";
  save_checkpoint(path.string(), m, &ag, cfg, 7, 7000);
  LoadedRun r = load_checkpoint(path.string());

  EXPECT_EQ(r.env, "acrobot");
  EXPECT_EQ(r.model.kind, ModelKind::Lnn);
  EXPECT_TRUE(r.has_agent);
  EXPECT_EQ(r.meta.at("episode").get<int>(), 7);
  auto pa = m.lnet.params();
  auto pb = r.model.lnet.params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::int64_t k = 0; k < pa[i]->numel(); ++k)
      EXPECT_EQ((*pa[i])[k], (*pb[i])[k]);
  auto aa = ag.actor.params();
  auto ab = r.agent.actor.params();
  for (std::size_t i = 0; i < aa.size(); ++i)
    for (std::int64_t k = 0; k < aa[i]->numel(); ++k)
      EXPECT_EQ((*aa[i])[k], (*ab[i])[k]);
  std::filesystem::remove(path);

  EXPECT_THROW(load_checkpoint("/nonexistent/run.ckpt"), LoadError);
}

TEST(Trainer, SmokeRunWritesOutputs) {
  TrainConfig cfg;
  cfg.env = "pendulum";
  cfg.kind = ModelKind::Dnn;
  cfg.seed = 1;
  cfg.episodes = 2;
  cfg.seed_episodes = 1;
  cfg.model_updates = 25;
  cfg.behaviour_updates = 4;
  cfg.batch = 16;
  cfg.horizon = 4;
  cfg.eval_every = 1;
  cfg.stop_return = 0;  // disabled

  auto dir = std::filesystem::temp_directory_path() / "swingup_trainer_smoke";
  std::filesystem::remove_all(dir);
  Trainer tr(cfg, dir.string());
  int eps = tr.run();
  EXPECT_EQ(eps, 2);
  EXPECT_EQ(tr.env_steps(), 2000);

  std::ifstream metrics(dir / "metrics.csv");
  ASSERT_TRUE(metrics.good());
  int lines = 0;
  std::string line;
  while (std::getline(metrics, line)) ++lines;
  EXPECT_EQ(lines, 3);  // header + 2 episodes

  LoadedRun r = load_checkpoint((dir / "last.ckpt").string());
  EXPECT_EQ(r.env, "pendulum");
  EXPECT_TRUE(r.has_agent);
  EXPECT_TRUE(std::filesystem::exists(dir / "eval.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run.log"));
  std::filesystem::remove_all(dir);
}

}  // namespace
