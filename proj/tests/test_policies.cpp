#include "swingup/policies.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "swingup/lyapunov.hpp"

using namespace swingup;

namespace {

const char* kAllEnvs[] = {"reacher",   "pendulum",  "cartpole", "cart2pole",
                          "acrobot",   "cart3pole", "acro3bot"};

TEST(ZeroPolicy, ActAndRecordAreZero) {
  EnvSpec e = EnvSpec::make("cart3pole");
  ZeroPolicy pi(e);
  Eigen::VectorXd s = Eigen::VectorXd::Ones(e.state_dim());
  EXPECT_EQ(pi.act(s).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(pi.act_at(s, 42).cwiseAbs().maxCoeff(), 0.0);

  Tape t;
  Tensor st({1, e.state_dim()});
  Var av = pi.record(t, t.leaf(st, false));
  const Tensor& val = t.val(av);
  ASSERT_EQ(val.numel(), e.act_dim());
  for (int k = 0; k < e.act_dim(); ++k) EXPECT_EQ(val[k], 0.0);
}

TEST(ActorMeanPolicy, RecordMatchesAct) {
  EnvSpec e = EnvSpec::make("acrobot");
  Rng rng(3);
  Mlp net = Mlp::init({e.state_dim(), 16, 2 * e.act_dim()}, Act::Tanh, rng);
  ActorMeanPolicy pi(net, e.act_dim());

  Eigen::VectorXd s(e.state_dim());
  for (int i = 0; i < e.state_dim(); ++i) s(i) = rng.normal();
  Eigen::VectorXd a = pi.act(s);
  EXPECT_LE(a.cwiseAbs().maxCoeff(), 1.0);

  Tape t;
  Tensor st({1, e.state_dim()});
  for (int i = 0; i < e.state_dim(); ++i) st[i] = s(i);
  Var av = pi.record(t, t.leaf(st, false));
  const Tensor& val = t.val(av);
  ASSERT_EQ(val.numel(), e.act_dim());
  for (int k = 0; k < e.act_dim(); ++k) EXPECT_NEAR(val[k], a(k), 1e-12);
}

TEST(LinearizeDynamics, MatchesFiniteDifferences) {
  for (const char* name : {"pendulum", "cart2pole"}) {
    EnvSpec e = EnvSpec::make(name);
    int n2 = e.state_dim(), A = e.act_dim();
    Rng rng(7);
    Eigen::VectorXd s(n2), a(A);
    for (int i = 0; i < n2; ++i) s(i) = 0.5 * rng.normal();
    for (int i = 0; i < A; ++i) a(i) = 0.4 * rng.normal();

    auto rhs = [&](const Eigen::VectorXd& sv, const Eigen::VectorXd& av) {
      int n = e.dof();
      Eigen::VectorXd tau = env::actuation(e, av);
      Eigen::VectorXd d(n2);
      d.head(n) = sv.tail(n);
      d.tail(n) = chain::forward_dynamics(e.chain, sv.head(n), sv.tail(n), tau);
      return d;
    };

    auto [Am, Bm] = linearize_dynamics(e, s, a);
    const double eps = 1e-6;
    for (int c = 0; c < n2; ++c) {
      Eigen::VectorXd sp = s, sm = s;
      sp(c) += eps;
      sm(c) -= eps;
      Eigen::VectorXd col = (rhs(sp, a) - rhs(sm, a)) / (2.0 * eps);
      EXPECT_LT((Am.col(c) - col).cwiseAbs().maxCoeff(), 1e-6) << name << " A col " << c;
    }
    for (int c = 0; c < A; ++c) {
      Eigen::VectorXd ap = a, am = a;
      ap(c) += eps;
      am(c) -= eps;
      Eigen::VectorXd col = (rhs(s, ap) - rhs(s, am)) / (2.0 * eps);
      EXPECT_LT((Bm.col(c) - col).cwiseAbs().maxCoeff(), 1e-6) << name << " B col " << c;
    }
  }
}

TEST(LinearizeDynamics, PendulumEquilibria) {
  EnvSpec e = EnvSpec::make("pendulum");
  double g = e.chain.g;
  Eigen::VectorXd top = Eigen::VectorXd::Zero(2), a = Eigen::VectorXd::Zero(1);
  auto [At, Bt] = linearize_dynamics(e, top, a);
  Eigen::MatrixXd want(2, 2);
  want << 0.0, 1.0, g, 0.0;
  EXPECT_LT((At - want).cwiseAbs().maxCoeff(), 1e-9);
  // torque enters the velocity row scaled by the action limit
  EXPECT_NEAR(Bt(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(Bt(1, 0), e.limits[0], 1e-9);
}

TEST(LqrGain, StabilizesDoubleIntegrator) {
  Eigen::MatrixXd A(2, 2), B(2, 1);
  A << 0.0, 1.0, 0.0, 0.0;
  B << 0.0, 1.0;
  Eigen::MatrixXd K = lqr_gain(A, B, Eigen::MatrixXd::Identity(2, 2),
                               Eigen::MatrixXd::Identity(1, 1));
  // known closed form: K = [1, sqrt(3)]
  EXPECT_NEAR(K(0, 0), 1.0, 1e-6);
  EXPECT_NEAR(K(0, 1), std::sqrt(3.0), 1e-6);
}

TEST(LqrGain, ThrowsOnUncontrollableUnstableMode) {
  Eigen::MatrixXd A(2, 2), B(2, 1);
  A << 1.0, 0.0, 0.0, -1.0;  // unstable first mode
  B << 0.0, 1.0;             // actuation only reaches the second
  EXPECT_THROW(lqr_gain(A, B, Eigen::MatrixXd::Identity(2, 2),
                        Eigen::MatrixXd::Identity(1, 1)),
               ContractError);
}

TEST(UprightLqrGain, ClosedLoopIsHurwitz) {
  for (const char* name : {"pendulum", "cartpole", "acrobot", "cart3pole"}) {
    EnvSpec e = EnvSpec::make(name);
    Eigen::MatrixXd K = upright_lqr_gain(e);
    auto [A, B] = linearize_dynamics(e, Eigen::VectorXd::Zero(e.state_dim()),
                                     Eigen::VectorXd::Zero(e.act_dim()));
    Eigen::EigenSolver<Eigen::MatrixXd> open(A), closed(A - B * K);
    EXPECT_GT(open.eigenvalues().real().maxCoeff(), 0.0) << name;
    EXPECT_LT(closed.eigenvalues().real().maxCoeff(), 0.0) << name;
  }
}

TEST(BalanceFeatures, MatchStateNearUprightAndStayPeriodic) {
  EnvSpec e = EnvSpec::make("cart2pole");
  Eigen::VectorXd s(6);
  s << 0.3, 0.01, -0.02, 0.1, -0.2, 0.05;
  Eigen::VectorXd f = balance_features(e, s);
  EXPECT_EQ(f(0), s(0));
  EXPECT_NEAR(f(1), s(1), 1e-4);
  EXPECT_EQ(f.tail(3), s.tail(3));

  Eigen::VectorXd shifted = s;
  shifted(1) += 2.0 * M_PI;
  EXPECT_LT((balance_features(e, shifted) - f).cwiseAbs().maxCoeff(), 1e-12);

  Tape t;
  Tensor st({1, 6});
  for (int i = 0; i < 6; ++i) st[i] = s(i);
  Var fv = record_balance_features(t, e, t.leaf(st, false));
  const Tensor& val = t.val(fv);
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(val[i], f(i), 1e-12);
}

TEST(ScriptedPolicy, RecordMatchesActEverywhere) {
  for (const char* name : kAllEnvs) {
    EnvSpec e = EnvSpec::make(name);
    ScriptedPolicy pi(e);
    int n2 = e.state_dim(), A = e.act_dim();
    Rng rng(31);
    int tested = 0;
    for (int trial = 0; trial < 40 && tested < 4; ++trial) {
      Eigen::VectorXd s = env::reset(e, rng);
      for (int k = 0; k < trial % 9; ++k) s = env::step(e, s, pi.act(s)).next;
      Eigen::VectorXd a = pi.act(s);
      // keep away from the output clamp so finite differences stay two-sided
      if (a.cwiseAbs().maxCoeff() > 0.98) continue;
      ++tested;

      Tape t;
      Tensor st({1, n2});
      for (int i = 0; i < n2; ++i) st[i] = s(i);
      Var sv = t.leaf(st, false);
      Var av = pi.record(t, sv);
      const Tensor& val = t.val(av);
      for (int k = 0; k < A; ++k) EXPECT_NEAR(val[k], a(k), 1e-12) << name;

      Eigen::MatrixXd D = t.val(t.input_jacobian(av, sv)).mat();
      const double eps = 1e-6;
      for (int j = 0; j < n2; ++j) {
        Eigen::VectorXd sp = s, sm = s;
        sp(j) += eps;
        sm(j) -= eps;
        Eigen::VectorXd fd = (pi.act(sp) - pi.act(sm)) / (2.0 * eps);
        for (int k = 0; k < A; ++k)
          EXPECT_NEAR(D(k, j), fd(k), 1e-5 * std::max(1.0, std::fabs(fd(k))))
              << name << " d a[" << k << "]/d s[" << j << "]";
      }
    }
    EXPECT_GE(tested, 1) << name << ": no clamp-free states found";
  }
}

TEST(ScriptedPolicy, BalanceHoldsUprightPerturbation) {
  for (const char* name : {"pendulum", "cartpole", "acrobot"}) {
    EnvSpec e = EnvSpec::make(name);
    ScriptedPolicy pi(e);
    int n = e.dof();
    Eigen::VectorXd s = Eigen::VectorXd::Zero(2 * n);
    // the acrobot's joint-torque basin is narrower than the direct-drive ones
    s(e.chain.has_cart ? 1 : 0) += e.name == "acrobot" ? 0.03 : 0.05;
    for (int i = 0; i < 300; ++i) s = env::step(e, s, pi.act(s)).next;
    double d_up = 0.0, acc = 0.0;
    for (int j = e.chain.has_cart ? 1 : 0; j < n; ++j) {
      acc += s(j);
      d_up += 1.0 - std::cos(acc);
    }
    EXPECT_LT(d_up, 0.01) << name;
    EXPECT_LT(s.tail(n).norm(), 0.1) << name;
  }
}

TEST(ScriptedPolicy, SolvesEasyEnvironments) {
  for (const char* name : {"reacher", "pendulum", "cartpole"}) {
    EnvSpec e = EnvSpec::make(name);
    ScriptedPolicy pi(e);
    lyap::GoalPredicate gp;
    for (std::uint64_t seed : {0ull, 1ull}) {
      Rng rng(seed);
      Eigen::VectorXd s = env::reset(e, rng);
      double ret = 0.0;
      int held = 0, goal_at = -1;
      for (int i = 0; i < e.episode_len; ++i) {
        env::StepResult r = env::step(e, s, pi.act(s));
        s = r.next;
        ret += r.reward;
        if (gp.instant(e, s)) {
          if (++held >= gp.hold_steps && goal_at < 0) goal_at = i;
        } else {
          held = 0;
        }
      }
      EXPECT_GE(goal_at, 0) << name << " seed " << seed;
      EXPECT_GT(ret, 500.0) << name << " seed " << seed;
    }
  }
}

TEST(MakeTestPolicy, ProvidesNamedBaselines) {
  EnvSpec e = EnvSpec::make("pendulum");
  auto zero = make_test_policy(e, "zero");
  auto scripted = make_test_policy(e, "scripted");
  ASSERT_NE(zero, nullptr);
  ASSERT_NE(scripted, nullptr);
  EXPECT_EQ(zero->id(), "zero");
  Eigen::VectorXd s(2);
  s << M_PI - 0.4, 0.0;
  EXPECT_EQ(zero->act(s).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(scripted->act(s).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(make_test_policy(e, "nonsense"), ConfigError);
}

}  // namespace
