#include "swingup/env.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace swingup;

namespace {

TEST(Env, RegistryAndDimensions) {
  struct Want {
    const char* name;
    int dof, act;
  };
  for (Want w : std::initializer_list<Want>{{"reacher", 2, 2},
                                            {"pendulum", 1, 1},
                                            {"cartpole", 2, 1},
                                            {"cart2pole", 3, 1},
                                            {"acrobot", 2, 1},
                                            {"cart3pole", 4, 2},
                                            {"acro3bot", 3, 2}}) {
    EnvSpec e = EnvSpec::make(w.name);
    EXPECT_EQ(e.dof(), w.dof) << w.name;
    EXPECT_EQ(e.act_dim(), w.act) << w.name;
    EXPECT_EQ(e.state_dim(), 2 * w.dof) << w.name;
    EXPECT_EQ(e.episode_len, 1000) << w.name;
    EXPECT_DOUBLE_EQ(e.dt, 0.02) << w.name;
  }
  EXPECT_THROW(EnvSpec::make("frobnicator"), ConfigError);
}

TEST(Env, ActuationMapScattersAndScales) {
  EnvSpec e = EnvSpec::make("acro3bot");  // joints 1 and 3 of a 3-link arm
  Eigen::VectorXd a(2);
  a << 0.5, -1.0;
  Eigen::VectorXd tau = env::actuation(e, a);
  EXPECT_DOUBLE_EQ(tau(0), 0.5 * e.limits[0]);
  EXPECT_DOUBLE_EQ(tau(1), 0.0);
  EXPECT_DOUBLE_EQ(tau(2), -1.0 * e.limits[1]);
  EXPECT_THROW(env::actuation(e, Eigen::VectorXd::Zero(3)), ContractError);
}

TEST(Env, ResetNearHangingRest) {
  Rng rng(77, "reset");
  for (const std::string& name : EnvSpec::names()) {
    EnvSpec e = EnvSpec::make(name);
    for (int trial = 0; trial < 10; ++trial) {
      Eigen::VectorXd s = env::reset(e, rng);
      ASSERT_EQ(s.size(), e.state_dim());
      int off = e.chain.has_cart ? 1 : 0;
      for (int j = 0; j < e.dof(); ++j)
        EXPECT_LE(std::fabs(s(e.dof() + j)), e.init_vel_noise) << name;
      if (!e.init_full_circle) {
        // first link near pi (hanging), later links near 0
        EXPECT_GE(std::fabs(s(off)), M_PI - e.init_angle_noise - 1e-12) << name;
        for (int j = off + 1; j < e.dof(); ++j)
          EXPECT_LE(std::fabs(s(j)), e.init_angle_noise + 1e-12) << name;
      }
      // rewards start low: hanging is far from the goal
      if (!e.init_full_circle) EXPECT_LT(env::reward(e, s), 0.1) << name;
    }
  }
}

TEST(Env, RewardPeaksAtGoalAndStaysInUnitInterval) {
  EnvSpec e = EnvSpec::make("pendulum");
  Eigen::VectorXd upright(2);
  upright << 0.0, 0.0;
  EXPECT_GT(env::reward(e, upright), 0.999);
  Eigen::VectorXd hanging(2);
  hanging << M_PI, 0.0;
  EXPECT_LT(env::reward(e, hanging), 0.01);
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    Eigen::VectorXd s(2);
    s << rng.uniform(-M_PI, M_PI), rng.uniform(-8, 8);
    double r = env::reward(e, s);
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
  }
  // moving fast at the goal is worth less than balancing there
  Eigen::VectorXd fast(2);
  fast << 0.0, 3.0;
  EXPECT_LT(env::reward(e, fast), env::reward(e, upright));
}

TEST(Env, StepWrapsAnglesIntoHalfOpenInterval) {
  EnvSpec e = EnvSpec::make("pendulum");
  Rng rng(5);
  Eigen::VectorXd s(2);
  s << 3.0, 4.0;  // fast spin, will cross pi
  for (int i = 0; i < 300; ++i) {
    Eigen::VectorXd a(1);
    a << rng.uniform(-1, 1);
    s = env::step(e, s, a).next;
    EXPECT_GT(s(0), -M_PI);
    EXPECT_LE(s(0), M_PI);
  }
}

TEST(Env, ZeroTorqueConservesEnergy) {
  // trimmed version of the drift acceptance check: 200 steps per system
  Rng rng(6, "energy");
  for (const std::string& name : EnvSpec::names()) {
    EnvSpec e = EnvSpec::make(name);
    Eigen::VectorXd s = env::reset(e, rng);
    // give it motion so conservation is non-trivial
    for (int j = 0; j < e.dof(); ++j) s(e.dof() + j) = rng.uniform(-1.0, 1.0);
    double e0 = env::total_energy(e, s);
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(e.act_dim());
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
      s = env::step(e, s, zero).next;
      worst = std::max(worst, std::fabs(env::total_energy(e, s) - e0));
    }
    EXPECT_LT(worst, 1e-6) << name;
  }
}

TEST(Env, WorkEnergyBalanceUnderActuation) {
  Rng rng(7, "work");
  for (const std::string& name : EnvSpec::names()) {
    EnvSpec e = EnvSpec::make(name);
    Eigen::VectorXd s = env::reset(e, rng);
    for (int i = 0; i < 200; ++i) {
      Eigen::VectorXd a(e.act_dim());
      for (int k = 0; k < a.size(); ++k) a(k) = rng.uniform(-1, 1);
      double before = env::total_energy(e, s);
      env::StepResult r = env::step(e, s, a);
      double gained = env::total_energy(e, r.next) - before;
      EXPECT_LT(std::fabs(gained - r.work), 1e-4) << name << " step " << i;
      s = r.next;
    }
  }
}

TEST(Env, RailTermPenalizesRunaways) {
  EnvSpec e = EnvSpec::make("cartpole");
  Eigen::VectorXd centered(4), off_rail(4);
  centered << 0.0, 0.0, 0.0, 0.0;
  off_rail << e.rail_half + 1.5, 0.0, 0.0, 0.0;
  EXPECT_GT(env::reward(e, centered), 2.0 * env::reward(e, off_rail));
}

TEST(Env, DeterministicGivenSeed) {
  EnvSpec e = EnvSpec::make("acrobot");
  Rng r1(11, "ep"), r2(11, "ep");
  Eigen::VectorXd s1 = env::reset(e, r1), s2 = env::reset(e, r2);
  for (int i = 0; i < 50; ++i) {
    Eigen::VectorXd a(1);
    a << std::sin(0.1 * i);
    s1 = env::step(e, s1, a).next;
    s2 = env::step(e, s2, a).next;
  }
  for (int j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(s1(j), s2(j));  // bit-identical
}

}  // namespace
