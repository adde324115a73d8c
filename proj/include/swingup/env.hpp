#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "swingup/chain.hpp"
#include "swingup/common.hpp"
#include "swingup/tensor.hpp"

namespace swingup {

/// One of the seven control tasks. State is [q, qd] with angles wrapped to
/// (-pi, pi]; actions live in [-1,1]^act_dim and are scaled by `limits` onto
/// the actuated coordinates.
struct EnvSpec {
  std::string name;
  ChainSpec chain;
  std::vector<int> actuated;    // coordinate indices receiving torque
  std::vector<double> limits;   // torque/force scale per actuated coordinate
  double dt = 0.02;
  int substeps = 4;
  int episode_len = 1000;

  // reward: exp(-alpha d_goal^2) * exp(-beta |qd|^2) * rail term
  double alpha = 1.0;
  double beta = 0.02;
  std::array<double, 2> goal = {0.0, 0.0};
  double rail_half = 0.0;   // 0 disables the rail falloff
  double rail_scale = 4.0;

  double init_angle_noise = 0.1;
  double init_vel_noise = 0.05;
  bool init_full_circle = false;  // reacher: joints start anywhere

  int dof() const { return chain.dof(); }
  int state_dim() const { return 2 * chain.dof(); }
  int act_dim() const { return static_cast<int>(actuated.size()); }

  static EnvSpec make(const std::string& name);
  static std::vector<std::string> names() {
    return {"reacher", "pendulum", "cartpole", "cart2pole", "acrobot", "cart3pole", "acro3bot"};
  }
};

inline EnvSpec EnvSpec::make(const std::string& name) {
  EnvSpec e;
  e.name = name;
  ChainSpec& c = e.chain;
  if (name == "reacher") {
    c.masses = {1.0, 1.0};
    c.lengths = {1.0, 1.0};
    c.g = 0.0;  // horizontal plane
    e.actuated = {0, 1};
    e.limits = {2.0, 2.0};
    e.goal = {1.0, 1.0};
    e.alpha = 2.0;
    e.beta = 0.05;
    e.init_full_circle = true;
  } else if (name == "pendulum") {
    c.masses = {1.0};
    c.lengths = {1.0};
    e.actuated = {0};
    e.limits = {2.5};
    e.goal = {0.0, 1.0};
    e.alpha = 1.5;
    e.beta = 0.02;
  } else if (name == "cartpole") {
    c.has_cart = true;
    c.cart_mass = 1.0;
    c.masses = {1.0};
    c.lengths = {1.0};
    e.actuated = {0};
    e.limits = {12.0};
    e.goal = {0.0, 1.0};
    e.alpha = 1.0;
    e.beta = 0.02;
    e.rail_half = 2.0;
  } else if (name == "cart2pole") {
    c.has_cart = true;
    c.cart_mass = 1.0;
    c.masses = {1.0, 1.0};
    c.lengths = {1.0, 1.0};
    e.actuated = {0};
    e.limits = {14.0};
    e.goal = {0.0, 2.0};
    e.alpha = 1.0;
    e.beta = 0.02;
    e.rail_half = 2.0;
  } else if (name == "acrobot") {
    c.masses = {1.0, 1.0};
    c.lengths = {1.0, 1.0};
    e.actuated = {1};
    e.limits = {8.0};
    e.goal = {0.0, 2.0};
    e.alpha = 1.0;
    e.beta = 0.02;
  } else if (name == "cart3pole") {
    c.has_cart = true;
    c.cart_mass = 1.0;
    c.masses = {1.0, 1.0, 1.0};
    c.lengths = {1.0, 1.0, 1.0};
    e.actuated = {0, 3};
    e.limits = {16.0, 8.0};
    e.goal = {0.0, 3.0};
    e.alpha = 0.6;
    e.beta = 0.02;
    e.rail_half = 2.0;
  } else if (name == "acro3bot") {
    c.masses = {1.0, 1.0, 1.0};
    c.lengths = {1.0, 1.0, 1.0};
    e.actuated = {0, 2};
    e.limits = {10.0, 8.0};
    e.goal = {0.0, 3.0};
    e.alpha = 0.6;
    e.beta = 0.02;
  } else {
    throw ConfigError("unknown environment '" + name + "'");
  }
  return e;
}

namespace env {

inline Eigen::VectorXd q_of(const EnvSpec& e, const Eigen::VectorXd& s) {
  return s.head(e.dof());
}
inline Eigen::VectorXd qd_of(const EnvSpec& e, const Eigen::VectorXd& s) {
  return s.tail(e.dof());
}

/// Map a policy action in [-1,1]^act_dim to generalized forces.
inline Eigen::VectorXd actuation(const EnvSpec& e, const Eigen::VectorXd& action) {
  if (action.size() != e.act_dim())
    throw ContractError("actuation: expected " + std::to_string(e.act_dim()) + " dims");
  Eigen::VectorXd tau = Eigen::VectorXd::Zero(e.dof());
  for (int i = 0; i < e.act_dim(); ++i)
    tau(e.actuated[static_cast<std::size_t>(i)]) =
        e.limits[static_cast<std::size_t>(i)] * action(i);
  return tau;
}

/// Matrix form of `actuation`: [act_dim, dof] with limits baked in, so that
/// tau = action @ M for batched graph rollouts.
inline Tensor action_matrix(const EnvSpec& e) {
  Tensor m({e.act_dim(), e.dof()});
  for (int i = 0; i < e.act_dim(); ++i)
    m[i * e.dof() + e.actuated[static_cast<std::size_t>(i)]] =
        e.limits[static_cast<std::size_t>(i)];
  return m;
}

/// Wrap the angle coordinates of a state into (-pi, pi].
inline Eigen::VectorXd wrap_state(const EnvSpec& e, Eigen::VectorXd s) {
  int off = e.chain.has_cart ? 1 : 0;
  for (int j = off; j < e.dof(); ++j) s(j) = wrap_angle(s(j));
  return s;
}

inline double total_energy(const EnvSpec& e, const Eigen::VectorXd& s) {
  return chain::total_energy(e.chain, q_of(e, s), qd_of(e, s));
}

/// Reward of a state: goal proximity of the chain tip, scaled down by speed
/// and (cart systems) by running off the rail. Always in [0,1].
inline double reward(const EnvSpec& e, const Eigen::VectorXd& s) {
  Eigen::VectorXd q = q_of(e, s), qd = qd_of(e, s);
  Eigen::Vector2d tip = chain::tip_position(e.chain, q);
  double dx = tip(0) - e.goal[0], dy = tip(1) - e.goal[1];
  double r = std::exp(-e.alpha * (dx * dx + dy * dy)) * std::exp(-e.beta * qd.squaredNorm());
  if (e.rail_half > 0.0 && e.chain.has_cart) {
    double over = std::max(0.0, std::fabs(q(0)) - e.rail_half);
    r *= std::exp(-e.rail_scale * over * over);
  }
  return r;
}

/// Initial state: near-rest hanging configuration (or anywhere on the circle
/// for the reacher), with small uniform noise.
inline Eigen::VectorXd reset(const EnvSpec& e, Rng& rng) {
  int n = e.dof(), off = e.chain.has_cart ? 1 : 0;
  Eigen::VectorXd s = Eigen::VectorXd::Zero(2 * n);
  if (e.chain.has_cart)
    s(0) = rng.uniform(-e.init_angle_noise, e.init_angle_noise);
  for (int j = off; j < n; ++j) {
    if (e.init_full_circle) {
      s(j) = rng.uniform(-M_PI, M_PI);
    } else {
      // hanging: first link at pi from upright, the rest aligned
      double base = (j == off) ? M_PI : 0.0;
      s(j) = wrap_angle(base + rng.uniform(-e.init_angle_noise, e.init_angle_noise));
    }
  }
  for (int j = 0; j < n; ++j)
    s(n + j) = rng.uniform(-e.init_vel_noise, e.init_vel_noise);
  return s;
}

struct StepResult {
  Eigen::VectorXd next;
  Eigen::VectorXd next_unwrapped;  // `next` before angle wrapping: continuous
                                   // with the input state, for learning targets
  double reward = 0.0;
  double work = 0.0;  // integral of tau . qd over the step
};

/// Advance one control step with constant action: RK4 with substeps, then
/// wrap angles. Also integrates actuator work (Simpson on the RK4 stages).
inline StepResult step(const EnvSpec& e, const Eigen::VectorXd& s,
                       const Eigen::VectorXd& action) {
  if (s.size() != e.state_dim()) throw ContractError("step: bad state size");
  int n = e.dof();
  Eigen::VectorXd tau = actuation(e, action);
  auto deriv = [&](const Eigen::VectorXd& y) {
    Eigen::VectorXd d(2 * n);
    d.head(n) = y.tail(n);
    d.tail(n) = chain::forward_dynamics(e.chain, y.head(n), y.tail(n), tau);
    return d;
  };
  auto power = [&](const Eigen::VectorXd& y) { return tau.dot(y.tail(n)); };

  Eigen::VectorXd y = s;
  double work = 0.0;
  double h = e.dt / e.substeps;
  for (int ss = 0; ss < e.substeps; ++ss) {
    Eigen::VectorXd k1 = deriv(y);
    Eigen::VectorXd y2 = y + 0.5 * h * k1;
    Eigen::VectorXd k2 = deriv(y2);
    Eigen::VectorXd y3 = y + 0.5 * h * k2;
    Eigen::VectorXd k3 = deriv(y3);
    Eigen::VectorXd y4 = y + h * k3;
    Eigen::VectorXd k4 = deriv(y4);
    work += h / 6.0 * (power(y) + 2.0 * power(y2) + 2.0 * power(y3) + power(y4));
    y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  if (!y.allFinite()) throw SimulationFault("step: non-finite state in '" + e.name + "'");

  StepResult out;
  out.next_unwrapped = y;
  out.next = wrap_state(e, y);
  out.reward = reward(e, out.next);
  out.work = work;
  return out;
}

}  // namespace env
}  // namespace swingup
