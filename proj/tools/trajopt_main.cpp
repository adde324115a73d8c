// Offline swing-up trajectory optimizer: runs iLQR from the hanging rest
// configuration with a few noise-seeded restarts, saves the best nominal as a
// tracking policy, and validates it on randomized episode starts.
#include <cstdio>
#include <cstring>
#include <string>

#include "swingup/lyapunov.hpp"
#include "swingup/tracking.hpp"
#include "swingup/trajopt.hpp"

using namespace swingup;

namespace {

Eigen::VectorXd hanging_rest(const EnvSpec& e) {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(e.state_dim());
  s(e.chain.has_cart ? 1 : 0) = M_PI;
  return s;
}

double upright_distance(const EnvSpec& e, const Eigen::VectorXd& s) {
  int n = e.dof(), off = e.chain.has_cart ? 1 : 0;
  double acc = 0.0, d = 0.0;
  for (int j = off; j < n; ++j) {
    acc += s(j);
    d += 1.0 - std::cos(acc);
  }
  return d;
}

int validate(const EnvSpec& e, const TrackingPolicy& pi, int episodes, int episode_len) {
  lyap::GoalPredicate gp;
  int solved = 0;
  for (int ep = 0; ep < episodes; ++ep) {
    Rng rng(static_cast<std::uint64_t>(ep), "validate");
    Eigen::VectorXd s = env::reset(e, rng);
    double ret = 0.0;
    int held = 0, goal_at = -1;
    for (int i = 0; i < episode_len; ++i) {
      env::StepResult r = env::step(e, s, pi.act_at(s, i));
      s = r.next;
      ret += r.reward;
      if (gp.instant(e, s)) {
        if (++held >= gp.hold_steps && goal_at < 0) goal_at = i;
      } else {
        held = 0;
      }
    }
    if (goal_at >= 0) ++solved;
    std::printf("  episode %d: return %7.1f  goal held at %d\n", ep, ret, goal_at);
  }
  return solved;
}

// Prepend a hold-at-hanging segment so early feedback damps reset noise at
// the stable equilibrium before the swing phase begins.
void prepend_settle(const EnvSpec& e, int steps, Eigen::MatrixXd& X, Eigen::MatrixXd& U) {
  if (steps <= 0) return;
  int n2 = e.state_dim(), A = e.act_dim();
  Eigen::MatrixXd X2(X.rows() + steps, n2), U2(U.rows() + steps, A);
  for (int t = 0; t < steps; ++t) X2.row(t) = hanging_rest(e).transpose();
  X2.bottomRows(X.rows()) = X;
  U2.topRows(steps).setZero();
  U2.bottomRows(U.rows()) = U;
  X = X2;
  U = U2;
}

// Stiff tube gains: quadratic tracking cost with the same weighting idea as
// the upright balance LQR, independent of the optimizer's shaping weights.
std::vector<Eigen::MatrixXd> stiff_gains(const EnvSpec& e, const Eigen::MatrixXd& X,
                                         const Eigen::MatrixXd& U) {
  int n = e.dof();
  Eigen::VectorXd q(2 * n);
  for (int j = 0; j < n; ++j) q(j) = 10.0;
  if (e.chain.has_cart) q(0) = 2.0;
  for (int j = n; j < 2 * n; ++j) q(j) = 1.0;
  return trajopt::tvlqr_gains(e, X, U, q, 1.0);
}

}  // namespace

int main(int argc, char** argv) {
  std::string env_name, out_path, regains_path;
  int horizon = 400, restarts = 4, iters = 200, episodes = 5, tvlqr = 1, settle = 0;
  double noise = 0.3;
  std::uint64_t seed = 0;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    auto next = [&]() -> const char* {
      if (i + 1 >= argc) {
        std::fprintf(stderr, "missing value for %s\n", a.c_str());
        std::exit(1);
      }
      return argv[++i];
    };
    if (a == "--env") env_name = next();
    else if (a == "--out") out_path = next();
    else if (a == "--horizon") horizon = std::atoi(next());
    else if (a == "--restarts") restarts = std::atoi(next());
    else if (a == "--iters") iters = std::atoi(next());
    else if (a == "--noise") noise = std::atof(next());
    else if (a == "--seed") seed = static_cast<std::uint64_t>(std::atoll(next()));
    else if (a == "--episodes") episodes = std::atoi(next());
    else if (a == "--tvlqr") tvlqr = std::atoi(next());
    else if (a == "--settle") settle = std::atoi(next());
    else if (a == "--regains") regains_path = next();
    else {
      std::fprintf(stderr,
                   "usage: swingup_trajopt --env NAME --out FILE [--horizon N] [--restarts N]\n"
                   "       [--iters N] [--noise S] [--seed N] [--episodes N] [--tvlqr 0|1]\n"
                   "       [--regains FILE]\n");
      return 1;
    }
  }
  if (env_name.empty() || (out_path.empty() && regains_path.empty())) {
    std::fprintf(stderr, "swingup_trajopt: --env and --out are required\n");
    return 1;
  }

  EnvSpec e = EnvSpec::make(env_name);

  // gain-refresh mode: keep the stored nominal, recompute tracking gains
  if (!regains_path.empty()) {
    TrackingPolicy old = TrackingPolicy::load(regains_path);
    Eigen::MatrixXd X = old.nominal_states(), U = old.nominal_actions();
    prepend_settle(e, settle, X, U);
    TrackingPolicy pi(e, X, U, stiff_gains(e, X, U));
    std::string dst = out_path.empty() ? regains_path : out_path;
    pi.save(dst);
    std::printf("regained %s\n", dst.c_str());
    int solved = validate(e, pi, episodes, 1000);
    std::printf("validation: solved %d/%d\n", solved, episodes);
    return solved == episodes ? 0 : 2;
  }
  trajopt::IlqrOptions opt;
  opt.max_iters = iters;
  opt.verbose = true;
  trajopt::Weights w;

  trajopt::IlqrResult best;
  best.cost = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    Rng rng(seed + static_cast<std::uint64_t>(r), "trajopt_init");
    Eigen::MatrixXd U0(horizon, e.act_dim());
    for (int t = 0; t < horizon; ++t)
      for (int k = 0; k < e.act_dim(); ++k) U0(t, k) = noise * rng.normal();
    trajopt::IlqrResult res = trajopt::ilqr(e, hanging_rest(e), U0, w, opt);
    Eigen::VectorXd sT = res.X.row(horizon).transpose();
    std::printf("restart %d: cost %.4f iters %d d_up %.4f |qd| %.4f\n", r, res.cost, res.iters,
                upright_distance(e, sT), sT.tail(e.dof()).norm());
    if (res.cost < best.cost) best = res;
  }

  Eigen::VectorXd sT = best.X.row(horizon).transpose();
  std::printf("best nominal: cost %.4f  d_up %.4f  |qd| %.4f\n", best.cost,
              upright_distance(e, sT), sT.tail(e.dof()).norm());

  Eigen::MatrixXd X = best.X, U = best.U;
  prepend_settle(e, settle, X, U);
  std::vector<Eigen::MatrixXd> K =
      (tvlqr || settle > 0) ? stiff_gains(e, X, U) : best.K;
  TrackingPolicy pi(e, X, U, K);
  pi.save(out_path);
  std::printf("saved %s\n", out_path.c_str());

  int solved = validate(e, pi, episodes, 1000);
  std::printf("validation: solved %d/%d\n", solved, episodes);
  return solved == episodes ? 0 : 2;
}
