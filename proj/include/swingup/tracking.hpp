#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "swingup/checkpoint.hpp"
#include "swingup/policies.hpp"

namespace swingup {

/// Time-varying tracking of a precomputed swing-up trajectory: feedforward
/// actions plus linear feedback around the nominal, then LQR balance once
/// the nominal ends. Angle errors are taken modulo 2pi so wrapped
/// environment states can track the unwrapped nominal.
class TrackingPolicy : public Policy {
 public:
  TrackingPolicy(const EnvSpec& e, Eigen::MatrixXd X, Eigen::MatrixXd U,
                 std::vector<Eigen::MatrixXd> K)
      : e_(e), X_(std::move(X)), U_(std::move(U)), Ks_(std::move(K)) {
    n_ = e.dof();
    A_ = e.act_dim();
    off_ = e.chain.has_cart ? 1 : 0;
    T_ = static_cast<int>(U_.rows());
    bool gains_ok = static_cast<int>(Ks_.size()) == T_;
    for (const Eigen::MatrixXd& k : Ks_)
      gains_ok = gains_ok && k.rows() == A_ && k.cols() == 2 * n_;
    if (T_ < 1 || X_.rows() != T_ + 1 || X_.cols() != 2 * n_ || U_.cols() != A_ || !gains_ok)
      throw ContractError("TrackingPolicy: inconsistent nominal shapes");
    K_term_ = upright_lqr_gain(e_);
  }

  std::string id() const override { return "tracking_" + e_.name; }
  int horizon() const { return T_; }
  const Eigen::MatrixXd& nominal_states() const { return X_; }
  const Eigen::MatrixXd& nominal_actions() const { return U_; }

  /// Time-free queries fall back to the balance law.
  Eigen::VectorXd act(const Eigen::VectorXd& s) const override { return act_at(s, T_); }
  Var record(Tape& t, Var s) const override { return record_at(t, s, T_); }

  Eigen::VectorXd act_at(const Eigen::VectorXd& s, int step) const override {
    if (step < 0) step = 0;
    if (step >= T_) {
      Eigen::VectorXd bal = -K_term_ * balance_features(e_, s);
      return bal.cwiseMax(-1.0).cwiseMin(1.0);
    }
    Eigen::VectorXd delta = s - reference(s, step);
    Eigen::VectorXd a =
        U_.row(step).transpose() + Ks_[static_cast<std::size_t>(step)] * delta;
    return a.cwiseMax(-1.0).cwiseMin(1.0);
  }

  Var record_at(Tape& t, Var s, int step) const override {
    if (step < 0) step = 0;
    if (step >= T_) {
      Var ds = record_balance_features(t, e_, s);
      Tensor negKT({2 * n_, A_});
      for (int r = 0; r < A_; ++r)
        for (int c = 0; c < 2 * n_; ++c) negKT[c * A_ + r] = -K_term_(r, c);
      return t.clamp(t.matmul(ds, t.constant(negKT)), -1.0, 1.0);
    }
    const Tensor& sv = t.val(s);
    Eigen::VectorXd sval(2 * n_);
    for (int i = 0; i < 2 * n_; ++i) sval(i) = sv[i];
    Eigen::VectorXd ref = reference(sval, step);
    Tensor reft({1, 2 * n_}), ut({1, A_}), kT({2 * n_, A_});
    for (int i = 0; i < 2 * n_; ++i) reft[i] = ref(i);
    for (int k = 0; k < A_; ++k) ut[k] = U_(step, k);
    const Eigen::MatrixXd& K = Ks_[static_cast<std::size_t>(step)];
    for (int r = 0; r < A_; ++r)
      for (int c = 0; c < 2 * n_; ++c) kT[c * A_ + r] = K(r, c);
    Var delta = t.sub(s, t.constant(reft));
    Var a = t.add(t.constant(ut), t.matmul(delta, t.constant(kT)));
    return t.clamp(a, -1.0, 1.0);
  }

  void save(const std::string& path) const {
    Container c;
    nlohmann::json meta;
    meta["kind"] = "tracking_policy";
    meta["env"] = e_.name;
    meta["horizon"] = T_;
    c.meta = meta.dump();
    Tensor xs({T_ + 1, 2 * n_}), us({T_, A_}), ks({T_, A_, 2 * n_});
    for (int i = 0; i <= T_; ++i)
      for (int j = 0; j < 2 * n_; ++j) xs[i * 2 * n_ + j] = X_(i, j);
    for (int i = 0; i < T_; ++i)
      for (int k = 0; k < A_; ++k) us[i * A_ + k] = U_(i, k);
    for (int i = 0; i < T_; ++i)
      for (int r = 0; r < A_; ++r)
        for (int j = 0; j < 2 * n_; ++j)
          ks[(i * A_ + r) * 2 * n_ + j] = Ks_[static_cast<std::size_t>(i)](r, j);
    c.tensors.emplace_back("nominal.states", std::move(xs));
    c.tensors.emplace_back("nominal.actions", std::move(us));
    c.tensors.emplace_back("gains.K", std::move(ks));
    save_container(path, c);
  }

  static TrackingPolicy load(const std::string& path) {
    Container c = load_container(path);
    nlohmann::json meta = nlohmann::json::parse(c.meta, nullptr, false);
    if (meta.is_discarded() || meta.value("kind", "") != "tracking_policy")
      throw LoadError("tracking policy: bad metadata in '" + path + "'");
    EnvSpec e = EnvSpec::make(meta.at("env").get<std::string>());
    int T = meta.at("horizon").get<int>();
    int n2 = e.state_dim(), A = e.act_dim();
    const Tensor& xs = c.tensor("nominal.states");
    const Tensor& us = c.tensor("nominal.actions");
    const Tensor& ks = c.tensor("gains.K");
    if (xs.rank() != 2 || xs.dim(0) != T + 1 || xs.dim(1) != n2 || us.rank() != 2 ||
        us.dim(0) != T || us.dim(1) != A || ks.rank() != 3 || ks.dim(0) != T ||
        ks.dim(1) != A || ks.dim(2) != n2)
      throw LoadError("tracking policy: tensor shapes do not match metadata");
    Eigen::MatrixXd X(T + 1, n2), U(T, A);
    std::vector<Eigen::MatrixXd> K(static_cast<std::size_t>(T), Eigen::MatrixXd(A, n2));
    for (int i = 0; i <= T; ++i)
      for (int j = 0; j < n2; ++j) X(i, j) = xs[i * n2 + j];
    for (int i = 0; i < T; ++i)
      for (int k = 0; k < A; ++k) U(i, k) = us[i * A + k];
    for (int i = 0; i < T; ++i)
      for (int r = 0; r < A; ++r)
        for (int j = 0; j < n2; ++j)
          K[static_cast<std::size_t>(i)](r, j) = ks[(i * A + r) * n2 + j];
    return TrackingPolicy(e, std::move(X), std::move(U), std::move(K));
  }

 private:
  /// Nominal state shifted by whole turns so angle errors are taken to the
  /// nearest branch.
  Eigen::VectorXd reference(const Eigen::VectorXd& s, int step) const {
    Eigen::VectorXd ref = X_.row(step).transpose();
    for (int j = off_; j < n_; ++j)
      ref(j) += 2.0 * M_PI * std::round((s(j) - ref(j)) / (2.0 * M_PI));
    return ref;
  }

  EnvSpec e_;
  int n_ = 0, A_ = 0, off_ = 0, T_ = 0;
  Eigen::MatrixXd X_, U_;
  std::vector<Eigen::MatrixXd> Ks_;
  Eigen::MatrixXd K_term_;
};

}  // namespace swingup
