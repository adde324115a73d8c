#pragma once

#include <cstdint>
#include <vector>

#include "swingup/common.hpp"
#include "swingup/models.hpp"
#include "swingup/tensor.hpp"

namespace swingup {

/// Fixed-capacity ring buffer of transitions (s, tau, s', r). Once full, new
/// transitions overwrite the oldest.
class Replay {
 public:
  Replay(std::int64_t state_dim, std::int64_t tau_dim, std::int64_t capacity = 100000)
      : state_dim_(state_dim), tau_dim_(tau_dim), capacity_(capacity) {
    if (state_dim <= 0 || tau_dim <= 0 || capacity <= 0)
      throw ContractError("replay: dims and capacity must be positive");
    s_.resize(capacity_ * state_dim_);
    tau_.resize(capacity_ * tau_dim_);
    next_.resize(capacity_ * state_dim_);
    r_.resize(capacity_);
  }

  void push(const Eigen::VectorXd& s, const Eigen::VectorXd& tau, const Eigen::VectorXd& next,
            double r) {
    if (s.size() != state_dim_ || next.size() != state_dim_ || tau.size() != tau_dim_)
      throw ContractError("replay: transition dims do not match buffer");
    std::int64_t i = head_;
    for (std::int64_t k = 0; k < state_dim_; ++k) {
      s_[i * state_dim_ + k] = s(k);
      next_[i * state_dim_ + k] = next(k);
    }
    for (std::int64_t k = 0; k < tau_dim_; ++k) tau_[i * tau_dim_ + k] = tau(k);
    r_[i] = r;
    head_ = (head_ + 1) % capacity_;
    if (size_ < capacity_) ++size_;
  }

  std::int64_t size() const { return size_; }
  std::int64_t capacity() const { return capacity_; }

  /// Uniform sample with replacement.
  model::TransitionBatch sample(Rng& rng, std::int64_t batch) const {
    require(batch);
    model::TransitionBatch b{Tensor({batch, state_dim_}), Tensor({batch, tau_dim_}),
                             Tensor({batch, state_dim_}), Tensor({batch, 1})};
    for (std::int64_t j = 0; j < batch; ++j) {
      std::int64_t i = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(size_)));
      for (std::int64_t k = 0; k < state_dim_; ++k) {
        b.s[j * state_dim_ + k] = s_[i * state_dim_ + k];
        b.next[j * state_dim_ + k] = next_[i * state_dim_ + k];
      }
      for (std::int64_t k = 0; k < tau_dim_; ++k) b.tau[j * tau_dim_ + k] = tau_[i * tau_dim_ + k];
      b.r[j] = r_[i];
    }
    return b;
  }

  /// Uniformly sampled observed states, used as imagination start points.
  Tensor sample_states(Rng& rng, std::int64_t batch) const {
    require(batch);
    Tensor out({batch, state_dim_});
    for (std::int64_t j = 0; j < batch; ++j) {
      std::int64_t i = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(size_)));
      for (std::int64_t k = 0; k < state_dim_; ++k) out[j * state_dim_ + k] = s_[i * state_dim_ + k];
    }
    return out;
  }

 private:
  void require(std::int64_t batch) const {
    if (size_ == 0) throw ContractError("replay: cannot sample from empty buffer");
    if (batch <= 0) throw ContractError("replay: batch must be positive");
  }

  std::int64_t state_dim_, tau_dim_, capacity_;
  std::int64_t head_ = 0, size_ = 0;
  std::vector<double> s_, tau_, next_, r_;
};

}  // namespace swingup
