#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace swingup {

/// Bad CLI flag, config key, or config value.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Caller broke an API precondition (shape mismatch, bad dimension, wrong mode).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NaN/Inf or a failed factorization inside numeric code.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Graph op asked to do something it does not support.
struct UnsupportedOpError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Physics integration produced a non-finite or non-physical state.
struct SimulationFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint or data file failed to parse or verify.
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Overflow-safe log(1 + exp(x)).
inline double softplus_stable(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

/// Wrap an angle into (-pi, pi].
inline double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * M_PI);
  if (w <= -M_PI) w += 2.0 * M_PI;
  return w;
}

/// Deterministic RNG: one master seed, named substreams.
///
/// Every consumer (init, episode noise, replay sampling, action noise, ...)
/// derives its own stream from (seed, tag), so adding a consumer never
/// perturbs the draws seen by existing ones.
class Rng {
 public:
  Rng() : gen_(0) {}
  explicit Rng(std::uint64_t seed, const std::string& tag = "") {
    std::seed_seq seq = make_seq(seed, tag);
    gen_.seed(seq);
  }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
  }
  /// Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(gen_);
  }

  std::mt19937_64& engine() { return gen_; }

  std::string save_state() const;
  void load_state(const std::string& s);

 private:
  static std::seed_seq make_seq(std::uint64_t seed, const std::string& tag) {
    std::vector<std::uint32_t> words;
    words.push_back(static_cast<std::uint32_t>(seed & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(seed >> 32));
    for (unsigned char c : tag) words.push_back(0x9e3779b9u ^ c);
    return std::seed_seq(words.begin(), words.end());
  }
  std::mt19937_64 gen_;
};

inline std::string Rng::save_state() const {
  std::ostringstream os;
  os << gen_;
  return os.str();
}

inline void Rng::load_state(const std::string& s) {
  std::istringstream is(s);
  is >> gen_;
  if (!is) throw LoadError("rng state string failed to parse");
}

}  // namespace swingup
