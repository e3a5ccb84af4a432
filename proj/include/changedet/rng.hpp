#pragma once

#include <cstdint>
#include <random>

namespace changedet {

/// Seeded random stream. All data sampling and weight initialization flow
/// through one of these so a run is fully determined by its seeds; worker
/// streams are derived with fork() to keep multi-stream runs reproducible.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    std::uniform_int_distribution<int64_t> d(0, n - 1);
    return d(engine_);
  }

  double uniform() {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    return d(engine_);
  }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  double normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Child stream for worker `id`, independent of draws on this stream.
  Rng fork(uint64_t id) const {
    std::mt19937_64 probe = engine_;
    const uint64_t base = probe();
    return Rng(base ^ (0x9e3779b97f4a7c15ULL * (id + 1)));
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace changedet
