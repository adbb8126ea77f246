#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace seqforge {

  // Deterministic generator (mt19937_64). Distributions are implemented here
  // rather than through <random> so streams agree across standard libraries.
  class Rng {
  public:
    explicit Rng(uint64_t seed = 0);

    uint64_t seed() const { return seed_; }
    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform();
    // Uniform in [0, n). n must be positive.
    int64_t uniform_int(int64_t n);
    double normal();
    int poisson(double lambda);

    // Independent generator derived from (seed, stream).
    Rng fork(uint64_t stream) const;

    std::string state() const;
    void set_state(const std::string& state);

  private:
    uint64_t seed_;
    std::mt19937_64 engine_;
  };

  uint64_t splitmix64(uint64_t x);
  uint64_t fnv1a64(const std::string& bytes);

}  // namespace seqforge
