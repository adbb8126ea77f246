#include "seqforge/rng.h"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace seqforge {

  uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  uint64_t fnv1a64(const std::string& bytes) {
    uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
      hash ^= c;
      hash *= 0x100000001b3ULL;
    }
    return hash;
  }

  Rng::Rng(uint64_t seed)
    : seed_(seed)
    , engine_(splitmix64(seed)) {
  }

  double Rng::uniform() {
    // 53 random bits.
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  int64_t Rng::uniform_int(int64_t n) {
    if (n <= 0)
      throw std::invalid_argument("uniform_int: n must be positive");
    const uint64_t range = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    uint64_t draw;
    do {
      draw = engine_();
    } while (draw >= limit);
    return static_cast<int64_t>(draw % range);
  }

  double Rng::normal() {
    // Box-Muller without caching the second variate, so state stays a
    // single engine.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  int Rng::poisson(double lambda) {
    if (!(lambda > 0))
      throw std::invalid_argument("poisson: lambda must be positive");
    // Knuth's multiplication method; lambda is small (span lengths).
    const double limit = std::exp(-lambda);
    int k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

  Rng Rng::fork(uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
  }

  std::string Rng::state() const {
    std::ostringstream out;
    out << seed_ << ' ' << engine_;
    return out.str();
  }

  void Rng::set_state(const std::string& state) {
    std::istringstream in(state);
    in >> seed_ >> engine_;
    if (!in)
      throw std::invalid_argument("malformed rng state");
  }

}  // namespace seqforge
