#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "ctxssl/error.hpp"

namespace ctxssl {

/// splitmix64 step, used to derive independent stream seeds from one seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Caller-owned random stream. Distribution code is written out by hand so
/// draws are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling avoids modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error(ErrorKind::Domain, "Rng::below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do {
      r = eng_();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller; no cached second value so the stream
  /// state is fully captured by the engine.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw Error(ErrorKind::Io, "corrupt rng state");
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.eng_ == b.eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace ctxssl
