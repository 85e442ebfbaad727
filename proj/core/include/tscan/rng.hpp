#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace tscan {

// Deterministic random source. All distributions are implemented on top of
// raw mt19937_64 draws so that streams are reproducible across platforms and
// standard-library versions (std::normal_distribution etc. are not portable).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi);

  // Uniform integer on [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller. Consumes two uniforms per call; nothing
  // is cached, so interleaving with other draws stays reproducible.
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Gamma(shape, 1) via Marsaglia-Tsang; shape must be > 0.
  double gamma(double shape);

  // Beta(a, b) as the usual ratio of two gammas.
  double beta(double a, double b);

  // Fisher-Yates shuffle with our own index draws.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tscan
