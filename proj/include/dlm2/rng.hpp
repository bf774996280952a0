#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace dlm2 {

// Mixes a base seed with stream coordinates (epoch, index, role, ...) so that
// each worker gets an independent, reproducible stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

// Distribution code is written out by hand: the std:: distributions are not
// guaranteed to produce the same sequence across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double normal();
  std::size_t index(std::size_t n);
  // Draws from an unnormalized nonnegative weight vector.
  std::size_t categorical(std::span<const double> weights);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dlm2
