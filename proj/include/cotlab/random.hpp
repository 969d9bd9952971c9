#pragma once

#include <cstdint>
#include <random>

namespace cotlab {

/// Deterministic 64-bit engine with a portable uniform draw.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform();
  std::uint64_t below(std::uint64_t n);
  double normal();
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace cotlab
