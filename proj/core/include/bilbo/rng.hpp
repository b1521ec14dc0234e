#pragma once

#include <array>
#include <cstdint>

#include <Eigen/Dense>

#include "bilbo/tensor.hpp"

namespace bilbo {

/// SplitMix64 step; used for seeding and for deriving child seeds.
std::uint64_t splitmix64(std::uint64_t& state);

/// Mixes a base seed with a stream index into an independent seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// xoshiro256** generator (Blackman & Vigna) seeded through SplitMix64.
///
/// Normal variates use the Box-Muller transform with a one-value cache, so the
/// stream is fully determined by the seed on every platform. Standard-library
/// distributions are avoided because their algorithms are implementation
/// defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  Eigen::VectorXd normal_vector(Eigen::Index n);
  Tensor normal_tensor(std::size_t rows, std::size_t cols);

  /// Child generator for an independent purpose (data order, noise, init).
  Rng split(std::uint64_t stream) const { return Rng(derive_seed(seed_, stream)); }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace bilbo
