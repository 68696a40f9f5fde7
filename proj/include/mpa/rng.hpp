// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mpa {

// Seedable generator with hand-written distributions, so sampled values do not
// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);
  double normal();
  // Normal(0, stddev^2) rejected outside +/- bound*stddev.
  double truncated_normal(double stddev, double bound);

  std::string state() const;
  void set_state(const std::string& state);

  // Derives an independent seed for a named sub-stream.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
};

}  // namespace mpa
