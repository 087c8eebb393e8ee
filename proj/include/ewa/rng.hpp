#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ewa {

// Deterministic random source. One instance per purpose (init, data order,
// forward-time randomness, ...) so consumption in one place cannot shift
// draws elsewhere. State round-trips through a string for checkpointing.
//
// The engine is std::mt19937_64, whose output sequence the standard pins
// down exactly. Uniform and normal variates are derived from the raw 64-bit
// stream by hand because the standard library's distributions are
// implementation-defined and would break cross-toolchain reproducibility.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  // Derives an independent stream from a master seed and a purpose label.
  static Rng stream(uint64_t master_seed, std::string_view label);

  uint64_t next_u64() { return gen_(); }

  // Uniform on [0, 1) with 53 bits of mantissa.
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller; always consumes exactly two uniforms.
  double normal();
  double normal(double mean, double stddev);

  // Uniform integer on [0, n). Rejection sampling, no modulo bias.
  int64_t uniform_int(int64_t n);

  // Fisher-Yates permutation of 0..n-1.
  std::vector<int64_t> permutation(int64_t n);

  std::string serialize() const;
  void deserialize(const std::string& state);

  bool operator==(const Rng& other) const { return gen_ == other.gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace ewa
