#include "ewa/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "ewa/common.hpp"

namespace ewa {

namespace {

// FNV-1a over the label, then one splitmix64 round to spread bits.
uint64_t hash_label(uint64_t master, std::string_view label) {
  uint64_t h = 1469598103934665603ull;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  uint64_t z = master + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

Rng Rng::stream(uint64_t master_seed, std::string_view label) {
  return Rng(hash_label(master_seed, label));
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  check_value(hi > lo, "Rng::uniform: hi must exceed lo");
  return lo + (hi - lo) * uniform();
}

double Rng::normal() {
  // Box-Muller, cosine branch only. Exactly two uniforms per variate so the
  // consumption pattern is independent of call history (no cached spare).
  // 1 - u keeps the log argument in (0, 1].
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::normal(double mean, double stddev) {
  return mean + stddev * normal();
}

int64_t Rng::uniform_int(int64_t n) {
  check_value(n > 0, "uniform_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<int64_t>(x % un);
}

std::vector<int64_t> Rng::permutation(int64_t n) {
  check_value(n >= 0, "permutation: n must be non-negative");
  std::vector<int64_t> p(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
  for (int64_t i = n - 1; i > 0; --i) {
    int64_t j = uniform_int(i + 1);
    std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
  }
  return p;
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << gen_;
  return os.str();
}

void Rng::deserialize(const std::string& state) {
  std::istringstream is(state);
  is >> gen_;
  if (is.fail()) throw ValueError("Rng::deserialize: malformed engine state");
}

}  // namespace ewa
