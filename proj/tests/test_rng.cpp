#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "ewa/common.hpp"
#include "ewa/rng.hpp"

using namespace ewa;

TEST_CASE("raw stream matches the standard mt19937_64 sequence") {
  // The standard pins the 10000th output of a default-seeded engine.
  std::mt19937_64 reference;  // default seed 5489
  Rng rng(5489);
  uint64_t last = 0;
  for (int i = 0; i < 10000; ++i) last = rng.next_u64();
  CHECK(last == 9981545732273789042ULL);
  std::mt19937_64 ref(5489);
  Rng again(5489);
  for (int i = 0; i < 100; ++i) CHECK(again.next_u64() == ref());
}

TEST_CASE("uniform maps the top 53 bits into [0,1)") {
  Rng rng(11);
  std::mt19937_64 twin(11);
  for (int i = 0; i < 1000; ++i) {
    double expected = static_cast<double>(twin() >> 11) * 0x1.0p-53;
    double got = rng.uniform();
    CHECK(got == expected);
    CHECK(got >= 0.0);
    CHECK(got < 1.0);
  }
}

TEST_CASE("bounded uniform stays in range and rejects bad ranges") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    double v = rng.uniform(-2.5, 4.0);
    CHECK(v >= -2.5);
    CHECK(v < 4.0);
  }
  CHECK_THROWS_AS(rng.uniform(1.0, 1.0), ValueError);
}

TEST_CASE("normal consumes exactly two uniform draws") {
  Rng a(7), b(7);
  (void)a.normal();
  (void)b.uniform();
  (void)b.uniform();
  CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("normal is the cosine Box-Muller transform of two uniforms") {
  Rng a(19), b(19);
  double u1 = 1.0 - b.uniform();  // in (0,1], keeps the log finite
  double u2 = b.uniform();
  double expected = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  CHECK(a.normal() == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("normal moments look standard over many draws") {
  Rng rng(23);
  const int n = 100000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    sum += z;
    sum2 += z * z;
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.02);
  Rng shifted(23);
  Rng base(23);
  CHECK(shifted.normal(3.0, 0.5) == doctest::Approx(3.0 + 0.5 * base.normal()).epsilon(1e-15));
}

TEST_CASE("uniform_int covers [0,n) evenly") {
  Rng rng(31);
  CHECK_THROWS_AS(rng.uniform_int(0), ValueError);
  for (int i = 0; i < 50; ++i) CHECK(rng.uniform_int(1) == 0);
  const int64_t n = 6, draws = 60000;
  std::vector<int64_t> counts(n, 0);
  for (int64_t i = 0; i < draws; ++i) {
    int64_t v = rng.uniform_int(n);
    REQUIRE(v >= 0);
    REQUIRE(v < n);
    ++counts[static_cast<size_t>(v)];
  }
  // 5 sigma around draws/6 with sigma = sqrt(draws * p * (1-p))
  double sigma = std::sqrt(static_cast<double>(draws) * (1.0 / 6.0) * (5.0 / 6.0));
  for (int64_t c : counts) CHECK(std::abs(static_cast<double>(c) - 10000.0) < 5.0 * sigma);
}

TEST_CASE("permutation is a permutation and is seed-deterministic") {
  Rng rng(5);
  CHECK(rng.permutation(0).empty());
  CHECK(rng.permutation(1) == std::vector<int64_t>{0});
  std::vector<int64_t> p = rng.permutation(100);
  std::set<int64_t> seen(p.begin(), p.end());
  CHECK(seen.size() == 100);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 99);

  Rng r1(77), r2(77);
  CHECK(r1.permutation(50) == r2.permutation(50));
  Rng r3(78);
  CHECK(r1.permutation(50) != r3.permutation(50));
}

TEST_CASE("labeled streams are independent and reproducible") {
  Rng a1 = Rng::stream(42, "data");
  Rng a2 = Rng::stream(42, "data");
  Rng b = Rng::stream(42, "model");
  Rng c = Rng::stream(43, "data");
  CHECK(a1 == a2);
  CHECK(a1.next_u64() == a2.next_u64());
  CHECK(Rng::stream(42, "data").next_u64() != b.next_u64());
  CHECK(Rng::stream(42, "data").next_u64() != c.next_u64());
}

TEST_CASE("serialize round-trips mid-sequence state") {
  Rng rng(4242);
  for (int i = 0; i < 137; ++i) (void)rng.normal();
  std::string state = rng.serialize();

  Rng restored(1);
  restored.deserialize(state);
  CHECK(restored == rng);
  for (int i = 0; i < 100; ++i) CHECK(restored.next_u64() == rng.next_u64());
  CHECK_THROWS_AS(restored.deserialize("not a state"), ValueError);
}
