#include <catch2/catch_amalgamated.hpp>

#include <rct/rng.hpp>

#include <algorithm>
#include <numeric>
#include <set>
#include <vector>

using rct::Rng;

TEST_CASE("same seed reproduces the same stream", "[rng]") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(a.next_u64() == b.next_u64());
  }
}

TEST_CASE("different seeds give different streams", "[rng]") {
  Rng a(1), b(2);
  int differ = 0;
  for (int i = 0; i < 64; ++i) {
    if (a.next_u64() != b.next_u64()) ++differ;
  }
  REQUIRE(differ > 60);
}

TEST_CASE("named substreams are independent and stable", "[rng]") {
  Rng a = Rng::substream(99, "augment");
  Rng b = Rng::substream(99, "augment");
  Rng c = Rng::substream(99, "batch-order");
  REQUIRE(a.next_u64() == b.next_u64());
  REQUIRE(a.next_u64() != c.next_u64());
}

TEST_CASE("uniform stays in [0,1) and covers the range", "[rng]") {
  Rng rng(7);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  REQUIRE(lo < 0.01);
  REQUIRE(hi > 0.99);
}

TEST_CASE("uniform_int is inclusive on both ends", "[rng]") {
  Rng rng(21);
  std::set<int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const int64_t v = rng.uniform_int(1, 9);
    REQUIRE(v >= 1);
    REQUIRE(v <= 9);
    seen.insert(v);
  }
  REQUIRE(seen.size() == 9);  // all magnitudes 1..9 occur
}

TEST_CASE("uniform_int handles a single-point range", "[rng]") {
  Rng rng(3);
  for (int i = 0; i < 10; ++i) REQUIRE(rng.uniform_int(5, 5) == 5);
}

TEST_CASE("normal has roughly standard moments", "[rng]") {
  Rng rng(11);
  const int n = 50000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sum_sq += x * x;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  REQUIRE(std::abs(mean) < 0.02);
  REQUIRE(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("shuffle is a permutation and is seed-stable", "[rng]") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  std::vector<int> w = v;
  Rng a(5), b(5);
  a.shuffle(v);
  b.shuffle(w);
  REQUIRE(v == w);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expect(50);
  std::iota(expect.begin(), expect.end(), 0);
  REQUIRE(sorted == expect);
  REQUIRE(v != expect);  // 50 elements virtually never shuffle to identity
}
