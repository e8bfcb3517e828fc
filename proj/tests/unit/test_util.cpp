#include <doctest.h>

#include <cmath>
#include <cstring>

#include "tofcal/util.hpp"

using namespace tofcal;

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(42, 3, 7), b(42, 3, 7), c(42, 3, 8);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  bool differs = false;
  Rng a2(42, 3, 7);
  for (int i = 0; i < 100; ++i) {
    if (a2.next_u64() != c.next_u64()) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("normal draws have roughly correct moments") {
  Rng rng(7);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  const double m = s / n;
  const double var = s2 / n - m * m;
  CHECK(std::abs(m) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("exponential mean") {
  Rng rng(9);
  double s = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) s += rng.exponential(12.0);
  CHECK(s / n == doctest::Approx(12.0).epsilon(0.02));
}

TEST_CASE("hex double round trip is bit exact") {
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    double v = rng.normal(0, 1e6);
    if (i % 7 == 0) v = -v;
    if (i % 13 == 0) v *= 1e-300;
    const double back = parse_hex_double(hex_double(v));
    CHECK(std::memcmp(&v, &back, sizeof v) == 0);
  }
  for (double v : {0.0, -0.0, 1.0, -1.0, 1e308, 5e-324}) {
    const double back = parse_hex_double(hex_double(v));
    CHECK(std::memcmp(&v, &back, sizeof v) == 0);
  }
}

TEST_CASE("spearman detects monotone relation") {
  std::vector<double> a, b, c;
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const double x = rng.uniform();
    a.push_back(x);
    b.push_back(x * x * 3 + 1);  // monotone
    c.push_back(rng.uniform());
  }
  CHECK(spearman(a, b) == doctest::Approx(1.0));
  CHECK(std::abs(spearman(a, c)) < 0.15);
}

TEST_CASE("quantile of sorted data") {
  std::vector<double> v{1, 2, 3, 4, 5};
  CHECK(quantile_sorted(v, 0.0) == 1);
  CHECK(quantile_sorted(v, 1.0) == 5);
  CHECK(quantile_sorted(v, 0.5) == 3);
}
