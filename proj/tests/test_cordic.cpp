#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "dopq/cordic.hpp"
#include "dopq/rng.hpp"

using namespace dopq;

namespace {
constexpr double kPi = std::numbers::pi;
}

TEST_CASE("cordic config bounds") {
  CHECK_THROWS_AS(CordicConfig::make(4, 32), ConfigError);
  CHECK_THROWS_AS(CordicConfig::make(60, 32), ConfigError);
  CHECK_THROWS_AS(CordicConfig::make(30, 8), ConfigError);
  CHECK_THROWS_AS(CordicConfig::make(30, 48), ConfigError);
}

TEST_CASE("cordic_tan base points") {
  const CordicConfig cfg = CordicConfig::make(30, 32);
  CHECK(cordic_tan(0.0, cfg) == 0.0);
  CHECK(std::abs(cordic_tan(kPi / 4, cfg) - 1.0) <= 1e-6);
  CHECK(std::abs(cordic_tan(0.5, cfg) - std::tan(0.5)) <=
        std::ldexp(1.0, 4 - 30) * (1.0 + std::tan(0.5) * std::tan(0.5)));
}

TEST_CASE("cordic_tan respects the stated error bound across the branch") {
  const CordicConfig cfg = CordicConfig::make(30, 32);
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const double theta = rng.uniform(-(kPi / 2 - 0.0101), kPi / 2 - 0.0101);
    const double t = std::tan(theta);
    const double bound = std::ldexp(1.0, 4 - cfg.iterations) * (1.0 + t * t);
    CHECK(std::abs(cordic_tan(theta, cfg) - t) <= bound);
  }
}

TEST_CASE("cordic_tan rejects angles outside the guard band") {
  const CordicConfig cfg = CordicConfig::make(30, 32);
  CHECK_THROWS_AS(cordic_tan(kPi / 2 - 0.005, cfg), DomainError);
  CHECK_THROWS_AS(cordic_tan(-kPi / 2, cfg), DomainError);
  CHECK_THROWS_AS(cordic_tan(2.0, cfg), DomainError);
}

TEST_CASE("cordic_arctan base points and symmetry") {
  const CordicConfig cfg = CordicConfig::make(30, 32);
  CHECK(cordic_arctan(0.0, cfg) == 0.0);
  CHECK(std::abs(cordic_arctan(1.0, cfg) - kPi / 4) <= 1e-6);
  CHECK(cordic_arctan(-1.0, cfg) == -cordic_arctan(1.0, cfg));
}

TEST_CASE("cordic_arctan error bound for |y| <= 8 and large-input reduction") {
  const CordicConfig cfg = CordicConfig::make(30, 32);
  Rng rng(7);
  const double bound = std::ldexp(1.0, 2 - cfg.iterations);
  for (int i = 0; i < 2000; ++i) {
    const double y = rng.uniform(-8, 8);
    CHECK(std::abs(cordic_arctan(y, cfg) - std::atan(y)) <= bound);
  }
  for (int i = 0; i < 500; ++i) {
    const double y = rng.uniform(8, 5000) * (rng.below(2) ? 1.0 : -1.0);
    CHECK(std::abs(cordic_arctan(y, cfg) - std::atan(y)) <= 1e-6);
  }
}

TEST_CASE("odd symmetry is bit exact") {
  const CordicConfig cfg = CordicConfig::make(28, 32);
  Rng rng(9);
  for (int i = 0; i < 500; ++i) {
    const double theta = rng.uniform(0.0, kPi / 2 - 0.02);
    CHECK(cordic_tan(-theta, cfg) == -cordic_tan(theta, cfg));
    const double y = rng.uniform(0.0, 50.0);
    CHECK(cordic_arctan(-y, cfg) == -cordic_arctan(y, cfg));
  }
}

TEST_CASE("error shrinks monotonically with iterations") {
  Rng rng(11);
  std::vector<double> thetas(64);
  for (double& t : thetas) t = rng.uniform(-1.2, 1.2);
  std::vector<double> ys(64);
  for (double& y : ys) y = rng.uniform(-6, 6);

  double prev_tan = 1e300, prev_atan = 1e300;
  for (int iters = 12; iters <= 30; ++iters) {
    const CordicConfig cfg = CordicConfig::make(iters, 32);
    double worst_tan = 0, worst_atan = 0;
    for (double t : thetas)
      worst_tan = std::max(worst_tan, std::abs(cordic_tan(t, cfg) - std::tan(t)));
    for (double y : ys)
      worst_atan = std::max(worst_atan, std::abs(cordic_arctan(y, cfg) - std::atan(y)));
    const double ulp = std::ldexp(1.0, -cfg.fraction_bits);
    CHECK(worst_tan <= prev_tan + ulp);
    CHECK(worst_atan <= prev_atan + ulp);
    prev_tan = worst_tan;
    prev_atan = worst_atan;
  }
}

TEST_CASE("the arctan table is the kernel's only transcendental input") {
  const CordicConfig cfg = CordicConfig::make(24, 32);
  // A config with the same table reproduces outputs bit for bit; perturbing
  // one table entry changes them.
  CordicConfig same = cfg;
  CordicConfig bent = cfg;
  bent.atan_table[3] += 1 << 8;
  Rng rng(13);
  bool any_diff = false;
  for (int i = 0; i < 200; ++i) {
    const double theta = rng.uniform(-1.3, 1.3);
    CHECK(cordic_tan(theta, same) == cordic_tan(theta, cfg));
    if (cordic_tan(theta, bent) != cordic_tan(theta, cfg)) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("tanq codes via cordic agree with the reference path") {
  const CordicConfig cfg = CordicConfig::make(30, 32);
  const TanParams tp = tanq_params_for_domain(1.2, 0.6, 4);

  // Focus input maps to the zero point exactly.
  Tensor focus({1}, {0.6});
  CHECK(tanq_quant_cordic(focus, tp, cfg).data[0] == tp.inner.zero_point[0]);

  // Softmax-shaped corpus: overwhelming agreement at 30 iterations.
  Rng rng(15);
  const std::size_t n = 100000;
  Tensor x({n});
  for (std::size_t i = 0; i < n; ++i) x[i] = std::pow(rng.uniform(0, 1), 6.0);
  const IntTensor ref = tanq_quant(x, tp);
  const IntTensor via = tanq_quant_cordic(x, tp, cfg);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ref.data[i] == via.data[i]) ++agree;
    else CHECK(std::abs(ref.data[i] - via.data[i]) <= 1);
  }
  CHECK(static_cast<double>(agree) / static_cast<double>(n) >= 0.999);
}

TEST_CASE("low-precision agreement degrades but stays sane (reported)") {
  const CordicConfig lo = CordicConfig::make(8, 16);
  const TanParams tp = tanq_params_for_domain(1.2, 0.6, 4);
  Rng rng(17);
  const std::size_t n = 10000;
  Tensor x({n});
  for (std::size_t i = 0; i < n; ++i) x[i] = rng.uniform(0, 1);
  const IntTensor ref = tanq_quant(x, tp);
  const IntTensor via = tanq_quant_cordic(x, tp, lo);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (ref.data[i] == via.data[i]) ++agree;
  const double rate = static_cast<double>(agree) / static_cast<double>(n);
  MESSAGE("8-iteration agreement rate: " << rate);
  CHECK(rate > 0.5);  // degraded, not broken
}
