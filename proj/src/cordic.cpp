#include "dopq/cordic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dopq/error.hpp"

namespace dopq {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;
constexpr double kBranchGuard = 0.01;

struct Vec {
  std::int64_t x;
  std::int64_t y;
};

// Rotation mode: rotate (x0, 0) by `angle` (fixed point). Returns the raw
// rotated vector; the CORDIC gain K cancels in the y/x ratio.
Vec rotate(std::int64_t angle, const CordicConfig& cfg) {
  std::int64_t x = std::int64_t{1} << cfg.fraction_bits;
  std::int64_t y = 0;
  std::int64_t z = angle;
  for (int i = 0; i < cfg.iterations; ++i) {
    const std::int64_t dx = y >> i;
    const std::int64_t dy = x >> i;
    if (z >= 0) {
      x -= dx;
      y += dy;
      z -= cfg.atan_table[i];
    } else {
      x += dx;
      y -= dy;
      z += cfg.atan_table[i];
    }
  }
  return {x, y};
}

// Vectoring mode: drive y to zero from (x0, y0), accumulating the rotation
// angle in z. Requires x0 > 0.
std::int64_t vector_angle(std::int64_t x0, std::int64_t y0, const CordicConfig& cfg) {
  std::int64_t x = x0;
  std::int64_t y = y0;
  std::int64_t z = 0;
  for (int i = 0; i < cfg.iterations; ++i) {
    const std::int64_t dx = y >> i;
    const std::int64_t dy = x >> i;
    if (y >= 0) {
      x += dx;
      y -= dy;
      z += cfg.atan_table[i];
    } else {
      x -= dx;
      y += dy;
      z -= cfg.atan_table[i];
    }
  }
  return z;
}

// Unguarded tangent on [0, pi/2): used by the quantizer path where the
// feasibility constraints keep angles strictly interior but possibly inside
// the public guard band. Accuracy degrades as (1 + tan^2) near the pole.
double tan_core(double theta, const CordicConfig& cfg) {
  const Vec v = rotate(cfg.to_fixed(theta), cfg);
  if (v.x == 0) return v.y >= 0 ? 1e18 : -1e18;
  return static_cast<double>(v.y) / static_cast<double>(v.x);
}

double arctan_core(double y, const CordicConfig& cfg) {
  // |y| <= 8 here; the vector fits the 64-bit Q-format with headroom.
  const std::int64_t one = std::int64_t{1} << cfg.fraction_bits;
  const std::int64_t angle = vector_angle(one, cfg.to_fixed(y), cfg);
  return cfg.to_double(angle);
}

}  // namespace

CordicConfig CordicConfig::make(int iterations, int fraction_bits) {
  if (iterations < 8 || iterations > 48)
    throw ConfigError("cordic: iterations must lie in [8, 48]");
  if (fraction_bits < 16 || fraction_bits > 40)
    throw ConfigError("cordic: fraction_bits must lie in [16, 40]");
  CordicConfig cfg;
  cfg.iterations = iterations;
  cfg.fraction_bits = fraction_bits;
  cfg.atan_table.resize(iterations);
  for (int i = 0; i < iterations; ++i)
    cfg.atan_table[i] = cfg.to_fixed(std::atan(std::ldexp(1.0, -i)));
  return cfg;
}

std::int64_t CordicConfig::to_fixed(double v) const {
  return std::llround(std::ldexp(v, fraction_bits));
}

double CordicConfig::to_double(std::int64_t v) const {
  return std::ldexp(static_cast<double>(v), -fraction_bits);
}

double cordic_tan(double theta, const CordicConfig& cfg) {
  if (!(std::abs(theta) < kHalfPi - kBranchGuard))
    throw DomainError("cordic_tan: angle outside the guarded principal branch");
  if (theta == 0.0) return 0.0;
  const double mag = tan_core(std::abs(theta), cfg);
  return theta < 0.0 ? -mag : mag;
}

double cordic_arctan(double y, const CordicConfig& cfg) {
  if (!std::isfinite(y)) throw DomainError("cordic_arctan: non-finite input");
  if (y == 0.0) return 0.0;
  const double ay = std::abs(y);
  double mag;
  if (ay <= 8.0) {
    mag = arctan_core(ay, cfg);
  } else {
    mag = kHalfPi - arctan_core(1.0 / ay, cfg);
  }
  return y < 0.0 ? -mag : mag;
}

IntTensor tanq_quant_cordic(const Tensor& x, const TanParams& tp,
                            const CordicConfig& cfg, std::uint64_t* clamped) {
  if (!tanq_feasible(tp.curvature, tp.focus))
    throw ConfigError("tanq_quant_cordic: parameters violate the feasibility constraints");
  tp.inner.validate();
  IntTensor out(x.shape());
  const std::int32_t qmax = tp.inner.qmax();
  const double inv_s = 1.0 / tp.inner.scale[0];
  const std::int32_t z = tp.inner.zero_point[0];
  std::uint64_t clamp_count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = x[i];
    if (v < 0.0 || v > 1.0) {
      v = std::clamp(v, 0.0, 1.0);
      ++clamp_count;
    }
    const double theta = tp.curvature * (v - tp.focus);
    const double mag = tan_core(std::abs(theta), cfg);
    const double t = theta < 0.0 ? -mag : mag;
    const double code = round_half_even(t * inv_s) + static_cast<double>(z);
    out.data[i] = code < 0.0 ? 0
                 : code > static_cast<double>(qmax)
                     ? qmax
                     : static_cast<std::int32_t>(code);
  }
  if (clamped) *clamped += clamp_count;
  return out;
}

}  // namespace dopq
