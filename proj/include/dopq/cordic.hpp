#pragma once

#include <cstdint>
#include <vector>

#include "dopq/quantizers.hpp"
#include "dopq/tensor.hpp"

namespace dopq {

/// Fixed-point CORDIC kernel configuration. Angles and intermediate vectors
/// live in signed Q-format with `fraction_bits` fractional bits; the
/// arctan(2^-i) table is the kernel's only transcendental input, precomputed
/// at construction. The iteration loop itself is add/sub/shift only.
struct CordicConfig {
  int iterations = 30;
  int fraction_bits = 32;
  std::vector<std::int64_t> atan_table;

  static CordicConfig make(int iterations = 30, int fraction_bits = 32);

  std::int64_t to_fixed(double v) const;
  double to_double(std::int64_t v) const;
};

/// Rotation-mode tangent. `theta` must lie inside the guarded principal
/// branch (|theta| < pi/2 - 0.01); the result satisfies
/// |cordic_tan(theta) - tan(theta)| <= 2^(4 - iterations) * (1 + tan^2 theta).
/// Odd symmetry is bit-exact.
double cordic_tan(double theta, const CordicConfig& cfg);

/// Vectoring-mode arctangent for any finite input. |y| > 8 is reduced via
/// arctan(y) = pi/2 - arctan(1/y). Error <= 2^(2 - iterations) for |y| <= 8.
double cordic_arctan(double y, const CordicConfig& cfg);

/// tanq_quant with the tan transform evaluated by the CORDIC kernel.
IntTensor tanq_quant_cordic(const Tensor& x, const TanParams& tp,
                            const CordicConfig& cfg,
                            std::uint64_t* clamped = nullptr);

}  // namespace dopq
