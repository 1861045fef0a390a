#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dopq/tensor.hpp"

namespace dopq {

enum class Granularity { kLayer, kChannel };

/// Affine quantizer parameters: code = clamp(round(x/s) + z, 0, 2^b - 1).
/// Layer-wise params hold one (s, z); channel-wise params hold one pair per
/// index along `axis`.
struct QuantParams {
  int bitwidth = 8;
  Granularity granularity = Granularity::kLayer;
  std::size_t axis = 0;
  std::vector<double> scale{1.0};
  std::vector<std::int32_t> zero_point{0};

  std::int32_t qmax() const { return (std::int32_t{1} << bitwidth) - 1; }
  std::size_t channels() const { return scale.size(); }
  void validate() const;
};

enum class LogBase { kTwo, kSqrtTwo };

/// Logarithmic quantizer: code = clamp(round(-log_base(x/s)), 0, 2^b - 1).
struct LogParams {
  LogBase base = LogBase::kTwo;
  double scale = 1.0;
  int bitwidth = 8;
};

/// Shift-uniform-log2: uniform quantization of -log2(x + eta).
struct SulqParams {
  double eta = 0.5;
  QuantParams inner;
};

/// Tan quantizer: uniform grid over t = tan(a * (x - b_focus)), x in [0, 1].
/// Feasibility (principal-branch containment) requires
///   b_focus + pi/(2a) > 1  and  b_focus - pi/(2a) < 0,  a > 0, 0 < b_focus < 1.
struct TanParams {
  double curvature = 1.0;   // a
  double focus = 0.5;       // b_focus
  QuantParams inner;
};

bool tanq_feasible(double curvature, double focus);

// -- uniform ------------------------------------------------------------------

/// Min/max calibration. Degenerate range (max == min) yields s = 1 and
/// z = clamp(round(-min), 0, 2^b - 1) so constants in [0, 2^b - 1] survive a
/// round trip exactly.
QuantParams uq_calibrate(const Tensor& x, int bits, Granularity g,
                         std::size_t axis = 0);
QuantParams uq_calibrate_minmax(double mn, double mx, int bits);
QuantParams uq_calibrate_minmax(const std::vector<double>& mn,
                                const std::vector<double>& mx, int bits,
                                std::size_t axis);
IntTensor uq_quant(const Tensor& x, const QuantParams& p);
Tensor uq_dequant(const IntTensor& q, const QuantParams& p);

// -- log ----------------------------------------------------------------------

/// Scale defaults to max(x) of the calibration corpus so the largest value
/// receives code 0. Inputs at or below kLogFloor map to the top code.
inline constexpr double kLogFloor = 1e-10;
LogParams log_calibrate(const Tensor& x, int bits, LogBase base = LogBase::kTwo);
IntTensor log_quant(const Tensor& x, const LogParams& p);
Tensor log_dequant(const IntTensor& q, const LogParams& p);

// -- sulq ---------------------------------------------------------------------

/// eta picked from {2^-k : k = 1..14} by corpus-MSE search; inner params are
/// min/max calibrated on the transformed corpus per candidate.
SulqParams sulq_calibrate(const Tensor& x, int bits);
SulqParams sulq_calibrate_fixed_eta(const Tensor& x, int bits, double eta);
IntTensor sulq_quant(const Tensor& x, const SulqParams& p);
Tensor sulq_dequant(const IntTensor& q, const SulqParams& p);

// -- tanq ---------------------------------------------------------------------

/// Inner params from the transform image of the full domain [0, 1].
TanParams tanq_params_for_domain(double curvature, double focus, int bits);
/// Inner params from the transformed calibration corpus.
TanParams tanq_calibrate(const Tensor& x, double curvature, double focus, int bits);

/// Inputs outside [0, 1] are clamped; when `clamped` is non-null it receives
/// the number of clamped elements.
IntTensor tanq_quant(const Tensor& x, const TanParams& tp,
                     std::uint64_t* clamped = nullptr);

/// x_f = arctan(s * (q - z)) / a + b_focus, clamped to [0, 1].
/// `literal_round` applies the rounding written inside the published dequant
/// expression, kept only for comparison; it collapses small codes.
Tensor tanq_dequant(const IntTensor& q, const TanParams& tp,
                    bool literal_round = false);

struct TanSearchGrid {
  std::vector<double> curvature;
  std::vector<double> focus;
  /// 32 log-spaced curvatures in [0.3, 12] x 32 linear focuses in (0, 1).
  static TanSearchGrid standard();
};

/// Exhaustive feasible-grid argmin of round-trip MSE, inner params
/// recalibrated on the corpus per candidate. Ties break toward the smallest
/// curvature, then the smallest focus. Deterministic for any evaluation order.
TanParams tanq_grid_search(const Tensor& x, int bits, const TanSearchGrid& grid,
                           double* best_mse = nullptr);

// -- dispatch -----------------------------------------------------------------

using Quantizer = std::variant<QuantParams, LogParams, SulqParams, TanParams>;

enum class QuantKind { kUniform, kLog2, kLogSqrt2, kSulq, kTan };
std::string quant_kind_name(QuantKind k);
std::optional<QuantKind> quant_kind_from_name(const std::string& name);

IntTensor quantize(const Tensor& x, const Quantizer& q);
Tensor dequantize(const IntTensor& codes, const Quantizer& q);
Tensor fake_quant(const Tensor& x, const Quantizer& q);
int quantizer_bits(const Quantizer& q);

/// Lossless text round trip (JSON keys: kind, bitwidth, granularity, axis,
/// a, b_focus, eta, base, s, z).
std::string quantizer_to_json(const Quantizer& q);
Quantizer quantizer_from_json(const std::string& text);

}  // namespace dopq
