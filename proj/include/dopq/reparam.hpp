#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dopq/quantizers.hpp"
#include "dopq/tensor.hpp"

namespace dopq {

struct LayerNormAffine {
  std::vector<double> gamma;
  std::vector<double> beta;
};

/// Linear layer acting on row vectors: y = x W + b, W is [D, out].
struct LinearLayer {
  Tensor weight;
  std::vector<double> bias;
};

/// Channel-wise (s, z) paired with the shared layer-wise (s~, z~) and the
/// variation factors r1 = s / s~ (elementwise) and r2 = z - z~. z~ is kept
/// integral so the r2 offsets commute with code rounding.
struct ReparamBundle {
  std::vector<double> scale;        // s, per channel
  std::vector<std::int32_t> zero;   // z, per channel
  double shared_scale = 1.0;        // s~
  std::int32_t shared_zero = 0;     // z~
  std::vector<double> r1;
  std::vector<std::int32_t> r2;

  static ReparamBundle make(std::vector<double> s, std::vector<std::int32_t> z,
                            double shared_scale, std::int32_t shared_zero);
};

/// Median selection for both the scaling factor and the zero point; the
/// median of the integer zero points is rounded half-to-even so z~ stays
/// integral (an even channel count averages two middle values).
std::pair<double, std::int32_t> mosf_select(std::span<const double> s,
                                            std::span<const std::int32_t> z);

/// Arithmetic-mean baseline, z~ rounded to an integer.
std::pair<double, std::int32_t> repq_select(std::span<const double> s,
                                            std::span<const std::int32_t> z);

struct MadRow {
  std::string statistic;
  double value;
  double mad;
};

/// MAD of `s` against mean, median, min, max and a 64-bin histogram-peak
/// mode proxy. The median row is the L1 minimizer (ties permitted).
std::vector<MadRow> score_candidates(std::span<const double> s);

/// Absorbs the variation factors into the LayerNorm affine and the successor
/// linear layer:
///   gamma~ = gamma / r1,  beta~ = (beta + s . r2) / r1
///   W~[i, j] = r1[i] W[i, j],  b~[j] = b[j] - sum_i s[i] r2[i] W[i, j]
std::pair<LayerNormAffine, LinearLayer> reparameterize(const LayerNormAffine& ln,
                                                       const LinearLayer& next,
                                                       const ReparamBundle& bundle);

struct EquivalenceReport {
  double fp_out_max_abs_delta = 0.0;
  double fp_out_max_rel_delta = 0.0;
  double code_agreement = 1.0;          // fraction of identical codes
  double quant_out_max_abs_delta = 0.0;
  double quant_out_max_rel_delta = 0.0;
  std::size_t elements = 0;
};

/// Compares the channel-wise path (original affine, per-channel (s, z)) with
/// the layer-wise path (reparameterized affine, shared (s~, z~)) on a batch
/// of pre-affine normalized inputs `x` [tokens, D]: full-precision output
/// delta, integer code agreement, and dequantized linear-output delta.
EquivalenceReport verify_equivalence(const LayerNormAffine& ln,
                                     const LinearLayer& next,
                                     const ReparamBundle& bundle,
                                     const Tensor& x, int bits);

std::string equivalence_report_to_json(const EquivalenceReport& r);

}  // namespace dopq
