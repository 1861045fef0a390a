#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dopq/pipeline.hpp"
#include "dopq/quantizers.hpp"
#include "dopq/tensor.hpp"

namespace dopq {

/// Rows of softmax(logits) with logits ~ N(0, sigma^2). High sigma yields the
/// power-law shape: most mass near 0, rare entries near 1.
Tensor make_softmax_rows(std::size_t rows, std::size_t n, double sigma,
                         std::uint64_t seed);

/// Gaussian channels with log-normal per-channel scales; `outlier_channels`
/// leading channels additionally scaled by `outlier_factor`.
Tensor make_postln_channels(std::size_t rows, std::size_t channels,
                            std::uint64_t seed, int outlier_channels = 0,
                            double outlier_factor = 1.0);

struct SweepRow {
  std::string quantizer;
  int bitwidth = 0;
  double mse = 0.0;
  double max_err = 0.0;
  double deciles[10] = {0};
};

/// {UQ, Log2, LogSqrt2, SULQ, TanQ} x bitwidths, each calibrated on the
/// corpus; reports round-trip MSE, max error and the |error| decile profile.
std::vector<SweepRow> sweep_quantizers(const Tensor& corpus,
                                       const std::vector<int>& bitwidths);

std::string sweep_csv(const std::vector<SweepRow>& rows);

struct TanqAblationRow {
  std::string quantizer;
  double agreement = 0.0;
};

struct TanqAblationReport {
  std::uint64_t seed = 0;
  int bits_a = 0;
  std::vector<TanqAblationRow> rows;   // uniform, log2, sulq, tanq + 16-bit control
  double control_agreement = 0.0;      // A16 control row
  bool uq_leq_logq = false;
  bool sulq_geq_logq = false;
  bool tanq_geq_logq = false;
};

/// Post-Softmax quantizer ablation: FP weights, activations at `bits_a`, the
/// post-Softmax site varied across quantizers; top-1 agreement against the FP
/// model after activation-only reconstruction.
TanqAblationReport ablation_tanq(std::uint64_t seed, int bits_a = 3,
                                 const PipelineConfig* base = nullptr);

std::string tanq_ablation_json(const TanqAblationReport& r);

struct MosfAblationEntry {
  double factor = 0.0;
  AbReport ab;
};

struct MosfAblationReport {
  std::uint64_t seed = 0;
  std::vector<MosfAblationEntry> entries;
};

/// Mean-vs-median scaling factor comparison across outlier factors.
MosfAblationReport ablation_mosf(std::uint64_t seed,
                                 const std::vector<double>& factors,
                                 const PipelineConfig* base = nullptr);

std::string mosf_ablation_json(const MosfAblationReport& r);

}  // namespace dopq
