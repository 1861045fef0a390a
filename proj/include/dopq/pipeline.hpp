#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dopq/quantizers.hpp"
#include "dopq/reparam.hpp"
#include "dopq/tensor.hpp"
#include "dopq/toyvit.hpp"

namespace dopq {

inline constexpr const char* kVersion = "dopq-v0.1.0";

/// 0 -> DOPQ_THREADS env var, else hardware concurrency (capped at 8).
int resolve_threads(int requested);

/// Index-parallel loop; results must be written per index so the outcome is
/// independent of scheduling. Runs serially when threads <= 1.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

/// Per-site calibration statistics kept alongside the plan so scales can be
/// retuned later (zero points are recomputed from the stored minima).
/// Reparameterized sites freeze their zero point instead: z~ is absorbed
/// into the successor weights and bias, so it is structural, not a window
/// anchor.
struct SiteStats {
  std::vector<double> min;
  std::vector<double> max;
  std::vector<double> sample;  // post-Softmax sites only
  bool freeze_zero = false;
};

struct ReconConfig {
  int passes = 4;
  int grid_points = 33;         // multiplicative grid per parameter
  double factor_lo = 0.5;
  double factor_hi = 2.0;
  bool refine = true;           // one finer pass around the coarse argmin
  std::size_t max_sequences = 16;  // reconstruction batch, drawn from the calibration set
};

enum class ScaleSelect { kMedian, kMean };

struct PipelineConfig {
  ViTConfig model;
  int bits_w = 4;
  int bits_a = 4;
  QuantKind softmax_quantizer = QuantKind::kTan;
  std::size_t calib_sequences = 256;
  std::size_t eval_sequences = 512;
  std::uint64_t data_seed = 1;
  ScaleSelect select = ScaleSelect::kMedian;
  bool recalibrate_after_reparam = false;  // deployment-style refresh of (s~, z~)
  bool stage3_tune_activations = true;
  bool quantized_input_recon = false;      // feed quantized predecessor outputs as m
  ReconConfig recon;
  OutlierSpec outliers;
  int threads = 0;
};

/// Paired full-precision/quantized block closures sharing the input batch m.
struct BlockRecord {
  int index = 0;
  int heads = 1;
  std::vector<Tensor> inputs;       // m, drawn from the calibration set
  std::vector<Tensor> fp_outputs;   // g_f(m)
  const BlockWeights* weights = nullptr;
  const QuantPlan* plan = nullptr;  // g_q = forward(weights, plan)
};

/// sqrt(mean((g_f(m) - g_q(m))^2)): Euclidean gap normalized by element
/// count, invariant under batch duplication.
double block_loss(const BlockRecord& rec);

struct Calibration {
  QuantPlan plan;
  std::vector<std::array<SiteStats, kSiteCount>> stats;  // [block][site]
};

/// FP forward passes over the corpus, per-site statistics, quantizer fitting
/// (weights channel-wise UQ, activations layer-wise UQ, post-LN channel-wise
/// UQ, post-Softmax per `softmax_quantizer` with TanQ grid search per site).
/// Weight-site params are fitted but start disabled.
Calibration calibrate_model(const ModelWeights& m, const std::vector<Tensor>& corpus,
                            const PipelineConfig& cfg);

struct ReconResult {
  std::vector<double> trace;  // trace[0] = initial loss, then one point per coordinate step
};

/// Greedy coordinate descent over the in-scope parameters of one block:
/// per-site scale factors (and TanQ curvature/focus), optionally weight
/// scale factors. The accepted-loss trace is nonincreasing.
ReconResult reconstruct_block(BlockRecord& rec, QuantPlan& plan,
                              std::array<SiteStats, kSiteCount>& stats,
                              const ReconConfig& rcfg, bool tune_weights,
                              bool tune_activations, int threads);

struct StageTrace {
  int block = 0;
  std::vector<double> trace;
};

struct MadTable {
  int block = 0;
  std::string site;
  std::vector<MadRow> rows;
  double s_tilde = 0.0;
  std::int32_t z_tilde = 0;
  // The channel-wise factors the bundle was built from, kept for audit:
  // r1 = channel_scale / s_tilde, r2 = channel_zero - z_tilde.
  std::vector<double> channel_scale;
  std::vector<std::int32_t> channel_zero;
};

struct ReparamCheck {
  int block = 0;
  std::string site;
  bool codes_identical = false;
  double code_agreement = 0.0;
  double fp_out_max_rel_delta = 0.0;
  double quant_out_max_rel_delta = 0.0;
  double block_out_max_rel_delta = 0.0;  // whole-block quantized output, pre vs post
};

struct RunReport {
  std::string version = kVersion;
  int bits_w = 0, bits_a = 0;
  std::string softmax_quantizer;
  std::string select;
  std::uint64_t model_seed = 0, data_seed = 0;
  double outlier_factor = 1.0;
  double outlier_beta_shift = 0.0;
  int outlier_channels = 0;
  bool recalibrate_after_reparam = false;
  bool stage3_tune_activations = true;
  bool quantized_input_recon = false;
  std::size_t calib_sequences = 0, eval_sequences = 0;

  std::vector<StageTrace> stage1;
  std::vector<StageTrace> stage3;
  std::vector<MadTable> mad_tables;
  std::vector<ReparamCheck> reparam_checks;

  std::vector<double> block_mse;  // held-out, per block, FP inputs
  double block_mse_total = 0.0;
  double top1_agreement = 0.0;
};

std::string run_report_json(const RunReport& r);
std::string blocks_csv(const RunReport& r);
std::string mad_tables_csv(const RunReport& r);

/// Lossless text form of a full plan (per block, per site).
std::string quant_plan_json(const QuantPlan& plan);
QuantPlan quant_plan_from_json(const std::string& text);

/// Three-stage orchestration: quantize + reconstruct activations, MOSF (or
/// mean) reparameterization of every post-LN site, quantize + reconstruct
/// weights, then held-out evaluation against the unmodified FP model.
RunReport run_dopq(const ModelWeights& model, const std::vector<Tensor>& corpus,
                   const PipelineConfig& cfg);

struct AbReport {
  RunReport median_run;
  RunReport mean_run;
  bool median_leq_mean = false;
};

/// The identical pipeline twice, forked after stage 1 so the two runs differ
/// only in the scaling-factor selector.
AbReport ab_compare_scaling(const ModelWeights& model, const std::vector<Tensor>& corpus,
                            PipelineConfig cfg);

std::string ab_report_json(const AbReport& r);

}  // namespace dopq
