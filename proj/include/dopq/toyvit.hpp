#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dopq/quantizers.hpp"
#include "dopq/reparam.hpp"
#include "dopq/tensor.hpp"

namespace dopq {

struct ViTConfig {
  int blocks = 2;
  int tokens = 16;      // N
  int dim = 64;         // D
  int heads = 4;        // h
  int mlp_ratio = 4;
  int classes = 10;
  std::uint64_t seed = 0;

  int head_dim() const { return dim / heads; }
  void validate() const;
};

struct BlockWeights {
  LayerNormAffine ln1, ln2;
  Tensor w_qkv;                 // [D, 3D]
  std::vector<double> b_qkv;    // [3D]
  Tensor w_o;                   // [D, D]
  std::vector<double> b_o;      // [D]
  Tensor w1;                    // [D, r*D]
  std::vector<double> b1;       // [r*D]
  Tensor w2;                    // [r*D, D]
  std::vector<double> b2;       // [D]
};

struct ModelWeights {
  ViTConfig cfg;
  std::vector<BlockWeights> blocks;
  Tensor w_head;                // [D, classes]
  std::vector<double> b_head;   // [classes]
};

// Quantization insertion points of one block. LayerNorm and Softmax
// computations themselves always run at full precision; only matrix-multiply
// operands are quantized.
enum class Site : int {
  kPostLn1 = 0,  // channel-wise activation, feeds the QKV linear
  kWQkv,         // weight
  kQ,            // layer-wise activation
  kK,            // layer-wise activation
  kV,            // layer-wise activation
  kSoftmax,      // attention probabilities, selectable quantizer
  kAttnOut,      // layer-wise activation, feeds the output projection
  kWO,           // weight
  kPostLn2,      // channel-wise activation, feeds the first MLP linear
  kW1,           // weight
  kGelu,         // layer-wise activation, feeds the second MLP linear
  kW2,           // weight
};
inline constexpr int kSiteCount = 12;

bool site_is_weight(Site s);
bool site_is_postln(Site s);
const char* site_name(Site s);

struct BlockPlan {
  std::array<std::optional<Quantizer>, kSiteCount> sites;

  std::optional<Quantizer>& at(Site s) { return sites[static_cast<int>(s)]; }
  const std::optional<Quantizer>& at(Site s) const { return sites[static_cast<int>(s)]; }
};

struct QuantPlan {
  bool weights_enabled = false;
  std::vector<BlockPlan> blocks;

  /// Active quantizer for a site, honoring the weight enable switch.
  const Quantizer* active(int block, Site s) const;
};

/// Receives pre-quantization activation values during a forward pass.
struct SiteObserver {
  virtual ~SiteObserver() = default;
  virtual void observe(int block, Site site, const Tensor& value) = 0;
};

struct ForwardCtx {
  const QuantPlan* plan = nullptr;
  SiteObserver* observer = nullptr;
  int block = 0;
};

/// Per-token normalization over the channel axis (population variance,
/// epsilon 1e-6), then the affine gamma * x + beta.
Tensor layernorm(const Tensor& x, const LayerNormAffine& affine);

/// Max-subtracted softmax over the last axis; rows sum to 1.
Tensor softmax_lastdim(const Tensor& scores);

/// Exact Gaussian-CDF GELU.
Tensor gelu(const Tensor& x);
double gelu_scalar(double x);

/// Multi-head self-attention over a post-LayerNorm input [N, D].
Tensor msa_forward(const Tensor& x, const BlockWeights& w, int heads,
                   const ForwardCtx& ctx = {});

/// GELU MLP over a post-LayerNorm input [N, D].
Tensor mlp_forward(const Tensor& y, const BlockWeights& w, const ForwardCtx& ctx = {});

/// Residual transformer block: x + MSA(LN1(x)), then + MLP(LN2(.)).
Tensor block_forward(const Tensor& x, const BlockWeights& w, int heads,
                     const ForwardCtx& ctx = {});

/// Full encoder plus mean-pool and linear classifier head (the head stays at
/// full precision). Returns [classes] logits.
Tensor model_forward(const Tensor& tokens, const ModelWeights& m,
                     const QuantPlan* plan = nullptr,
                     SiteObserver* observer = nullptr);

std::size_t top1(const Tensor& logits);

/// Synthetic outlier channels for the reparameterization experiments:
/// selected post-LayerNorm channels get gamma scaled by `factor` and beta
/// shifted by `beta_shift` (a shift of 0 reproduces pure gamma scaling).
struct OutlierSpec {
  double factor = 1.0;
  double beta_shift = 0.0;
  int channels_per_site = 0;

  bool active() const { return channels_per_site > 0 && (factor != 1.0 || beta_shift != 0.0); }
  /// factor 50 -> ten of 64 channels scaled x50 and shifted far negative.
  static OutlierSpec standard(double factor, int dim);
};

/// Seeded Gaussian init (std 0.02), LN affine gamma = 1, beta = 0, then the
/// optional outlier injection. Same seed, same weights, bit for bit.
ModelWeights init_weights(const ViTConfig& cfg, const OutlierSpec& outliers = {});

/// Seeded Gaussian token sequences [N, D].
std::vector<Tensor> make_token_corpus(const ViTConfig& cfg, std::size_t count,
                                      std::uint64_t seed);

// DQT1-backed weight serialization: one container per tensor plus a JSON
// manifest mapping tensor names to file paths.
void save_weights(const std::string& dir, const ModelWeights& m);
ModelWeights load_weights(const std::string& dir);

}  // namespace dopq
