#include "dopq/toyvit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "dopq/rng.hpp"
#include "json.hpp"

namespace dopq {

namespace {

constexpr double kLnEpsilon = 1e-6;

Tensor fq_site(const Tensor& x, Site site, const ForwardCtx& ctx) {
  if (ctx.observer && !site_is_weight(site)) ctx.observer->observe(ctx.block, site, x);
  if (!ctx.plan) return x;
  const Quantizer* q = ctx.plan->active(ctx.block, site);
  if (!q) return x;
  return fake_quant(x, *q);
}

void add_bias_rows(Tensor& x, const std::vector<double>& bias) {
  const std::size_t n = bias.size();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += bias[i % n];
}

}  // namespace

void ViTConfig::validate() const {
  if (blocks < 1 || tokens < 1 || dim < 2 || heads < 1 || mlp_ratio < 1 || classes < 2)
    throw ConfigError("vit config: dimensions must be positive");
  if (dim % heads != 0) throw ConfigError("vit config: dim must be divisible by heads");
}

bool site_is_weight(Site s) {
  switch (s) {
    case Site::kWQkv:
    case Site::kWO:
    case Site::kW1:
    case Site::kW2:
      return true;
    default:
      return false;
  }
}

bool site_is_postln(Site s) { return s == Site::kPostLn1 || s == Site::kPostLn2; }

const char* site_name(Site s) {
  switch (s) {
    case Site::kPostLn1: return "postln1";
    case Site::kWQkv: return "w_qkv";
    case Site::kQ: return "q";
    case Site::kK: return "k";
    case Site::kV: return "v";
    case Site::kSoftmax: return "softmax";
    case Site::kAttnOut: return "attn_out";
    case Site::kWO: return "w_o";
    case Site::kPostLn2: return "postln2";
    case Site::kW1: return "w1";
    case Site::kGelu: return "gelu";
    case Site::kW2: return "w2";
  }
  return "unknown";
}

const Quantizer* QuantPlan::active(int block, Site s) const {
  if (block < 0 || static_cast<std::size_t>(block) >= blocks.size()) return nullptr;
  if (site_is_weight(s) && !weights_enabled) return nullptr;
  const auto& slot = blocks[static_cast<std::size_t>(block)].at(s);
  return slot ? &*slot : nullptr;
}

Tensor layernorm(const Tensor& x, const LayerNormAffine& affine) {
  if (x.rank() != 2) throw DimensionError("layernorm expects [tokens, D]");
  const std::size_t n = x.rows(), d = x.cols();
  if (affine.gamma.size() != d || affine.beta.size() != d)
    throw DimensionError("layernorm affine length mismatch");
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x.at2(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x.at2(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLnEpsilon);
    for (std::size_t j = 0; j < d; ++j)
      out.at2(i, j) = affine.gamma[j] * ((x.at2(i, j) - mean) * inv) + affine.beta[j];
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& scores) {
  if (scores.rank() < 1) throw DimensionError("softmax expects rank >= 1");
  const std::size_t n = scores.dim(scores.rank() - 1);
  const std::size_t rows = scores.size() / n;
  Tensor out(scores.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = scores.data() + r * n;
    double* dst = out.data() + r * n;
    double mx = src[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, src[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dst[j] = std::exp(src[j] - mx);
      sum += dst[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) dst[j] *= inv;
  }
  return out;
}

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_scalar(x[i]);
  return out;
}

Tensor msa_forward(const Tensor& x, const BlockWeights& w, int heads,
                   const ForwardCtx& ctx) {
  if (x.rank() != 2) throw DimensionError("msa_forward expects [tokens, D]");
  const std::size_t n = x.rows(), d = x.cols();
  if (w.w_qkv.dim(0) != d || w.w_qkv.dim(1) != 3 * d)
    throw DimensionError("msa_forward: qkv weight shape mismatch");
  if (d % static_cast<std::size_t>(heads) != 0)
    throw DimensionError("msa_forward: dim not divisible by heads");
  const std::size_t dh = d / static_cast<std::size_t>(heads);

  const Tensor xq = fq_site(x, Site::kPostLn1, ctx);
  const Tensor wq = fq_site(w.w_qkv, Site::kWQkv, ctx);
  Tensor qkv = matmul(xq, wq);
  add_bias_rows(qkv, w.b_qkv);

  auto slab = [&](std::size_t offset) {
    Tensor s({n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) s.at2(i, j) = qkv.at2(i, offset + j);
    return s;
  };
  const Tensor q = fq_site(slab(0), Site::kQ, ctx);
  const Tensor k = fq_site(slab(d), Site::kK, ctx);
  const Tensor v = fq_site(slab(2 * d), Site::kV, ctx);

  // Attention scores per head, assembled as [heads, N, N] so the
  // post-Softmax site is quantized once per block.
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor scores({static_cast<std::size_t>(heads), n, n});
  for (int h = 0; h < heads; ++h) {
    const std::size_t base = static_cast<std::size_t>(h) * dh;
    double* dst = scores.data() + static_cast<std::size_t>(h) * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t e = 0; e < dh; ++e)
          acc += q.at2(i, base + e) * k.at2(j, base + e);
        dst[i * n + j] = acc * inv_sqrt_dh;
      }
    }
  }
  const Tensor probs = fq_site(softmax_lastdim(scores), Site::kSoftmax, ctx);

  Tensor concat({n, d});
  for (int h = 0; h < heads; ++h) {
    const std::size_t base = static_cast<std::size_t>(h) * dh;
    const double* p = probs.data() + static_cast<std::size_t>(h) * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t e = 0; e < dh; ++e) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += p[i * n + j] * v.at2(j, base + e);
        concat.at2(i, base + e) = acc;
      }
    }
  }

  const Tensor cq = fq_site(concat, Site::kAttnOut, ctx);
  const Tensor wo = fq_site(w.w_o, Site::kWO, ctx);
  Tensor out = matmul(cq, wo);
  add_bias_rows(out, w.b_o);
  return out;
}

Tensor mlp_forward(const Tensor& y, const BlockWeights& w, const ForwardCtx& ctx) {
  if (y.rank() != 2) throw DimensionError("mlp_forward expects [tokens, D]");
  if (w.w1.dim(0) != y.cols()) throw DimensionError("mlp_forward: weight shape mismatch");

  const Tensor yq = fq_site(y, Site::kPostLn2, ctx);
  const Tensor w1 = fq_site(w.w1, Site::kW1, ctx);
  Tensor hidden = matmul(yq, w1);
  add_bias_rows(hidden, w.b1);
  hidden = gelu(hidden);

  const Tensor hq = fq_site(hidden, Site::kGelu, ctx);
  const Tensor w2 = fq_site(w.w2, Site::kW2, ctx);
  Tensor out = matmul(hq, w2);
  add_bias_rows(out, w.b2);
  return out;
}

Tensor block_forward(const Tensor& x, const BlockWeights& w, int heads,
                     const ForwardCtx& ctx) {
  const Tensor msa = msa_forward(layernorm(x, w.ln1), w, heads, ctx);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + msa[i];

  const Tensor mlp = mlp_forward(layernorm(y, w.ln2), w, ctx);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = y[i] + mlp[i];
  return out;
}

Tensor model_forward(const Tensor& tokens, const ModelWeights& m,
                     const QuantPlan* plan, SiteObserver* observer) {
  Tensor x = tokens;
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    ForwardCtx ctx;
    ctx.plan = plan;
    ctx.observer = observer;
    ctx.block = static_cast<int>(l);
    x = block_forward(x, m.blocks[l], m.cfg.heads, ctx);
  }
  // Mean pool over tokens, then the full-precision classifier head.
  const std::size_t n = x.rows(), d = x.cols();
  Tensor pooled({1, d});
  for (std::size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x.at2(i, j);
    pooled.at2(0, j) = acc / static_cast<double>(n);
  }
  Tensor logits = matmul(pooled, m.w_head);
  add_bias_rows(logits, m.b_head);
  return Tensor({static_cast<std::size_t>(m.cfg.classes)},
                std::vector<double>(logits.buffer()));
}

std::size_t top1(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

OutlierSpec OutlierSpec::standard(double factor, int dim) {
  OutlierSpec spec;
  spec.factor = factor;
  spec.beta_shift = -4.0 * (factor - 1.0);
  spec.channels_per_site = std::max(1, dim / 6);
  if (factor == 1.0) spec.channels_per_site = 0;
  return spec;
}

namespace {

Tensor gaussian_tensor(Rng& rng, std::vector<std::size_t> shape, double std_dev) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian() * std_dev;
  return t;
}

std::vector<double> gaussian_vector(Rng& rng, std::size_t n, double std_dev) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.gaussian() * std_dev;
  return v;
}

void inject_outliers(LayerNormAffine& ln, const OutlierSpec& spec, Rng& rng) {
  const std::size_t d = ln.gamma.size();
  std::vector<std::size_t> channels(d);
  for (std::size_t i = 0; i < d; ++i) channels[i] = i;
  // Deterministic partial Fisher-Yates pick of distinct channels.
  const std::size_t k = std::min<std::size_t>(spec.channels_per_site, d);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(d - i);
    std::swap(channels[i], channels[j]);
  }
  for (std::size_t i = 0; i < k; ++i) {
    ln.gamma[channels[i]] *= spec.factor;
    ln.beta[channels[i]] += spec.beta_shift;
  }
}

}  // namespace

ModelWeights init_weights(const ViTConfig& cfg, const OutlierSpec& outliers) {
  cfg.validate();
  const std::size_t d = static_cast<std::size_t>(cfg.dim);
  const std::size_t hidden = d * static_cast<std::size_t>(cfg.mlp_ratio);
  constexpr double kStd = 0.02;

  Rng rng(cfg.seed);
  ModelWeights m;
  m.cfg = cfg;
  m.blocks.resize(cfg.blocks);
  for (auto& b : m.blocks) {
    b.ln1.gamma.assign(d, 1.0);
    b.ln1.beta.assign(d, 0.0);
    b.ln2.gamma.assign(d, 1.0);
    b.ln2.beta.assign(d, 0.0);
    b.w_qkv = gaussian_tensor(rng, {d, 3 * d}, kStd);
    b.b_qkv = gaussian_vector(rng, 3 * d, kStd);
    b.w_o = gaussian_tensor(rng, {d, d}, kStd);
    b.b_o = gaussian_vector(rng, d, kStd);
    b.w1 = gaussian_tensor(rng, {d, hidden}, kStd);
    b.b1 = gaussian_vector(rng, hidden, kStd);
    b.w2 = gaussian_tensor(rng, {hidden, d}, kStd);
    b.b2 = gaussian_vector(rng, d, kStd);
  }
  m.w_head = gaussian_tensor(rng, {d, static_cast<std::size_t>(cfg.classes)}, kStd);
  m.b_head = gaussian_vector(rng, static_cast<std::size_t>(cfg.classes), kStd);

  if (outliers.active()) {
    Rng pick(cfg.seed ^ 0x6f75746c69657273ULL);  // independent stream
    for (auto& b : m.blocks) {
      inject_outliers(b.ln1, outliers, pick);
      inject_outliers(b.ln2, outliers, pick);
    }
  }
  return m;
}

std::vector<Tensor> make_token_corpus(const ViTConfig& cfg, std::size_t count,
                                      std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> corpus;
  corpus.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    corpus.push_back(gaussian_tensor(
        rng, {static_cast<std::size_t>(cfg.tokens), static_cast<std::size_t>(cfg.dim)},
        1.0));
  return corpus;
}

// -- serialization -----------------------------------------------------------

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor vec_tensor(const std::vector<double>& v) {
  return Tensor({v.size()}, std::vector<double>(v));
}

}  // namespace

void save_weights(const std::string& dir, const ModelWeights& m) {
  fs::create_directories(dir);
  json manifest;
  manifest["config"] = {{"blocks", m.cfg.blocks},   {"tokens", m.cfg.tokens},
                        {"dim", m.cfg.dim},         {"heads", m.cfg.heads},
                        {"mlp_ratio", m.cfg.mlp_ratio}, {"classes", m.cfg.classes},
                        {"seed", m.cfg.seed}};
  json tensors = json::object();
  auto put = [&](const std::string& name, const Tensor& t) {
    const std::string file = name + ".dqt1";
    write_dqt1((fs::path(dir) / file).string(), t);
    tensors[name] = file;
  };
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& b = m.blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    put(p + "ln1.gamma", vec_tensor(b.ln1.gamma));
    put(p + "ln1.beta", vec_tensor(b.ln1.beta));
    put(p + "ln2.gamma", vec_tensor(b.ln2.gamma));
    put(p + "ln2.beta", vec_tensor(b.ln2.beta));
    put(p + "w_qkv", b.w_qkv);
    put(p + "b_qkv", vec_tensor(b.b_qkv));
    put(p + "w_o", b.w_o);
    put(p + "b_o", vec_tensor(b.b_o));
    put(p + "w1", b.w1);
    put(p + "b1", vec_tensor(b.b1));
    put(p + "w2", b.w2);
    put(p + "b2", vec_tensor(b.b2));
  }
  put("head.weight", m.w_head);
  put("head.bias", vec_tensor(m.b_head));
  manifest["tensors"] = tensors;

  std::ofstream out(fs::path(dir) / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw DataError("save_weights: cannot write manifest");
}

ModelWeights load_weights(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw DataError("load_weights: missing manifest in " + dir);
  json manifest = json::parse(in);

  ModelWeights m;
  const auto& c = manifest.at("config");
  m.cfg.blocks = c.at("blocks").get<int>();
  m.cfg.tokens = c.at("tokens").get<int>();
  m.cfg.dim = c.at("dim").get<int>();
  m.cfg.heads = c.at("heads").get<int>();
  m.cfg.mlp_ratio = c.at("mlp_ratio").get<int>();
  m.cfg.classes = c.at("classes").get<int>();
  m.cfg.seed = c.at("seed").get<std::uint64_t>();

  const auto& tensors = manifest.at("tensors");
  auto get = [&](const std::string& name) {
    const std::string file = tensors.at(name).get<std::string>();
    return read_dqt1_f64((fs::path(dir) / file).string());
  };
  auto get_vec = [&](const std::string& name) {
    Tensor t = get(name);
    return std::vector<double>(t.buffer());
  };

  m.blocks.resize(m.cfg.blocks);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& b = m.blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    b.ln1.gamma = get_vec(p + "ln1.gamma");
    b.ln1.beta = get_vec(p + "ln1.beta");
    b.ln2.gamma = get_vec(p + "ln2.gamma");
    b.ln2.beta = get_vec(p + "ln2.beta");
    b.w_qkv = get(p + "w_qkv");
    b.b_qkv = get_vec(p + "b_qkv");
    b.w_o = get(p + "w_o");
    b.b_o = get_vec(p + "b_o");
    b.w1 = get(p + "w1");
    b.b1 = get_vec(p + "b1");
    b.w2 = get(p + "w2");
    b.b2 = get_vec(p + "b2");
  }
  m.w_head = get("head.weight");
  m.b_head = get_vec("head.bias");
  return m;
}

}  // namespace dopq
