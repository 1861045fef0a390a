#include "dopq/reparam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

namespace dopq {

ReparamBundle ReparamBundle::make(std::vector<double> s, std::vector<std::int32_t> z,
                                  double shared_scale, std::int32_t shared_zero) {
  if (s.empty() || s.size() != z.size())
    throw DimensionError("reparam bundle: scale/zero size mismatch");
  if (!(shared_scale > 0.0))
    throw ConfigError("reparam bundle: shared scale must be positive");
  ReparamBundle b;
  b.scale = std::move(s);
  b.zero = std::move(z);
  b.shared_scale = shared_scale;
  b.shared_zero = shared_zero;
  b.r1.resize(b.scale.size());
  b.r2.resize(b.scale.size());
  for (std::size_t i = 0; i < b.scale.size(); ++i) {
    if (!(b.scale[i] > 0.0))
      throw ConfigError("reparam bundle: channel scales must be positive");
    b.r1[i] = b.scale[i] / shared_scale;
    b.r2[i] = b.zero[i] - shared_zero;
  }
  return b;
}

std::pair<double, std::int32_t> mosf_select(std::span<const double> s,
                                            std::span<const std::int32_t> z) {
  if (s.empty() || s.size() != z.size())
    throw DomainError("mosf_select: empty or mismatched inputs");
  std::vector<double> zd(z.begin(), z.end());
  const double s_tilde = median(s);
  const double z_med = median(zd);
  return {s_tilde, static_cast<std::int32_t>(round_half_even(z_med))};
}

std::pair<double, std::int32_t> repq_select(std::span<const double> s,
                                            std::span<const std::int32_t> z) {
  if (s.empty() || s.size() != z.size())
    throw DomainError("repq_select: empty or mismatched inputs");
  double s_acc = 0.0, z_acc = 0.0;
  for (double v : s) s_acc += v;
  for (std::int32_t v : z) z_acc += static_cast<double>(v);
  const double n = static_cast<double>(s.size());
  return {s_acc / n, static_cast<std::int32_t>(round_half_even(z_acc / n))};
}

std::vector<MadRow> score_candidates(std::span<const double> s) {
  if (s.empty()) throw DomainError("score_candidates: empty vector");
  double mn = s[0], mx = s[0], acc = 0.0;
  for (double v : s) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
    acc += v;
  }
  const double mean = acc / static_cast<double>(s.size());
  const double med = median(s);

  // Histogram-peak mode proxy over 64 bins; ties go to the lowest bin.
  double mode = mn;
  if (mx > mn) {
    constexpr int kBins = 64;
    std::vector<std::size_t> counts(kBins, 0);
    for (double v : s) {
      int bin = static_cast<int>((v - mn) / (mx - mn) * kBins);
      bin = std::clamp(bin, 0, kBins - 1);
      ++counts[bin];
    }
    const auto it = std::max_element(counts.begin(), counts.end());
    const double bin_width = (mx - mn) / kBins;
    mode = mn + (static_cast<double>(it - counts.begin()) + 0.5) * bin_width;
  }

  std::vector<MadRow> rows;
  rows.push_back({"mean", mean, mean_abs_dev(s, mean)});
  rows.push_back({"median", med, mean_abs_dev(s, med)});
  rows.push_back({"min", mn, mean_abs_dev(s, mn)});
  rows.push_back({"max", mx, mean_abs_dev(s, mx)});
  rows.push_back({"mode", mode, mean_abs_dev(s, mode)});
  return rows;
}

std::pair<LayerNormAffine, LinearLayer> reparameterize(const LayerNormAffine& ln,
                                                       const LinearLayer& next,
                                                       const ReparamBundle& bundle) {
  const std::size_t d = bundle.scale.size();
  if (ln.gamma.size() != d || ln.beta.size() != d)
    throw DimensionError("reparameterize: affine length mismatch");
  if (next.weight.rank() != 2 || next.weight.dim(0) != d)
    throw DimensionError("reparameterize: weight row count mismatch");
  const std::size_t out = next.weight.dim(1);
  if (next.bias.size() != out)
    throw DimensionError("reparameterize: bias length mismatch");

  LayerNormAffine ln2;
  ln2.gamma.resize(d);
  ln2.beta.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    ln2.gamma[i] = ln.gamma[i] / bundle.r1[i];
    ln2.beta[i] =
        (ln.beta[i] + bundle.scale[i] * static_cast<double>(bundle.r2[i])) /
        bundle.r1[i];
  }

  LinearLayer next2;
  next2.weight = Tensor({d, out});
  next2.bias.assign(next.bias.begin(), next.bias.end());
  for (std::size_t i = 0; i < d; ++i) {
    const double shift = bundle.scale[i] * static_cast<double>(bundle.r2[i]);
    for (std::size_t j = 0; j < out; ++j) {
      next2.weight.at2(i, j) = bundle.r1[i] * next.weight.at2(i, j);
      next2.bias[j] -= shift * next.weight.at2(i, j);
    }
  }
  return {std::move(ln2), std::move(next2)};
}

namespace {

Tensor apply_affine(const Tensor& x, const LayerNormAffine& ln) {
  Tensor out(x.shape());
  const std::size_t d = ln.gamma.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = i % d;
    out[i] = ln.gamma[c] * x[i] + ln.beta[c];
  }
  return out;
}

Tensor linear_apply(const Tensor& x, const LinearLayer& lin) {
  Tensor out = matmul(x, lin.weight);
  const std::size_t outdim = lin.bias.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += lin.bias[i % outdim];
  return out;
}

}  // namespace

EquivalenceReport verify_equivalence(const LayerNormAffine& ln,
                                     const LinearLayer& next,
                                     const ReparamBundle& bundle,
                                     const Tensor& x, int bits) {
  if (x.rank() != 2 || x.dim(1) != bundle.scale.size())
    throw DimensionError("verify_equivalence: input must be [tokens, D]");
  const auto [ln_rep, next_rep] = reparameterize(ln, next, bundle);

  QuantParams channel;
  channel.bitwidth = bits;
  channel.granularity = Granularity::kChannel;
  channel.axis = 1;
  channel.scale = bundle.scale;
  channel.zero_point = bundle.zero;

  QuantParams layer;
  layer.bitwidth = bits;
  layer.granularity = Granularity::kLayer;
  layer.scale = {bundle.shared_scale};
  layer.zero_point = {bundle.shared_zero};

  const Tensor act_orig = apply_affine(x, ln);
  const Tensor act_rep = apply_affine(x, ln_rep);

  EquivalenceReport rep;
  rep.elements = x.size();

  // (i) full-precision path.
  const Tensor fp_orig = linear_apply(act_orig, next);
  const Tensor fp_rep = linear_apply(act_rep, next_rep);
  for (std::size_t i = 0; i < fp_orig.size(); ++i) {
    const double ad = std::abs(fp_orig[i] - fp_rep[i]);
    rep.fp_out_max_abs_delta = std::max(rep.fp_out_max_abs_delta, ad);
    const double denom = std::max(1.0, std::abs(fp_orig[i]));
    rep.fp_out_max_rel_delta = std::max(rep.fp_out_max_rel_delta, ad / denom);
  }

  // (ii) integer codes.
  const IntTensor q_orig = uq_quant(act_orig, channel);
  const IntTensor q_rep = uq_quant(act_rep, layer);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < q_orig.size(); ++i)
    if (q_orig.data[i] == q_rep.data[i]) ++agree;
  rep.code_agreement =
      static_cast<double>(agree) / static_cast<double>(q_orig.size());

  // (iii) dequantized linear outputs.
  const Tensor dq_orig = linear_apply(uq_dequant(q_orig, channel), next);
  const Tensor dq_rep = linear_apply(uq_dequant(q_rep, layer), next_rep);
  for (std::size_t i = 0; i < dq_orig.size(); ++i) {
    const double ad = std::abs(dq_orig[i] - dq_rep[i]);
    rep.quant_out_max_abs_delta = std::max(rep.quant_out_max_abs_delta, ad);
    const double denom = std::max(1.0, std::abs(dq_orig[i]));
    rep.quant_out_max_rel_delta = std::max(rep.quant_out_max_rel_delta, ad / denom);
  }
  return rep;
}

std::string equivalence_report_to_json(const EquivalenceReport& r) {
  nlohmann::json j{{"fp_out_max_abs_delta", r.fp_out_max_abs_delta},
                   {"fp_out_max_rel_delta", r.fp_out_max_rel_delta},
                   {"code_agreement", r.code_agreement},
                   {"quant_out_max_abs_delta", r.quant_out_max_abs_delta},
                   {"quant_out_max_rel_delta", r.quant_out_max_rel_delta},
                   {"elements", r.elements}};
  return j.dump();
}

}  // namespace dopq
