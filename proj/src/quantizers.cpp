#include "dopq/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "json.hpp"

namespace dopq {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;

std::int32_t clamp_code(double v, std::int32_t qmax) {
  if (v < 0.0) return 0;
  if (v > static_cast<double>(qmax)) return qmax;
  return static_cast<std::int32_t>(v);
}

std::size_t inner_stride(const std::vector<std::size_t>& shape, std::size_t axis) {
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return inner;
}

}  // namespace

void QuantParams::validate() const {
  if (bitwidth < 2 || bitwidth > 30)
    throw ConfigError("quant params: bitwidth out of range");
  if (scale.size() != zero_point.size() || scale.empty())
    throw ConfigError("quant params: scale/zero_point size mismatch");
  if (granularity == Granularity::kLayer && scale.size() != 1)
    throw ConfigError("quant params: layer-wise params must be scalar");
  for (double s : scale)
    if (!(s > 0.0)) throw ConfigError("quant params: scale must be positive");
  for (std::int32_t z : zero_point)
    if (z < 0 || z > qmax()) throw ConfigError("quant params: zero point out of code range");
}

bool tanq_feasible(double curvature, double focus) {
  if (!(curvature > 0.0)) return false;
  if (!(focus > 0.0 && focus < 1.0)) return false;
  const double half_span = kHalfPi / curvature;
  return focus + half_span > 1.0 && focus - half_span < 0.0;
}

// -- uniform --------------------------------------------------------------

QuantParams uq_calibrate_minmax(double mn, double mx, int bits) {
  QuantParams p;
  p.bitwidth = bits;
  p.granularity = Granularity::kLayer;
  const std::int32_t qmax = p.qmax();
  if (mx > mn) {
    const double s = (mx - mn) / static_cast<double>(qmax);
    p.scale = {s};
    p.zero_point = {clamp_code(round_half_even(-mn / s), qmax)};
  } else {
    // Degenerate range: constants in [0, 2^b - 1] round-trip exactly.
    p.scale = {1.0};
    p.zero_point = {clamp_code(round_half_even(-mn), qmax)};
  }
  return p;
}

QuantParams uq_calibrate_minmax(const std::vector<double>& mn,
                                const std::vector<double>& mx, int bits,
                                std::size_t axis) {
  QuantParams p;
  p.bitwidth = bits;
  p.granularity = Granularity::kChannel;
  p.axis = axis;
  p.scale.resize(mn.size());
  p.zero_point.resize(mn.size());
  const std::int32_t qmax = p.qmax();
  for (std::size_t c = 0; c < mn.size(); ++c) {
    if (mx[c] > mn[c]) {
      const double s = (mx[c] - mn[c]) / static_cast<double>(qmax);
      p.scale[c] = s;
      p.zero_point[c] = clamp_code(round_half_even(-mn[c] / s), qmax);
    } else {
      p.scale[c] = 1.0;
      p.zero_point[c] = clamp_code(round_half_even(-mn[c]), qmax);
    }
  }
  return p;
}

QuantParams uq_calibrate(const Tensor& x, int bits, Granularity g, std::size_t axis) {
  if (x.empty()) throw DomainError("uq_calibrate: empty tensor");
  if (g == Granularity::kLayer) {
    double mn = x[0], mx = x[0];
    for (double v : x.values()) {
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    return uq_calibrate_minmax(mn, mx, bits);
  }
  const ChannelStats stats = channel_minmax(x, axis);
  return uq_calibrate_minmax(stats.min, stats.max, bits, axis);
}

IntTensor uq_quant(const Tensor& x, const QuantParams& p) {
  p.validate();
  IntTensor out(x.shape());
  const std::int32_t qmax = p.qmax();
  if (p.granularity == Granularity::kLayer) {
    const double inv_s = 1.0 / p.scale[0];
    const std::int32_t z = p.zero_point[0];
    for (std::size_t i = 0; i < x.size(); ++i)
      out.data[i] = clamp_code(round_half_even(x[i] * inv_s) + z, qmax);
    return out;
  }
  if (p.axis >= x.rank() || x.dim(p.axis) != p.channels())
    throw DimensionError("uq_quant: channel axis mismatch");
  const std::size_t inner = inner_stride(x.shape(), p.axis);
  const std::size_t channels = p.channels();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = (i / inner) % channels;
    out.data[i] =
        clamp_code(round_half_even(x[i] / p.scale[c]) + p.zero_point[c], qmax);
  }
  return out;
}

Tensor uq_dequant(const IntTensor& q, const QuantParams& p) {
  p.validate();
  Tensor out(q.shape);
  if (p.granularity == Granularity::kLayer) {
    const double s = p.scale[0];
    const std::int32_t z = p.zero_point[0];
    for (std::size_t i = 0; i < q.size(); ++i)
      out[i] = s * static_cast<double>(q.data[i] - z);
    return out;
  }
  const std::size_t inner = inner_stride(q.shape, p.axis);
  const std::size_t channels = p.channels();
  for (std::size_t i = 0; i < q.size(); ++i) {
    const std::size_t c = (i / inner) % channels;
    out[i] = p.scale[c] * static_cast<double>(q.data[i] - p.zero_point[c]);
  }
  return out;
}

// -- log --------------------------------------------------------------------

namespace {

double log_base_of(LogBase base, double y) {
  // log_sqrt2(y) = 2 * log2(y)
  const double l2 = std::log2(y);
  return base == LogBase::kTwo ? l2 : 2.0 * l2;
}

double pow_base(LogBase base, double e) {
  return base == LogBase::kTwo ? std::exp2(e) : std::exp2(0.5 * e);
}

}  // namespace

LogParams log_calibrate(const Tensor& x, int bits, LogBase base) {
  if (x.empty()) throw DomainError("log_calibrate: empty tensor");
  double mx = 0.0;
  for (double v : x.values()) {
    if (v < 0.0) throw DomainError("log_calibrate: negative input");
    mx = std::max(mx, v);
  }
  LogParams p;
  p.base = base;
  p.bitwidth = bits;
  p.scale = mx > kLogFloor ? mx : 1.0;
  return p;
}

IntTensor log_quant(const Tensor& x, const LogParams& p) {
  IntTensor out(x.shape());
  const std::int32_t qmax = (std::int32_t{1} << p.bitwidth) - 1;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v < 0.0) throw DomainError("log_quant: negative input");
    if (v <= kLogFloor) {
      out.data[i] = qmax;
      continue;
    }
    out.data[i] = clamp_code(round_half_even(-log_base_of(p.base, v / p.scale)), qmax);
  }
  return out;
}

Tensor log_dequant(const IntTensor& q, const LogParams& p) {
  Tensor out(q.shape);
  for (std::size_t i = 0; i < q.size(); ++i)
    out[i] = p.scale * pow_base(p.base, -static_cast<double>(q.data[i]));
  return out;
}

// -- sulq -------------------------------------------------------------------

namespace {

Tensor sulq_transform(const Tensor& x, double eta) {
  Tensor t(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < 0.0) throw DomainError("sulq: negative input");
    t[i] = -std::log2(x[i] + eta);
  }
  return t;
}

}  // namespace

SulqParams sulq_calibrate_fixed_eta(const Tensor& x, int bits, double eta) {
  SulqParams p;
  p.eta = eta;
  p.inner = uq_calibrate(sulq_transform(x, eta), bits, Granularity::kLayer);
  return p;
}

SulqParams sulq_calibrate(const Tensor& x, int bits) {
  if (x.empty()) throw DomainError("sulq_calibrate: empty tensor");
  SulqParams best;
  double best_mse = std::numeric_limits<double>::infinity();
  for (int k = 1; k <= 14; ++k) {
    const double eta = std::ldexp(1.0, -k);
    const SulqParams cand = sulq_calibrate_fixed_eta(x, bits, eta);
    const Tensor rt = sulq_dequant(sulq_quant(x, cand), cand);
    double mse = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = rt[i] - x[i];
      mse += d * d;
    }
    mse /= static_cast<double>(x.size());
    if (mse < best_mse) {
      best_mse = mse;
      best = cand;
    }
  }
  return best;
}

IntTensor sulq_quant(const Tensor& x, const SulqParams& p) {
  return uq_quant(sulq_transform(x, p.eta), p.inner);
}

Tensor sulq_dequant(const IntTensor& q, const SulqParams& p) {
  const Tensor t = uq_dequant(q, p.inner);
  Tensor out(q.shape);
  for (std::size_t i = 0; i < q.size(); ++i)
    out[i] = std::max(0.0, std::exp2(-t[i]) - p.eta);
  return out;
}

// -- tanq -------------------------------------------------------------------

TanParams tanq_params_for_domain(double curvature, double focus, int bits) {
  if (!tanq_feasible(curvature, focus))
    throw ConfigError("tanq: parameters violate the feasibility constraints");
  TanParams tp;
  tp.curvature = curvature;
  tp.focus = focus;
  const double t_lo = std::tan(curvature * (0.0 - focus));
  const double t_hi = std::tan(curvature * (1.0 - focus));
  tp.inner = uq_calibrate_minmax(t_lo, t_hi, bits);
  return tp;
}

TanParams tanq_calibrate(const Tensor& x, double curvature, double focus, int bits) {
  if (!tanq_feasible(curvature, focus))
    throw ConfigError("tanq: parameters violate the feasibility constraints");
  if (x.empty()) throw DomainError("tanq_calibrate: empty tensor");
  double t_lo = std::numeric_limits<double>::infinity();
  double t_hi = -t_lo;
  for (double v : x.values()) {
    const double xv = std::clamp(v, 0.0, 1.0);
    const double t = std::tan(curvature * (xv - focus));
    t_lo = std::min(t_lo, t);
    t_hi = std::max(t_hi, t);
  }
  TanParams tp;
  tp.curvature = curvature;
  tp.focus = focus;
  tp.inner = uq_calibrate_minmax(t_lo, t_hi, bits);
  return tp;
}

IntTensor tanq_quant(const Tensor& x, const TanParams& tp, std::uint64_t* clamped) {
  if (!tanq_feasible(tp.curvature, tp.focus))
    throw ConfigError("tanq_quant: parameters violate the feasibility constraints");
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
    const double t = std::tan(tp.curvature * (v - tp.focus));
    out.data[i] = clamp_code(round_half_even(t * inv_s) + z, qmax);
  }
  if (clamped) *clamped += clamp_count;
  return out;
}

Tensor tanq_dequant(const IntTensor& q, const TanParams& tp, bool literal_round) {
  tp.inner.validate();
  Tensor out(q.shape);
  const double s = tp.inner.scale[0];
  const std::int32_t z = tp.inner.zero_point[0];
  for (std::size_t i = 0; i < q.size(); ++i) {
    double t = s * static_cast<double>(q.data[i] - z);
    if (literal_round) t = round_half_even(t);
    const double x = std::atan(t) / tp.curvature + tp.focus;
    out[i] = std::clamp(x, 0.0, 1.0);
  }
  return out;
}

TanSearchGrid TanSearchGrid::standard() {
  TanSearchGrid g;
  constexpr int kPoints = 32;
  const double lo = 0.3, hi = 12.0;
  const double ratio = hi / lo;
  g.curvature.resize(kPoints);
  g.focus.resize(kPoints);
  for (int i = 0; i < kPoints; ++i) {
    g.curvature[i] = lo * std::pow(ratio, static_cast<double>(i) / (kPoints - 1));
    g.focus[i] = static_cast<double>(i + 1) / (kPoints + 1);
  }
  return g;
}

TanParams tanq_grid_search(const Tensor& x, int bits, const TanSearchGrid& grid,
                           double* best_mse_out) {
  if (x.empty()) throw DomainError("tanq_grid_search: empty tensor");
  bool found = false;
  TanParams best;
  double best_mse = std::numeric_limits<double>::infinity();
  for (double a : grid.curvature) {
    for (double b : grid.focus) {
      if (!tanq_feasible(a, b)) continue;
      const TanParams cand = tanq_calibrate(x, a, b, bits);
      const Tensor rt = tanq_dequant(tanq_quant(x, cand), cand);
      double mse = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = rt[i] - std::clamp(x[i], 0.0, 1.0);
        mse += d * d;
      }
      mse /= static_cast<double>(x.size());
      const bool better =
          !found || mse < best_mse ||
          (mse == best_mse && (a < best.curvature ||
                               (a == best.curvature && b < best.focus)));
      if (better) {
        found = true;
        best_mse = mse;
        best = cand;
      }
    }
  }
  if (!found) throw ConfigError("tanq_grid_search: empty feasible grid");
  if (best_mse_out) *best_mse_out = best_mse;
  return best;
}

// -- dispatch ----------------------------------------------------------------

std::string quant_kind_name(QuantKind k) {
  switch (k) {
    case QuantKind::kUniform: return "uniform";
    case QuantKind::kLog2: return "log2";
    case QuantKind::kLogSqrt2: return "logsqrt2";
    case QuantKind::kSulq: return "sulq";
    case QuantKind::kTan: return "tanq";
  }
  return "unknown";
}

std::optional<QuantKind> quant_kind_from_name(const std::string& name) {
  if (name == "uniform" || name == "uq") return QuantKind::kUniform;
  if (name == "log2" || name == "logq") return QuantKind::kLog2;
  if (name == "logsqrt2") return QuantKind::kLogSqrt2;
  if (name == "sulq") return QuantKind::kSulq;
  if (name == "tanq" || name == "tan") return QuantKind::kTan;
  return std::nullopt;
}

IntTensor quantize(const Tensor& x, const Quantizer& q) {
  return std::visit(
      [&x](const auto& p) -> IntTensor {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, QuantParams>) return uq_quant(x, p);
        else if constexpr (std::is_same_v<T, LogParams>) return log_quant(x, p);
        else if constexpr (std::is_same_v<T, SulqParams>) return sulq_quant(x, p);
        else return tanq_quant(x, p);
      },
      q);
}

Tensor dequantize(const IntTensor& codes, const Quantizer& q) {
  return std::visit(
      [&codes](const auto& p) -> Tensor {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, QuantParams>) return uq_dequant(codes, p);
        else if constexpr (std::is_same_v<T, LogParams>) return log_dequant(codes, p);
        else if constexpr (std::is_same_v<T, SulqParams>) return sulq_dequant(codes, p);
        else return tanq_dequant(codes, p);
      },
      q);
}

Tensor fake_quant(const Tensor& x, const Quantizer& q) {
  return dequantize(quantize(x, q), q);
}

int quantizer_bits(const Quantizer& q) {
  return std::visit(
      [](const auto& p) -> int {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, QuantParams>) return p.bitwidth;
        else if constexpr (std::is_same_v<T, LogParams>) return p.bitwidth;
        else if constexpr (std::is_same_v<T, SulqParams>) return p.inner.bitwidth;
        else return p.inner.bitwidth;
      },
      q);
}

// -- serialization -------------------------------------------------------------

namespace {

using nlohmann::json;

json uq_to_json(const QuantParams& p) {
  return json{{"kind", "uniform"},
              {"bitwidth", p.bitwidth},
              {"granularity", p.granularity == Granularity::kLayer ? "layer" : "channel"},
              {"axis", p.axis},
              {"s", p.scale},
              {"z", p.zero_point}};
}

QuantParams uq_from_json(const json& j) {
  QuantParams p;
  p.bitwidth = j.at("bitwidth").get<int>();
  p.granularity =
      j.at("granularity").get<std::string>() == "layer" ? Granularity::kLayer
                                                        : Granularity::kChannel;
  p.axis = j.at("axis").get<std::size_t>();
  p.scale = j.at("s").get<std::vector<double>>();
  p.zero_point = j.at("z").get<std::vector<std::int32_t>>();
  return p;
}

}  // namespace

std::string quantizer_to_json(const Quantizer& q) {
  json j = std::visit(
      [](const auto& p) -> json {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, QuantParams>) {
          return uq_to_json(p);
        } else if constexpr (std::is_same_v<T, LogParams>) {
          return json{{"kind", p.base == LogBase::kTwo ? "log2" : "logsqrt2"},
                      {"bitwidth", p.bitwidth},
                      {"base", p.base == LogBase::kTwo ? "2" : "sqrt2"},
                      {"s", p.scale}};
        } else if constexpr (std::is_same_v<T, SulqParams>) {
          json inner = uq_to_json(p.inner);
          return json{{"kind", "sulq"},
                      {"bitwidth", p.inner.bitwidth},
                      {"eta", p.eta},
                      {"inner", inner}};
        } else {
          json inner = uq_to_json(p.inner);
          return json{{"kind", "tanq"},
                      {"bitwidth", p.inner.bitwidth},
                      {"a", p.curvature},
                      {"b_focus", p.focus},
                      {"inner", inner}};
        }
      },
      q);
  return j.dump();
}

Quantizer quantizer_from_json(const std::string& text) {
  json j = json::parse(text);
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "uniform") return uq_from_json(j);
  if (kind == "log2" || kind == "logsqrt2") {
    LogParams p;
    p.base = kind == "log2" ? LogBase::kTwo : LogBase::kSqrtTwo;
    p.bitwidth = j.at("bitwidth").get<int>();
    p.scale = j.at("s").get<double>();
    return p;
  }
  if (kind == "sulq") {
    SulqParams p;
    p.eta = j.at("eta").get<double>();
    p.inner = uq_from_json(j.at("inner"));
    return p;
  }
  if (kind == "tanq") {
    TanParams p;
    p.curvature = j.at("a").get<double>();
    p.focus = j.at("b_focus").get<double>();
    p.inner = uq_from_json(j.at("inner"));
    return p;
  }
  throw ConfigError("quantizer_from_json: unknown kind '" + kind + "'");
}

}  // namespace dopq
