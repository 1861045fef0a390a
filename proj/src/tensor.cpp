#include "dopq/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace dopq {

static_assert(std::endian::native == std::endian::little,
              "DQT1 serialization assumes a little-endian host");

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

static void validate_shape(const std::vector<std::size_t>& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive");
  }
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {
  validate_shape(shape_);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (shape_product(shape_) != data_.size())
    throw DimensionError("tensor data length does not match shape product");
  check_finite("Tensor constructor");
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  t.check_finite("Tensor::full");
  return t;
}

void Tensor::check_finite(const std::string& context) const {
  for (double v : data_) {
    if (!std::isfinite(v)) throw DomainError(context + ": non-finite element");
  }
}

IntTensor::IntTensor(std::vector<std::size_t> s, std::vector<std::int32_t> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_product(shape) != data.size())
    throw DimensionError("int tensor data length does not match shape product");
}

IntTensor::IntTensor(std::vector<std::size_t> s)
    : shape(std::move(s)), data(shape_product(shape), 0) {}

double round_half_even(double x) {
  const double f = std::floor(x);
  const double diff = x - f;
  if (diff > 0.5) return f + 1.0;
  if (diff < 0.5) return f;
  return (std::fmod(f, 2.0) == 0.0) ? f : f + 1.0;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2)
    throw DimensionError("matmul expects a[.., M, K] and b[K, N]");
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t m = a.dim(a.rank() - 2);
  if (b.dim(0) != k) throw DimensionError("matmul inner dimensions disagree");
  const std::size_t n = b.dim(1);
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.dim(i);

  std::vector<std::size_t> out_shape(a.shape());
  out_shape[out_shape.size() - 1] = n;

  Tensor out(std::move(out_shape));
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t g = 0; g < batch; ++g) {
    const double* ga = pa + g * m * k;
    double* go = po + g * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      double* row = go + i * n;
      const double* arow = ga + i * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        const double* brow = pb + kk * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
      }
    }
  }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d expects a 2-D tensor");
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at2(j, i) = a.at2(i, j);
  return out;
}

ChannelStats channel_minmax(const Tensor& x, std::size_t axis) {
  if (x.empty()) throw DomainError("channel_minmax: empty tensor");
  if (axis >= x.rank()) throw DimensionError("channel_minmax: axis out of range");
  const std::size_t channels = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

  ChannelStats stats;
  stats.axis = axis;
  stats.min.assign(channels, std::numeric_limits<double>::infinity());
  stats.max.assign(channels, -std::numeric_limits<double>::infinity());
  const double* p = x.data();
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    const std::size_t c = (flat / inner) % channels;
    stats.min[c] = std::min(stats.min[c], p[flat]);
    stats.max[c] = std::max(stats.max[c], p[flat]);
  }
  return stats;
}

double median(std::span<const double> v) {
  if (v.empty()) throw DomainError("median: empty vector");
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  if (n % 2 == 1) return sorted[n / 2];
  return 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

double mean_abs_dev(std::span<const double> v, double center) {
  if (v.empty()) throw DomainError("mean_abs_dev: empty vector");
  double acc = 0.0;
  for (double x : v) acc += std::abs(x - center);
  return acc / static_cast<double>(v.size());
}

// --- DQT1 ------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'Q', 'T', '1'};
constexpr std::uint8_t kDtypeF64 = 0;
constexpr std::uint8_t kDtypeI32 = 1;

void write_header(std::ofstream& out, std::uint8_t dtype,
                  const std::vector<std::size_t>& shape) {
  out.write(kMagic, 4);
  out.put(static_cast<char>(dtype));
  if (shape.size() > 255) throw DimensionError("DQT1: rank exceeds 255");
  out.put(static_cast<char>(shape.size()));
  out.put(0);
  out.put(0);
  for (std::size_t d : shape) {
    const std::uint64_t v = d;
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
}

struct Header {
  std::uint8_t dtype = 0;
  std::vector<std::size_t> shape;
};

Header read_header(std::ifstream& in, const std::string& path) {
  char magic[4];
  std::uint8_t dtype = 0, ndim = 0, pad0 = 0, pad1 = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&dtype), 1);
  in.read(reinterpret_cast<char*>(&ndim), 1);
  in.read(reinterpret_cast<char*>(&pad0), 1);
  in.read(reinterpret_cast<char*>(&pad1), 1);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("DQT1: bad magic in " + path);
  if (pad0 != 0 || pad1 != 0) throw DataError("DQT1: nonzero padding in " + path);
  Header h;
  h.dtype = dtype;
  h.shape.resize(ndim);
  for (std::uint8_t i = 0; i < ndim; ++i) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    h.shape[i] = static_cast<std::size_t>(v);
  }
  if (!in) throw DataError("DQT1: truncated header in " + path);
  return h;
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("DQT1: cannot open " + path);
  return in;
}

}  // namespace

void write_dqt1(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("DQT1: cannot write " + path);
  write_header(out, kDtypeF64, t.shape());
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw DataError("DQT1: write failed for " + path);
}

void write_dqt1(const std::string& path, const IntTensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("DQT1: cannot write " + path);
  write_header(out, kDtypeI32, t.shape);
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(std::int32_t)));
  if (!out) throw DataError("DQT1: write failed for " + path);
}

Tensor read_dqt1_f64(const std::string& path) {
  std::ifstream in = open_input(path);
  const Header h = read_header(in, path);
  if (h.dtype != kDtypeF64) throw DataError("DQT1: expected f64 payload in " + path);
  std::vector<double> data(shape_product(h.shape));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw DataError("DQT1: truncated payload in " + path);
  return Tensor(h.shape, std::move(data));
}

IntTensor read_dqt1_i32(const std::string& path) {
  std::ifstream in = open_input(path);
  const Header h = read_header(in, path);
  if (h.dtype != kDtypeI32) throw DataError("DQT1: expected i32 payload in " + path);
  std::vector<std::int32_t> data(shape_product(h.shape));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(std::int32_t)));
  if (!in) throw DataError("DQT1: truncated payload in " + path);
  return IntTensor(h.shape, std::move(data));
}

int dqt1_dtype(const std::string& path) {
  std::ifstream in = open_input(path);
  return read_header(in, path).dtype;
}

}  // namespace dopq
