#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dopq/error.hpp"

namespace dopq {

/// Dense row-major tensor of 64-bit floats. All public operations keep the
/// element buffer finite; constructors reject NaN/Inf payloads.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor full(std::vector<std::size_t> shape, double value);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<const double> values() const { return data_; }
  std::vector<double>& buffer() { return data_; }
  const std::vector<double>& buffer() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // 2-D accessors (rows x cols).
  double at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  std::size_t rows() const { return shape_[0]; }
  std::size_t cols() const { return shape_[1]; }

  /// Throws DomainError if any element is NaN or infinite.
  void check_finite(const std::string& context) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Integer code tensor (quantizer output). Codes are 32-bit signed.
struct IntTensor {
  std::vector<std::size_t> shape;
  std::vector<std::int32_t> data;

  IntTensor() = default;
  IntTensor(std::vector<std::size_t> s, std::vector<std::int32_t> d);
  explicit IntTensor(std::vector<std::size_t> s);

  std::size_t size() const { return data.size(); }
};

/// Per-channel extrema along one axis.
struct ChannelStats {
  std::vector<double> min;
  std::vector<double> max;
  std::size_t axis = 0;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

/// Round-half-to-even, independent of the FP environment's rounding mode.
double round_half_even(double x);

/// Matrix product a[.., M, K] x b[K, N] -> [.., M, N]. Leading axes of `a`
/// are treated as a batch; `b` must be 2-D. 64-bit accumulation.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Transpose of a 2-D tensor.
Tensor transpose2d(const Tensor& a);

/// Per-channel min/max over all elements sharing each index along `axis`.
ChannelStats channel_minmax(const Tensor& x, std::size_t axis);

/// Sorted middle element (odd length) or mean of the two middle elements
/// (even length).
double median(std::span<const double> v);

/// (1/D) * sum_i |v_i - center|.
double mean_abs_dev(std::span<const double> v, double center);

// ---------------------------------------------------------------------------
// DQT1 binary container.
//   bytes 0-3  magic "DQT1"
//   byte  4    dtype: 0 = f64, 1 = i32
//   byte  5    ndim
//   bytes 6-7  zero padding
//   ndim x u64 dims, little endian
//   payload, row major, little endian
// ---------------------------------------------------------------------------

void write_dqt1(const std::string& path, const Tensor& t);
void write_dqt1(const std::string& path, const IntTensor& t);
Tensor read_dqt1_f64(const std::string& path);
IntTensor read_dqt1_i32(const std::string& path);
/// dtype code of a stored container without reading the payload.
int dqt1_dtype(const std::string& path);

}  // namespace dopq
