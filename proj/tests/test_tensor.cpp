#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "dopq/rng.hpp"
#include "dopq/tensor.hpp"

using namespace dopq;

namespace {

// Independent oracle: naive triple loop, dot-product accumulation order.
Tensor matmul_naive(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t e = 0; e < k; ++e) acc += a.at2(i, e) * b.at2(e, j);
      out.at2(i, j) = acc;
    }
  return out;
}

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double span = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-span, span);
  return t;
}

}  // namespace

TEST_CASE("matmul identity case") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor r = matmul(eye, a);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r[i] == a[i]);
}

TEST_CASE("matmul 1x2 times 2x1 hand case") {
  const Tensor a({1, 2}, {1, 2});
  const Tensor b({2, 1}, {3, 4});
  const Tensor r = matmul(a, b);
  CHECK(r.size() == 1);
  CHECK(r[0] == 11.0);
}

TEST_CASE("matmul matches the naive triple-loop oracle") {
  Rng rng(7);
  const Tensor a = random_tensor(rng, {5, 7});
  const Tensor b = random_tensor(rng, {7, 3});
  const Tensor got = matmul(a, b);
  const Tensor want = matmul_naive(a, b);
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(std::abs(got[i] - want[i]) <= 1e-12);
}

TEST_CASE("matmul oracle property on random instances up to 16x16") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(16);
    const std::size_t k = 1 + rng.below(16);
    const std::size_t n = 1 + rng.below(16);
    const Tensor a = random_tensor(rng, {m, k}, 2.0);
    const Tensor b = random_tensor(rng, {k, n}, 2.0);
    const Tensor got = matmul(a, b);
    const Tensor want = matmul_naive(a, b);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got[i] - want[i]) <= 1e-12);
  }
}

TEST_CASE("matmul batched leading axes") {
  Rng rng(3);
  const Tensor a = random_tensor(rng, {2, 3, 4});
  const Tensor b = random_tensor(rng, {4, 5});
  const Tensor got = matmul(a, b);
  CHECK(got.shape() == std::vector<std::size_t>{2, 3, 5});
  for (std::size_t g = 0; g < 2; ++g) {
    Tensor slice({3, 4});
    std::copy(a.data() + g * 12, a.data() + (g + 1) * 12, slice.data());
    const Tensor want = matmul_naive(slice, b);
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(std::abs(got[g * 15 + i] - want[i]) <= 1e-12);
  }
}

TEST_CASE("matmul shape mismatch throws") {
  const Tensor a({2, 3});
  const Tensor b({4, 2});
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("channel_minmax exhaustive scan hand case") {
  const Tensor x({2, 2}, {1, 10, 3, -2});
  const ChannelStats s = channel_minmax(x, 1);
  CHECK(s.min == std::vector<double>{1, -2});
  CHECK(s.max == std::vector<double>{3, 10});
}

TEST_CASE("channel_minmax constant tensor") {
  const Tensor x = Tensor::full({3, 4}, 2.5);
  const ChannelStats s = channel_minmax(x, 1);
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(s.min[c] == 2.5);
    CHECK(s.max[c] == 2.5);
  }
}

TEST_CASE("channel_minmax single-channel reduces to global stats") {
  const Tensor x({4, 1}, {3, -7, 2, 9});
  const ChannelStats s = channel_minmax(x, 1);
  CHECK(s.min == std::vector<double>{-7});
  CHECK(s.max == std::vector<double>{9});
}

TEST_CASE("channel_minmax is permutation-invariant within a channel") {
  Rng rng(5);
  Tensor x = random_tensor(rng, {8, 3});
  const ChannelStats before = channel_minmax(x, 1);
  // Shuffle rows (permutes elements within each channel).
  for (std::size_t i = 7; i > 0; --i) {
    const std::size_t j = rng.below(i + 1);
    for (std::size_t c = 0; c < 3; ++c) std::swap(x.at2(i, c), x.at2(j, c));
  }
  const ChannelStats after = channel_minmax(x, 1);
  CHECK(before.min == after.min);
  CHECK(before.max == after.max);
}

TEST_CASE("median odd, even and outlier cases") {
  const std::vector<double> odd{1, 2, 3};
  CHECK(median(odd) == 2.0);
  const std::vector<double> outlier{1, 1, 1, 1, 100};
  CHECK(median(outlier) == 1.0);
  const std::vector<double> even{1, 3};
  CHECK(median(even) == 2.0);
  CHECK_THROWS_AS(median(std::vector<double>{}), DomainError);
}

TEST_CASE("mean_abs_dev frozen values") {
  const std::vector<double> v{1, 1, 1, 1, 100};
  CHECK(mean_abs_dev(v, 1.0) == 19.8);
  CHECK(mean_abs_dev(v, 20.8) == doctest::Approx(31.68).epsilon(1e-12));
  const std::vector<double> flat{4, 4, 4};
  CHECK(mean_abs_dev(flat, 4.0) == 0.0);
  CHECK_THROWS_AS(mean_abs_dev(std::vector<double>{}, 0.0), DomainError);
}

TEST_CASE("median minimizes mean absolute deviation") {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(32);
    std::vector<double> v(n);
    double sum = 0.0, mn = 1e300, mx = -1e300;
    for (double& x : v) {
      x = rng.uniform(-50, 50);
      if (rng.below(8) == 0) x *= 100;  // occasional outliers
      sum += x;
      mn = std::min(mn, x);
      mx = std::max(mx, x);
    }
    const double base = mean_abs_dev(v, median(v));
    CHECK(base <= mean_abs_dev(v, sum / static_cast<double>(n)) + 1e-12);
    CHECK(base <= mean_abs_dev(v, mn) + 1e-12);
    CHECK(base <= mean_abs_dev(v, mx) + 1e-12);
    CHECK(base <= mean_abs_dev(v, rng.uniform(-100, 100)) + 1e-12);
  }
}

TEST_CASE("round_half_even ties and neighbors") {
  CHECK(round_half_even(0.5) == 0.0);
  CHECK(round_half_even(1.5) == 2.0);
  CHECK(round_half_even(2.5) == 2.0);
  CHECK(round_half_even(-0.5) == 0.0);
  CHECK(round_half_even(-1.5) == -2.0);
  CHECK(round_half_even(1.499999) == 1.0);
  CHECK(round_half_even(1.500001) == 2.0);
  CHECK(round_half_even(-3.0) == -3.0);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::numeric_limits<double>::infinity()}),
                  DomainError);
  CHECK_THROWS_AS(Tensor({0, 2}), DimensionError);
}

TEST_CASE("DQT1 round trip is bit exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dopq_tensor_test";
  fs::create_directories(dir);

  Rng rng(23);
  const Tensor t = random_tensor(rng, {3, 4, 5}, 1e6);
  const std::string f64_path = (dir / "t.dqt1").string();
  write_dqt1(f64_path, t);
  const Tensor back = read_dqt1_f64(f64_path);
  CHECK(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);
  CHECK(dqt1_dtype(f64_path) == 0);

  IntTensor q({2, 3}, {1, -2, 3, INT32_MAX, INT32_MIN, 0});
  const std::string i32_path = (dir / "q.dqt1").string();
  write_dqt1(i32_path, q);
  const IntTensor qback = read_dqt1_i32(i32_path);
  CHECK(qback.shape == q.shape);
  CHECK(qback.data == q.data);
  CHECK(dqt1_dtype(i32_path) == 1);

  CHECK_THROWS_AS(read_dqt1_i32(f64_path), DataError);
  CHECK_THROWS_AS(read_dqt1_f64((dir / "missing.dqt1").string()), DataError);
}

TEST_CASE("DQT1 header layout") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dopq_tensor_test";
  fs::create_directories(dir);
  const std::string path = (dir / "hdr.dqt1").string();
  write_dqt1(path, Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));

  FILE* f = std::fopen(path.c_str(), "rb");
  REQUIRE(f != nullptr);
  unsigned char buf[24];
  REQUIRE(std::fread(buf, 1, 24, f) == 24);
  std::fclose(f);
  CHECK(buf[0] == 'D');
  CHECK(buf[1] == 'Q');
  CHECK(buf[2] == 'T');
  CHECK(buf[3] == '1');
  CHECK(buf[4] == 0);  // f64
  CHECK(buf[5] == 2);  // ndim
  CHECK(buf[6] == 0);
  CHECK(buf[7] == 0);
  CHECK(buf[8] == 2);   // dim0, little endian u64
  CHECK(buf[16] == 3);  // dim1
}
