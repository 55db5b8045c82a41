#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"

#include "dedetr/kernels.hpp"
#include "dedetr/rng.hpp"

using namespace dedetr;

namespace {
std::vector<double> rand_vec(size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return v;
}
bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}
}  // namespace

TEST_CASE("matmul against identity") {
  std::vector<double> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::vector<double> a = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> c(9, -1.0);
  kernels::matmul(eye.data(), a.data(), c.data(), 1, 3, 3, 3, false, false);
  for (int i = 0; i < 9; ++i) CHECK(c[i] == doctest::Approx(a[i]).epsilon(1e-12));
}

TEST_CASE("matmul accumulate adds into the output") {
  std::vector<double> a = {2.0}, b = {3.0}, c = {10.0};
  kernels::matmul(a.data(), b.data(), c.data(), 1, 1, 1, 1, false, true);
  CHECK(c[0] == doctest::Approx(16.0));
  kernels::matmul(a.data(), b.data(), c.data(), 1, 1, 1, 1, false, false);
  CHECK(c[0] == doctest::Approx(6.0));
}

TEST_CASE("matmul broadcast shares one rhs across the batch") {
  Rng rng(3);
  const int64_t batch = 3, m = 2, k = 4, n = 5;
  auto a = rand_vec(batch * m * k, rng);
  auto b = rand_vec(k * n, rng);
  std::vector<double> c(batch * m * n), expect(batch * m * n);
  kernels::matmul(a.data(), b.data(), c.data(), batch, m, k, n, true, false);
  for (int64_t bi = 0; bi < batch; ++bi)
    kernels::matmul(a.data() + bi * m * k, b.data(), expect.data() + bi * m * n, 1, m, k, n,
                    false, false);
  CHECK(bitwise_equal(c, expect));
}

TEST_CASE("softmax of a constant row is uniform") {
  std::vector<double> x = {0, 0, 0}, y(3);
  kernels::softmax_rows(x.data(), y.data(), 1, 3);
  for (double v : y) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Rng rng(5);
  auto x = rand_vec(4 * 7, rng, -30.0, 30.0);
  std::vector<double> y(4 * 7), y2(4 * 7);
  kernels::softmax_rows(x.data(), y.data(), 4, 7);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int c = 0; c < 7; ++c) s += y[r * 7 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto shifted = x;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 7; ++c) shifted[r * 7 + c] += 11.5;
  kernels::softmax_rows(shifted.data(), y2.data(), 4, 7);
  for (size_t i = 0; i < y.size(); ++i) CHECK(y2[i] == doctest::Approx(y[i]).epsilon(1e-9));
}

TEST_CASE("layer_norm normalizes each row") {
  Rng rng(7);
  const int64_t rows = 3, cols = 8;
  auto x = rand_vec(rows * cols, rng, -2.0, 5.0);
  std::vector<double> gamma(cols, 1.0), beta(cols, 0.0);
  std::vector<double> y(rows * cols), mean(rows), inv_std(rows);
  kernels::layer_norm_rows(x.data(), gamma.data(), beta.data(), y.data(), mean.data(),
                           inv_std.data(), rows, cols, 1e-9);
  for (int64_t r = 0; r < rows; ++r) {
    double m = 0, v = 0;
    for (int64_t c = 0; c < cols; ++c) m += y[r * cols + c];
    m /= cols;
    for (int64_t c = 0; c < cols; ++c) v += (y[r * cols + c] - m) * (y[r * cols + c] - m);
    v /= cols;
    CHECK(m == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(std::abs(m) < 1e-9);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm applies gamma and beta") {
  std::vector<double> x = {1.0, 3.0};  // normalized: -1, +1
  std::vector<double> gamma = {2.0, 0.5}, beta = {10.0, -1.0};
  std::vector<double> y(2), mean(1), inv_std(1);
  kernels::layer_norm_rows(x.data(), gamma.data(), beta.data(), y.data(), mean.data(),
                           inv_std.data(), 1, 2, 0.0);
  CHECK(y[0] == doctest::Approx(10.0 - 2.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(-1.0 + 0.5).epsilon(1e-9));
  CHECK(mean[0] == doctest::Approx(2.0));
}

TEST_CASE("bilinear interpolation matches the 2x2 example") {
  // cell centers: (0.5,0.5)=1 (1.5,0.5)=2 (0.5,1.5)=3 (1.5,1.5)=4
  std::vector<double> map = {1, 2, 3, 4};
  std::vector<double> xy = {1.0, 1.0}, out(1);
  kernels::bilinear_gather(map.data(), 2, 2, 1, xy.data(), 1, out.data());
  CHECK(out[0] == doctest::Approx(2.5).epsilon(1e-12));

  xy = {0.5, 0.5};
  kernels::bilinear_gather(map.data(), 2, 2, 1, xy.data(), 1, out.data());
  CHECK(out[0] == doctest::Approx(1.0).epsilon(1e-12));

  xy = {-5.0, -5.0};
  kernels::bilinear_gather(map.data(), 2, 2, 1, xy.data(), 1, out.data());
  CHECK(out[0] == 0.0);

  // halfway off the left edge: only the in-bounds neighbor contributes
  xy = {0.0, 0.5};
  kernels::bilinear_gather(map.data(), 2, 2, 1, xy.data(), 1, out.data());
  CHECK(out[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("bilinear_scatter is the transpose of bilinear_gather") {
  Rng rng(11);
  const int64_t h = 4, w = 5, d = 2, p = 7;
  auto map = rand_vec(h * w * d, rng);
  std::vector<double> xy(2 * p);
  for (int64_t i = 0; i < p; ++i) {
    xy[2 * i] = rng.uniform() * w;
    xy[2 * i + 1] = rng.uniform() * h;
  }
  auto dout = rand_vec(p * d, rng);
  std::vector<double> out(p * d), dmap(h * w * d, 0.0);
  kernels::bilinear_gather(map.data(), h, w, d, xy.data(), p, out.data());
  kernels::bilinear_scatter(dmap.data(), h, w, d, xy.data(), p, dout.data());
  // <gather(map), dout> == <map, scatter(dout)>
  double lhs = 0, rhs = 0;
  for (size_t i = 0; i < out.size(); ++i) lhs += out[i] * dout[i];
  for (size_t i = 0; i < map.size(); ++i) rhs += map[i] * dmap[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("sine embedding layout: x in the first half, y in the second") {
  const int64_t d = 16;
  std::vector<double> a = {0.3, 0.7}, b = {0.3, 0.2};  // same x, different y
  std::vector<double> ea(d), eb(d);
  kernels::sine_pos_embed_rows(a.data(), 1, d, 1e4, ea.data());
  kernels::sine_pos_embed_rows(b.data(), 1, d, 1e4, eb.data());
  for (int64_t i = 0; i < d / 2; ++i) CHECK(ea[i] == eb[i]);
  bool differs = false;
  for (int64_t i = d / 2; i < d; ++i) differs = differs || ea[i] != eb[i];
  CHECK(differs);
}

TEST_CASE("sine embedding values follow the interleaved sin/cos formula") {
  const int64_t d = 8;  // half=4 -> 2 (sin, cos) pairs per coordinate
  std::vector<double> c = {0.25, 0.5};
  std::vector<double> e(d);
  kernels::sine_pos_embed_rows(c.data(), 1, d, 100.0, e.data());
  const double two_pi = 6.283185307179586476925286766559;
  // pair k divides by temperature^(2k / half)
  CHECK(e[0] == doctest::Approx(std::sin(0.25 * two_pi)).epsilon(1e-12));
  CHECK(e[1] == doctest::Approx(std::cos(0.25 * two_pi)).epsilon(1e-12));
  CHECK(e[2] == doctest::Approx(std::sin(0.25 * two_pi / std::pow(100.0, 2.0 / 4.0))).epsilon(1e-12));
  CHECK(e[3] == doctest::Approx(std::cos(0.25 * two_pi / std::pow(100.0, 2.0 / 4.0))).epsilon(1e-12));
  CHECK(e[4] == doctest::Approx(std::sin(0.5 * two_pi)).epsilon(1e-12));
  CHECK(e[5] == doctest::Approx(std::cos(0.5 * two_pi)).epsilon(1e-12));
}

TEST_CASE("parallel kernels match serial references bitwise") {
  Rng rng(13);
  const int64_t rows = 6, cols = 10;
  auto x = rand_vec(rows * cols, rng);
  std::vector<double> y1(rows * cols), y2(rows * cols);
  kernels::softmax_rows(x.data(), y1.data(), rows, cols);
  kernels::ref::softmax_rows(x.data(), y2.data(), rows, cols);
  CHECK(bitwise_equal(y1, y2));

  auto a = rand_vec(2 * 3 * 4, rng), b = rand_vec(2 * 4 * 5, rng);
  std::vector<double> c1(2 * 3 * 5), c2(2 * 3 * 5);
  kernels::matmul(a.data(), b.data(), c1.data(), 2, 3, 4, 5, false, false);
  kernels::ref::matmul(a.data(), b.data(), c2.data(), 2, 3, 4, 5, false, false);
  CHECK(bitwise_equal(c1, c2));
}
