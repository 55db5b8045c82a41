#include "dedetr/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dedetr::kernels {

namespace {

inline void matmul_row(const double* a_row, const double* bmat, double* c_row, int64_t k,
                       int64_t n, bool accumulate) {
  if (!accumulate) std::memset(c_row, 0, sizeof(double) * static_cast<size_t>(n));
  for (int64_t kk = 0; kk < k; ++kk) {
    const double av = a_row[kk];
    const double* b_row = bmat + kk * n;
    for (int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

inline void softmax_row(const double* xr, double* yr, int64_t cols) {
  double mx = xr[0];
  for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
  double sum = 0.0;
  for (int64_t j = 0; j < cols; ++j) {
    yr[j] = std::exp(xr[j] - mx);
    sum += yr[j];
  }
  const double inv = 1.0 / sum;
  for (int64_t j = 0; j < cols; ++j) yr[j] *= inv;
}

inline void layer_norm_row(const double* xr, const double* gamma, const double* beta, double* yr,
                           double* mean_out, double* inv_std_out, int64_t cols, double eps) {
  double mean = 0.0;
  for (int64_t j = 0; j < cols; ++j) mean += xr[j];
  mean /= static_cast<double>(cols);
  double var = 0.0;
  for (int64_t j = 0; j < cols; ++j) {
    const double dv = xr[j] - mean;
    var += dv * dv;
  }
  var /= static_cast<double>(cols);
  const double inv_std = 1.0 / std::sqrt(var + eps);
  for (int64_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mean) * inv_std * gamma[j] + beta[j];
  *mean_out = mean;
  *inv_std_out = inv_std;
}

inline void bilinear_point(const double* map, int64_t h, int64_t w, int64_t d, double x, double y,
                           double* out) {
  // half-pixel centers: sample coordinate relative to cell-center lattice
  const double u = x - 0.5;
  const double v = y - 0.5;
  const int64_t j0 = static_cast<int64_t>(std::floor(u));
  const int64_t i0 = static_cast<int64_t>(std::floor(v));
  const double fu = u - static_cast<double>(j0);
  const double fv = v - static_cast<double>(i0);
  const double wts[4] = {(1.0 - fv) * (1.0 - fu), (1.0 - fv) * fu, fv * (1.0 - fu), fv * fu};
  const int64_t is[4] = {i0, i0, i0 + 1, i0 + 1};
  const int64_t js[4] = {j0, j0 + 1, j0, j0 + 1};
  for (int64_t c = 0; c < d; ++c) out[c] = 0.0;
  for (int t = 0; t < 4; ++t) {
    if (is[t] < 0 || is[t] >= h || js[t] < 0 || js[t] >= w) continue;
    const double* cell = map + (is[t] * w + js[t]) * d;
    const double wt = wts[t];
    for (int64_t c = 0; c < d; ++c) out[c] += wt * cell[c];
  }
}

inline void sine_pos_row(double cx, double cy, int64_t d, double temperature, double* out) {
  const double two_pi = 6.283185307179586476925286766559;
  const int64_t half = d / 2;
  const int64_t pairs = half / 2;
  const double px = cx * two_pi;
  const double py = cy * two_pi;
  for (int64_t kpair = 0; kpair < pairs; ++kpair) {
    const double div = std::pow(temperature, (2.0 * static_cast<double>(kpair)) /
                                                 static_cast<double>(half));
    out[2 * kpair] = std::sin(px / div);
    out[2 * kpair + 1] = std::cos(px / div);
    out[half + 2 * kpair] = std::sin(py / div);
    out[half + 2 * kpair + 1] = std::cos(py / div);
  }
}

}  // namespace

void matmul(const double* a, const double* bmat, double* c, int64_t batch, int64_t m, int64_t k,
            int64_t n, bool broadcast_b, bool accumulate) {
  const int64_t rows = batch * m;
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t b = r / m;
    const double* bm = broadcast_b ? bmat : bmat + b * k * n;
    matmul_row(a + r * k, bm, c + r * n, k, n, accumulate);
  }
}

void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) softmax_row(x + r * cols, y + r * cols, cols);
}

void softmax_rows_backward(const double* y, const double* dy, double* dx, int64_t rows,
                           int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const double* yr = y + r * cols;
    const double* dyr = dy + r * cols;
    double* dxr = dx + r * cols;
    double dot = 0.0;
    for (int64_t j = 0; j < cols; ++j) dot += dyr[j] * yr[j];
    for (int64_t j = 0; j < cols; ++j) dxr[j] += (dyr[j] - dot) * yr[j];
  }
}

void layer_norm_rows(const double* x, const double* gamma, const double* beta, double* y,
                     double* mean, double* inv_std, int64_t rows, int64_t cols, double eps) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r)
    layer_norm_row(x + r * cols, gamma, beta, y + r * cols, mean + r, inv_std + r, cols, eps);
}

void layer_norm_rows_backward(const double* x, const double* gamma, const double* mean,
                              const double* inv_std, const double* dy, double* dx, double* dgamma,
                              double* dbeta, int64_t rows, int64_t cols) {
  // dx rows are independent; dgamma/dbeta reductions over rows stay serial so
  // the accumulation order is fixed.
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    const double* dyr = dy + r * cols;
    double* dxr = dx + r * cols;
    const double mu = mean[r];
    const double is = inv_std[r];
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double xhat = (xr[j] - mu) * is;
      const double dxhat = dyr[j] * gamma[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
    }
    const double ncols = static_cast<double>(cols);
    for (int64_t j = 0; j < cols; ++j) {
      const double xhat = (xr[j] - mu) * is;
      const double dxhat = dyr[j] * gamma[j];
      dxr[j] += is * (dxhat - sum_dxhat / ncols - xhat * sum_dxhat_xhat / ncols);
    }
  }
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    const double* dyr = dy + r * cols;
    const double mu = mean[r];
    const double is = inv_std[r];
    for (int64_t j = 0; j < cols; ++j) {
      dgamma[j] += dyr[j] * (xr[j] - mu) * is;
      dbeta[j] += dyr[j];
    }
  }
}

void bilinear_gather(const double* map, int64_t h, int64_t w, int64_t d, const double* xy,
                     int64_t p, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < p; ++i)
    bilinear_point(map, h, w, d, xy[2 * i], xy[2 * i + 1], out + i * d);
}

void bilinear_scatter(double* dmap, int64_t h, int64_t w, int64_t d, const double* xy, int64_t p,
                      const double* dout) {
  for (int64_t i = 0; i < p; ++i) {
    const double u = xy[2 * i] - 0.5;
    const double v = xy[2 * i + 1] - 0.5;
    const int64_t j0 = static_cast<int64_t>(std::floor(u));
    const int64_t i0 = static_cast<int64_t>(std::floor(v));
    const double fu = u - static_cast<double>(j0);
    const double fv = v - static_cast<double>(i0);
    const double wts[4] = {(1.0 - fv) * (1.0 - fu), (1.0 - fv) * fu, fv * (1.0 - fu), fv * fu};
    const int64_t is[4] = {i0, i0, i0 + 1, i0 + 1};
    const int64_t js[4] = {j0, j0 + 1, j0, j0 + 1};
    const double* dr = dout + i * d;
    for (int t = 0; t < 4; ++t) {
      if (is[t] < 0 || is[t] >= h || js[t] < 0 || js[t] >= w) continue;
      double* cell = dmap + (is[t] * w + js[t]) * d;
      const double wt = wts[t];
      for (int64_t c = 0; c < d; ++c) cell[c] += wt * dr[c];
    }
  }
}

void sine_pos_embed_rows(const double* coords, int64_t p, int64_t d, double temperature,
                         double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < p; ++i)
    sine_pos_row(coords[2 * i], coords[2 * i + 1], d, temperature, out + i * d);
}

namespace ref {

void matmul(const double* a, const double* bmat, double* c, int64_t batch, int64_t m, int64_t k,
            int64_t n, bool broadcast_b, bool accumulate) {
  const int64_t rows = batch * m;
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t b = r / m;
    const double* bm = broadcast_b ? bmat : bmat + b * k * n;
    matmul_row(a + r * k, bm, c + r * n, k, n, accumulate);
  }
}

void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) softmax_row(x + r * cols, y + r * cols, cols);
}

void layer_norm_rows(const double* x, const double* gamma, const double* beta, double* y,
                     double* mean, double* inv_std, int64_t rows, int64_t cols, double eps) {
  for (int64_t r = 0; r < rows; ++r)
    layer_norm_row(x + r * cols, gamma, beta, y + r * cols, mean + r, inv_std + r, cols, eps);
}

void bilinear_gather(const double* map, int64_t h, int64_t w, int64_t d, const double* xy,
                     int64_t p, double* out) {
  for (int64_t i = 0; i < p; ++i)
    bilinear_point(map, h, w, d, xy[2 * i], xy[2 * i + 1], out + i * d);
}

void sine_pos_embed_rows(const double* coords, int64_t p, int64_t d, double temperature,
                         double* out) {
  for (int64_t i = 0; i < p; ++i)
    sine_pos_row(coords[2 * i], coords[2 * i + 1], d, temperature, out + i * d);
}

}  // namespace ref

}  // namespace dedetr::kernels
