#pragma once

#include <cstdint>

// Data-parallel inner loops behind the tensor ops. Each output element is
// produced by exactly one thread with a fixed serial reduction order, so
// results are bit-identical to the serial reference regardless of thread
// count. kernels::ref holds the serial twins used by tests and the benchmark.

namespace dedetr::kernels {

// c[b,m,n] (+)= sum_k a[b,m,k] * bmat[b,k,n]; broadcast_b shares bmat[k,n]
// across the batch. accumulate adds into c instead of overwriting.
void matmul(const double* a, const double* bmat, double* c, int64_t batch, int64_t m, int64_t k,
            int64_t n, bool broadcast_b, bool accumulate);

// row-wise softmax with max subtraction, x and y are [rows, cols]
void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols);
void softmax_rows_backward(const double* y, const double* dy, double* dx, int64_t rows,
                           int64_t cols);

// row-wise layer norm over the last axis; saves per-row mean and inverse std
// for the backward pass
void layer_norm_rows(const double* x, const double* gamma, const double* beta, double* y,
                     double* mean, double* inv_std, int64_t rows, int64_t cols, double eps);
void layer_norm_rows_backward(const double* x, const double* gamma, const double* mean,
                              const double* inv_std, const double* dy, double* dx, double* dgamma,
                              double* dbeta, int64_t rows, int64_t cols);

// bilinear sampling of a [h, w, d] map at p continuous points given in cell
// coordinates (cell (i,j) has center (j+0.5, i+0.5)); out-of-bounds neighbors
// contribute zero. xy is [p, 2] as (x, y); out is [p, d].
void bilinear_gather(const double* map, int64_t h, int64_t w, int64_t d, const double* xy,
                     int64_t p, double* out);
// transpose of bilinear_gather: scatter-adds dout into dmap. Serial, the
// scatter targets overlap between points.
void bilinear_scatter(double* dmap, int64_t h, int64_t w, int64_t d, const double* xy, int64_t p,
                      const double* dout);

// sine/cosine positional embedding rows; coords is [p, 2] normalized (x, y)
// in [0, 1], out is [p, d] with the x channels in the first d/2 columns.
void sine_pos_embed_rows(const double* coords, int64_t p, int64_t d, double temperature,
                         double* out);

namespace ref {
void matmul(const double* a, const double* bmat, double* c, int64_t batch, int64_t m, int64_t k,
            int64_t n, bool broadcast_b, bool accumulate);
void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols);
void layer_norm_rows(const double* x, const double* gamma, const double* beta, double* y,
                     double* mean, double* inv_std, int64_t rows, int64_t cols, double eps);
void bilinear_gather(const double* map, int64_t h, int64_t w, int64_t d, const double* xy,
                     int64_t p, double* out);
void sine_pos_embed_rows(const double* coords, int64_t p, int64_t d, double temperature,
                         double* out);
}  // namespace ref

}  // namespace dedetr::kernels
