// Times the OpenMP kernels against their serial reference twins and reports
// the speedup on this machine.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "dedetr/kernels.hpp"
#include "dedetr/rng.hpp"

namespace {

using dedetr::Rng;

std::vector<double> random_vec(size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform() * 2.0 - 1.0;
  return v;
}

double time_ms(const std::function<void()>& fn, int iters) {
  fn();  // warm up
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) fn();
  const auto stop = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(stop - start).count() / iters;
}

void report(const char* name, const char* size, double serial_ms, double parallel_ms) {
  std::printf("%-14s %-20s %10.3f %12.3f %8.2fx\n", name, size, serial_ms, parallel_ms,
              serial_ms / parallel_ms);
}

}  // namespace

int main() {
  namespace k = dedetr::kernels;
  Rng rng(12345);
  const int iters = 5;

  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%-14s %-20s %10s %12s %9s\n", "kernel", "size", "serial ms", "parallel ms",
              "speedup");

  {
    const int64_t b = 8, m = 128, kk = 128, n = 128;
    auto a = random_vec(b * m * kk, rng), bm = random_vec(b * kk * n, rng);
    std::vector<double> c(b * m * n);
    report("matmul", "8x128x128x128",
           time_ms([&] { k::ref::matmul(a.data(), bm.data(), c.data(), b, m, kk, n, false, false); },
                   iters),
           time_ms([&] { k::matmul(a.data(), bm.data(), c.data(), b, m, kk, n, false, false); },
                   iters));
  }
  {
    const int64_t rows = 4096, cols = 256;
    auto x = random_vec(rows * cols, rng);
    std::vector<double> y(rows * cols);
    report("softmax_rows", "4096x256",
           time_ms([&] { k::ref::softmax_rows(x.data(), y.data(), rows, cols); }, iters),
           time_ms([&] { k::softmax_rows(x.data(), y.data(), rows, cols); }, iters));
  }
  {
    const int64_t rows = 4096, cols = 256;
    auto x = random_vec(rows * cols, rng), gamma = random_vec(cols, rng),
         beta = random_vec(cols, rng);
    std::vector<double> y(rows * cols), mean(rows), inv_std(rows);
    report("layer_norm", "4096x256",
           time_ms(
               [&] {
                 k::ref::layer_norm_rows(x.data(), gamma.data(), beta.data(), y.data(),
                                         mean.data(), inv_std.data(), rows, cols, 1e-5);
               },
               iters),
           time_ms(
               [&] {
                 k::layer_norm_rows(x.data(), gamma.data(), beta.data(), y.data(), mean.data(),
                                    inv_std.data(), rows, cols, 1e-5);
               },
               iters));
  }
  {
    const int64_t h = 64, w = 64, d = 64, p = 65536;
    auto map = random_vec(h * w * d, rng);
    std::vector<double> xy(2 * p), out(p * d);
    for (int64_t i = 0; i < p; ++i) {
      xy[2 * i] = rng.uniform() * w;
      xy[2 * i + 1] = rng.uniform() * h;
    }
    report("bilinear", "64x64x64, 65536 pts",
           time_ms([&] { k::ref::bilinear_gather(map.data(), h, w, d, xy.data(), p, out.data()); },
                   iters),
           time_ms([&] { k::bilinear_gather(map.data(), h, w, d, xy.data(), p, out.data()); },
                   iters));
  }
  {
    const int64_t p = 65536, d = 64;
    std::vector<double> coords(2 * p), out(p * d);
    for (double& c : coords) c = rng.uniform();
    report("sine_embed", "65536x64",
           time_ms([&] { k::ref::sine_pos_embed_rows(coords.data(), p, d, 1e4, out.data()); },
                   iters),
           time_ms([&] { k::sine_pos_embed_rows(coords.data(), p, d, 1e4, out.data()); }, iters));
  }
  return 0;
}
