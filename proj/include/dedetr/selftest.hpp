#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dedetr/geometry.hpp"
#include "dedetr/sampling.hpp"

namespace dedetr::selftest {

// Independent references, deliberately written from first principles rather
// than by calling the production code they check.

// Minimum total cost over all injective row->column maps (exhaustive).
double brute_force_assignment(const std::vector<double>& cost, int64_t rows, int64_t cols);

// Greedy NMS by repeated global-max selection with its own IoU arithmetic.
std::vector<Detection> reference_nms(const std::vector<Detection>& dets, double threshold);

// Bilinear read of one point, re-derived from the half-pixel definition.
std::vector<double> reference_bilinear(const std::vector<double>& map, int64_t h, int64_t w,
                                       int64_t channels, double x, double y);

// Single-head masked attention over raw arrays: softmax(q.k/sqrt(d)) v
// restricted to `allowed` key indices. Positions added to q/k only.
std::vector<double> reference_masked_attention(const std::vector<double>& q,
                                               const std::vector<double>& keys,
                                               const std::vector<double>& values,
                                               const std::vector<double>& q_pos,
                                               const std::vector<double>& k_pos,
                                               const std::vector<int64_t>& allowed, int64_t dim);

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

CheckResult check_kernel_parity();        // parallel kernels == serial reference, bitwise
CheckResult check_hungarian_oracle();     // 1000 random matrices vs brute force, < 10 s
CheckResult check_gradient_suite();       // per-op + roi_align finite differences
CheckResult check_roi_align_oracle();     // 100 random cases + aligned-box exactness
CheckResult check_nms_oracle();           // 100 random sets at 4 thresholds + idempotence
CheckResult check_augmentation();         // counts, per-label balance, 2M matched at R=2
CheckResult check_sparse_dense_equivalence();  // aligned-box masked-attention match
CheckResult check_checkpoint_roundtrip();

std::vector<CheckResult> run_all_checks();

// Prints one line per check; returns 0 when everything passed, 1 otherwise.
int run_selftest(std::ostream& log);

}  // namespace dedetr::selftest
