#include "dedetr/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include "dedetr/checkpoint.hpp"
#include "dedetr/data.hpp"
#include "dedetr/kernels.hpp"
#include "dedetr/model.hpp"
#include "dedetr/rng.hpp"
#include "dedetr/supervision.hpp"
#include "dedetr/tensor.hpp"

namespace dedetr::selftest {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

Tensor random_tensor(const Shape& dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(dims);
  for (double& x : t.values()) x = lo + (hi - lo) * rng.uniform();
  return t;
}

}  // namespace

double brute_force_assignment(const std::vector<double>& cost, int64_t rows, int64_t cols) {
  if (rows > cols) throw ContractError("brute force: more rows than columns");
  std::vector<char> used(cols, 0);
  std::function<double(int64_t)> best_from = [&](int64_t r) -> double {
    if (r == rows) return 0.0;
    double best = std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < cols; ++c) {
      if (used[c]) continue;
      used[c] = 1;
      best = std::min(best, cost[r * cols + c] + best_from(r + 1));
      used[c] = 0;
    }
    return best;
  };
  return best_from(0);
}

std::vector<Detection> reference_nms(const std::vector<Detection>& dets, double threshold) {
  auto overlap = [](const Box& a, const Box& b) {
    const double ax1 = a.v[0] - a.v[2] / 2, ax2 = a.v[0] + a.v[2] / 2;
    const double ay1 = a.v[1] - a.v[3] / 2, ay2 = a.v[1] + a.v[3] / 2;
    const double bx1 = b.v[0] - b.v[2] / 2, bx2 = b.v[0] + b.v[2] / 2;
    const double by1 = b.v[1] - b.v[3] / 2, by2 = b.v[1] + b.v[3] / 2;
    const double w = std::min(ax2, bx2) - std::max(ax1, bx1);
    const double h = std::min(ay2, by2) - std::max(ay1, by1);
    if (w <= 0 || h <= 0) return 0.0;
    const double inter = w * h;
    return inter / (a.v[2] * a.v[3] + b.v[2] * b.v[3] - inter);
  };
  std::vector<char> alive(dets.size(), 1);
  std::vector<Detection> kept;
  for (;;) {
    int64_t pick = -1;
    for (size_t i = 0; i < dets.size(); ++i)
      if (alive[i] && (pick < 0 || dets[i].score > dets[pick].score))
        pick = static_cast<int64_t>(i);  // strict >, so ties keep the earliest
    if (pick < 0) break;
    alive[pick] = 0;
    kept.push_back(dets[pick]);
    for (size_t i = 0; i < dets.size(); ++i)
      if (alive[i] && dets[i].class_id == dets[pick].class_id &&
          overlap(dets[i].box, dets[pick].box) > threshold)
        alive[i] = 0;
  }
  return kept;
}

std::vector<double> reference_bilinear(const std::vector<double>& map, int64_t h, int64_t w,
                                       int64_t channels, double x, double y) {
  const double u = x - 0.5, v = y - 0.5;
  const int64_t x0 = static_cast<int64_t>(std::floor(u));
  const int64_t y0 = static_cast<int64_t>(std::floor(v));
  const double ax = u - static_cast<double>(x0);
  const double ay = v - static_cast<double>(y0);
  std::vector<double> out(channels, 0.0);
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const int64_t yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      const double wgt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
      const double* cell = map.data() + (yy * w + xx) * channels;
      for (int64_t c = 0; c < channels; ++c) out[c] += wgt * cell[c];
    }
  return out;
}

namespace {

// Full multi-head masked attention over raw arrays; mirrors the production
// math with hand-written loops so the two implementations can disagree.
std::vector<double> masked_mha_reference(const AttentionParams& p, int num_heads,
                                         const std::vector<double>& q_row,
                                         const std::vector<double>& q_pos_row,
                                         const double* k_rows, const double* k_pos_rows,
                                         const double* v_rows,
                                         const std::vector<int64_t>& allowed, int64_t dim) {
  auto project = [&](const std::vector<double>& x, const Tensor& w, const Tensor& b) {
    std::vector<double> out(dim, 0.0);
    const double* wd = w.data();
    for (int64_t j = 0; j < dim; ++j) {
      double acc = b.data()[j];
      for (int64_t i = 0; i < dim; ++i) acc += x[i] * wd[i * dim + j];
      out[j] = acc;
    }
    return out;
  };
  std::vector<double> qin(dim);
  for (int64_t i = 0; i < dim; ++i) qin[i] = q_row[i] + q_pos_row[i];
  const std::vector<double> Q = project(qin, p.wq, p.bq);

  const size_t s = allowed.size();
  std::vector<std::vector<double>> K(s), V(s);
  for (size_t t = 0; t < s; ++t) {
    std::vector<double> kin(dim);
    for (int64_t i = 0; i < dim; ++i)
      kin[i] = k_rows[allowed[t] * dim + i] + k_pos_rows[allowed[t] * dim + i];
    K[t] = project(kin, p.wk, p.bk);
    std::vector<double> vin(v_rows + allowed[t] * dim, v_rows + (allowed[t] + 1) * dim);
    V[t] = project(vin, p.wv, p.bv);
  }

  const int64_t dh = dim / num_heads;
  std::vector<double> ctx(dim, 0.0);
  for (int h = 0; h < num_heads; ++h) {
    std::vector<double> logits(s);
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t t = 0; t < s; ++t) {
      double acc = 0.0;
      for (int64_t c = h * dh; c < (h + 1) * dh; ++c) acc += Q[c] * K[t][c];
      logits[t] = acc / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, logits[t]);
    }
    double z = 0.0;
    for (size_t t = 0; t < s; ++t) {
      logits[t] = std::exp(logits[t] - mx);
      z += logits[t];
    }
    for (size_t t = 0; t < s; ++t)
      for (int64_t c = h * dh; c < (h + 1) * dh; ++c) ctx[c] += logits[t] / z * V[t][c];
  }
  return project(ctx, p.wo, p.bo);
}

}  // namespace

std::vector<double> reference_masked_attention(const std::vector<double>& q,
                                               const std::vector<double>& keys,
                                               const std::vector<double>& values,
                                               const std::vector<double>& q_pos,
                                               const std::vector<double>& k_pos,
                                               const std::vector<int64_t>& allowed, int64_t dim) {
  // single-head, identity projections: softmax(q.k/sqrt(dim)) v over `allowed`
  const size_t s = allowed.size();
  std::vector<double> logits(s);
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t t = 0; t < s; ++t) {
    double acc = 0.0;
    for (int64_t i = 0; i < dim; ++i)
      acc += (q[i] + q_pos[i]) * (keys[allowed[t] * dim + i] + k_pos[allowed[t] * dim + i]);
    logits[t] = acc / std::sqrt(static_cast<double>(dim));
    mx = std::max(mx, logits[t]);
  }
  double z = 0.0;
  for (size_t t = 0; t < s; ++t) {
    logits[t] = std::exp(logits[t] - mx);
    z += logits[t];
  }
  std::vector<double> out(dim, 0.0);
  for (size_t t = 0; t < s; ++t)
    for (int64_t i = 0; i < dim; ++i) out[i] += logits[t] / z * values[allowed[t] * dim + i];
  return out;
}

CheckResult check_kernel_parity() {
  Rng rng(41);
  auto fill = [&](std::vector<double>& v) {
    for (double& x : v) x = rng.uniform() * 2.0 - 1.0;
  };
  auto same = [](const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
  };

  const int64_t batch = 3, m = 4, k = 5, n = 6;
  std::vector<double> a(batch * m * k), b(batch * k * n), bshared(k * n);
  fill(a);
  fill(b);
  fill(bshared);
  for (bool broadcast : {false, true})
    for (bool accumulate : {false, true}) {
      std::vector<double> c1(batch * m * n), c2(batch * m * n);
      fill(c1);
      c2 = c1;
      kernels::matmul(a.data(), broadcast ? bshared.data() : b.data(), c1.data(), batch, m, k, n,
                      broadcast, accumulate);
      kernels::ref::matmul(a.data(), broadcast ? bshared.data() : b.data(), c2.data(), batch, m,
                           k, n, broadcast, accumulate);
      if (!same(c1, c2)) return {"kernel parity", false, "matmul differs from serial reference"};
    }

  const int64_t rows = 7, cols = 9;
  std::vector<double> x(rows * cols), y1(rows * cols), y2(rows * cols);
  fill(x);
  kernels::softmax_rows(x.data(), y1.data(), rows, cols);
  kernels::ref::softmax_rows(x.data(), y2.data(), rows, cols);
  if (!same(y1, y2)) return {"kernel parity", false, "softmax differs from serial reference"};

  std::vector<double> gamma(cols), beta(cols), mean1(rows), mean2(rows), is1(rows), is2(rows);
  fill(gamma);
  fill(beta);
  kernels::layer_norm_rows(x.data(), gamma.data(), beta.data(), y1.data(), mean1.data(),
                           is1.data(), rows, cols, 1e-5);
  kernels::ref::layer_norm_rows(x.data(), gamma.data(), beta.data(), y2.data(), mean2.data(),
                                is2.data(), rows, cols, 1e-5);
  if (!same(y1, y2) || !same(mean1, mean2) || !same(is1, is2))
    return {"kernel parity", false, "layer_norm differs from serial reference"};

  const int64_t h = 7, w = 5, d = 3, p = 40;
  std::vector<double> map(h * w * d), xy(2 * p), o1(p * d), o2(p * d);
  fill(map);
  for (int64_t i = 0; i < p; ++i) {
    xy[2 * i] = rng.uniform() * (w + 4.0) - 2.0;  // includes off-map points
    xy[2 * i + 1] = rng.uniform() * (h + 4.0) - 2.0;
  }
  kernels::bilinear_gather(map.data(), h, w, d, xy.data(), p, o1.data());
  kernels::ref::bilinear_gather(map.data(), h, w, d, xy.data(), p, o2.data());
  if (!same(o1, o2)) return {"kernel parity", false, "bilinear differs from serial reference"};

  const int64_t pd = 16, pts = 20;
  std::vector<double> coords(2 * pts), e1(pts * pd), e2(pts * pd);
  for (double& c : coords) c = rng.uniform();
  kernels::sine_pos_embed_rows(coords.data(), pts, pd, 1e4, e1.data());
  kernels::ref::sine_pos_embed_rows(coords.data(), pts, pd, 1e4, e2.data());
  if (!same(e1, e2)) return {"kernel parity", false, "sine embed differs from serial reference"};

  return {"kernel parity", true, "parallel kernels bitwise equal serial references"};
}

CheckResult check_hungarian_oracle() {
  Rng rng(1234);
  const auto start = std::chrono::steady_clock::now();
  double max_diff = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t rows = 1 + static_cast<int64_t>(rng.uniform_index(7));
    const int64_t cols = rows + static_cast<int64_t>(rng.uniform_index(8 - rows + 1));
    std::vector<double> cost(rows * cols);
    for (double& c : cost) c = rng.uniform() * 2.0 - 1.0;
    const Assignment got = hungarian(cost, rows, cols);
    std::vector<char> seen(cols, 0);
    for (int64_t r = 0; r < rows; ++r) {
      const int64_t q = got.entry_to_query[r];
      if (q < 0 || q >= cols || seen[q])
        return {"hungarian oracle", false, "assignment not injective"};
      seen[q] = 1;
    }
    const double want = brute_force_assignment(cost, rows, cols);
    max_diff = std::max(max_diff, std::abs(got.total_cost - want));
    if (std::abs(got.total_cost - want) > 1e-9)
      return {"hungarian oracle", false,
              "trial " + std::to_string(trial) + ": cost " + fmt(got.total_cost) +
                  " vs brute force " + fmt(want)};
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (secs >= 10.0)
    return {"hungarian oracle", false, "took " + fmt(secs) + " s (budget 10 s)"};
  return {"hungarian oracle", true,
          "1000 matrices, max |cost - brute force| = " + fmt(max_diff) + ", " + fmt(secs) + " s"};
}

CheckResult check_gradient_suite() {
  Rng rng(99);
  double worst = 0.0;
  std::string worst_name;
  auto run = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& f,
                 const std::function<Tensor(Rng&)>& make_x, int points = 5) -> bool {
    for (int t = 0; t < points; ++t) {
      Tensor x = make_x(rng);
      const double err = finite_diff_check(f, x, 1e-6);
      if (err > worst) {
        worst = err;
        worst_name = name;
      }
      if (err > 1e-4) {
        worst_name = name + " (rel err " + fmt(err) + ")";
        return false;
      }
    }
    return true;
  };

  const Shape s34{3, 4};
  Tensor c34 = random_tensor(s34, rng);
  Tensor w34 = random_tensor(s34, rng);
  Tensor cpos = random_tensor(s34, rng, 0.5, 1.5);
  auto weighted = [](const Tensor& y, const Tensor& w) { return sum_all(mul(y, w)); };
  auto mk34 = [&](Rng& r) { return random_tensor(s34, r); };

  struct Case {
    std::string name;
    std::function<Tensor(const Tensor&)> f;
    std::function<Tensor(Rng&)> make_x;
  };
  Tensor w42 = random_tensor({4, 2}, rng);
  Tensor w32 = random_tensor({3, 2}, rng);
  Tensor c42 = random_tensor({4, 2}, rng);
  Tensor bias2 = random_tensor({2}, rng);
  Tensor w3d = random_tensor({2, 3, 2}, rng);
  Tensor c3d = random_tensor({2, 4, 2}, rng);
  Tensor c234 = random_tensor({2, 3, 4}, rng);
  Tensor gamma4 = random_tensor({4}, rng, 0.5, 1.5);
  Tensor beta4 = random_tensor({4}, rng);
  Tensor w35 = random_tensor({3, 5}, rng);
  Tensor c33 = random_tensor({3, 3}, rng);
  Tensor w44 = random_tensor({4, 4}, rng);
  Tensor w26 = random_tensor({2, 6}, rng);
  Tensor w43 = random_tensor({4, 3}, rng);
  Tensor w31 = random_tensor({3}, rng);   // sum over axis 1 of [3,4] squeezes to [3]
  Tensor w14 = random_tensor({4}, rng);   // mean over axis 0 of [3,4] squeezes to [4]
  Tensor w243 = random_tensor({4, 2, 3}, rng);

  const std::vector<Case> cases = {
      {"add", [&](const Tensor& x) { return weighted(add(x, c34), w34); }, mk34},
      {"add bias broadcast",
       [&](const Tensor& x) { return weighted(add(c34, x), w34); },
       [&](Rng& r) { return random_tensor({4}, r); }},
      {"sub", [&](const Tensor& x) { return weighted(sub(x, c34), w34); }, mk34},
      {"mul", [&](const Tensor& x) { return weighted(mul(x, c34), w34); }, mk34},
      {"div numerator", [&](const Tensor& x) { return weighted(div(x, cpos), w34); }, mk34},
      {"div denominator",
       [&](const Tensor& x) { return weighted(div(c34, x), w34); },
       [&](Rng& r) { return random_tensor(s34, r, 0.5, 1.5); }},
      {"scale", [&](const Tensor& x) { return weighted(scale(x, 1.7), w34); }, mk34},
      {"add_scalar", [&](const Tensor& x) { return weighted(add_scalar(x, 0.3), w34); }, mk34},
      {"emin", [&](const Tensor& x) { return weighted(emin(x, c34), w34); }, mk34},
      {"emax", [&](const Tensor& x) { return weighted(emax(x, c34), w34); }, mk34},
      {"abs",
       [&](const Tensor& x) { return weighted(abs(x), w34); },
       [&](Rng& r) {
         Tensor t = random_tensor(s34, r, 0.2, 1.0);
         for (double& v : t.values())
           if (r.uniform() < 0.5) v = -v;
         return t;
       }},
      {"relu",
       [&](const Tensor& x) { return weighted(relu(x), w34); },
       [&](Rng& r) {
         Tensor t = random_tensor(s34, r);
         for (double& v : t.values())
           if (std::abs(v) < 0.01) v += 0.05;  // keep clear of the kink
         return t;
       }},
      {"sigmoid", [&](const Tensor& x) { return weighted(sigmoid(x), w34); }, mk34},
      {"inverse_sigmoid",
       [&](const Tensor& x) { return weighted(inverse_sigmoid(x), w34); },
       [&](Rng& r) { return random_tensor(s34, r, 0.05, 0.95); }},
      {"matmul lhs", [&](const Tensor& x) { return weighted(matmul(x, c42), w32); }, mk34},
      {"matmul rhs",
       [&](const Tensor& x) { return weighted(matmul(c34, x), w32); },
       [&](Rng& r) { return random_tensor({4, 2}, r); }},
      {"matmul batched lhs",
       [&](const Tensor& x) { return weighted(matmul(x, c3d), w3d); },
       [&](Rng& r) { return random_tensor({2, 3, 4}, r); }},
      {"matmul batched rhs",
       [&](const Tensor& x) { return weighted(matmul(c234, x), w3d); },
       [&](Rng& r) { return random_tensor({2, 4, 2}, r); }},
      {"matmul rank3x2",
       [&](const Tensor& x) { return weighted(matmul(c234, x), w3d); },
       [&](Rng& r) { return random_tensor({4, 2}, r); }},
      {"linear x", [&](const Tensor& x) { return weighted(linear(x, w42, bias2), w32); }, mk34},
      {"linear w",
       [&](const Tensor& x) { return weighted(linear(c34, x, bias2), w32); },
       [&](Rng& r) { return random_tensor({4, 2}, r); }},
      {"linear b",
       [&](const Tensor& x) { return weighted(linear(c34, c42, x), w32); },
       [&](Rng& r) { return random_tensor({2}, r); }},
      {"softmax last", [&](const Tensor& x) { return weighted(softmax(x, -1), w34); }, mk34},
      {"softmax axis0", [&](const Tensor& x) { return weighted(softmax(x, 0), w34); }, mk34},
      {"log_softmax", [&](const Tensor& x) { return weighted(log_softmax(x), w34); }, mk34},
      {"layer_norm x",
       [&](const Tensor& x) { return weighted(layer_norm(x, gamma4, beta4, -1), w34); }, mk34},
      {"layer_norm gamma",
       [&](const Tensor& x) { return weighted(layer_norm(c34, x, beta4, -1), w34); },
       [&](Rng& r) { return random_tensor({4}, r, 0.5, 1.5); }},
      {"layer_norm beta",
       [&](const Tensor& x) { return weighted(layer_norm(c34, gamma4, x, -1), w34); },
       [&](Rng& r) { return random_tensor({4}, r); }},
      {"layer_norm axis0",
       [&](const Tensor& x) {
         Tensor g3 = Tensor::constant({3}, 1.2);
         Tensor b3 = Tensor::constant({3}, 0.1);
         return weighted(layer_norm(x, g3, b3, 0), w34);
       },
       mk34},
      {"concat",
       [&](const Tensor& x) { return weighted(concat({x, c33}, 1), w35); },
       [&](Rng& r) { return random_tensor({3, 2}, r); }},
      {"slice", [&](const Tensor& x) { return weighted(slice(x, 1, 1, 2), w32); }, mk34},
      {"reshape", [&](const Tensor& x) { return weighted(reshape(x, {2, 6}), w26); }, mk34},
      {"transpose 2d", [&](const Tensor& x) { return weighted(transpose(x, {1, 0}), w43); },
       mk34},
      {"transpose 3d",
       [&](const Tensor& x) { return weighted(transpose(x, {2, 0, 1}), w243); },
       [&](Rng& r) { return random_tensor({2, 3, 4}, r); }},
      {"sum axis", [&](const Tensor& x) { return weighted(sum(x, 1), w31); }, mk34},
      {"mean axis", [&](const Tensor& x) { return weighted(mean(x, 0), w14); }, mk34},
      {"sum_all", [&](const Tensor& x) { return sum_all(x); }, mk34},
      {"gather_rows",
       [&](const Tensor& x) { return weighted(gather_rows(x, {2, 0, 2, 1}), w44); }, mk34},
  };
  for (const Case& c : cases)
    if (!run(c.name, c.f, c.make_x))
      return {"gradient suite", false, "finite differences reject " + worst_name};

  // roi_align with respect to map values
  {
    BoxSet boxes = {Box::cxcywh(0.45, 0.5, 0.5, 0.6), Box::cxcywh(0.2, 0.25, 0.42, 0.38)};
    Tensor wro = random_tensor({2, 9, 3}, rng);
    auto f = [&](const Tensor& t) {
      FeatureMap fm{5, 6, 3, 8, t};
      return sum_all(mul(roi_align(fm, boxes, 3), wro));
    };
    auto make_map = [&](Rng& r) { return random_tensor({5, 6, 3}, r); };
    if (!run("roi_align", f, make_map, 3))
      return {"gradient suite", false, "finite differences reject " + worst_name};
  }

  // End-to-end: tiny models, loss gradient at 20 random parameter coordinates.
  // Sampling coordinates and refinement references come from boxes that are
  // excluded from the gradient on purpose (stop-gradient), and a finite
  // difference would see straight through that cut. Both variants therefore
  // keep every *active* path differentiable: the dense variant turns sparse
  // sampling and refinement off and probes all parameters; the sparse variant
  // pins the boxes (final box-head layer zeroed, so every box is a constant
  // centered square) and probes the remaining parameters, which covers the
  // RoI value path end to end.
  {
    SceneSpec spec;
    spec.image_size = 64;
    spec.strides = {16, 32};
    spec.channels = 8;
    spec.num_classes = 3;
    spec.max_objects = 2;
    spec.scale_min = 0.3;
    spec.scale_max = 0.6;
    spec.noise_std = 0.02;
    spec.seed = 5;
    const Scene scene = gen_scene(spec, 0);

    ModelConfig base_mc;
    base_mc.hidden_dim = 16;
    base_mc.num_heads = 2;
    base_mc.num_queries = 4;
    base_mc.enc_layers = 1;
    base_mc.dec_layers = 2;
    base_mc.ffn_dim = 32;
    base_mc.roi_resolution = 2;
    base_mc.num_levels = 2;
    base_mc.in_channels = 8;
    base_mc.box_refine = false;

    struct Variant {
      const char* tag;
      bool sparse;
      uint64_t probe_seed;
    };
    const Variant variants[] = {{"dense", false, 4242}, {"sparse", true, 4243}};

    double e2e_worst = 0.0;
    for (const Variant& variant : variants) {
      ModelConfig mc = base_mc;
      mc.sparse_sampling = variant.sparse;
      mc.multiscale = variant.sparse;
      Model model(mc, 17);
      if (variant.sparse) {
        Tensor w3 = model.param("box.w3");
        Tensor b3 = model.param("box.b3");
        std::fill(w3.values().begin(), w3.values().end(), 0.0);
        std::fill(b3.values().begin(), b3.values().end(), 0.0);
      }

      LabelSet labels = scene.labels;
      labels.pad_to = mc.num_queries;
      const AugmentedLabelSet aug = augment_none(labels);
      const MatchWeights weights;
      auto loss_value = [&]() {
        Tensor loss = set_loss(model.forward(scene.pyramid), aug, weights, 0.1, nullptr);
        const double v = loss.scalar();
        Tape::current().clear();
        return v;
      };

      model.zero_grads();
      backward(set_loss(model.forward(scene.pyramid), aug, weights, 0.1, nullptr));

      std::vector<std::pair<std::string, Tensor>> pool;
      for (const auto& [name, t] : model.parameters())
        if (!variant.sparse || name.rfind("box.", 0) != 0) pool.emplace_back(name, t);
      int64_t total = 0;
      for (const auto& [name, t] : pool) total += t.numel();

      Rng pick(variant.probe_seed);
      const double h = 1e-5;
      for (int probe = 0; probe < 20; ++probe) {
        int64_t flat = static_cast<int64_t>(pick.uniform_index(static_cast<uint64_t>(total)));
        size_t pi = 0;
        while (flat >= pool[pi].second.numel()) flat -= pool[pi++].second.numel();
        Tensor t = pool[pi].second;
        const double analytic = t.grad()[flat];
        const double saved = t.data()[flat];
        t.data()[flat] = saved + h;
        const double fp = loss_value();
        t.data()[flat] = saved - h;
        const double fm = loss_value();
        t.data()[flat] = saved;
        const double fd = (fp - fm) / (2.0 * h);
        const double rel = std::abs(analytic - fd) / std::max(1.0, std::abs(analytic));
        e2e_worst = std::max(e2e_worst, rel);
        if (rel > 1e-3)
          return {"gradient suite", false,
                  std::string("end-to-end (") + variant.tag + ") gradient at " + pool[pi].first +
                      "[" + std::to_string(flat) + "]: analytic " + fmt(analytic) + " vs fd " +
                      fmt(fd)};
      }
    }
    return {"gradient suite", true,
            "per-op worst rel err " + fmt(worst) + " (" + worst_name + "), end-to-end worst " +
                fmt(e2e_worst)};
  }
}

CheckResult check_roi_align_oracle() {
  Rng rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t h = 2 + static_cast<int64_t>(rng.uniform_index(8));
    const int64_t w = 2 + static_cast<int64_t>(rng.uniform_index(8));
    const int64_t c = 1 + static_cast<int64_t>(rng.uniform_index(4));
    const int k = 1 + static_cast<int>(rng.uniform_index(5));
    Tensor map = random_tensor({h, w, c}, rng);
    FeatureMap fm{h, w, c, 8, map};
    BoxSet boxes;
    const int64_t nb = 1 + static_cast<int64_t>(rng.uniform_index(3));
    for (int64_t i = 0; i < nb; ++i)
      boxes.push_back(Box::cxcywh(rng.uniform(), rng.uniform(), 0.05 + 0.9 * rng.uniform(),
                                  0.05 + 0.9 * rng.uniform()));
    Tensor got = roi_align(fm, boxes, k);
    for (size_t bi = 0; bi < boxes.size(); ++bi) {
      std::vector<double> xs, ys;
      roi_sample_points(boxes[bi], h, w, k, xs, ys);
      for (int64_t pt = 0; pt < k * k; ++pt) {
        const std::vector<double> want =
            reference_bilinear(map.values(), h, w, c, xs[pt], ys[pt]);
        for (int64_t ch = 0; ch < c; ++ch) {
          const double diff =
              std::abs(got.data()[(bi * k * k + pt) * c + ch] - want[ch]);
          worst = std::max(worst, diff);
          if (diff > 1e-9)
            return {"roi_align oracle", false,
                    "trial " + std::to_string(trial) + " differs by " + fmt(diff)};
        }
      }
    }
  }
  // aligned box: bins coincide with whole cells, so outputs equal cell values
  {
    Rng r2(8);
    Tensor map = random_tensor({6, 6, 2}, r2);
    FeatureMap fm{6, 6, 2, 8, map};
    // cells x in [1,4), y in [2,5), K=3 -> bin centers at cell centers
    BoxSet boxes = {Box::cxcywh(2.5 / 6.0, 3.5 / 6.0, 3.0 / 6.0, 3.0 / 6.0)};
    Tensor got = roi_align(fm, boxes, 3);
    for (int by = 0; by < 3; ++by)
      for (int bx = 0; bx < 3; ++bx)
        for (int64_t ch = 0; ch < 2; ++ch) {
          const double want = map.data()[((2 + by) * 6 + (1 + bx)) * 2 + ch];
          if (got.data()[(by * 3 + bx) * 2 + ch] != want)
            return {"roi_align oracle", false, "aligned-box case is not exact"};
        }
  }
  return {"roi_align oracle", true, "100 random cases, worst diff " + fmt(worst) +
                                        "; aligned boxes exact"};
}

CheckResult check_nms_oracle() {
  Rng rng(21);
  auto same_det = [](const Detection& a, const Detection& b) {
    return a.class_id == b.class_id && a.score == b.score &&
           std::memcmp(a.box.v, b.box.v, sizeof(a.box.v)) == 0;
  };
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Detection> dets;
    const int64_t n = 1 + static_cast<int64_t>(rng.uniform_index(25));
    for (int64_t i = 0; i < n; ++i) {
      Detection d;
      d.box = Box::cxcywh(0.2 + 0.6 * rng.uniform(), 0.2 + 0.6 * rng.uniform(),
                          0.05 + 0.3 * rng.uniform(), 0.05 + 0.3 * rng.uniform());
      d.class_id = static_cast<int64_t>(rng.uniform_index(3));
      d.score = rng.uniform();
      if (!dets.empty() && rng.uniform() < 0.15)
        d.score = dets[rng.uniform_index(dets.size())].score;  // exercise score ties
      dets.push_back(d);
    }
    for (double thr : {0.3, 0.5, 0.7, 0.9}) {
      const std::vector<Detection> got = nms(dets, thr);
      const std::vector<Detection> want = reference_nms(dets, thr);
      if (got.size() != want.size())
        return {"nms oracle", false, "kept-set size differs at threshold " + fmt(thr)};
      for (size_t i = 0; i < got.size(); ++i)
        if (!same_det(got[i], want[i]))
          return {"nms oracle", false, "kept order differs at threshold " + fmt(thr)};
      const std::vector<Detection> twice = nms(got, thr);
      if (twice.size() != got.size())
        return {"nms oracle", false, "nms is not idempotent at threshold " + fmt(thr)};
      for (size_t i = 0; i < got.size(); ++i)
        if (!same_det(twice[i], got[i]))
          return {"nms oracle", false, "nms is not idempotent at threshold " + fmt(thr)};
    }
  }
  return {"nms oracle", true, "100 sets x thresholds {0.3,0.5,0.7,0.9} match the reference"};
}

CheckResult check_augmentation() {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    LabelSet labels;
    labels.pad_to = 25;
    const int64_t m = 1 + static_cast<int64_t>(rng.uniform_index(5));
    for (int64_t i = 0; i < m; ++i)
      labels.foreground.push_back(
          LabelEntry{static_cast<int64_t>(rng.uniform_index(4)),
                     Box::cxcywh(0.5, 0.5, 0.1 + 0.3 * rng.uniform(), 0.1 + 0.3 * rng.uniform())});

    for (int repeat = 1; repeat <= 3; ++repeat) {
      const AugmentedLabelSet aug = augment_fixed_repeat(labels, repeat);
      if (static_cast<int64_t>(aug.entries.size()) != repeat * m)
        return {"augmentation", false, "fixed-repeat count is not R*M"};
      std::vector<int64_t> per(m, 0);
      for (const AugmentedEntry& e : aug.entries) per[e.source_index]++;
      for (int64_t i = 0; i < m; ++i)
        if (per[i] != repeat) return {"augmentation", false, "label repeated wrong number of times"};
    }

    const double ratio = 0.05 + 0.9 * rng.uniform();
    const AugmentedLabelSet aug = augment_fixed_ratio(labels, ratio, 77 + trial);
    const int64_t budget = static_cast<int64_t>(std::floor(25 * ratio));
    if (static_cast<int64_t>(aug.entries.size()) != std::max(budget, m))
      return {"augmentation", false, "fixed-ratio count is not max(floor(N*r), M)"};
    std::vector<int64_t> per(m, 0);
    for (const AugmentedEntry& e : aug.entries) per[e.source_index]++;
    const auto [lo, hi] = std::minmax_element(per.begin(), per.end());
    if (*hi - *lo > 1) return {"augmentation", false, "fixed-ratio per-label counts differ by > 1"};
    const AugmentedLabelSet again = augment_fixed_ratio(labels, ratio, 77 + trial);
    if (again.entries.size() != aug.entries.size())
      return {"augmentation", false, "fixed-ratio is not deterministic under seed"};
    for (size_t i = 0; i < aug.entries.size(); ++i)
      if (again.entries[i].source_index != aug.entries[i].source_index)
        return {"augmentation", false, "fixed-ratio is not deterministic under seed"};
  }

  // capacity violation raises
  {
    LabelSet labels;
    labels.pad_to = 5;
    for (int i = 0; i < 3; ++i)
      labels.foreground.push_back(LabelEntry{0, Box::cxcywh(0.5, 0.5, 0.2, 0.2)});
    bool threw = false;
    try {
      augment_fixed_repeat(labels, 2);
    } catch (const AugmentationError&) {
      threw = true;
    }
    if (!threw) return {"augmentation", false, "R*M > N did not raise"};
  }

  // R=2 matches exactly 2M distinct predictions
  {
    Rng r2(5);
    const int64_t n = 25, m = 4, classes = 4;
    LabelSet labels;
    labels.pad_to = n;
    for (int64_t i = 0; i < m; ++i)
      labels.foreground.push_back(
          LabelEntry{static_cast<int64_t>(r2.uniform_index(classes)),
                     Box::cxcywh(0.2 + 0.15 * static_cast<double>(i), 0.3 + 0.1 * static_cast<double>(i), 0.15, 0.2)});
    LayerOutput preds;
    preds.class_logits = random_tensor({n, classes + 1}, r2);
    preds.class_probs = softmax(preds.class_logits, -1);
    Tensor raw = random_tensor({n, 4}, r2, 0.1, 0.9);
    preds.boxes = raw;
    const AugmentedLabelSet aug = augment_fixed_repeat(labels, 2);
    const Assignment asg = assign_labels(aug, preds, MatchWeights{});
    std::vector<char> used(n, 0);
    int64_t distinct = 0;
    for (int64_t q : asg.entry_to_query)
      if (!used[q]) {
        used[q] = 1;
        ++distinct;
      }
    if (distinct != 2 * m)
      return {"augmentation", false, "R=2 matched " + std::to_string(distinct) +
                                         " predictions, expected " + std::to_string(2 * m)};
  }
  return {"augmentation", true, "counts, balance, determinism, capacity, 2M matching hold"};
}

CheckResult check_sparse_dense_equivalence() {
  // Part 1: sparse cross-attention vs a masked dense reference on an aligned box.
  {
    Rng rng(61);
    const int64_t hw = 8, dim = 32;
    const int heads = 2;
    Tensor values = random_tensor({hw, hw, dim}, rng);
    FeaturePyramid pyr;
    pyr.levels.push_back(FeatureMap{hw, hw, dim, 8, values});
    pyr.encoded_top = reshape(values, {hw * hw, dim});

    // boxes covering whole cells: bins land exactly on cell centers
    BoxSet boxes = {Box::cxcywh(4.0 / 8.0, 3.0 / 8.0, 4.0 / 8.0, 4.0 / 8.0),   // x [2,6) y [1,5)
                    Box::cxcywh(2.0 / 8.0, 6.0 / 8.0, 4.0 / 8.0, 4.0 / 8.0)};  // x [0,4) y [4,8)
    const SparseKV kv = build_multiscale_kv(pyr, boxes, 4, {0});

    AttentionParams p;
    auto xavier = [&](const Shape& s) {
      const double lim = std::sqrt(6.0 / static_cast<double>(s[0] + (s.size() > 1 ? s[1] : s[0])));
      return random_tensor(s, rng, -lim, lim);
    };
    p.wq = xavier({dim, dim});
    p.wk = xavier({dim, dim});
    p.wv = xavier({dim, dim});
    p.wo = xavier({dim, dim});
    p.bq = random_tensor({dim}, rng, -0.1, 0.1);
    p.bk = random_tensor({dim}, rng, -0.1, 0.1);
    p.bv = random_tensor({dim}, rng, -0.1, 0.1);
    p.bo = random_tensor({dim}, rng, -0.1, 0.1);

    Tensor q = random_tensor({2, dim}, rng);
    Tensor q_pos = random_tensor({2, dim}, rng);
    Tensor out = multi_head_attention(p, heads, reshape(q, {2, 1, dim}), kv.keys_values,
                                      kv.keys_values, reshape(q_pos, {2, 1, dim}), kv.pos);

    // dense grid with analytic positions at every cell center
    std::vector<double> xs, ys;
    for (int64_t i = 0; i < hw; ++i)
      for (int64_t j = 0; j < hw; ++j) {
        xs.push_back((static_cast<double>(j) + 0.5) / static_cast<double>(hw));
        ys.push_back((static_cast<double>(i) + 0.5) / static_cast<double>(hw));
      }
    Tensor pos_grid = sine_pos_embed(xs, ys, dim);

    auto allowed_cells = [&](const Box& b) {
      std::vector<int64_t> out_idx;
      const int64_t x1 = static_cast<int64_t>(std::lround((b.v[0] - b.v[2] / 2) * hw));
      const int64_t y1 = static_cast<int64_t>(std::lround((b.v[1] - b.v[3] / 2) * hw));
      for (int64_t by = 0; by < 4; ++by)
        for (int64_t bx = 0; bx < 4; ++bx) out_idx.push_back((y1 + by) * hw + (x1 + bx));
      return out_idx;
    };
    double worst = 0.0;
    for (int64_t qi = 0; qi < 2; ++qi) {
      std::vector<double> qrow(q.data() + qi * dim, q.data() + (qi + 1) * dim);
      std::vector<double> qposrow(q_pos.data() + qi * dim, q_pos.data() + (qi + 1) * dim);
      const std::vector<double> want =
          masked_mha_reference(p, heads, qrow, qposrow, values.data(), pos_grid.data(),
                               values.data(), allowed_cells(boxes[qi]), dim);
      for (int64_t cch = 0; cch < dim; ++cch)
        worst = std::max(worst, std::abs(out.data()[qi * dim + cch] - want[cch]));
    }
    if (worst > 1e-6)
      return {"sparse/dense equivalence", false,
              "masked-attention reference differs by " + fmt(worst)};
  }

  // Part 2: whole-image boxes turn the sparse model into the dense one.
  {
    ModelConfig base;
    base.hidden_dim = 16;
    base.num_heads = 2;
    base.num_queries = 3;
    base.enc_layers = 1;
    base.dec_layers = 3;
    base.ffn_dim = 32;
    base.roi_resolution = 4;
    base.num_levels = 1;
    base.in_channels = 5;
    base.box_refine = false;
    ModelConfig dense_cfg = base;
    dense_cfg.sparse_sampling = false;

    Model sparse_model(base, 23);
    Model dense_model(dense_cfg, 23);
    for (Model* m : {&sparse_model, &dense_model}) {
      Tensor w3 = m->param("box.w3");
      std::fill(w3.values().begin(), w3.values().end(), 0.0);
      Tensor b3 = m->param("box.b3");
      // (0.5, 0.5, ~1, ~1): every predicted box covers the whole 4x4 grid
      b3.values() = {0.0, 0.0, 20.0, 20.0};
    }

    Rng rng(62);
    FeaturePyramid pyr;
    pyr.levels.push_back(FeatureMap{4, 4, 5, 16, random_tensor({4, 4, 5}, rng)});
    const auto sparse_out = sparse_model.forward(pyr);
    const auto dense_out = dense_model.forward(pyr);
    Tape::current().clear();
    double worst = 0.0;
    for (size_t l = 0; l < sparse_out.size(); ++l) {
      for (int64_t i = 0; i < sparse_out[l].class_logits.numel(); ++i)
        worst = std::max(worst, std::abs(sparse_out[l].class_logits.data()[i] -
                                         dense_out[l].class_logits.data()[i]));
      for (int64_t i = 0; i < sparse_out[l].boxes.numel(); ++i)
        worst = std::max(worst,
                         std::abs(sparse_out[l].boxes.data()[i] - dense_out[l].boxes.data()[i]));
    }
    if (worst > 1e-6)
      return {"sparse/dense equivalence", false,
              "whole-image sparse model differs from dense by " + fmt(worst)};
    return {"sparse/dense equivalence", true, "masked reference and whole-image model agree"};
  }
}

CheckResult check_checkpoint_roundtrip() {
  namespace fs = std::filesystem;
  ModelConfig mc;
  mc.hidden_dim = 8;
  mc.num_heads = 2;
  mc.num_queries = 2;
  mc.enc_layers = 0;
  mc.dec_layers = 1;
  mc.ffn_dim = 8;
  mc.roi_resolution = 1;
  mc.num_levels = 1;
  mc.in_channels = 3;
  mc.num_classes = 2;
  Model a(mc, 3), b(mc, 4);
  const fs::path path = fs::temp_directory_path() / "dedetr_selftest.ckpt";
  save_checkpoint(path.string(), nlohmann::json{{"purpose", "selftest"}}, a.parameters());
  const Checkpoint ck = load_checkpoint(path.string());
  if (ck.config.at("purpose") != "selftest")
    return {"checkpoint roundtrip", false, "embedded config lost"};
  auto params = b.parameters();
  restore_params(ck, params);
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& av = a.parameters()[i].second.values();
    const auto& bv = params[i].second.values();
    for (size_t k = 0; k < av.size(); ++k)
      if (bv[k] != static_cast<double>(static_cast<float>(av[k])))
        return {"checkpoint roundtrip", false,
                "parameter " + params[i].first + " not exact at f32 precision"};
  }
  {
    const fs::path bad = fs::temp_directory_path() / "dedetr_selftest_bad.ckpt";
    std::ofstream out(bad, std::ios::binary);
    out << "NOPE garbage";
    out.close();
    bool threw = false;
    try {
      load_checkpoint(bad.string());
    } catch (const IoError&) {
      threw = true;
    }
    fs::remove(bad);
    if (!threw) return {"checkpoint roundtrip", false, "bad magic accepted"};
  }
  fs::remove(path);
  return {"checkpoint roundtrip", true, "f32-exact restore; bad magic rejected"};
}

std::vector<CheckResult> run_all_checks() {
  using Check = CheckResult (*)();
  const std::pair<const char*, Check> checks[] = {
      {"kernel parity", &check_kernel_parity},
      {"hungarian oracle", &check_hungarian_oracle},
      {"gradient suite", &check_gradient_suite},
      {"roi-align oracle", &check_roi_align_oracle},
      {"nms oracle", &check_nms_oracle},
      {"augmentation invariants", &check_augmentation},
      {"sparse/dense equivalence", &check_sparse_dense_equivalence},
      {"checkpoint round-trip", &check_checkpoint_roundtrip},
  };
  std::vector<CheckResult> out;
  for (const auto& [name, fn] : checks) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      // a throwing check must not hide the remaining results
      out.push_back({name, false, std::string("threw: ") + e.what()});
      Tape::current().clear();
    }
  }
  return out;
}

int run_selftest(std::ostream& log) {
  int failures = 0;
  for (const CheckResult& r : run_all_checks()) {
    log << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << " — " << r.detail << "\n";
    if (!r.pass) ++failures;
  }
  if (failures > 0) log << failures << " self-test properties failed\n";
  return failures == 0 ? 0 : 1;
}

}  // namespace dedetr::selftest
