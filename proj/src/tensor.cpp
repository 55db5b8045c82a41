#include "dedetr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "dedetr/kernels.hpp"
#include "dedetr/rng.hpp"

namespace dedetr {

int64_t shape_numel(const Shape& dims) {
  int64_t n = 1;
  for (int64_t d : dims) n *= d;
  return n;
}

std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << "]";
  return os.str();
}

namespace {

void validate_dims(const Shape& dims) {
  if (dims.empty()) throw ShapeError("dims must be nonempty");
  for (int64_t d : dims)
    if (d < 1) throw ShapeError("extents must be >= 1, got " + shape_str(dims));
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw AxisError("axis " + std::to_string(axis) + " out of range for rank " +
                    std::to_string(rank));
  return axis;
}

std::vector<int64_t> strides_of(const Shape& dims) {
  std::vector<int64_t> s(dims.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(dims.size()) - 1; i >= 0; --i) {
    s[i] = acc;
    acc *= dims[i];
  }
  return s;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dims() != b.dims())
    throw ShapeError(std::string(op) + ": " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
}

Tensor finish_op(Tensor t) {
#ifndef NDEBUG
  ensure_all_finite(t, "op output");
#endif
  return t;
}

}  // namespace

Tensor make_tensor(Shape dims, bool requires_grad) {
  validate_dims(dims);
  auto node = std::make_shared<TensorNode>();
  node->data.assign(static_cast<size_t>(shape_numel(dims)), 0.0);
  node->dims = std::move(dims);
  node->requires_grad = requires_grad;
  // Gradients are allocated up front so backward closures may read the output
  // gradient even when no consumer ever wrote to it (a graph branch that only
  // feeds plain-value code, e.g. matching costs, sees zeros there).
  if (requires_grad) node->ensure_grad();
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(const Shape& dims, bool requires_grad) {
  return make_tensor(dims, requires_grad);
}

Tensor Tensor::constant(const Shape& dims, double value, bool requires_grad) {
  Tensor t = make_tensor(dims, requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::uniform(const Shape& dims, double lo, double hi, uint64_t seed,
                       bool requires_grad) {
  if (!(lo < hi)) throw ContractError("uniform init needs lo < hi");
  Tensor t = make_tensor(dims, requires_grad);
  Rng rng(seed);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::from_data(const Shape& dims, std::vector<double> values, bool requires_grad) {
  validate_dims(dims);
  if (static_cast<int64_t>(values.size()) != shape_numel(dims))
    throw ShapeError("from_data: " + std::to_string(values.size()) + " values for " +
                     shape_str(dims));
  Tensor t = make_tensor(dims, requires_grad);
  t.values() = std::move(values);
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = make_tensor(node_->dims, node_->requires_grad);
  t.values() = node_->data;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t = make_tensor(node_->dims, false);
  t.values() = node_->data;
  return t;
}

double Tensor::scalar() const {
  if (numel() != 1) throw ContractError("scalar() on tensor " + shape_str(dims()));
  return node_->data[0];
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::run_backward() {
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

void backward(Tensor loss) {
  if (loss.dims() != Shape{1}) throw ContractError("backward: loss must have dims [1]");
  if (Tape::current().empty()) throw ContractError("backward: tape is empty");
  ensure_all_finite(loss, "loss");
  loss.grad()[0] += 1.0;
  Tape::current().run_backward();
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias_broadcast = b.rank() == 1 && a.dims() != b.dims();
  if (bias_broadcast) {
    if (a.dims().back() != b.dims()[0])
      throw ShapeError("add broadcast: " + shape_str(a.dims()) + " + " + shape_str(b.dims()));
  } else {
    check_same_shape(a, b, "add");
  }
  Tensor out = make_tensor(a.dims(), a.requires_grad() || b.requires_grad());
  const int64_t n = a.numel();
  if (bias_broadcast) {
    const int64_t cols = b.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i % cols];
  } else {
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  }
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_op([an, bn, on, bias_broadcast]() {
      const int64_t n = static_cast<int64_t>(on->data.size());
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (bias_broadcast) {
          const int64_t cols = static_cast<int64_t>(bn->data.size());
          for (int64_t i = 0; i < n; ++i) bn->grad[i % cols] += on->grad[i];
        } else {
          for (int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
        }
      }
    });
  }
  return finish_op(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_tensor(a.dims(), a.requires_grad() || b.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_op([an, bn, on]() {
      const int64_t n = static_cast<int64_t>(on->data.size());
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return finish_op(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_tensor(a.dims(), a.requires_grad() || b.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_op([an, bn, on]() {
      const int64_t n = static_cast<int64_t>(on->data.size());
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return finish_op(out);
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  Tensor out = make_tensor(a.dims(), a.requires_grad() || b.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_op([an, bn, on]() {
      const int64_t n = static_cast<int64_t>(on->data.size());
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] / bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          bn->grad[i] -= on->grad[i] * an->data[i] / (bn->data[i] * bn->data[i]);
      }
    });
  }
  return finish_op(out);
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_tensor(a.dims(), a.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    record_op([an, on, c]() {
      an->ensure_grad();
      for (size_t i = 0; i < on->data.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return finish_op(out);
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = make_tensor(a.dims(), a.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + c;
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    record_op([an, on]() {
      an->ensure_grad();
      for (size_t i = 0; i < on->data.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return finish_op(out);
}

namespace {

Tensor extremum(const Tensor& a, const Tensor& b, bool take_max) {
  check_same_shape(a, b, take_max ? "emax" : "emin");
  Tensor out = make_tensor(a.dims(), a.requires_grad() || b.requires_grad());
  const int64_t n = a.numel();
  auto pick_a = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const bool a_wins = take_max ? a.data()[i] >= b.data()[i] : a.data()[i] <= b.data()[i];
    (*pick_a)[i] = a_wins ? 1 : 0;
    out.data()[i] = a_wins ? a.data()[i] : b.data()[i];
  }
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_op([an, bn, on, pick_a]() {
      const int64_t n = static_cast<int64_t>(on->data.size());
      for (int64_t i = 0; i < n; ++i) {
        if ((*pick_a)[i]) {
          if (an->requires_grad) {
            an->ensure_grad();
            an->grad[i] += on->grad[i];
          }
        } else if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[i] += on->grad[i];
        }
      }
    });
  }
  return finish_op(out);
}

}  // namespace

Tensor emin(const Tensor& a, const Tensor& b) { return extremum(a, b, false); }
Tensor emax(const Tensor& a, const Tensor& b) { return extremum(a, b, true); }

Tensor abs(const Tensor& a) {
  Tensor out = make_tensor(a.dims(), a.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = std::fabs(a.data()[i]);
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    record_op([an, on]() {
      an->ensure_grad();
      for (size_t i = 0; i < on->data.size(); ++i) {
        const double x = an->data[i];
        an->grad[i] += on->grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
      }
    });
  }
  return finish_op(out);
}

Tensor relu(const Tensor& a) {
  Tensor out = make_tensor(a.dims(), a.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    record_op([an, on]() {
      an->ensure_grad();
      for (size_t i = 0; i < on->data.size(); ++i)
        if (an->data[i] > 0.0) an->grad[i] += on->grad[i];
    });
  }
  return finish_op(out);
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = make_tensor(a.dims(), a.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    record_op([an, on]() {
      an->ensure_grad();
      for (size_t i = 0; i < on->data.size(); ++i) {
        const double y = on->data[i];
        an->grad[i] += on->grad[i] * y * (1.0 - y);
      }
    });
  }
  return finish_op(out);
}

Tensor inverse_sigmoid(const Tensor& a) {
  Tensor out = make_tensor(a.dims(), a.requires_grad());
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = std::clamp(a.data()[i], kInverseSigmoidEps, 1.0 - kInverseSigmoidEps);
    out.data()[i] = std::log(x / (1.0 - x));
  }
  if (out.requires_grad()) {
    auto an = a.node();
    auto on = out.node();
    record_op([an, on]() {
      an->ensure_grad();
      for (size_t i = 0; i < on->data.size(); ++i) {
        const double x = an->data[i];
        // clamped coordinates are flat, no gradient
        if (x > kInverseSigmoidEps && x < 1.0 - kInverseSigmoidEps)
          an->grad[i] += on->grad[i] / (x * (1.0 - x));
      }
    });
  }
  return finish_op(out);
}

// ---- matmul & linear ---------------------------------------------------------

namespace {

void transpose2d(const double* src, int64_t rows, int64_t cols, double* dst) {
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  int64_t batch, m, k, n;
  bool broadcast_b;
  if (a.rank() == 2 && b.rank() == 2) {
    batch = 1;
    m = a.dims()[0];
    k = a.dims()[1];
    if (b.dims()[0] != k) throw ShapeError("matmul: " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    n = b.dims()[1];
    broadcast_b = true;
  } else if (a.rank() == 3 && b.rank() == 2) {
    batch = a.dims()[0];
    m = a.dims()[1];
    k = a.dims()[2];
    if (b.dims()[0] != k) throw ShapeError("matmul: " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    n = b.dims()[1];
    broadcast_b = true;
  } else if (a.rank() == 3 && b.rank() == 3) {
    if (a.dims()[0] != b.dims()[0] || a.dims()[2] != b.dims()[1])
      throw ShapeError("matmul: " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    batch = a.dims()[0];
    m = a.dims()[1];
    k = a.dims()[2];
    n = b.dims()[2];
    broadcast_b = false;
  } else {
    throw ShapeError("matmul: unsupported ranks " + shape_str(a.dims()) + " x " +
                     shape_str(b.dims()));
  }

  Shape out_dims = a.rank() == 2 ? Shape{m, n} : Shape{batch, m, n};
  Tensor out = make_tensor(out_dims, a.requires_grad() || b.requires_grad());
  kernels::matmul(a.data(), b.data(), out.data(), batch, m, k, n, broadcast_b, false);

  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record_op([an, bn, on, batch, m, k, n, broadcast_b]() {
      const double* dout = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        // dA = dC * B^T
        if (broadcast_b) {
          std::vector<double> bt(static_cast<size_t>(k * n));
          transpose2d(bn->data.data(), k, n, bt.data());
          kernels::matmul(dout, bt.data(), an->grad.data(), batch, m, n, k, true, true);
        } else {
          std::vector<double> bt(static_cast<size_t>(k * n));
          for (int64_t b2 = 0; b2 < batch; ++b2) {
            transpose2d(bn->data.data() + b2 * k * n, k, n, bt.data());
            kernels::matmul(dout + b2 * m * n, bt.data(), an->grad.data() + b2 * m * k, 1, m, n,
                            k, true, true);
          }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB = A^T * dC, summed over the batch when B is shared
        std::vector<double> at(static_cast<size_t>(m * k));
        for (int64_t b2 = 0; b2 < batch; ++b2) {
          transpose2d(an->data.data() + b2 * m * k, m, k, at.data());
          double* dst = broadcast_b ? bn->grad.data() : bn->grad.data() + b2 * k * n;
          kernels::matmul(at.data(), dout + b2 * m * n, dst, 1, k, m, n, true, true);
        }
      }
    });
  }
  return finish_op(out);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw ShapeError("linear: weight must be rank 2");
  const int64_t k = weight.dims()[0];
  const int64_t n = weight.dims()[1];
  if (x.dims().back() != k)
    throw ShapeError("linear: x " + shape_str(x.dims()) + " vs weight " + shape_str(weight.dims()));
  if (bias.dims() != Shape{n}) throw ShapeError("linear: bias " + shape_str(bias.dims()));

  Shape out_dims = x.dims();
  out_dims.back() = n;
  const int64_t rows = x.numel() / k;
  Tensor out =
      make_tensor(out_dims, x.requires_grad() || weight.requires_grad() || bias.requires_grad());
  kernels::matmul(x.data(), weight.data(), out.data(), 1, rows, k, n, true, false);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) out.data()[r * n + j] += bias.data()[j];

  if (out.requires_grad()) {
    auto xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
    record_op([xn, wn, bn, on, rows, k, n]() {
      const double* dout = on->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        std::vector<double> wt(static_cast<size_t>(k * n));
        transpose2d(wn->data.data(), k, n, wt.data());
        kernels::matmul(dout, wt.data(), xn->grad.data(), 1, rows, n, k, true, true);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        std::vector<double> xt(static_cast<size_t>(rows * k));
        transpose2d(xn->data.data(), rows, k, xt.data());
        kernels::matmul(xt.data(), dout, wn->grad.data(), 1, k, rows, n, true, true);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < n; ++j) bn->grad[j] += dout[r * n + j];
      }
    });
  }
  return finish_op(out);
}

// ---- reductions & normalizations ---------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  if (ax != x.rank() - 1) {
    std::vector<int> perm(static_cast<size_t>(x.rank()));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[ax], perm.back());
    return transpose(softmax(transpose(x, perm), -1), perm);
  }
  const int64_t cols = x.dims().back();
  const int64_t rows = x.numel() / cols;
  Tensor out = make_tensor(x.dims(), x.requires_grad());
  kernels::softmax_rows(x.data(), out.data(), rows, cols);
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    record_op([xn, on, rows, cols]() {
      xn->ensure_grad();
      kernels::softmax_rows_backward(on->data.data(), on->grad.data(), xn->grad.data(), rows,
                                     cols);
    });
  }
  return finish_op(out);
}

Tensor log_softmax(const Tensor& x) {
  const int64_t cols = x.dims().back();
  const int64_t rows = x.numel() / cols;
  Tensor out = make_tensor(x.dims(), x.requires_grad());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = out.data() + r * cols;
    double mx = xr[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    const double lse = mx + std::log(sum);
    for (int64_t j = 0; j < cols; ++j) yr[j] = xr[j] - lse;
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    record_op([xn, on, rows, cols]() {
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* yr = on->data.data() + r * cols;
        const double* dyr = on->grad.data() + r * cols;
        double* dxr = xn->grad.data() + r * cols;
        double dsum = 0.0;
        for (int64_t j = 0; j < cols; ++j) dsum += dyr[j];
        for (int64_t j = 0; j < cols; ++j) dxr[j] += dyr[j] - std::exp(yr[j]) * dsum;
      }
    });
  }
  return finish_op(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  if (ax != x.rank() - 1) {
    std::vector<int> perm(static_cast<size_t>(x.rank()));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[ax], perm.back());
    return transpose(layer_norm(transpose(x, perm), gamma, beta, -1), perm);
  }
  const int64_t cols = x.dims().back();
  if (gamma.dims() != Shape{cols} || beta.dims() != Shape{cols})
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(cols) + "]");
  const int64_t rows = x.numel() / cols;
  constexpr double eps = 1e-5;
  Tensor out =
      make_tensor(x.dims(), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  kernels::layer_norm_rows(x.data(), gamma.data(), beta.data(), out.data(), mean->data(),
                           inv_std->data(), rows, cols, eps);
  if (out.requires_grad()) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    record_op([xn, gn, bn, on, mean, inv_std, rows, cols]() {
      xn->ensure_grad();
      gn->ensure_grad();
      bn->ensure_grad();
      kernels::layer_norm_rows_backward(xn->data.data(), gn->data.data(), mean->data(),
                                        inv_std->data(), on->grad.data(), xn->grad.data(),
                                        gn->grad.data(), bn->grad.data(), rows, cols);
    });
  }
  return finish_op(out);
}

Tensor sum(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  Shape out_dims;
  for (int i = 0; i < x.rank(); ++i)
    if (i != ax) out_dims.push_back(x.dims()[i]);
  if (out_dims.empty()) out_dims = {1};
  const auto st = strides_of(x.dims());
  const int64_t outer = std::accumulate(x.dims().begin(), x.dims().begin() + ax, int64_t{1},
                                        std::multiplies<int64_t>());
  const int64_t len = x.dims()[ax];
  const int64_t inner = st[ax];
  Tensor out = make_tensor(out_dims, x.requires_grad());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < len; ++j) acc += x.data()[o * len * inner + j * inner + i];
      out.data()[o * inner + i] = acc;
    }
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    record_op([xn, on, outer, len, inner]() {
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          const double g = on->grad[o * inner + i];
          for (int64_t j = 0; j < len; ++j) xn->grad[o * len * inner + j * inner + i] += g;
        }
    });
  }
  return finish_op(out);
}

Tensor mean(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  return scale(sum(x, ax), 1.0 / static_cast<double>(x.dims()[ax]));
}

Tensor sum_all(const Tensor& x) {
  Tensor out = make_tensor({1}, x.requires_grad());
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    record_op([xn, on]() {
      xn->ensure_grad();
      const double g = on->grad[0];
      for (size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += g;
    });
  }
  return finish_op(out);
}

// ---- layout ops --------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const int rank = parts[0].rank();
  const int ax = normalize_axis(axis, rank);
  Shape out_dims = parts[0].dims();
  int64_t axis_total = 0;
  bool needs_grad = false;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != ax && p.dims()[i] != out_dims[i])
        throw ShapeError("concat: " + shape_str(p.dims()) + " vs " + shape_str(out_dims));
    axis_total += p.dims()[ax];
    needs_grad = needs_grad || p.requires_grad();
  }
  out_dims[ax] = axis_total;
  Tensor out = make_tensor(out_dims, needs_grad);

  const auto ost = strides_of(out_dims);
  const int64_t outer = std::accumulate(out_dims.begin(), out_dims.begin() + ax, int64_t{1},
                                        std::multiplies<int64_t>());
  const int64_t inner = ost[ax];
  int64_t offset = 0;
  std::vector<int64_t> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const int64_t plen = p.dims()[ax];
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * axis_total + offset) * inner, p.data() + o * plen * inner,
                  sizeof(double) * static_cast<size_t>(plen * inner));
    offset += plen;
  }
  if (needs_grad) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<int64_t> lens;
    for (const Tensor& p : parts) {
      nodes.push_back(p.node());
      lens.push_back(p.dims()[ax]);
    }
    auto on = out.node();
    record_op([nodes, lens, offsets, on, outer, inner, axis_total]() {
      for (size_t pi = 0; pi < nodes.size(); ++pi) {
        if (!nodes[pi]->requires_grad) continue;
        nodes[pi]->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = on->grad.data() + (o * axis_total + offsets[pi]) * inner;
          double* dst = nodes[pi]->grad.data() + o * lens[pi] * inner;
          for (int64_t i = 0; i < lens[pi] * inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return finish_op(out);
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
  const int ax = normalize_axis(axis, x.rank());
  if (start < 0 || len < 1 || start + len > x.dims()[ax])
    throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of extent " + std::to_string(x.dims()[ax]));
  Shape out_dims = x.dims();
  out_dims[ax] = len;
  const auto st = strides_of(x.dims());
  const int64_t outer = std::accumulate(x.dims().begin(), x.dims().begin() + ax, int64_t{1},
                                        std::multiplies<int64_t>());
  const int64_t inner = st[ax];
  const int64_t xlen = x.dims()[ax];
  Tensor out = make_tensor(out_dims, x.requires_grad());
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, x.data() + (o * xlen + start) * inner,
                sizeof(double) * static_cast<size_t>(len * inner));
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    record_op([xn, on, outer, inner, xlen, start, len]() {
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = on->grad.data() + o * len * inner;
        double* dst = xn->grad.data() + (o * xlen + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return finish_op(out);
}

Tensor reshape(const Tensor& x, const Shape& dims) {
  validate_dims(dims);
  if (shape_numel(dims) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.dims()) + " -> " + shape_str(dims));
  Tensor out = make_tensor(dims, x.requires_grad());
  out.values() = x.values();
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    record_op([xn, on]() {
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return finish_op(out);
}

namespace {

// dst[out_index] (+)= src[in_index] where out dims are src dims permuted by perm
void permute_apply(const double* src, const Shape& src_dims, const std::vector<int>& perm,
                   double* dst, bool accumulate_to_src) {
  const int rank = static_cast<int>(src_dims.size());
  Shape out_dims(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) out_dims[i] = src_dims[perm[i]];
  const auto sst = strides_of(src_dims);
  const auto ost = strides_of(out_dims);
  const int64_t total = shape_numel(src_dims);
  std::vector<int64_t> idx(static_cast<size_t>(rank));
  for (int64_t lin = 0; lin < total; ++lin) {
    int64_t rem = lin;
    int64_t src_lin = 0;
    for (int d = 0; d < rank; ++d) {
      idx[d] = rem / ost[d];
      rem %= ost[d];
      src_lin += idx[d] * sst[perm[d]];
    }
    if (accumulate_to_src)
      dst[src_lin] += src[lin];  // src holds out-grad here
    else
      dst[lin] = src[src_lin];
  }
}

}  // namespace

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
  const int rank = x.rank();
  if (static_cast<int>(perm.size()) != rank) throw AxisError("transpose: perm size != rank");
  std::vector<bool> seen(static_cast<size_t>(rank), false);
  for (int p : perm) {
    if (p < 0 || p >= rank || seen[static_cast<size_t>(p)])
      throw AxisError("transpose: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_dims(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) out_dims[i] = x.dims()[perm[i]];
  Tensor out = make_tensor(out_dims, x.requires_grad());
  permute_apply(x.data(), x.dims(), perm, out.data(), false);
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    auto perm_copy = perm;
    record_op([xn, on, perm_copy]() {
      xn->ensure_grad();
      permute_apply(on->grad.data(), xn->dims, perm_copy, xn->grad.data(), true);
    });
  }
  return finish_op(out);
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& indices) {
  if (indices.empty()) throw ContractError("gather_rows: empty index list");
  const int64_t rows = x.dims()[0];
  const int64_t inner = x.numel() / rows;
  for (int64_t i : indices)
    if (i < 0 || i >= rows) throw ContractError("gather_rows: index out of range");
  Shape out_dims = x.dims();
  out_dims[0] = static_cast<int64_t>(indices.size());
  Tensor out = make_tensor(out_dims, x.requires_grad());
  for (size_t r = 0; r < indices.size(); ++r)
    std::memcpy(out.data() + static_cast<int64_t>(r) * inner, x.data() + indices[r] * inner,
                sizeof(double) * static_cast<size_t>(inner));
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node();
    auto idx = indices;
    record_op([xn, on, idx, inner]() {
      xn->ensure_grad();
      for (size_t r = 0; r < idx.size(); ++r) {
        const double* src = on->grad.data() + static_cast<int64_t>(r) * inner;
        double* dst = xn->grad.data() + idx[r] * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    });
  }
  return finish_op(out);
}

// ---- diagnostics -------------------------------------------------------------

bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

void ensure_all_finite(const Tensor& t, const std::string& where) {
  if (!all_finite(t)) throw NumericError("non-finite values in " + where);
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  if (h < 1e-7 || h > 1e-4) throw ContractError("finite_diff_check: h outside [1e-7, 1e-4]");
  const bool orig_flag = x.requires_grad();
  Tape::current().clear();

  x.set_requires_grad(true);
  x.zero_grad();
  Tensor y = f(x);
  if (!all_finite(y)) throw NumericError("finite_diff_check: f(x) not finite");
  backward(y);
  std::vector<double> analytic = x.grad();

  x.set_requires_grad(false);
  double max_rel = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double y1 = f(x).scalar();
    x.data()[i] = orig - h;
    const double y2 = f(x).scalar();
    x.data()[i] = orig;
    if (!std::isfinite(y1) || !std::isfinite(y2))
      throw NumericError("finite_diff_check: perturbed f(x) not finite");
    const double fd = (y1 - y2) / (2.0 * h);
    const double a = analytic[static_cast<size_t>(i)];
    const double rel = std::fabs(a - fd) / std::max(1.0, std::fabs(a));
    max_rel = std::max(max_rel, rel);
  }
  x.set_requires_grad(orig_flag);
  Tape::current().clear();
  return max_rel;
}

}  // namespace dedetr
