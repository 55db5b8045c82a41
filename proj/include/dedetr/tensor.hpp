#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dedetr/error.hpp"

namespace dedetr {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& dims);
std::string shape_str(const Shape& dims);

struct TensorNode {
  Shape dims;
  std::vector<double> data;
  std::vector<double> grad;  // sized on demand, same extent as data
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Value-like handle to a dense row-major float64 array. Copies share the
// underlying node; deep copies go through clone().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& dims, bool requires_grad = false);
  static Tensor constant(const Shape& dims, double value, bool requires_grad = false);
  static Tensor uniform(const Shape& dims, double lo, double hi, uint64_t seed,
                        bool requires_grad = false);
  static Tensor from_data(const Shape& dims, std::vector<double> values,
                          bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& dims() const { return node_->dims; }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
  int rank() const { return static_cast<int>(node_->dims.size()); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& values() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    node_->grad.assign(node_->data.size(), 0.0);
  }

  Tensor clone() const;      // deep copy, same requires_grad
  Tensor detached() const;   // deep copy with requires_grad off

  double scalar() const;     // value of a one-element tensor

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;

  friend Tensor make_tensor(Shape dims, bool requires_grad);
};

// Uninitialized-to-zero tensor for op implementations.
Tensor make_tensor(Shape dims, bool requires_grad);

// Dynamic tape, one per thread. Ops append entries in execution order; the
// backward pass walks them in reverse and the tape is cleared afterwards.
class Tape {
 public:
  static Tape& current();

  void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  void run_backward();

 private:
  std::vector<std::function<void()>> entries_;
};

inline void record_op(std::function<void()> backward_fn) {
  Tape::current().record(std::move(backward_fn));
}

// Seeds grad(loss) = 1, walks the tape in reverse filling grads of every
// requires_grad node, then clears the tape.
void backward(Tensor loss);

// ---- differentiable op family ------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);  // same shape, or b rank-1 broadcast over rows
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor emin(const Tensor& a, const Tensor& b);  // elementwise min; ties route grad to a
Tensor emax(const Tensor& a, const Tensor& b);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor inverse_sigmoid(const Tensor& a);  // input clamped to [1e-6, 1 - 1e-6]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);  // x [.., K] w [K, N]
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x);  // last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor reshape(const Tensor& x, const Shape& dims);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);  // -> [1]
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& indices);

constexpr double kInverseSigmoidEps = 1e-6;

bool all_finite(const Tensor& t);
void ensure_all_finite(const Tensor& t, const std::string& where);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued pure function of x.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h);

}  // namespace dedetr
