#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace clstm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Shape/dimension mismatches between operands.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API misuse (e.g. backward on a non-scalar root).
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

// One tape node per produced tensor. `backprop` reads this node's grad and
// accumulates into the parents' grads. Leaves have no backprop function.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first touched by backward
  std::vector<TensorImplPtr> parents;
  std::function<void(TensorImpl&)> backprop;

  bool is_leaf() const { return !backprop; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// When enabled, every op verifies its outputs are finite and throws on
// NaN/Inf. Tests switch this on; training leaves it off for speed.
void set_finite_checks(bool enabled);
bool finite_checks();

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(TensorImplPtr impl) : impl(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return impl != nullptr; }
  const Shape& shape() const { return impl->shape; }
  std::size_t rank() const { return impl->shape.size(); }
  std::size_t size() const { return impl->data.size(); }

  std::vector<double>& data() { return impl->data; }
  const std::vector<double>& data() const { return impl->data; }
  double value() const;  // scalar tensors only
  double operator[](std::size_t flat) const { return impl->data[flat]; }

  bool requires_grad() const { return impl->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    impl->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return impl->grad.size() == impl->data.size(); }
  const std::vector<double>& grad() const;
  void zero_grad() {
    if (impl) impl->grad.assign(impl->data.size(), 0.0);
  }

  // Same values, cut off from the tape. Used to sever gradient history at
  // truncated-BPTT window boundaries.
  Tensor detach() const;
  Tensor clone() const;

  // Reverse-mode sweep from a scalar root. Leaf grads ACCUMULATE across
  // calls; interior node grads are transient per sweep.
  void backward() const;

  TensorImplPtr impl;
};

// ---- elementwise (broadcast: per-axis extents equal or 1, ranks aligned
// ---- right after left-padding the shorter shape with 1s) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor rsqrt(const Tensor& a);  // 1/sqrt(x), x > 0
Tensor logaddexp(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor spatial_mean(const Tensor& a);  // [B,C,H,W] -> [B,C]
Tensor channel_mean(const Tensor& a);  // [B,C,H,W] -> [1,C,1,1]
Tensor select(const Tensor& a, std::size_t flat_index);  // -> scalar
Tensor reshape(const Tensor& a, Shape shape);            // same element count

// ---- dense / conv primitives ----
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor conv2d_op(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                 int padding);

// ---- classification heads ----
Tensor log_softmax_rows(const Tensor& a);  // softmax over the last axis
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);

// Non-taped helper: softmax over the last axis, plain values.
std::vector<double> softmax_values(const Tensor& logits);

}  // namespace clstm
