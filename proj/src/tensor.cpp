#include "clstm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace clstm {

namespace {
bool g_finite_checks = false;

void check_finite(const TensorImplPtr& t, const char* op) {
  if (!g_finite_checks) return;
  for (double v : t->data) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value produced by op '") +
                               op + "'");
  }
}
}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev,
                     bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(numel(shape));
  for (double& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(numel(shape));
  for (double& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

double Tensor::value() const {
  if (size() != 1) throw UsageError("value() requires a scalar tensor, got " +
                                    shape_str(shape()));
  return impl->data[0];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw UsageError("tensor has no gradient");
  return impl->grad;
}

Tensor Tensor::detach() const {
  auto copy = std::make_shared<TensorImpl>();
  copy->shape = impl->shape;
  copy->data = impl->data;
  copy->requires_grad = false;
  return Tensor(std::move(copy));
}

Tensor Tensor::clone() const {
  auto copy = std::make_shared<TensorImpl>();
  copy->shape = impl->shape;
  copy->data = impl->data;
  copy->requires_grad = impl->requires_grad;
  return Tensor(std::move(copy));
}

void Tensor::backward() const {
  if (!impl) throw UsageError("backward on undefined tensor");
  if (size() != 1)
    throw UsageError("backward requires a scalar root, got " +
                     shape_str(shape()));

  // Reverse topological order via iterative post-order DFS.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack{{impl.get(), 0}};
  visited.insert(impl.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // Interior grads are transient per sweep; leaf grads accumulate.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* n = *it;
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  if (impl->is_leaf()) {
    impl->ensure_grad();
    impl->grad[0] += 1.0;  // degenerate root: d(root)/d(root)
  } else {
    impl->grad[0] = 1.0;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------
namespace {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw DimensionError("shapes not broadcastable: " + shape_str(a) +
                           " vs " + shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Row-major strides with 0 on axes broadcast from extent 1.
std::vector<std::size_t> broadcast_strides(const Shape& shape,
                                           const Shape& out) {
  std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    std::size_t axis = i + (rank - shape.size());
    strides[axis] = (shape[i] == 1 && out[axis] != 1) ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

// Sum `g` (shaped `gshape`) down to `target`, collapsing broadcast axes.
std::vector<double> reduce_to_shape(const std::vector<double>& g,
                                    const Shape& gshape, const Shape& target) {
  if (gshape == target) return g;
  std::vector<double> out(numel(target), 0.0);
  auto strides = broadcast_strides(target, gshape);
  std::size_t rank = gshape.size();
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < g.size(); ++flat) {
    std::size_t tflat = 0;
    for (std::size_t i = 0; i < rank; ++i) tflat += idx[i] * strides[i];
    out[tflat] += g[flat];
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < gshape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

void accumulate(TensorImpl& parent, const std::vector<double>& g,
                const Shape& gshape) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  if (gshape == parent.shape) {
    for (std::size_t i = 0; i < g.size(); ++i) parent.grad[i] += g[i];
  } else {
    auto reduced = reduce_to_shape(g, gshape, parent.shape);
    for (std::size_t i = 0; i < reduced.size(); ++i)
      parent.grad[i] += reduced[i];
  }
}

Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<TensorImplPtr> parents,
                   std::function<void(TensorImpl&)> backprop, const char* op) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool any_grad = false;
  for (const auto& p : parents) any_grad = any_grad || p->requires_grad;
  if (any_grad) {
    impl->requires_grad = true;
    impl->parents = std::move(parents);
    impl->backprop = std::move(backprop);
  }
  auto out = Tensor(std::move(impl));
  check_finite(out.impl, op);
  return out;
}

using BinFwd = double (*)(double, double);
using BinBwd = void (*)(double, double, double, double&, double&);

Tensor binary_op(const Tensor& a, const Tensor& b, BinFwd fwd, BinBwd bwd,
                 const char* name) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  std::size_t n = numel(out_shape);
  std::vector<double> out(n);
  auto ai = a.impl, bi = b.impl;
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ai->data[i], bi->data[i]);
  } else {
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    std::size_t rank = out_shape.size();
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t fa = 0, fb = 0;
      for (std::size_t i = 0; i < rank; ++i) {
        fa += idx[i] * sa[i];
        fb += idx[i] * sb[i];
      }
      out[flat] = fwd(ai->data[fa], bi->data[fb]);
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < out_shape[i]) break;
        idx[i] = 0;
      }
    }
  }
  Shape ashape = a.shape(), bshape = b.shape();
  auto backprop = [ai, bi, bwd, out_shape, ashape, bshape](TensorImpl& self) {
    std::size_t n = self.data.size();
    std::vector<double> ga(n, 0.0), gb(n, 0.0);
    if (ashape == bshape) {
      for (std::size_t i = 0; i < n; ++i)
        bwd(ai->data[i], bi->data[i], self.grad[i], ga[i], gb[i]);
    } else {
      auto sa = broadcast_strides(ashape, out_shape);
      auto sb = broadcast_strides(bshape, out_shape);
      std::size_t rank = out_shape.size();
      std::vector<std::size_t> idx(rank, 0);
      for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t fa = 0, fb = 0;
        for (std::size_t i = 0; i < rank; ++i) {
          fa += idx[i] * sa[i];
          fb += idx[i] * sb[i];
        }
        bwd(ai->data[fa], bi->data[fb], self.grad[flat], ga[flat], gb[flat]);
        for (std::size_t i = rank; i-- > 0;) {
          if (++idx[i] < out_shape[i]) break;
          idx[i] = 0;
        }
      }
    }
    accumulate(*ai, ga, out_shape);
    accumulate(*bi, gb, out_shape);
  };
  return make_result(out_shape, std::move(out), {ai, bi}, backprop, name);
}

using UnFwd = double (*)(double);
using UnBwd = double (*)(double x, double y, double gy);

Tensor unary_op(const Tensor& a, UnFwd fwd, UnBwd bwd, const char* name) {
  std::size_t n = a.size();
  std::vector<double> out(n);
  auto ai = a.impl;
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ai->data[i]);
  auto backprop = [ai, bwd](TensorImpl& self) {
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i)
      ai->grad[i] += bwd(ai->data[i], self.data[i], self.grad[i]);
  };
  return make_result(a.shape(), std::move(out), {ai}, backprop, name);
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = g;
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = -g;
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& ga, double& gb) {
        ga = g * y;
        gb = g * x;
      },
      "mul");
}

Tensor logaddexp(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b,
      [](double x, double y) {
        double m = std::max(x, y);
        if (m == -std::numeric_limits<double>::infinity()) return m;
        return m + std::log(std::exp(x - m) + std::exp(y - m));
      },
      [](double x, double y, double g, double& ga, double& gb) {
        double m = std::max(x, y);
        double ex = std::exp(x - m), ey = std::exp(y - m);
        ga = g * ex / (ex + ey);
        gb = g * ey / (ex + ey);
      },
      "logaddexp");
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, [](double x) { return -x; },
      [](double, double, double g) { return -g; }, "neg");
}

Tensor scale(const Tensor& a, double c) {
  std::size_t n = a.size();
  std::vector<double> out(n);
  auto ai = a.impl;
  for (std::size_t i = 0; i < n; ++i) out[i] = c * ai->data[i];
  return make_result(
      a.shape(), std::move(out), {ai},
      [ai, c](TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i)
          ai->grad[i] += c * self.grad[i];
      },
      "scale");
}

Tensor add_scalar(const Tensor& a, double c) {
  std::size_t n = a.size();
  std::vector<double> out(n);
  auto ai = a.impl;
  for (std::size_t i = 0; i < n; ++i) out[i] = c + ai->data[i];
  return make_result(
      a.shape(), std::move(out), {ai},
      [ai](TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i)
          ai->grad[i] += self.grad[i];
      },
      "add_scalar");
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y, double g) { return g * y * (1.0 - y); }, "sigmoid");
}

Tensor tanh_op(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y, double g) { return g * (1.0 - y * y); }, "tanh");
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double, double g) { return x > 0 ? g : 0.0; }, "relu");
}

Tensor rsqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 1.0 / std::sqrt(x); },
      [](double x, double y, double g) { return g * (-0.5) * y / x; }, "rsqrt");
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto ai = a.impl;
  return make_result(
      {1}, {s}, {ai},
      [ai](TensorImpl& self) {
        ai->ensure_grad();
        for (double& g : ai->grad) g += self.grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  std::size_t n = a.size();
  auto ai = a.impl;
  return make_result(
      {1}, {s / static_cast<double>(n)}, {ai},
      [ai, n](TensorImpl& self) {
        ai->ensure_grad();
        double g = self.grad[0] / static_cast<double>(n);
        for (double& gi : ai->grad) gi += g;
      },
      "mean");
}

Tensor spatial_mean(const Tensor& a) {
  if (a.rank() != 4)
    throw DimensionError("spatial_mean expects [B,C,H,W], got " +
                         shape_str(a.shape()));
  std::size_t B = a.shape()[0], C = a.shape()[1], H = a.shape()[2],
              W = a.shape()[3];
  std::size_t hw = H * W;
  std::vector<double> out(B * C, 0.0);
  const auto& x = a.data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += x[bc * hw + i];
    out[bc] = s / static_cast<double>(hw);
  }
  auto ai = a.impl;
  return make_result(
      {B, C}, std::move(out), {ai},
      [ai, hw](TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t bc = 0; bc < self.data.size(); ++bc) {
          double g = self.grad[bc] / static_cast<double>(hw);
          for (std::size_t i = 0; i < hw; ++i) ai->grad[bc * hw + i] += g;
        }
      },
      "spatial_mean");
}

Tensor channel_mean(const Tensor& a) {
  if (a.rank() != 4)
    throw DimensionError("channel_mean expects [B,C,H,W], got " +
                         shape_str(a.shape()));
  std::size_t B = a.shape()[0], C = a.shape()[1], H = a.shape()[2],
              W = a.shape()[3];
  std::size_t hw = H * W, count = B * hw;
  std::vector<double> out(C, 0.0);
  const auto& x = a.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += x[(b * C + c) * hw + i];
      out[c] += s;
    }
  for (double& v : out) v /= static_cast<double>(count);
  auto ai = a.impl;
  return make_result(
      {1, C, 1, 1}, std::move(out), {ai},
      [ai, B, C, hw, count](TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          double g = self.grad[c] / static_cast<double>(count);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < hw; ++i)
              ai->grad[(b * C + c) * hw + i] += g;
        }
      },
      "channel_mean");
}

Tensor select(const Tensor& a, std::size_t flat_index) {
  if (flat_index >= a.size())
    throw DimensionError("select index " + std::to_string(flat_index) +
                         " out of range for " + shape_str(a.shape()));
  auto ai = a.impl;
  return make_result(
      {1}, {ai->data[flat_index]}, {ai},
      [ai, flat_index](TensorImpl& self) {
        ai->ensure_grad();
        ai->grad[flat_index] += self.grad[0];
      },
      "select");
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape from " + shape_str(a.shape()) + " to " +
                         shape_str(shape) + " changes element count");
  auto ai = a.impl;
  std::vector<double> data = ai->data;
  return make_result(
      std::move(shape), std::move(data), {ai},
      [ai](TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i)
          ai->grad[i] += self.grad[i];
      },
      "reshape");
}

std::vector<double> softmax_values(const Tensor& logits) {
  if (logits.rank() < 1) throw DimensionError("softmax on empty shape");
  std::size_t k = logits.shape().back();
  std::size_t rows = logits.size() / k;
  std::vector<double> out(logits.size());
  const auto& x = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * k;
    double m = row[0];
    for (std::size_t i = 1; i < k; ++i) m = std::max(m, row[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(row[i] - m);
    for (std::size_t i = 0; i < k; ++i) out[r * k + i] = std::exp(row[i] - m) / z;
  }
  return out;
}

}  // namespace clstm
