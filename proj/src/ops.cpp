#include <algorithm>
#include <cmath>

#include "clstm/tensor.hpp"

namespace clstm {

namespace {

void check_out_finite(const Tensor& t, const char* op) {
  if (!finite_checks()) return;
  for (double v : t.data())
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value produced by op '") +
                               op + "'");
}

Tensor taped(Shape shape, std::vector<double> data,
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
  Tensor out(std::move(impl));
  check_out_finite(out, op);
  return out;
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw DimensionError("linear expects x[B,F], w[F,H], b[H]");
  std::size_t B = x.shape()[0], F = x.shape()[1], H = w.shape()[1];
  if (w.shape()[0] != F || b.shape()[0] != H)
    throw DimensionError("linear shape mismatch: x " + shape_str(x.shape()) +
                         " w " + shape_str(w.shape()) + " b " +
                         shape_str(b.shape()));
  std::vector<double> out(B * H);
  const auto& xd = x.data();
  const auto& wd = w.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < H; ++j) {
      double s = bd[j];
      for (std::size_t f = 0; f < F; ++f) s += xd[i * F + f] * wd[f * H + j];
      out[i * H + j] = s;
    }
  auto xi = x.impl, wi = w.impl, bi = b.impl;
  auto backprop = [xi, wi, bi, B, F, H](TensorImpl& self) {
    const auto& g = self.grad;
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t f = 0; f < F; ++f) {
          double s = 0.0;
          for (std::size_t j = 0; j < H; ++j)
            s += g[i * H + j] * wi->data[f * H + j];
          xi->grad[i * F + f] += s;
        }
    }
    if (wi->requires_grad) {
      wi->ensure_grad();
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t j = 0; j < H; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < B; ++i)
            s += xi->data[i * F + f] * g[i * H + j];
          wi->grad[f * H + j] += s;
        }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t j = 0; j < H; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < B; ++i) s += g[i * H + j];
        bi->grad[j] += s;
      }
    }
  };
  return taped({B, H}, std::move(out), {xi, wi, bi}, backprop, "linear");
}

Tensor conv2d_op(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                 int padding) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1)
    throw DimensionError("conv2d expects x[B,C,H,W], w[O,C,kH,kW], b[O]");
  std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
              W = x.shape()[3];
  std::size_t O = w.shape()[0], KH = w.shape()[2], KW = w.shape()[3];
  if (w.shape()[1] != C)
    throw DimensionError("conv2d channel mismatch: input " +
                         shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  if (b.shape()[0] != O) throw DimensionError("conv2d bias/channel mismatch");
  long oh = (static_cast<long>(H) + 2 * padding - static_cast<long>(KH)) /
                stride + 1;
  long ow = (static_cast<long>(W) + 2 * padding - static_cast<long>(KW)) /
                stride + 1;
  if (oh <= 0 || ow <= 0)
    throw DimensionError("conv2d output extent non-positive for input " +
                         shape_str(x.shape()));
  std::size_t OH = static_cast<std::size_t>(oh), OW = static_cast<std::size_t>(ow);

  std::vector<double> out(B * O * OH * OW);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  const double* bd = b.data().data();
  long Hl = static_cast<long>(H), Wl = static_cast<long>(W);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t oc = 0; oc < O; ++oc) {
      double* orow = out.data() + (bb * O + oc) * OH * OW;
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double s = bd[oc];
          long iy0 = static_cast<long>(oy) * stride - padding;
          long ix0 = static_cast<long>(ox) * stride - padding;
          for (std::size_t ic = 0; ic < C; ++ic) {
            const double* xim = xd + (bb * C + ic) * H * W;
            const double* wk = wd + ((oc * C + ic) * KH) * KW;
            for (std::size_t ky = 0; ky < KH; ++ky) {
              long iy = iy0 + static_cast<long>(ky);
              if (iy < 0 || iy >= Hl) continue;
              for (std::size_t kx = 0; kx < KW; ++kx) {
                long ix = ix0 + static_cast<long>(kx);
                if (ix < 0 || ix >= Wl) continue;
                s += wk[ky * KW + kx] * xim[iy * Wl + ix];
              }
            }
          }
          orow[oy * OW + ox] = s;
        }
    }

  auto xi = x.impl, wi = w.impl, bi = b.impl;
  auto backprop = [xi, wi, bi, B, C, H, W, O, KH, KW, OH, OW, stride,
                   padding](TensorImpl& self) {
    const double* g = self.grad.data();
    long Hl = static_cast<long>(H), Wl = static_cast<long>(W);
    long OHl = static_cast<long>(OH), OWl = static_cast<long>(OW);
    if (xi->requires_grad) {
      xi->ensure_grad();
      double* gx = xi->grad.data();
      // gather form: each input-grad element computed independently
#pragma omp parallel for collapse(2) schedule(static)
      for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t ic = 0; ic < C; ++ic)
          for (long iy = 0; iy < Hl; ++iy)
            for (long ix = 0; ix < Wl; ++ix) {
              double s = 0.0;
              for (std::size_t ky = 0; ky < KH; ++ky) {
                long num_y = iy + padding - static_cast<long>(ky);
                if (num_y < 0 || num_y % stride) continue;
                long oy = num_y / stride;
                if (oy >= OHl) continue;
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  long num_x = ix + padding - static_cast<long>(kx);
                  if (num_x < 0 || num_x % stride) continue;
                  long ox = num_x / stride;
                  if (ox >= OWl) continue;
                  for (std::size_t oc = 0; oc < O; ++oc)
                    s += g[((bb * O + oc) * OH + oy) * OW + ox] *
                         wi->data[((oc * C + ic) * KH + ky) * KW + kx];
                }
              }
              gx[((bb * C + ic) * H + iy) * W + ix] += s;
            }
    }
    if (wi->requires_grad) {
      wi->ensure_grad();
      double* gw = wi->grad.data();
#pragma omp parallel for collapse(2) schedule(static)
      for (std::size_t oc = 0; oc < O; ++oc)
        for (std::size_t ic = 0; ic < C; ++ic)
          for (std::size_t ky = 0; ky < KH; ++ky)
            for (std::size_t kx = 0; kx < KW; ++kx) {
              double s = 0.0;
              for (std::size_t bb = 0; bb < B; ++bb)
                for (std::size_t oy = 0; oy < OH; ++oy) {
                  long iy = static_cast<long>(oy) * stride - padding +
                            static_cast<long>(ky);
                  if (iy < 0 || iy >= Hl) continue;
                  for (std::size_t ox = 0; ox < OW; ++ox) {
                    long ix = static_cast<long>(ox) * stride - padding +
                              static_cast<long>(kx);
                    if (ix < 0 || ix >= Wl) continue;
                    s += g[((bb * O + oc) * OH + oy) * OW + ox] *
                         xi->data[((bb * C + ic) * H + iy) * W + ix];
                  }
                }
              gw[((oc * C + ic) * KH + ky) * KW + kx] += s;
            }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t oc = 0; oc < O; ++oc) {
        double s = 0.0;
        for (std::size_t bb = 0; bb < B; ++bb)
          for (std::size_t i = 0; i < OH * OW; ++i)
            s += g[(bb * O + oc) * OH * OW + i];
        bi->grad[oc] += s;
      }
    }
  };
  return taped({B, O, OH, OW}, std::move(out), {xi, wi, bi}, backprop,
               "conv2d");
}

Tensor log_softmax_rows(const Tensor& a) {
  if (a.rank() < 1) throw DimensionError("log_softmax on empty shape");
  std::size_t k = a.shape().back();
  std::size_t rows = a.size() / k;
  std::vector<double> out(a.size());
  const auto& x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * k;
    double m = row[0];
    for (std::size_t i = 1; i < k; ++i) m = std::max(m, row[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(row[i] - m);
    double lz = m + std::log(z);
    for (std::size_t i = 0; i < k; ++i) out[r * k + i] = row[i] - lz;
  }
  auto ai = a.impl;
  auto backprop = [ai, rows, k](TensorImpl& self) {
    ai->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t i = 0; i < k; ++i) gsum += self.grad[r * k + i];
      for (std::size_t i = 0; i < k; ++i)
        ai->grad[r * k + i] +=
            self.grad[r * k + i] - std::exp(self.data[r * k + i]) * gsum;
    }
  };
  return taped(a.shape(), std::move(out), {ai}, backprop, "log_softmax");
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2)
    throw DimensionError("cross_entropy expects logits [B,K], got " +
                         shape_str(logits.shape()));
  std::size_t B = logits.shape()[0], K = logits.shape()[1];
  if (targets.size() != B)
    throw DimensionError("cross_entropy target count mismatch");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= K)
      throw UsageError("class target " + std::to_string(t) +
                       " out of range [0," + std::to_string(K) + ")");
  auto probs = softmax_values(logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < B; ++i)
    loss -= std::log(std::max(probs[i * K + targets[i]], 1e-300));
  loss /= static_cast<double>(B);
  auto li = logits.impl;
  auto backprop = [li, probs, targets, B, K](TensorImpl& self) {
    li->ensure_grad();
    double g = self.grad[0] / static_cast<double>(B);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < K; ++j) {
        double onehot = (static_cast<std::size_t>(targets[i]) == j) ? 1.0 : 0.0;
        li->grad[i * K + j] += g * (probs[i * K + j] - onehot);
      }
  };
  return taped({1}, {loss}, {li}, backprop, "cross_entropy");
}

}  // namespace clstm
