#include "clstm/layers.hpp"

#include <cmath>

namespace clstm {

Conv2dLayer Conv2dLayer::create(std::size_t in_ch, std::size_t out_ch,
                                std::size_t k, int stride, int padding,
                                std::mt19937_64& rng) {
  Conv2dLayer layer;
  double fan_in = static_cast<double>(in_ch * k * k);
  layer.weight = Tensor::randn({out_ch, in_ch, k, k}, rng,
                               std::sqrt(2.0 / fan_in), true);
  layer.bias = Tensor::zeros({out_ch}, true);
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

Tensor conv2d(const Conv2dLayer& layer, const Tensor& x) {
  return conv2d_op(x, layer.weight, layer.bias, layer.stride, layer.padding);
}

BatchNormLayer BatchNormLayer::create(std::size_t ch) {
  BatchNormLayer layer;
  layer.gamma = Tensor::full({ch}, 1.0, true);
  layer.beta = Tensor::zeros({ch}, true);
  layer.running_mean = Tensor::zeros({ch});
  layer.running_var = Tensor::full({ch}, 1.0);
  return layer;
}

Tensor batch_norm(BatchNormLayer& layer, const Tensor& x, bool train) {
  if (x.rank() != 4)
    throw DimensionError("batch_norm expects [B,C,H,W], got " +
                         shape_str(x.shape()));
  std::size_t C = x.shape()[1];
  if (C != layer.channels())
    throw DimensionError("batch_norm channel mismatch: input " +
                         shape_str(x.shape()) + " vs " +
                         std::to_string(layer.channels()) + " channels");
  std::size_t count = x.shape()[0] * x.shape()[2] * x.shape()[3];
  Shape bc{1, C, 1, 1};
  Tensor mu, var;
  if (train) {
    if (count < 2)
      throw UsageError("batch_norm: degenerate statistics (fewer than 2 "
                       "samples per channel in train mode)");
    mu = channel_mean(x);
    Tensor centered = sub(x, mu);
    var = channel_mean(mul(centered, centered));
    // update running stats (plain buffers, outside the tape)
    for (std::size_t c = 0; c < C; ++c) {
      layer.running_mean.data()[c] =
          (1.0 - layer.momentum) * layer.running_mean.data()[c] +
          layer.momentum * mu.data()[c];
      layer.running_var.data()[c] =
          (1.0 - layer.momentum) * layer.running_var.data()[c] +
          layer.momentum * var.data()[c];
    }
    Tensor inv_std = rsqrt(add_scalar(var, layer.epsilon));
    Tensor norm = mul(centered, inv_std);
    return add(mul(norm, reshape(layer.gamma, bc)), reshape(layer.beta, bc));
  }
  // eval: pure function of x and the stored statistics
  std::vector<double> scale_v(C), shift_v(C);
  for (std::size_t c = 0; c < C; ++c) {
    double inv = 1.0 / std::sqrt(layer.running_var.data()[c] + layer.epsilon);
    scale_v[c] = layer.gamma.data()[c] * inv;
    shift_v[c] =
        layer.beta.data()[c] - layer.running_mean.data()[c] * scale_v[c];
  }
  Tensor scale4 = Tensor::from(bc, std::move(scale_v));
  Tensor shift4 = Tensor::from(bc, std::move(shift_v));
  return add(mul(x, scale4), shift4);
}

DenseLstmLayer DenseLstmLayer::create(std::size_t in, std::size_t hidden,
                                      std::mt19937_64& rng) {
  DenseLstmLayer l;
  double s_in = std::sqrt(1.0 / static_cast<double>(in));
  double s_h = std::sqrt(1.0 / static_cast<double>(hidden));
  auto w = [&] { return Tensor::randn({in, hidden}, rng, s_in, true); };
  auto u = [&] { return Tensor::randn({hidden, hidden}, rng, s_h, true); };
  auto b = [&] { return Tensor::zeros({hidden}, true); };
  l.w_f = w(); l.w_i = w(); l.w_o = w(); l.w_c = w();
  l.u_f = u(); l.u_i = u(); l.u_o = u(); l.u_c = u();
  l.b_f = b(); l.b_i = b(); l.b_o = b(); l.b_c = b();
  return l;
}

std::pair<Tensor, DenseLstmState> dense_lstm_step(const DenseLstmLayer& layer,
                                                  const Tensor& x,
                                                  const DenseLstmState& state) {
  if (x.rank() != 2 || x.shape()[1] != layer.input_size())
    throw DimensionError("dense_lstm_step input " + shape_str(x.shape()) +
                         " does not match layer input size " +
                         std::to_string(layer.input_size()));
  const Tensor& h = state.h;
  const Tensor& c = state.c;
  Tensor zb = Tensor::zeros({layer.hidden_size()});
  Tensor f = sigmoid(
      add(linear(x, layer.w_f, layer.b_f), linear(h, layer.u_f, zb)));
  Tensor i = sigmoid(
      add(linear(x, layer.w_i, layer.b_i), linear(h, layer.u_i, zb)));
  Tensor o = sigmoid(
      add(linear(x, layer.w_o, layer.b_o), linear(h, layer.u_o, zb)));
  Tensor g = tanh_op(
      add(linear(x, layer.w_c, layer.b_c), linear(h, layer.u_c, zb)));
  Tensor c_new = add(mul(f, c), mul(i, g));
  Tensor h_new = mul(o, tanh_op(c_new));
  return {h_new, DenseLstmState{h_new, c_new}};
}

Tensor make_locked_dropout_mask(const Shape& feature_shape, double p_drop,
                                std::mt19937_64& rng) {
  if (p_drop < 0.0 || p_drop >= 1.0)
    throw UsageError("locked dropout requires p_drop in [0,1)");
  double keep = 1.0 - p_drop;
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<double> mask(numel(feature_shape));
  for (double& m : mask) m = dist(rng) < keep ? 1.0 / keep : 0.0;
  return Tensor::from(feature_shape, std::move(mask));
}

Tensor locked_dropout(const Tensor& x_sequence, double p_drop,
                      std::uint64_t rng_seed, bool train) {
  if (!train || p_drop == 0.0) return x_sequence;
  if (x_sequence.rank() < 2)
    throw DimensionError("locked_dropout expects [T, features...]");
  std::size_t T = x_sequence.shape()[0];
  Shape feat(x_sequence.shape().begin() + 1, x_sequence.shape().end());
  std::mt19937_64 rng(rng_seed);
  Tensor mask = make_locked_dropout_mask(feat, p_drop, rng);
  // broadcast the per-timestep mask across the leading time axis
  Shape mshape = x_sequence.shape();
  mshape[0] = 1;
  Tensor mask_b = Tensor::from(mshape, mask.data());
  return mul(x_sequence, mask_b);
}

}  // namespace clstm
