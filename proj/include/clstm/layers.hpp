#pragma once

#include <random>

#include "clstm/tensor.hpp"

namespace clstm {

struct Conv2dLayer {
  Tensor weight;  // [out_ch, in_ch, k, k]
  Tensor bias;    // [out_ch]
  int stride = 1;
  int padding = 0;

  static Conv2dLayer create(std::size_t in_ch, std::size_t out_ch,
                            std::size_t k, int stride, int padding,
                            std::mt19937_64& rng);
  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t kernel() const { return weight.shape()[2]; }
};

Tensor conv2d(const Conv2dLayer& layer, const Tensor& x);

struct BatchNormLayer {
  Tensor gamma;  // [ch]
  Tensor beta;   // [ch]
  Tensor running_mean;  // [ch], plain buffer
  Tensor running_var;   // [ch], plain buffer
  double epsilon = 1e-5;
  double momentum = 0.1;

  static BatchNormLayer create(std::size_t ch);
  std::size_t channels() const { return gamma.size(); }
};

// Train mode uses per-call batch statistics over (batch x spatial) and
// updates the running stats; eval mode applies the running stats only.
Tensor batch_norm(BatchNormLayer& layer, const Tensor& x, bool train);

struct DenseLstmLayer {
  // Gate order everywhere: f, i, o, c.
  Tensor w_f, w_i, w_o, w_c;  // input weights [in, hidden]
  Tensor u_f, u_i, u_o, u_c;  // recurrent weights [hidden, hidden]
  Tensor b_f, b_i, b_o, b_c;  // [hidden]

  static DenseLstmLayer create(std::size_t in, std::size_t hidden,
                               std::mt19937_64& rng);
  std::size_t input_size() const { return w_f.shape()[0]; }
  std::size_t hidden_size() const { return w_f.shape()[1]; }
};

struct DenseLstmState {
  Tensor h;  // [B, hidden]
  Tensor c;  // [B, hidden]
};

// Standard LSTM recurrence; returns (h_t, new state).
std::pair<Tensor, DenseLstmState> dense_lstm_step(const DenseLstmLayer& layer,
                                                  const Tensor& x,
                                                  const DenseLstmState& state);

// One Bernoulli mask per sequence, scaled by 1/(1-p_drop); entries in
// {0, 1/(1-p_drop)}.
Tensor make_locked_dropout_mask(const Shape& feature_shape, double p_drop,
                                std::mt19937_64& rng);

// Applies one mask to every timestep of x[T, ...]. Eval mode is the identity.
Tensor locked_dropout(const Tensor& x_sequence, double p_drop,
                      std::uint64_t rng_seed, bool train);

}  // namespace clstm
