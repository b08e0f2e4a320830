#include "clstm/convlstm.hpp"

#include <algorithm>
#include <cmath>

namespace clstm {

ConvLstmLayer ConvLstmLayer::create(std::size_t in_ch, std::size_t out_ch,
                                    int kernel, int stride,
                                    std::mt19937_64& rng) {
  ConvLstmLayer l;
  std::size_t k = static_cast<std::size_t>(kernel);
  double s_in = std::sqrt(1.0 / static_cast<double>(in_ch * k * k));
  double s_h = std::sqrt(1.0 / static_cast<double>(out_ch * k * k));
  auto w = [&] { return Tensor::randn({out_ch, in_ch, k, k}, rng, s_in, true); };
  auto u = [&] { return Tensor::randn({out_ch, out_ch, k, k}, rng, s_h, true); };
  auto b = [&] { return Tensor::zeros({out_ch}, true); };
  l.w_f = w(); l.w_i = w(); l.w_o = w(); l.w_c = w();
  l.u_f = u(); l.u_i = u(); l.u_o = u(); l.u_c = u();
  l.b_f = b(); l.b_i = b(); l.b_o = b(); l.b_c = b();
  l.kernel = kernel;
  l.stride = stride;
  return l;
}

std::pair<Tensor, ConvLstmState> convlstm_step(const ConvLstmLayer& layer,
                                               const Tensor& x_t,
                                               const ConvLstmState& state) {
  if (x_t.rank() != 4 || x_t.shape()[1] != layer.in_channels())
    throw DimensionError("convlstm_step input " + shape_str(x_t.shape()) +
                         " does not match layer with " +
                         std::to_string(layer.in_channels()) + " in channels");
  const Tensor& h = state.h;
  const Tensor& c = state.c;
  if (h.shape() != c.shape())
    throw DimensionError("convlstm state c/h shapes differ");
  int pad = layer.input_padding();
  int rpad = layer.kernel / 2;  // recurrent path: stride 1, same padding
  std::size_t out_ch = layer.out_channels();
  Tensor zb = Tensor::zeros({out_ch});
  auto gate = [&](const Tensor& w, const Tensor& u, const Tensor& b) {
    return add(conv2d_op(x_t, w, b, layer.stride, pad),
               conv2d_op(h, u, zb, 1, rpad));
  };
  Tensor f = sigmoid(gate(layer.w_f, layer.u_f, layer.b_f));
  Tensor i = sigmoid(gate(layer.w_i, layer.u_i, layer.b_i));
  Tensor o = sigmoid(gate(layer.w_o, layer.u_o, layer.b_o));
  Tensor g = tanh_op(gate(layer.w_c, layer.u_c, layer.b_c));
  if (f.shape() != c.shape())
    throw DimensionError("convlstm state/input spatial mismatch: gates " +
                         shape_str(f.shape()) + " vs state " +
                         shape_str(c.shape()));
  Tensor c_new = add(mul(f, c), mul(i, g));
  Tensor h_new = mul(o, tanh_op(c_new));
  ConvLstmState next{c_new, h_new, state.timestep + 1};
  return {h_new, next};
}

ConvLstmState& StateStore::get_or_init(
    const std::string& id, const std::function<ConvLstmState()>& init) {
  auto it = states_.find(id);
  if (it == states_.end()) it = states_.emplace(id, init()).first;
  return it->second;
}

void StateStore::zero(const std::string& id) {
  auto it = states_.find(id);
  if (it == states_.end()) return;  // not yet materialized: already zero
  it->second.c = Tensor::zeros(it->second.c.shape());
  it->second.h = Tensor::zeros(it->second.h.shape());
}

void StateStore::detach_all() {
  for (auto& [id, st] : states_) {
    st.c = st.c.detach();
    st.h = st.h.detach();
  }
}

// ---------------------------------------------------------------------------
// nodes
// ---------------------------------------------------------------------------

Tensor SequentialNode::forward(const Tensor& x, RunContext& ctx) {
  Tensor y = x;
  for (auto& child : children) y = child->forward(y, ctx);
  return y;
}

void SequentialNode::visit(const std::function<void(Node&)>& fn) {
  fn(*this);
  for (auto& child : children) child->visit(fn);
}

void SequentialNode::collect_params(
    std::vector<std::pair<std::string, Tensor>>& out) {
  for (auto& child : children) child->collect_params(out);
}

void SequentialNode::collect_buffers(
    std::vector<std::pair<std::string, Tensor>>& out) {
  for (auto& child : children) child->collect_buffers(out);
}

Tensor ResidualNode::forward(const Tensor& x, RunContext& ctx) {
  Tensor m = main->forward(x, ctx);
  Tensor s = skip ? skip->forward(x, ctx) : x;
  return add(m, s);
}

void ResidualNode::visit(const std::function<void(Node&)>& fn) {
  fn(*this);
  main->visit(fn);
  if (skip) skip->visit(fn);
}

void ResidualNode::collect_params(
    std::vector<std::pair<std::string, Tensor>>& out) {
  main->collect_params(out);
  if (skip) skip->collect_params(out);
}

void ResidualNode::collect_buffers(
    std::vector<std::pair<std::string, Tensor>>& out) {
  main->collect_buffers(out);
  if (skip) skip->collect_buffers(out);
}

Tensor Conv2dNode::forward(const Tensor& x, RunContext&) {
  return conv2d(layer, x);
}

void Conv2dNode::collect_params(
    std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(id + ".weight", layer.weight);
  out.emplace_back(id + ".bias", layer.bias);
}

Tensor BatchNormNode::forward(const Tensor& x, RunContext& ctx) {
  return batch_norm(layer, x, ctx.train);
}

void BatchNormNode::collect_params(
    std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(id + ".gamma", layer.gamma);
  out.emplace_back(id + ".beta", layer.beta);
}

void BatchNormNode::collect_buffers(
    std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(id + ".running_mean", layer.running_mean);
  out.emplace_back(id + ".running_var", layer.running_var);
}

Tensor ConvLstmNode::forward(const Tensor& x, RunContext& ctx) {
  std::size_t B = x.shape()[0];
  std::size_t k = static_cast<std::size_t>(layer.kernel);
  int pad = layer.input_padding();
  std::size_t OH = (x.shape()[2] + 2 * pad - k) / layer.stride + 1;
  std::size_t OW = (x.shape()[3] + 2 * pad - k) / layer.stride + 1;
  ConvLstmState& st = ctx.store->get_or_init(id, [&] {
    Shape s{B, layer.out_channels(), OH, OW};
    return ConvLstmState{Tensor::zeros(s), Tensor::zeros(s), 0};
  });
  auto [h, next] = convlstm_step(layer, x, st);
  st = next;
  return h;
}

void ConvLstmNode::collect_params(
    std::vector<std::pair<std::string, Tensor>>& out) {
  const char* names[] = {"w_f", "w_i", "w_o", "w_c", "u_f", "u_i",
                         "u_o", "u_c", "b_f", "b_i", "b_o", "b_c"};
  Tensor* tensors[] = {&layer.w_f, &layer.w_i, &layer.w_o, &layer.w_c,
                       &layer.u_f, &layer.u_i, &layer.u_o, &layer.u_c,
                       &layer.b_f, &layer.b_i, &layer.b_o, &layer.b_c};
  for (int i = 0; i < 12; ++i)
    out.emplace_back(id + "." + names[i], *tensors[i]);
}

Tensor MaxPoolNode::forward(const Tensor& x, RunContext&) {
  if (x.rank() != 4)
    throw DimensionError("max_pool expects [B,C,H,W], got " +
                         shape_str(x.shape()));
  std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
              W = x.shape()[3];
  std::size_t w = static_cast<std::size_t>(window);
  std::size_t OH = H / w, OW = W / w;
  if (OH == 0 || OW == 0)
    throw DimensionError("max_pool input smaller than window");
  std::vector<double> out(B * C * OH * OW);
  std::vector<std::size_t> argmax(out.size());
  const auto& xd = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = (bc * H + oy * w) * W + ox * w;
        for (std::size_t ky = 0; ky < w; ++ky)
          for (std::size_t kx = 0; kx < w; ++kx) {
            std::size_t idx = (bc * H + oy * w + ky) * W + ox * w + kx;
            if (xd[idx] > xd[best]) best = idx;
          }
        out[(bc * OH + oy) * OW + ox] = xd[best];
        argmax[(bc * OH + oy) * OW + ox] = best;
      }
  auto xi = x.impl;
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = {B, C, OH, OW};
  impl->data = std::move(out);
  if (xi->requires_grad) {
    impl->requires_grad = true;
    impl->parents = {xi};
    impl->backprop = [xi, argmax](TensorImpl& self) {
      xi->ensure_grad();
      for (std::size_t i = 0; i < self.data.size(); ++i)
        xi->grad[argmax[i]] += self.grad[i];
    };
  }
  return Tensor(std::move(impl));
}

Tensor LockedDropoutNode::forward(const Tensor& x, RunContext& ctx) {
  if (!ctx.train || p_drop == 0.0) return x;
  auto it = ctx.seq_masks->find(id);
  if (it == ctx.seq_masks->end()) {
    // one mask per sequence, reused at every timestep
    Tensor mask = make_locked_dropout_mask(x.shape(), p_drop, *ctx.rng);
    it = ctx.seq_masks->emplace(id, mask).first;
  }
  return mul(x, it->second);
}

Tensor DenseLstmNode::forward(const Tensor& x, RunContext& ctx) {
  std::size_t B = x.shape()[0];
  ConvLstmState& st = ctx.store->get_or_init(id, [&] {
    Shape s{B, layer.hidden_size()};
    return ConvLstmState{Tensor::zeros(s), Tensor::zeros(s), 0};
  });
  DenseLstmState ds{st.h, st.c};
  auto [h, next] = dense_lstm_step(layer, x, ds);
  st.c = next.c;
  st.h = next.h;
  st.timestep += 1;
  return h;
}

void DenseLstmNode::collect_params(
    std::vector<std::pair<std::string, Tensor>>& out) {
  const char* names[] = {"w_f", "w_i", "w_o", "w_c", "u_f", "u_i",
                         "u_o", "u_c", "b_f", "b_i", "b_o", "b_c"};
  Tensor* tensors[] = {&layer.w_f, &layer.w_i, &layer.w_o, &layer.w_c,
                       &layer.u_f, &layer.u_i, &layer.u_o, &layer.u_c,
                       &layer.b_f, &layer.b_i, &layer.b_o, &layer.b_c};
  for (int i = 0; i < 12; ++i)
    out.emplace_back(id + "." + names[i], *tensors[i]);
}

Tensor LinearNode::forward(const Tensor& x, RunContext&) {
  return linear(x, weight, bias);
}

void LinearNode::collect_params(
    std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(id + ".weight", weight);
  out.emplace_back(id + ".bias", bias);
}

// ---------------------------------------------------------------------------
// sequence execution
// ---------------------------------------------------------------------------

void reset_states(StateStore& store, Node& net, const std::string& selector) {
  int matched = 0;
  net.visit([&](Node& n) {
    if (!n.has_state()) return;
    if (selector == "all" || n.scale == selector) {
      ++matched;
      store.zero(n.id);
    }
  });
  if (matched == 0)
    throw UsageError("reset selector '" + selector +
                     "' matches no stateful layer");
}

Tensor slice_timestep(const Tensor& x, std::size_t t) {
  if (x.rank() != 5)
    throw DimensionError("slice_timestep expects [B,T,C,H,W], got " +
                         shape_str(x.shape()));
  std::size_t B = x.shape()[0], T = x.shape()[1];
  std::size_t frame = x.size() / (B * T);
  std::vector<double> data(B * frame);
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(x.data().begin() + (b * T + t) * frame, frame,
                data.begin() + b * frame);
  return Tensor::from({B, x.shape()[2], x.shape()[3], x.shape()[4]},
                      std::move(data));
}

std::vector<Tensor> run_sequence(Node& net, const Tensor& x, StateStore& store,
                                 std::map<std::string, Tensor>& masks,
                                 bool train, std::mt19937_64* rng,
                                 const ResetPolicy& reset, int t_offset) {
  std::size_t T = x.shape()[1];
  RunContext ctx{&store, train, rng, &masks};
  std::vector<Tensor> outputs;
  outputs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    int global_t = t_offset + static_cast<int>(t);
    if (reset.scale != "none" && global_t > 0 &&
        global_t % reset.period == 0) {
      reset_states(store, net, reset.scale);
    }
    outputs.push_back(net.forward(slice_timestep(x, t), ctx));
  }
  return outputs;
}

Tensor bidirectional_fuse(const std::vector<Tensor>& forward_out,
                          const std::vector<Tensor>& reverse_out) {
  if (forward_out.empty() || reverse_out.empty())
    throw UsageError("bidirectional_fuse on empty outputs");
  const Tensor& f = forward_out.back();
  const Tensor& r = reverse_out.back();
  if (f.shape() != r.shape())
    throw DimensionError("bidirectional_fuse shape mismatch: " +
                         shape_str(f.shape()) + " vs " + shape_str(r.shape()));
  auto pf = softmax_values(f);
  auto pr = softmax_values(r);
  std::vector<double> fused(pf.size());
  for (std::size_t i = 0; i < pf.size(); ++i) fused[i] = 0.5 * (pf[i] + pr[i]);
  return Tensor::from(f.shape(), std::move(fused));
}

}  // namespace clstm
