#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "clstm/layers.hpp"
#include "clstm/tensor.hpp"

namespace clstm {

struct ConvLstmLayer {
  // Input filters downsample when stride=2; recurrent filters are always
  // stride 1 with same-padding so the state shape is preserved.
  Tensor w_f, w_i, w_o, w_c;  // [out_ch, in_ch, k, k]
  Tensor u_f, u_i, u_o, u_c;  // [out_ch, out_ch, k, k]
  Tensor b_f, b_i, b_o, b_c;  // [out_ch]
  int kernel = 3;
  int stride = 1;

  static ConvLstmLayer create(std::size_t in_ch, std::size_t out_ch,
                              int kernel, int stride, std::mt19937_64& rng);
  std::size_t in_channels() const { return w_f.shape()[1]; }
  std::size_t out_channels() const { return w_f.shape()[0]; }
  int input_padding() const { return kernel / 2; }
};

struct ConvLstmState {
  Tensor c;  // [B, out_ch, H, W]
  Tensor h;  // same shape as c
  int timestep = 0;
};

// Cell update: f,i,o gates via sigmoid over W*x + U*h + b;
// c_t = f.c_{t-1} + i.tanh(W_c*x + U_c*h + b_c); h_t = o.tanh(c_t).
std::pair<Tensor, ConvLstmState> convlstm_step(const ConvLstmLayer& layer,
                                               const Tensor& x_t,
                                               const ConvLstmState& state);

// Per-sequence recurrent state, keyed by layer id. Cleared at sequence start.
class StateStore {
 public:
  bool has(const std::string& id) const { return states_.count(id) > 0; }
  ConvLstmState& at(const std::string& id) { return states_.at(id); }
  ConvLstmState& get_or_init(const std::string& id,
                             const std::function<ConvLstmState()>& init);
  void clear() { states_.clear(); }
  void zero(const std::string& id);
  // Cuts gradient history at a truncated-BPTT window boundary.
  void detach_all();
  std::map<std::string, ConvLstmState>& entries() { return states_; }

 private:
  std::map<std::string, ConvLstmState> states_;
};

// ---------------------------------------------------------------------------
// layer graph
// ---------------------------------------------------------------------------

struct RunContext {
  StateStore* store = nullptr;
  bool train = false;
  std::mt19937_64* rng = nullptr;  // locked-dropout mask draws
  // Per-sequence dropout masks live in here so they survive TBPTT windows;
  // cleared together with the state store at sequence start.
  std::map<std::string, Tensor>* seq_masks = nullptr;
};

class Node {
 public:
  virtual ~Node() = default;
  virtual Tensor forward(const Tensor& x, RunContext& ctx) = 0;
  virtual const char* kind() const = 0;
  virtual void visit(const std::function<void(Node&)>& fn) { fn(*this); }
  virtual void collect_params(std::vector<std::pair<std::string, Tensor>>&) {}
  virtual void collect_buffers(std::vector<std::pair<std::string, Tensor>>&) {}
  virtual bool has_state() const { return false; }

  std::string id;
  std::string scale;  // "s", "s/2", ..., "final-lstm"; "" for untagged
};

using NodePtr = std::unique_ptr<Node>;

class SequentialNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext& ctx) override;
  const char* kind() const override { return "sequential"; }
  void visit(const std::function<void(Node&)>& fn) override;
  void collect_params(std::vector<std::pair<std::string, Tensor>>& out) override;
  void collect_buffers(std::vector<std::pair<std::string, Tensor>>& out) override;
  std::vector<NodePtr> children;
};

// out = main(x) + skip(x); a null skip is the identity.
class ResidualNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext& ctx) override;
  const char* kind() const override { return "residual"; }
  void visit(const std::function<void(Node&)>& fn) override;
  void collect_params(std::vector<std::pair<std::string, Tensor>>& out) override;
  void collect_buffers(std::vector<std::pair<std::string, Tensor>>& out) override;
  NodePtr main;
  NodePtr skip;  // nullptr => identity skip
};

class Conv2dNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext& ctx) override;
  const char* kind() const override { return "conv2d"; }
  void collect_params(std::vector<std::pair<std::string, Tensor>>& out) override;
  Conv2dLayer layer;
};

class BatchNormNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext& ctx) override;
  const char* kind() const override { return "batch_norm"; }
  void collect_params(std::vector<std::pair<std::string, Tensor>>& out) override;
  void collect_buffers(std::vector<std::pair<std::string, Tensor>>& out) override;
  BatchNormLayer layer;
};

class ReluNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext&) override { return relu(x); }
  const char* kind() const override { return "relu"; }
};

class ConvLstmNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext& ctx) override;
  const char* kind() const override { return "convlstm"; }
  void collect_params(std::vector<std::pair<std::string, Tensor>>& out) override;
  bool has_state() const override { return true; }
  ConvLstmLayer layer;
};

class GlobalAvgPoolNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext&) override {
    return spatial_mean(x);
  }
  const char* kind() const override { return "global_avg_pool"; }
};

class MaxPoolNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext&) override;
  const char* kind() const override { return "max_pool"; }
  int window = 2;
};

class LockedDropoutNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext& ctx) override;
  const char* kind() const override { return "locked_dropout"; }
  double p_drop = 0.5;
};

class DenseLstmNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext& ctx) override;
  const char* kind() const override { return "dense_lstm"; }
  void collect_params(std::vector<std::pair<std::string, Tensor>>& out) override;
  bool has_state() const override { return true; }
  DenseLstmLayer layer;
};

class LinearNode : public Node {
 public:
  Tensor forward(const Tensor& x, RunContext& ctx) override;
  const char* kind() const override { return "linear"; }
  void collect_params(std::vector<std::pair<std::string, Tensor>>& out) override;
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

// ---------------------------------------------------------------------------
// sequence execution
// ---------------------------------------------------------------------------

struct ResetPolicy {
  std::string scale = "none";  // "none", "all", "s/2", ..., "final-lstm"
  int period = 1;              // resets fire at t in {period, 2*period, ...}
};

struct Model;  // defined in arch.hpp

// Zeroes c and h of every stateful layer whose scale tag matches `selector`
// ("all" matches every stateful layer). Throws UsageError when nothing
// matches so a misconfigured probe cannot silently no-op.
void reset_states(StateStore& store, Node& net, const std::string& selector);

// Runs the network over x[B,T,C,H,W]; returns per-timestep outputs. The
// store carries state across calls (truncated-BPTT windows); masks holds the
// per-sequence locked-dropout draws.
std::vector<Tensor> run_sequence(Node& net, const Tensor& x, StateStore& store,
                                 std::map<std::string, Tensor>& masks,
                                 bool train, std::mt19937_64* rng,
                                 const ResetPolicy& reset = {},
                                 int t_offset = 0);

// Extracts frame t: x[B,T,C,H,W] -> [B,C,H,W] (untaped copy).
Tensor slice_timestep(const Tensor& x, std::size_t t);

// Mean of the two final-timestep softmax distributions.
Tensor bidirectional_fuse(const std::vector<Tensor>& forward_out,
                          const std::vector<Tensor>& reverse_out);

}  // namespace clstm
