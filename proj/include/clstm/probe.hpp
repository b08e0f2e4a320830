#pragma once

#include "clstm/arch.hpp"
#include "clstm/data.hpp"

namespace clstm {

struct ProbeConfig {
  // Scale tags to sweep; empty = every scale that owns recurrent state.
  std::vector<std::string> scales;
  std::vector<int> periods = {1, 3, 5, 10, 15};
  std::size_t max_sequences = 0;  // 0 = use the whole split
};

struct ProbeCell {
  std::string scale;
  int period = 0;
  double accuracy = 0.0;
  double drop_points = 0.0;  // (baseline - accuracy) * 100
};

struct ProbeReport {
  double baseline_accuracy = 0.0;
  std::vector<ProbeCell> cells;  // scale-major, period-minor
  std::uint64_t parameter_hash_before = 0;
  std::uint64_t parameter_hash_after = 0;
  std::size_t sequences = 0;
};

// Scale tags of stateful layers, in first-appearance order.
std::vector<std::string> stateful_scales(Node& net);

// Classifies each sequence in eval mode, zeroing the recurrent state of the
// selected scale every `period` frames (reset times t in {T, 2T, ...}), and
// compares against an undisturbed baseline. Read-only on the model.
ProbeReport run_probe(const Model& model,
                      const std::vector<SequenceSample>& split,
                      const ProbeConfig& cfg);

// "scale,T,accuracy,drop_points" rows in report order; byte-stable.
std::string emit_probe_plot_data(const ProbeReport& report);

// ---- evaluation helpers ----

// Top-k accuracy of final-timestep predictions for each k requested;
// optionally through the six-transform multi-crop path.
std::vector<double> eval_topk(const Model& model,
                              const std::vector<SequenceSample>& split,
                              const std::vector<int>& ks, bool use_multicrop);

// Fused forward/reverse evaluation: the reverse model sees the time-flipped
// sequence and the two final softmax distributions are averaged.
double eval_bidirectional(const Model& fwd, const Model& rev,
                          const std::vector<SequenceSample>& split);

}  // namespace clstm
