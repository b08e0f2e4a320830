#pragma once

#include <iosfwd>

#include "clstm/arch.hpp"
#include "clstm/data.hpp"
#include "clstm/objectives.hpp"

namespace clstm {

struct TbpttConfig {
  int window = 8;
  bool loss_every_timestep = true;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip = 5.0;
  bool clip_enabled = true;
};

/// Consistency check failed (e.g. checkpoint/architecture hash mismatch);
/// the CLI maps these to exit code 3.
class VerificationError : public std::runtime_error {
 public:
  explicit VerificationError(const std::string& msg)
      : std::runtime_error(msg) {}
};

/// Gradient became NaN/Inf; the step was aborted without touching parameters.
class NonFiniteGradientError : public std::runtime_error {
 public:
  explicit NonFiniteGradientError(const std::string& msg)
      : std::runtime_error(msg) {}
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<std::pair<std::string, Tensor>> params,
                AdamConfig cfg);

  void zero_grad();
  double global_grad_norm() const;
  // Clips the global gradient norm (when enabled), then applies one Adam
  // update with bias correction. Throws NonFiniteGradientError on bad grads.
  void step();

  long step_count() const { return step_; }
  double last_clip_scale() const { return last_clip_scale_; }
  AdamConfig& config() { return cfg_; }
  const AdamConfig& config() const { return cfg_; }

  void save(std::ostream& os) const;
  void load(std::istream& is);

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  long step_ = 0;
  double last_clip_scale_ = 1.0;
};

struct TbpttMetrics {
  double loss = 0.0;
  int windows = 0;
  int backward_calls = 0;
  int updates = 0;
};

// One training sequence-batch: forward/backward per window with carried
// (history-severed) states and gradient accumulation, then a single
// clipped Adam update.
TbpttMetrics train_sequence_tbptt(Model& model, const Tensor& frames,
                                  const std::vector<int>& targets,
                                  const TbpttConfig& cfg, AdamOptimizer& opt,
                                  std::mt19937_64& rng);

// CTC path: full-sequence backprop, no truncation.
TbpttMetrics train_sequence_ctc(Model& model, const Tensor& frames,
                                const std::vector<std::vector<int>>& targets,
                                AdamOptimizer& opt, std::mt19937_64& rng);

struct CurriculumPhase {
  long start_step = 0;
  std::size_t seq_len = 0;
};

struct CurriculumSchedule {
  std::vector<CurriculumPhase> phases;  // lengths non-decreasing
  std::size_t length_at(long step, int* phase_index = nullptr) const;
  void validate() const;
};

// Halves the LR after `patience` validation evaluations without improvement.
class PlateauScheduler {
 public:
  PlateauScheduler(int patience, double floor)
      : patience_(patience), floor_(floor) {}
  // Returns true when the LR was halved.
  bool observe(double metric, double& lr);
  double best() const { return best_; }
  int stale() const { return stale_; }
  void restore(double best, int stale) {
    best_ = best;
    stale_ = stale;
  }

 private:
  int patience_;
  double floor_;
  double best_ = -1e300;
  int stale_ = 0;
};

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::string spec_hash;
  long step = 0;
  double lr = 0.0;
  int phase = 0;
  std::string rng_state;
  double best_val = -1e300;
  int plateau_stale = 0;
  double last_val = -1.0;
};

std::string arch_spec_hash(const ArchSpec& spec);

void save_checkpoint(const std::string& path, const Model& model,
                     const AdamOptimizer* opt, const CheckpointMeta& meta);
// Loads parameters (and optimizer state when `opt` is given) in place;
// verifies the spec hash when meta.spec_hash is already set on the model.
CheckpointMeta load_checkpoint(const std::string& path, Model& model,
                               AdamOptimizer* opt);

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

struct TrainConfig {
  TbpttConfig tbptt;
  AdamConfig adam;
  int batch_size = 4;
  long steps = 200;
  int eval_interval = 25;
  int plateau_patience = 3;
  double lr_floor = 1e-6;
  CurriculumSchedule curriculum;
  bool augment = false;
  AugmentConfig aug;
  bool shuffle_input_frames = false;  // ablation: destroy temporal order
  bool reverse_time = false;          // reverse-direction network training
  bool use_ctc = false;
  std::uint64_t seed = 1;
};

struct StepMetrics {
  long step = 0;
  double loss = 0.0;
  double val_accuracy = -1.0;  // last known; -1 before the first evaluation
  double lr = 0.0;
  int phase = 0;
};

class Trainer {
 public:
  Trainer(Model& model, const Dataset& data, TrainConfig cfg);

  StepMetrics step();
  std::vector<StepMetrics> run(long steps);

  // Top-1 accuracy of the final-timestep prediction on a split, eval mode.
  double evaluate(const std::vector<SequenceSample>& split) const;

  long current_step() const { return step_; }
  double lr() const { return opt_.config().lr; }
  AdamOptimizer& optimizer() { return opt_; }
  CheckpointMeta snapshot_meta() const;
  void restore_meta(const CheckpointMeta& meta);

 private:
  Tensor prepare_frames(const SequenceSample& s, std::uint64_t seed) const;

  Model& model_;
  const Dataset& data_;
  TrainConfig cfg_;
  AdamOptimizer opt_;
  mutable std::mt19937_64 rng_;
  PlateauScheduler plateau_;
  long step_ = 0;
  double last_val_ = -1.0;
};

// Prediction helper shared by eval/probe: final-timestep logits in eval mode.
Tensor predict_final_logits(const Model& model, const Tensor& frames,
                            const ResetPolicy& reset = {});

}  // namespace clstm
