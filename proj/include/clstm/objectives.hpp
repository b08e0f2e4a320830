#pragma once

#include "clstm/tensor.hpp"

namespace clstm {

/// CTC target that admits no alignment for the given frame count.
class InfeasibleTargetError : public std::runtime_error {
 public:
  explicit InfeasibleTargetError(const std::string& msg)
      : std::runtime_error(msg) {}
};

// Mean over batch and timesteps of -log softmax p(target); the same class
// target applies at every timestep.
Tensor sequence_cross_entropy(const std::vector<Tensor>& outputs,
                              const std::vector<int>& targets);

// CTC negative log likelihood. `outputs` are logits [T, alphabet+1] with the
// blank as the LAST index; the forward algorithm runs in log space over the
// blank-augmented target of length 2L+1 and gradients flow to the logits.
Tensor ctc_loss(const Tensor& outputs, const std::vector<int>& target);

// Brute-force oracle: enumerates all (alphabet+1)^T paths, keeps those that
// collapse (dedupe repeats, strip blanks) to the target, and sums their
// probabilities. Returns the negative log likelihood. Refuses T > 8.
double ctc_oracle(const Tensor& outputs, const std::vector<int>& target);

// Minimum frame count that admits any alignment for `target`.
std::size_t ctc_min_frames(const std::vector<int>& target);

}  // namespace clstm
