#include "clstm/objectives.hpp"

#include <cmath>

namespace clstm {

Tensor sequence_cross_entropy(const std::vector<Tensor>& outputs,
                              const std::vector<int>& targets) {
  if (outputs.empty()) throw UsageError("sequence_cross_entropy: no outputs");
  Tensor total = cross_entropy_mean(outputs[0], targets);
  for (std::size_t t = 1; t < outputs.size(); ++t)
    total = add(total, cross_entropy_mean(outputs[t], targets));
  return scale(total, 1.0 / static_cast<double>(outputs.size()));
}

std::size_t ctc_min_frames(const std::vector<int>& target) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++repeats;
  return target.size() + repeats;
}

Tensor ctc_loss(const Tensor& outputs, const std::vector<int>& target) {
  if (outputs.rank() != 2)
    throw DimensionError("ctc_loss expects logits [T, alphabet+1], got " +
                         shape_str(outputs.shape()));
  std::size_t T = outputs.shape()[0], K = outputs.shape()[1];
  int blank = static_cast<int>(K) - 1;
  if (target.empty()) throw UsageError("ctc_loss: empty target");
  for (int c : target)
    if (c < 0 || c >= blank)
      throw UsageError("ctc target symbol " + std::to_string(c) +
                       " outside alphabet [0," + std::to_string(blank) + ")");
  if (T < ctc_min_frames(target))
    throw InfeasibleTargetError(
        "target of length " + std::to_string(target.size()) + " (requires " +
        std::to_string(ctc_min_frames(target)) + " frames) infeasible in " +
        std::to_string(T) + " frames");

  // blank-augmented label: blank, t0, blank, t1, ..., blank
  std::size_t L = target.size(), S = 2 * L + 1;
  std::vector<int> ext(S, blank);
  for (std::size_t i = 0; i < L; ++i) ext[2 * i + 1] = target[i];

  Tensor lp = log_softmax_rows(outputs);
  auto at = [&](std::size_t t, std::size_t s) {
    return select(lp, t * K + static_cast<std::size_t>(ext[s]));
  };

  std::vector<Tensor> alpha(S);  // undefined entries = unreachable (-inf)
  alpha[0] = at(0, 0);
  if (S > 1) alpha[1] = at(0, 1);
  for (std::size_t t = 1; t < T; ++t) {
    std::vector<Tensor> next(S);
    for (std::size_t s = 0; s < S; ++s) {
      // reachability pruning keeps the graph free of -inf constants
      std::size_t remaining_syms = (S - 1 - s) / 2;
      if (T - 1 - t < remaining_syms) continue;
      Tensor acc;
      if (alpha[s].defined()) acc = alpha[s];
      if (s >= 1 && alpha[s - 1].defined())
        acc = acc.defined() ? logaddexp(acc, alpha[s - 1]) : alpha[s - 1];
      if (s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] &&
          alpha[s - 2].defined())
        acc = acc.defined() ? logaddexp(acc, alpha[s - 2]) : alpha[s - 2];
      if (acc.defined()) next[s] = add(acc, at(t, s));
    }
    alpha = std::move(next);
  }

  Tensor ll;
  if (alpha[S - 1].defined()) ll = alpha[S - 1];
  if (S > 1 && alpha[S - 2].defined())
    ll = ll.defined() ? logaddexp(ll, alpha[S - 2]) : alpha[S - 2];
  if (!ll.defined())
    throw InfeasibleTargetError("no feasible CTC alignment");  // unreachable
  return neg(ll);
}

double ctc_oracle(const Tensor& outputs, const std::vector<int>& target) {
  if (outputs.rank() != 2)
    throw DimensionError("ctc_oracle expects logits [T, alphabet+1]");
  std::size_t T = outputs.shape()[0], K = outputs.shape()[1];
  if (T > 8)
    throw UsageError("ctc_oracle refuses T > 8 (exponential enumeration)");
  int blank = static_cast<int>(K) - 1;
  auto probs = softmax_values(outputs);

  double total = 0.0;
  std::vector<int> path(T, 0);
  bool done = false;
  while (!done) {
    // collapse: dedupe repeats, then strip blanks
    std::vector<int> collapsed;
    int prev = -1;
    for (int c : path) {
      if (c != prev && c != blank) collapsed.push_back(c);
      prev = c;
    }
    if (collapsed == target) {
      double p = 1.0;
      for (std::size_t t = 0; t < T; ++t)
        p *= probs[t * K + static_cast<std::size_t>(path[t])];
      total += p;
    }
    // next path in lexicographic order
    std::size_t i = T;
    while (i > 0) {
      if (++path[i - 1] < static_cast<int>(K)) break;
      path[i - 1] = 0;
      --i;
    }
    done = (i == 0);
  }
  if (total == 0.0)
    throw InfeasibleTargetError("no path collapses to the target");
  return -std::log(total);
}

}  // namespace clstm
