#include "clstm/probe.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "clstm/train.hpp"

namespace clstm {

std::vector<std::string> stateful_scales(Node& net) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  net.visit([&](Node& n) {
    if (n.has_state() && !n.scale.empty() && seen.insert(n.scale).second) {
      out.push_back(n.scale);
    }
  });
  return out;
}

namespace {

int top_class(const Tensor& logits) {
  const std::size_t K = logits.shape().back();
  int best = 0;
  for (std::size_t k = 1; k < K; ++k) {
    if (logits[k] > logits[static_cast<std::size_t>(best)]) {
      best = static_cast<int>(k);
    }
  }
  return best;
}

double accuracy_with_reset(const Model& model,
                           const std::vector<const SequenceSample*>& seqs,
                           const ResetPolicy& reset) {
  std::size_t correct = 0;
  for (const SequenceSample* s : seqs) {
    Tensor logits = predict_final_logits(model, s->frames, reset);
    if (top_class(logits) == s->label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(seqs.size());
}

}  // namespace

ProbeReport run_probe(const Model& model,
                      const std::vector<SequenceSample>& split,
                      const ProbeConfig& cfg) {
  if (split.empty()) throw UsageError("probe split is empty");
  std::vector<const SequenceSample*> seqs;
  for (const SequenceSample& s : split) {
    seqs.push_back(&s);
    if (cfg.max_sequences > 0 && seqs.size() >= cfg.max_sequences) break;
  }
  std::vector<std::string> scales = cfg.scales;
  if (scales.empty()) scales = stateful_scales(*model.net);
  if (scales.empty()) throw UsageError("the network has no recurrent state");
  if (cfg.periods.empty()) throw UsageError("probe has no periods");

  ProbeReport report;
  report.sequences = seqs.size();
  report.parameter_hash_before = parameter_hash(model);
  report.baseline_accuracy = accuracy_with_reset(model, seqs, ResetPolicy{});
  for (const std::string& scale : scales) {
    for (int period : cfg.periods) {
      if (period <= 0) throw UsageError("probe periods must be positive");
      ProbeCell cell;
      cell.scale = scale;
      cell.period = period;
      cell.accuracy =
          accuracy_with_reset(model, seqs, ResetPolicy{scale, period});
      cell.drop_points = (report.baseline_accuracy - cell.accuracy) * 100.0;
      report.cells.push_back(cell);
    }
  }
  report.parameter_hash_after = parameter_hash(model);
  return report;
}

std::string emit_probe_plot_data(const ProbeReport& report) {
  std::string out = "scale,T,accuracy,drop_points\n";
  char buf[160];
  for (const ProbeCell& c : report.cells) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.6f,%.6f\n", c.scale.c_str(),
                  c.period, c.accuracy, c.drop_points);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// evaluation helpers
// ---------------------------------------------------------------------------

namespace {

// Rank of the true label (0 = top-1) in a score vector.
std::size_t label_rank(const std::vector<double>& scores, int label) {
  const double target = scores[static_cast<std::size_t>(label)];
  std::size_t rank = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (static_cast<int>(k) == label) continue;
    if (scores[k] > target ||
        (scores[k] == target && static_cast<int>(k) < label)) {
      ++rank;
    }
  }
  return rank;
}

}  // namespace

std::vector<double> eval_topk(const Model& model,
                              const std::vector<SequenceSample>& split,
                              const std::vector<int>& ks, bool use_multicrop) {
  if (split.empty()) throw UsageError("evaluation split is empty");
  std::vector<std::size_t> hits(ks.size(), 0);
  for (const SequenceSample& s : split) {
    Tensor scores = use_multicrop ? multicrop_predict(model, s.frames)
                                  : predict_final_logits(model, s.frames);
    const std::size_t rank = label_rank(scores.data(), s.label);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      if (rank < static_cast<std::size_t>(ks[i])) ++hits[i];
    }
  }
  std::vector<double> out;
  for (std::size_t h : hits) {
    out.push_back(static_cast<double>(h) / static_cast<double>(split.size()));
  }
  return out;
}

double eval_bidirectional(const Model& fwd, const Model& rev,
                          const std::vector<SequenceSample>& split) {
  if (split.empty()) throw UsageError("evaluation split is empty");
  std::size_t correct = 0;
  for (const SequenceSample& s : split) {
    const Shape& fs = s.frames.shape();  // [T,C,H,W]
    Tensor flipped = Tensor::zeros(fs);
    const std::size_t T = fs[0];
    const std::size_t frame = numel(fs) / T;
    for (std::size_t t = 0; t < T; ++t) {
      std::copy_n(s.frames.data().data() + t * frame, frame,
                  flipped.data().data() + (T - 1 - t) * frame);
    }
    Tensor f_logits = predict_final_logits(fwd, s.frames);
    Tensor r_logits = predict_final_logits(rev, flipped);
    Tensor fused = bidirectional_fuse({f_logits}, {r_logits});
    if (top_class(fused) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

}  // namespace clstm
