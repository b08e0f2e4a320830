#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <random>

#include "clstm/arch.hpp"
#include "clstm/convlstm.hpp"
#include "clstm/data.hpp"
#include "clstm/probe.hpp"
#include "clstm/train.hpp"
#include "doctest.h"

using namespace clstm;

namespace {

Model two_stage_model(std::uint64_t seed) {
  ArchSpec spec;
  spec.classes = 3;
  spec.stem_channels = 4;
  spec.lstm_hidden = 6;
  spec.dropout = 0.0;
  spec.stages.push_back({1, 4, 2, 6, true});
  spec.stages.push_back({1, 6, 2, 8, true});
  return build_model(spec, seed);
}

std::vector<SequenceSample> random_split(int count, std::size_t T, int classes,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SequenceSample> out;
  for (int i = 0; i < count; ++i) {
    SequenceSample s;
    s.id = "seq-" + std::to_string(i);
    s.label = i % classes;
    s.frames = Tensor::uniform({T, 1, 16, 16}, rng, 0.0, 1.0);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("stateful scales are reported in first-appearance order") {
  Model m = two_stage_model(3);
  auto scales = stateful_scales(*m.net);
  REQUIRE(scales.size() == 3);
  CHECK(scales[0] == "s/2");
  CHECK(scales[1] == "s/4");
  CHECK(scales[2] == "final-lstm");
}

TEST_CASE("reset period at or beyond the sequence length is a no-op") {
  Model m = two_stage_model(5);
  auto split = random_split(6, 8, 3, 7);
  ProbeConfig cfg;
  cfg.periods = {8, 9, 20};
  ProbeReport rep = run_probe(m, split, cfg);
  REQUIRE(rep.cells.size() == 3 * 3);
  for (const auto& cell : rep.cells) {
    CHECK(cell.accuracy == rep.baseline_accuracy);
    CHECK(cell.drop_points == 0.0);
  }
}

TEST_CASE("probe grid is scale-major then period-minor and sized correctly") {
  Model m = two_stage_model(9);
  auto split = random_split(4, 6, 3, 11);
  ProbeConfig cfg;
  cfg.periods = {1, 3};
  ProbeReport rep = run_probe(m, split, cfg);
  REQUIRE(rep.cells.size() == 6);
  std::vector<std::string> want_scales = {"s/2", "s/2", "s/4",
                                          "s/4", "final-lstm", "final-lstm"};
  for (std::size_t i = 0; i < rep.cells.size(); ++i) {
    CHECK(rep.cells[i].scale == want_scales[i]);
    CHECK(rep.cells[i].period == (i % 2 == 0 ? 1 : 3));
    CHECK(rep.cells[i].drop_points ==
          doctest::Approx((rep.baseline_accuracy - rep.cells[i].accuracy) *
                          100.0)
              .epsilon(1e-12));
  }
  CHECK(rep.sequences == 4);
}

TEST_CASE("probing never mutates the parameters") {
  Model m = two_stage_model(13);
  auto split = random_split(3, 5, 3, 15);
  std::uint64_t before = parameter_hash(m);
  ProbeConfig cfg;
  cfg.periods = {1, 2};
  ProbeReport rep = run_probe(m, split, cfg);
  CHECK(rep.parameter_hash_before == before);
  CHECK(rep.parameter_hash_after == before);
  CHECK(parameter_hash(m) == before);
}

TEST_CASE("probe runs are deterministic") {
  Model m = two_stage_model(17);
  auto split = random_split(5, 7, 3, 19);
  ProbeConfig cfg;
  cfg.periods = {1, 4};
  ProbeReport a = run_probe(m, split, cfg);
  ProbeReport b = run_probe(m, split, cfg);
  CHECK(a.baseline_accuracy == b.baseline_accuracy);
  REQUIRE(a.cells.size() == b.cells.size());
  for (std::size_t i = 0; i < a.cells.size(); ++i)
    CHECK(a.cells[i].accuracy == b.cells[i].accuracy);
  CHECK(emit_probe_plot_data(a) == emit_probe_plot_data(b));
}

TEST_CASE("max_sequences limits the evaluated subset") {
  Model m = two_stage_model(21);
  auto split = random_split(10, 5, 3, 23);
  ProbeConfig cfg;
  cfg.periods = {2};
  cfg.max_sequences = 4;
  ProbeReport rep = run_probe(m, split, cfg);
  CHECK(rep.sequences == 4);

  // matches probing the truncated split directly
  auto head = std::vector<SequenceSample>(split.begin(), split.begin() + 4);
  ProbeConfig full = cfg;
  full.max_sequences = 0;
  ProbeReport rep_head = run_probe(m, head, full);
  CHECK(rep.baseline_accuracy == rep_head.baseline_accuracy);
  for (std::size_t i = 0; i < rep.cells.size(); ++i)
    CHECK(rep.cells[i].accuracy == rep_head.cells[i].accuracy);
}

TEST_CASE("explicit scale subset restricts the sweep; unknown scales throw") {
  Model m = two_stage_model(25);
  auto split = random_split(3, 4, 3, 27);
  ProbeConfig cfg;
  cfg.scales = {"s/4"};
  cfg.periods = {1};
  ProbeReport rep = run_probe(m, split, cfg);
  REQUIRE(rep.cells.size() == 1);
  CHECK(rep.cells[0].scale == "s/4");

  cfg.scales = {"s/32"};
  CHECK_THROWS_AS(run_probe(m, split, cfg), UsageError);
}

TEST_CASE("probe rejects non-positive periods") {
  Model m = two_stage_model(29);
  auto split = random_split(2, 4, 3, 31);
  ProbeConfig cfg;
  cfg.periods = {0};
  CHECK_THROWS_AS(run_probe(m, split, cfg), UsageError);
}

TEST_CASE("plot data rows are formatted and byte-stable") {
  ProbeReport rep;
  rep.baseline_accuracy = 0.875;
  rep.cells.push_back({"s/2", 1, 0.5, 37.5});
  rep.cells.push_back({"s/2", 3, 0.875, 0.0});
  rep.cells.push_back({"final-lstm", 1, 0.75, 12.5});
  std::string text = emit_probe_plot_data(rep);
  CHECK(text ==
        "scale,T,accuracy,drop_points\n"
        "s/2,1,0.500000,37.500000\n"
        "s/2,3,0.875000,0.000000\n"
        "final-lstm,1,0.750000,12.500000\n");
  CHECK(emit_probe_plot_data(rep) == text);
}

TEST_CASE("resetting every frame matches a model run on stateless frames") {
  // with period 1 every scale's state is wiped after each frame; wiping all
  // scales at once must reproduce per-frame fresh passes (final lstm output
  // of the last frame alone)
  Model m = two_stage_model(33);
  auto split = random_split(4, 6, 3, 35);
  for (const auto& s : split) {
    Tensor full_logits = predict_final_logits(m, s.frames, {"all", 1});
    // last frame alone, fresh state
    std::size_t frame = s.frames.size() / s.frames.shape()[0];
    std::vector<double> last(s.frames.data().end() - frame,
                             s.frames.data().end());
    Shape sh = s.frames.shape();
    sh[0] = 1;
    Tensor last_frame = Tensor::from(sh, std::move(last));
    Tensor fresh_logits = predict_final_logits(m, last_frame);
    REQUIRE(full_logits.size() == fresh_logits.size());
    for (std::size_t i = 0; i < full_logits.size(); ++i)
      CHECK(full_logits.data()[i] == fresh_logits.data()[i]);
  }
}

// ---------------------------------------------------------------------------
// evaluation helpers
// ---------------------------------------------------------------------------

TEST_CASE("top-k accuracy is monotone in k and exact at k = classes") {
  Model m = two_stage_model(37);
  auto split = random_split(9, 4, 3, 39);
  auto accs = eval_topk(m, split, {1, 2, 3}, false);
  REQUIRE(accs.size() == 3);
  CHECK(accs[0] <= accs[1]);
  CHECK(accs[1] <= accs[2]);
  CHECK(accs[2] == 1.0);
}

TEST_CASE("top-1 accuracy agrees with argmax counting") {
  Model m = two_stage_model(41);
  auto split = random_split(7, 5, 3, 43);
  int hits = 0;
  for (const auto& s : split) {
    Tensor logits = predict_final_logits(m, s.frames);
    const auto& v = logits.data();
    int arg = static_cast<int>(
        std::max_element(v.begin(), v.end()) - v.begin());
    if (arg == s.label) ++hits;
  }
  auto accs = eval_topk(m, split, {1}, false);
  CHECK(accs[0] == doctest::Approx(hits / 7.0).epsilon(1e-12));
}

TEST_CASE("bidirectional fusion of one model with itself on palindromes") {
  // a time-symmetric sequence looks identical forwards and backwards, so
  // fusing a model with itself must match the plain prediction
  Model m = two_stage_model(45);
  std::mt19937_64 rng(46);
  Tensor half = Tensor::uniform({2, 1, 16, 16}, rng, 0.0, 1.0);
  std::vector<double> data = half.data();
  std::size_t frame = 16 * 16;
  for (int t = 1; t >= 0; --t)
    data.insert(data.end(), half.data().begin() + t * frame,
                half.data().begin() + (t + 1) * frame);
  SequenceSample s;
  s.id = "palindrome";
  s.frames = Tensor::from({4, 1, 16, 16}, std::move(data));

  Tensor logits = predict_final_logits(m, s.frames);
  auto probs = softmax_values(logits);
  int arg = static_cast<int>(
      std::max_element(probs.begin(), probs.end()) - probs.begin());
  s.label = arg;
  double acc = eval_bidirectional(m, m, {s});
  CHECK(acc == 1.0);
}
