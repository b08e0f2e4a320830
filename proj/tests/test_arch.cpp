#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "clstm/arch.hpp"
#include "clstm/gradcheck.hpp"

using namespace clstm;

namespace {

ArchSpec full_spec() {
  ArchSpec spec;
  spec.kind = "resnet";
  spec.input_channels = 1;
  spec.classes = 500;
  spec.stem_channels = 64;
  spec.lstm_hidden = 512;
  spec.dropout = 0.5;
  spec.stages.push_back({3, 64, 32, 128, true});
  spec.stages.push_back({6, 128, 64, 256, true});
  spec.stages.push_back({3, 256, 128, 512, true});
  spec.stages.push_back({2, 512, 128, 512, false});
  return spec;
}

}  // namespace

TEST_CASE("full-scale census matches the fixed layer table") {
  Model m = build_model(full_spec(), 1);
  LayerCensus c = census(m);
  CHECK(c.convlstm_3x3 == 14);
  CHECK(c.convlstm_1x1 == 4);
  CHECK(c.conv2d_1x1 == 28);
  CHECK(c.conv2d_other == 1);  // the 3x3 stem
  CHECK(c.dense_lstm == 1);
  CHECK(c.total == 48);
  REQUIRE(c.by_scale.count("s/4") == 1);
  CHECK(c.by_scale.at("s/4") == 19);
}

TEST_CASE("full-scale parameter count sits within 15% of 14.5M") {
  Model m = build_model(full_spec(), 1);
  const double params = static_cast<double>(m.parameter_count());
  CHECK(params > 14.5e6 * 0.85);
  CHECK(params < 14.5e6 * 1.15);
}

TEST_CASE("census arithmetic holds for arbitrary stage tables") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    ArchSpec spec;
    spec.classes = 3;
    spec.stem_channels = 4;
    spec.lstm_hidden = 4;
    std::size_t prev = 4;
    int blocks_a = 0, blocks_total = 0;
    const int n_stages = 1 + static_cast<int>(rng() % 3);
    for (int s = 0; s < n_stages; ++s) {
      const int sub = 1 + static_cast<int>(rng() % 3);
      StageSpec st{sub, prev, 2, prev + 2, true};
      prev = st.out_ch;
      spec.stages.push_back(st);
      blocks_a += 1;
      blocks_total += sub;
    }
    Model m = build_model(spec, 3);
    LayerCensus c = census(m);
    CHECK(c.convlstm_3x3 == blocks_total);
    CHECK(c.convlstm_1x1 == blocks_a);  // one skip per stage entry block
    CHECK(c.conv2d_1x1 == 2 * blocks_total);
    CHECK(c.conv2d_other == 1);
    CHECK(c.dense_lstm == 1);
    CHECK(c.total ==
          c.convlstm_3x3 + c.convlstm_1x1 + c.conv2d_1x1 + c.conv2d_other +
              c.dense_lstm);
    int by_scale_total = 0;
    for (const auto& [scale, n] : c.by_scale) by_scale_total += n;
    CHECK(by_scale_total == c.total);
  }
}

TEST_CASE("stage outputs halve the resolution; keep-stages preserve it") {
  ArchSpec spec;
  spec.classes = 2;
  spec.stem_channels = 4;
  spec.lstm_hidden = 4;
  spec.dropout = 0.0;
  spec.stages.push_back({1, 4, 2, 6, true});
  spec.stages.push_back({1, 6, 2, 8, true});
  spec.stages.push_back({1, 8, 2, 8, false});
  Model m = build_model(spec, 4);

  std::mt19937_64 rng(5);
  Tensor x = Tensor::uniform({1, 2, 1, 48, 48}, rng, 0.0, 1.0);
  StateStore store;
  std::map<std::string, Tensor> masks;
  auto outs = run_sequence(*m.net, x, store, masks, false, nullptr);
  CHECK(outs[0].shape() == Shape{1, 2});

  // state shapes reveal the per-stage spatial extents
  bool saw24 = false, saw12 = false;
  for (auto& [id, st] : store.entries()) {
    if (st.c.rank() == 4) {
      if (st.c.shape()[2] == 24) saw24 = true;
      if (st.c.shape()[2] == 12) saw12 = true;
      CHECK(st.c.shape()[2] != 6);  // the keep-stage stays at 12
    }
  }
  CHECK(saw24);
  CHECK(saw12);
}

TEST_CASE("an all-zero-parameter network emits uniform class scores") {
  ArchSpec spec;
  spec.classes = 4;
  spec.stem_channels = 3;
  spec.lstm_hidden = 4;
  spec.dropout = 0.0;
  spec.stages.push_back({1, 3, 2, 4, true});
  Model m = build_model(spec, 6);
  for (auto& [n, p] : m.parameters()) {
    std::fill(p.data().begin(), p.data().end(), 0.0);
  }
  std::mt19937_64 rng(7);
  Tensor x = Tensor::uniform({1, 2, 1, 8, 8}, rng, 0.0, 1.0);
  StateStore store;
  std::map<std::string, Tensor> masks;
  auto outs = run_sequence(*m.net, x, store, masks, false, nullptr);
  for (std::size_t k = 0; k < 4; ++k) CHECK(outs.back()[k] == 0.0);
  std::vector<double> p = softmax_values(outs.back());
  for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("block A halves the resolution and changes channels") {
  std::mt19937_64 rng(8);
  NodePtr block = build_block_a(4, 2, 6, 2, rng, "b", "s/2");
  StateStore store;
  std::map<std::string, Tensor> masks;
  RunContext ctx{&store, false, nullptr, &masks};
  Tensor x = Tensor::uniform({1, 4, 8, 8}, rng, -1.0, 1.0);
  Tensor y = block->forward(x, ctx);
  CHECK(y.shape() == Shape{1, 6, 4, 4});

  // parameterized layers: 2 conv1x1 + clstm3x3 + skip clstm1x1
  LayerCensus c = census(*block);
  CHECK(c.total == 4);
  CHECK(c.convlstm_3x3 == 1);
  CHECK(c.convlstm_1x1 == 1);
  CHECK(c.conv2d_1x1 == 2);
}

TEST_CASE("block B keeps shape and uses an identity skip") {
  std::mt19937_64 rng(9);
  NodePtr block = build_block_b(6, 2, rng, "b", "s/2");
  StateStore store;
  std::map<std::string, Tensor> masks;
  RunContext ctx{&store, false, nullptr, &masks};
  Tensor x = Tensor::uniform({1, 6, 4, 4}, rng, -1.0, 1.0);
  Tensor y = block->forward(x, ctx);
  CHECK(y.shape() == x.shape());
  LayerCensus c = census(*block);
  CHECK(c.total == 3);
  CHECK(c.convlstm_1x1 == 0);

  // identity skip: zeroing the main path passes x through untouched
  std::vector<std::pair<std::string, Tensor>> params;
  block->collect_params(params);
  for (auto& [n, p] : params) std::fill(p.data().begin(), p.data().end(), 0.0);
  StateStore store2;
  std::map<std::string, Tensor> masks2;
  RunContext ctx2{&store2, false, nullptr, &masks2};
  Tensor y2 = block->forward(x, ctx2);
  CHECK(y2.data() == x.data());
}

TEST_CASE("blocks A and B pass the gradient check") {
  std::mt19937_64 rng(10);
  NodePtr a = build_block_a(2, 2, 3, 2, rng, "a", "s/2");
  NodePtr b = build_block_b(3, 2, rng, "b", "s/2");
  Tensor x = Tensor::uniform({2, 2, 6, 6}, rng, -1.0, 1.0, true);
  auto f = [&](const Tensor& t) {
    StateStore store;
    std::map<std::string, Tensor> masks;
    RunContext ctx{&store, true, nullptr, &masks};
    Tensor y = a->forward(t, ctx);
    y = b->forward(y, ctx);
    return sum(mul(y, y));
  };
  CheckReport rep = finite_diff_check(f, x, 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("the vggm builder starts with a plain convolution") {
  ArchSpec spec;
  spec.kind = "vggm";
  spec.classes = 3;
  spec.stem_channels = 4;
  spec.stem_kernel = 3;
  spec.lstm_hidden = 4;
  spec.dropout = 0.0;
  spec.vgg_layers.push_back({6, 3, true});
  spec.vgg_layers.push_back({8, 3, false});
  Model m = build_model(spec, 11);
  LayerCensus c = census(m);
  CHECK(c.conv2d_other == 1);
  CHECK(c.convlstm_3x3 == 2);
  CHECK(c.dense_lstm == 1);

  std::mt19937_64 rng(12);
  Tensor x = Tensor::uniform({1, 2, 1, 16, 16}, rng, 0.0, 1.0);
  StateStore store;
  std::map<std::string, Tensor> masks;
  auto outs = run_sequence(*m.net, x, store, masks, false, nullptr);
  CHECK(outs.back().shape() == Shape{1, 3});
}

TEST_CASE("spec/config round trip preserves the architecture") {
  ArchSpec spec = full_spec();
  Config cfg = spec.to_config();
  ArchSpec back = ArchSpec::from_config(cfg);
  CHECK(back.kind == spec.kind);
  CHECK(back.classes == spec.classes);
  CHECK(back.stem_channels == spec.stem_channels);
  CHECK(back.lstm_hidden == spec.lstm_hidden);
  REQUIRE(back.stages.size() == spec.stages.size());
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    CHECK(back.stages[i].sub_blocks == spec.stages[i].sub_blocks);
    CHECK(back.stages[i].in_ch == spec.stages[i].in_ch);
    CHECK(back.stages[i].mid_ch == spec.stages[i].mid_ch);
    CHECK(back.stages[i].out_ch == spec.stages[i].out_ch);
    CHECK(back.stages[i].downsample == spec.stages[i].downsample);
  }
}

TEST_CASE("mismatched stage channel chaining is rejected") {
  ArchSpec spec;
  spec.classes = 2;
  spec.stem_channels = 4;
  spec.lstm_hidden = 4;
  spec.stages.push_back({1, 4, 2, 6, true});
  spec.stages.push_back({1, 8, 2, 8, true});  // expects 6 in, says 8
  CHECK_THROWS_AS(build_model(spec, 13), ConfigError);
}

TEST_CASE("parameter hashing is seed-stable and order-sensitive") {
  ArchSpec spec;
  spec.classes = 2;
  spec.stem_channels = 4;
  spec.lstm_hidden = 4;
  spec.stages.push_back({1, 4, 2, 6, true});
  Model a = build_model(spec, 14);
  Model b = build_model(spec, 14);
  Model c = build_model(spec, 15);
  CHECK(parameter_hash(a) == parameter_hash(b));
  CHECK(parameter_hash(a) != parameter_hash(c));
  a.parameters().front().second.data()[0] += 1e-9;
  CHECK(parameter_hash(a) != parameter_hash(b));
}
