#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "clstm/arch.hpp"
#include "clstm/gradcheck.hpp"

using namespace clstm;

namespace {

ConvLstmState zero_state(std::size_t b, std::size_t ch, std::size_t h,
                         std::size_t w) {
  return ConvLstmState{Tensor::zeros({b, ch, h, w}),
                       Tensor::zeros({b, ch, h, w}), 0};
}

void zero_params(ConvLstmLayer& l) {
  for (Tensor* t : {&l.w_f, &l.w_i, &l.w_o, &l.w_c, &l.u_f, &l.u_i, &l.u_o,
                    &l.u_c, &l.b_f, &l.b_i, &l.b_o, &l.b_c}) {
    std::fill(t->data().begin(), t->data().end(), 0.0);
  }
}

}  // namespace

TEST_CASE("all-zero parameters give h=0 at every step") {
  std::mt19937_64 rng(1);
  ConvLstmLayer l = ConvLstmLayer::create(2, 3, 3, 1, rng);
  zero_params(l);
  ConvLstmState st = zero_state(1, 3, 5, 5);
  Tensor x = Tensor::uniform({1, 2, 5, 5}, rng, -1.0, 1.0);
  for (int t = 0; t < 3; ++t) {
    auto [h, st2] = convlstm_step(l, x, st);
    st = st2;
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(h[i] == 0.0);
  }
  CHECK(st.timestep == 3);
}

TEST_CASE("a saturated forget gate with a closed input gate preserves c") {
  std::mt19937_64 rng(2);
  ConvLstmLayer l = ConvLstmLayer::create(2, 2, 3, 1, rng);
  std::fill(l.b_f.data().begin(), l.b_f.data().end(), 10.0);
  std::fill(l.b_i.data().begin(), l.b_i.data().end(), -30.0);
  ConvLstmState st = zero_state(1, 2, 4, 4);
  std::mt19937_64 rng2(3);
  st.c = Tensor::uniform({1, 2, 4, 4}, rng2, -0.5, 0.5);
  Tensor x = Tensor::uniform({1, 2, 4, 4}, rng2, -0.3, 0.3);
  auto [h, st2] = convlstm_step(l, x, st);
  for (std::size_t i = 0; i < st.c.size(); ++i) {
    CHECK(st2.c[i] == doctest::Approx(st.c[i]).epsilon(5e-4));
  }
}

TEST_CASE("hidden output stays inside (-1, 1)") {
  std::mt19937_64 rng(4);
  ConvLstmLayer l = ConvLstmLayer::create(1, 2, 3, 1, rng);
  for (Tensor* t : {&l.w_f, &l.w_i, &l.w_o, &l.w_c}) {
    for (double& v : t->data()) v *= 20.0;  // drive gates hard
  }
  ConvLstmState st = zero_state(1, 2, 6, 6);
  Tensor x = Tensor::uniform({1, 1, 6, 6}, rng, -5.0, 5.0);
  for (int t = 0; t < 6; ++t) {
    auto [h, st2] = convlstm_step(l, x, st);
    st = st2;
    for (std::size_t i = 0; i < h.size(); ++i) {
      CHECK(std::abs(h[i]) < 1.0);
    }
  }
}

TEST_CASE("a 1x1 ConvLSTM on 1x1 frames reproduces the dense LSTM cell") {
  std::mt19937_64 rng(5);
  const std::size_t in = 3, hid = 4, B = 2;
  ConvLstmLayer conv = ConvLstmLayer::create(in, hid, 1, 1, rng);
  DenseLstmLayer dense = DenseLstmLayer::create(in, hid, rng);
  // copy the conv parameters into the dense layout ([in,hid] vs [hid,in,1,1])
  auto port = [&](const Tensor& cw, Tensor& dw, std::size_t rows) {
    for (std::size_t oc = 0; oc < hid; ++oc)
      for (std::size_t ic = 0; ic < rows; ++ic)
        dw.data()[ic * hid + oc] = cw[oc * rows + ic];
  };
  port(conv.w_f, dense.w_f, in);
  port(conv.w_i, dense.w_i, in);
  port(conv.w_o, dense.w_o, in);
  port(conv.w_c, dense.w_c, in);
  port(conv.u_f, dense.u_f, hid);
  port(conv.u_i, dense.u_i, hid);
  port(conv.u_o, dense.u_o, hid);
  port(conv.u_c, dense.u_c, hid);
  dense.b_f.data() = conv.b_f.data();
  dense.b_i.data() = conv.b_i.data();
  dense.b_o.data() = conv.b_o.data();
  dense.b_c.data() = conv.b_c.data();

  ConvLstmState cst = zero_state(B, hid, 1, 1);
  DenseLstmState dst{Tensor::zeros({B, hid}), Tensor::zeros({B, hid})};
  for (int t = 0; t < 4; ++t) {
    Tensor x = Tensor::uniform({B, in}, rng, -1.0, 1.0);
    Tensor ximg = reshape(x, {B, in, 1, 1});
    auto [ch, cst2] = convlstm_step(conv, ximg, cst);
    auto [dh, dst2] = dense_lstm_step(dense, x, dst);
    cst = cst2;
    dst = dst2;
    REQUIRE(ch.size() == dh.size());
    for (std::size_t i = 0; i < ch.size(); ++i) {
      CHECK(ch[i] == doctest::Approx(dh[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("a strided cell keeps its state at the output resolution") {
  std::mt19937_64 rng(6);
  ConvLstmLayer l = ConvLstmLayer::create(2, 3, 3, 2, rng);
  ConvLstmState st = zero_state(1, 3, 4, 4);
  Tensor x = Tensor::uniform({1, 2, 8, 8}, rng, -1.0, 1.0);
  auto [h, st2] = convlstm_step(l, x, st);
  CHECK(h.shape() == Shape{1, 3, 4, 4});
  CHECK(st2.c.shape() == Shape{1, 3, 4, 4});
  // feeding the state shape back in must keep working (recurrence stride 1)
  auto [h2, st3] = convlstm_step(l, x, st2);
  CHECK(h2.shape() == Shape{1, 3, 4, 4});
}

TEST_CASE("four chained ConvLSTM steps pass the gradient check") {
  std::mt19937_64 rng(7);
  ConvLstmLayer l = ConvLstmLayer::create(2, 2, 3, 1, rng);
  Tensor x = Tensor::uniform({1, 2, 4, 4}, rng, -1.0, 1.0, true);
  auto f = [&](const Tensor& t) {
    ConvLstmState st = zero_state(1, 2, 4, 4);
    Tensor h;
    for (int step = 0; step < 4; ++step) {
      auto [hh, st2] = convlstm_step(l, t, st);
      h = hh;
      st = st2;
    }
    return sum(mul(h, h));
  };
  CheckReport rep = finite_diff_check(f, x, 1e-6, 1e-5);
  CHECK(rep.pass);
}

// ---------------------------------------------------------------------------
// sequence execution
// ---------------------------------------------------------------------------

namespace {

Model tiny_model(std::uint64_t seed) {
  ArchSpec spec;
  spec.classes = 3;
  spec.stem_channels = 4;
  spec.lstm_hidden = 6;
  spec.dropout = 0.0;
  spec.stages.push_back({1, 4, 2, 6, true});
  spec.stages.push_back({1, 6, 2, 8, true});
  return build_model(spec, seed);
}

}  // namespace

TEST_CASE("windowed forward execution is bit-identical to unwindowed") {
  Model m = tiny_model(21);
  std::mt19937_64 rng(22);
  Tensor x = Tensor::uniform({2, 24, 1, 12, 12}, rng, 0.0, 1.0);

  StateStore full_store;
  std::map<std::string, Tensor> masks;
  std::vector<Tensor> full =
      run_sequence(*m.net, x, full_store, masks, false, nullptr);
  REQUIRE(full.size() == 24);

  StateStore win_store;
  std::map<std::string, Tensor> masks2;
  std::vector<Tensor> windowed;
  for (int w = 0; w < 3; ++w) {
    Tensor win = Tensor::zeros({2, 8, 1, 12, 12});
    const std::size_t fsz = 12 * 12;
    for (std::size_t b = 0; b < 2; ++b) {
      std::copy_n(x.data().data() + (b * 24 + w * 8) * fsz, 8 * fsz,
                  win.data().data() + b * 8 * fsz);
    }
    auto outs = run_sequence(*m.net, win, win_store, masks2, false, nullptr,
                             {}, w * 8);
    windowed.insert(windowed.end(), outs.begin(), outs.end());
    win_store.detach_all();
  }
  REQUIRE(windowed.size() == 24);
  for (std::size_t t = 0; t < 24; ++t) {
    CHECK(full[t].data() == windowed[t].data());
  }
}

TEST_CASE("detach_all turns carried states into gradient-free leaves") {
  Model m = tiny_model(23);
  std::mt19937_64 rng(24);
  Tensor x1 = Tensor::uniform({1, 2, 1, 12, 12}, rng, 0.0, 1.0);

  StateStore store;
  std::map<std::string, Tensor> masks;
  run_sequence(*m.net, x1, store, masks, false, nullptr);
  for (auto& [id, st] : store.entries()) {
    CHECK(st.c.requires_grad());  // still hooked into the window-1 graph
  }
  store.detach_all();
  for (auto& [id, st] : store.entries()) {
    CHECK_FALSE(st.c.requires_grad());
    CHECK_FALSE(st.h.requires_grad());
  }
}

TEST_CASE("detaching between windows changes the parameter gradients") {
  std::mt19937_64 rng(24);
  Tensor x1 = Tensor::uniform({1, 2, 1, 12, 12}, rng, 0.0, 1.0);
  Tensor x2 = Tensor::uniform({1, 2, 1, 12, 12}, rng, 0.0, 1.0);

  auto grads = [&](bool detach) {
    Model m = tiny_model(23);
    StateStore store;
    std::map<std::string, Tensor> masks;
    run_sequence(*m.net, x1, store, masks, false, nullptr);
    if (detach) store.detach_all();
    auto outs = run_sequence(*m.net, x2, store, masks, false, nullptr, {}, 2);
    sum(outs.back()).backward();
    std::vector<double> flat;
    for (auto& [n, p] : m.parameters()) {
      if (p.has_grad()) {
        flat.insert(flat.end(), p.grad().begin(), p.grad().end());
      } else {
        flat.insert(flat.end(), p.size(), 0.0);
      }
    }
    return flat;
  };
  std::vector<double> severed = grads(true);
  std::vector<double> through = grads(false);
  REQUIRE(severed.size() == through.size());
  CHECK(severed != through);  // window-1 history contributes when not severed
}

TEST_CASE("reset every frame equals a fresh forward pass per frame") {
  Model m = tiny_model(25);
  std::mt19937_64 rng(26);
  Tensor x = Tensor::uniform({1, 4, 1, 12, 12}, rng, 0.0, 1.0);

  StateStore store;
  std::map<std::string, Tensor> masks;
  auto reset_outs = run_sequence(*m.net, x, store, masks, false, nullptr,
                                 ResetPolicy{"all", 1});
  for (std::size_t t = 0; t < 4; ++t) {
    Tensor frame = Tensor::zeros({1, 1, 1, 12, 12});
    std::copy_n(x.data().data() + t * 144, 144, frame.data().data());
    StateStore fresh;
    std::map<std::string, Tensor> fm;
    auto single = run_sequence(*m.net, frame, fresh, fm, false, nullptr);
    CHECK(reset_outs[t].data() == single[0].data());
  }
}

TEST_CASE("a reset period no shorter than the sequence never fires") {
  Model m = tiny_model(27);
  std::mt19937_64 rng(28);
  Tensor x = Tensor::uniform({1, 5, 1, 12, 12}, rng, 0.0, 1.0);
  StateStore s1, s2;
  std::map<std::string, Tensor> m1, m2;
  auto plain = run_sequence(*m.net, x, s1, m1, false, nullptr);
  auto probed = run_sequence(*m.net, x, s2, m2, false, nullptr,
                             ResetPolicy{"all", 5});
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(plain[t].data() == probed[t].data());
  }
}

TEST_CASE("resetting an unknown scale tag is an error, not a no-op") {
  Model m = tiny_model(29);
  StateStore store;
  CHECK_THROWS_AS(reset_states(store, *m.net, "s/64"), UsageError);
  CHECK_NOTHROW(reset_states(store, *m.net, "all"));
  CHECK_NOTHROW(reset_states(store, *m.net, "s/2"));
  CHECK_NOTHROW(reset_states(store, *m.net, "final-lstm"));
}

TEST_CASE("bidirectional fusion averages the softmax distributions") {
  Tensor f = Tensor::from({1, 3}, {2.0, 0.0, -1.0});
  Tensor r = Tensor::from({1, 3}, {-1.0, 1.0, 0.5});
  Tensor fused = bidirectional_fuse({f}, {r});
  auto soft = [](const Tensor& t, std::size_t k) {
    double z = 0.0;
    for (std::size_t i = 0; i < 3; ++i) z += std::exp(t[i]);
    return std::exp(t[k]) / z;
  };
  double total = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double want = 0.5 * (soft(f, k) + soft(r, k));
    CHECK(fused[k] == doctest::Approx(want).epsilon(1e-12));
    total += fused[k];
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("locked dropout masks persist across windows within a sequence") {
  ArchSpec spec;
  spec.classes = 2;
  spec.stem_channels = 3;
  spec.lstm_hidden = 4;
  spec.dropout = 0.5;
  spec.stages.push_back({1, 3, 2, 4, true});
  Model m = build_model(spec, 31);

  std::mt19937_64 rng(32);
  Tensor x = Tensor::uniform({1, 6, 1, 8, 8}, rng, 0.0, 1.0);

  // one uninterrupted pass vs two windows sharing the mask map: identical
  std::mt19937_64 r1(5), r2(5);
  StateStore s1;
  std::map<std::string, Tensor> masks1;
  auto full = run_sequence(*m.net, x, s1, masks1, true, &r1);

  StateStore s2;
  std::map<std::string, Tensor> masks2;
  Tensor a = Tensor::zeros({1, 3, 1, 8, 8});
  Tensor b = Tensor::zeros({1, 3, 1, 8, 8});
  std::copy_n(x.data().data(), 3 * 64, a.data().data());
  std::copy_n(x.data().data() + 3 * 64, 3 * 64, b.data().data());
  auto w1 = run_sequence(*m.net, a, s2, masks2, true, &r2);
  s2.detach_all();
  auto w2 = run_sequence(*m.net, b, s2, masks2, true, &r2, {}, 3);
  CHECK(full[2].data() == w1[2].data());
  CHECK(full[5].data() == w2[2].data());
  CHECK_FALSE(masks2.empty());
}
