#include "clstm/arch.hpp"

#include <cstring>

namespace clstm {

namespace {

NodePtr bn_relu(std::size_t ch, const std::string& id,
                const std::string& scale) {
  auto seq = std::make_unique<SequentialNode>();
  auto bn = std::make_unique<BatchNormNode>();
  bn->layer = BatchNormLayer::create(ch);
  bn->id = id + ".bn";
  bn->scale = scale;
  auto act = std::make_unique<ReluNode>();
  act->id = id + ".relu";
  act->scale = scale;
  seq->children.push_back(std::move(bn));
  seq->children.push_back(std::move(act));
  return seq;
}

NodePtr conv_bn_relu(std::size_t in_ch, std::size_t out_ch, std::size_t k,
                     int stride, std::mt19937_64& rng, const std::string& id,
                     const std::string& scale) {
  auto seq = std::make_unique<SequentialNode>();
  auto conv = std::make_unique<Conv2dNode>();
  conv->layer =
      Conv2dLayer::create(in_ch, out_ch, k, stride, static_cast<int>(k) / 2,
                          rng);
  conv->id = id;
  conv->scale = scale;
  seq->children.push_back(std::move(conv));
  seq->children.push_back(bn_relu(out_ch, id, scale));
  return seq;
}

NodePtr convlstm_bn_relu(std::size_t in_ch, std::size_t out_ch, int k,
                         int stride, std::mt19937_64& rng,
                         const std::string& id, const std::string& scale) {
  auto seq = std::make_unique<SequentialNode>();
  auto cell = std::make_unique<ConvLstmNode>();
  cell->layer = ConvLstmLayer::create(in_ch, out_ch, k, stride, rng);
  cell->id = id;
  cell->scale = scale;
  seq->children.push_back(std::move(cell));
  seq->children.push_back(bn_relu(out_ch, id, scale));
  return seq;
}

}  // namespace

NodePtr build_block_a(std::size_t in_ch, std::size_t mid_ch,
                      std::size_t out_ch, int stride, std::mt19937_64& rng,
                      const std::string& id, const std::string& scale) {
  auto block = std::make_unique<ResidualNode>();
  block->id = id;
  block->scale = scale;
  auto main = std::make_unique<SequentialNode>();
  main->children.push_back(
      conv_bn_relu(in_ch, mid_ch, 1, 1, rng, id + ".reduce", scale));
  main->children.push_back(
      convlstm_bn_relu(mid_ch, mid_ch, 3, stride, rng, id + ".clstm", scale));
  main->children.push_back(
      conv_bn_relu(mid_ch, out_ch, 1, 1, rng, id + ".expand", scale));
  block->main = std::move(main);
  block->skip =
      convlstm_bn_relu(in_ch, out_ch, 1, stride, rng, id + ".skip", scale);
  return block;
}

NodePtr build_block_b(std::size_t in_ch, std::size_t mid_ch,
                      std::mt19937_64& rng, const std::string& id,
                      const std::string& scale) {
  auto block = std::make_unique<ResidualNode>();
  block->id = id;
  block->scale = scale;
  auto main = std::make_unique<SequentialNode>();
  main->children.push_back(
      conv_bn_relu(in_ch, mid_ch, 1, 1, rng, id + ".reduce", scale));
  main->children.push_back(
      convlstm_bn_relu(mid_ch, mid_ch, 3, 1, rng, id + ".clstm", scale));
  main->children.push_back(
      conv_bn_relu(mid_ch, in_ch, 1, 1, rng, id + ".expand", scale));
  block->main = std::move(main);
  block->skip = nullptr;  // open skip
  return block;
}

namespace {

void append_head(SequentialNode& net, std::size_t features,
                 const ArchSpec& spec, std::mt19937_64& rng) {
  auto pool = std::make_unique<GlobalAvgPoolNode>();
  pool->id = "head.pool";
  net.children.push_back(std::move(pool));

  auto drop = std::make_unique<LockedDropoutNode>();
  drop->p_drop = spec.dropout;
  drop->id = "head.dropout";
  net.children.push_back(std::move(drop));

  auto lstm = std::make_unique<DenseLstmNode>();
  lstm->layer = DenseLstmLayer::create(features, spec.lstm_hidden, rng);
  lstm->id = "head.lstm";
  lstm->scale = "final-lstm";
  net.children.push_back(std::move(lstm));

  auto fc = std::make_unique<LinearNode>();
  double s = std::sqrt(1.0 / static_cast<double>(spec.lstm_hidden));
  fc->weight = Tensor::randn({spec.lstm_hidden, spec.classes}, rng, s, true);
  fc->bias = Tensor::zeros({spec.classes}, true);
  fc->id = "head.fc";
  net.children.push_back(std::move(fc));
}

}  // namespace

Model build_resnet_convlstm(const ArchSpec& spec, std::uint64_t seed) {
  if (spec.stages.empty())
    throw ConfigError("resnet arch spec has no stages");
  std::size_t prev = spec.stem_channels;
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    if (spec.stages[i].in_ch != prev)
      throw ConfigError("stage " + std::to_string(i + 1) +
                        " input channels " +
                        std::to_string(spec.stages[i].in_ch) +
                        " do not chain from " + std::to_string(prev));
    prev = spec.stages[i].out_ch;
  }
  std::mt19937_64 rng(seed);
  auto net = std::make_unique<SequentialNode>();
  net->children.push_back(
      conv_bn_relu(spec.input_channels, spec.stem_channels,
                   static_cast<std::size_t>(spec.stem_kernel), 1, rng, "stem",
                   "s"));
  int denom = 1;
  for (std::size_t si = 0; si < spec.stages.size(); ++si) {
    const StageSpec& st = spec.stages[si];
    if (st.downsample) denom *= 2;
    std::string scale = "s/" + std::to_string(denom);
    std::string sid = "stage" + std::to_string(si + 1);
    net->children.push_back(build_block_a(st.in_ch, st.mid_ch, st.out_ch,
                                          st.downsample ? 2 : 1, rng,
                                          sid + ".block0", scale));
    for (int b = 1; b < st.sub_blocks; ++b)
      net->children.push_back(build_block_b(
          st.out_ch, st.mid_ch, rng, sid + ".block" + std::to_string(b),
          scale));
  }
  append_head(*net, spec.stages.back().out_ch, spec, rng);
  Model m;
  m.spec = spec;
  m.net = std::move(net);
  return m;
}

Model build_vggm_convlstm(const ArchSpec& spec, std::uint64_t seed) {
  if (spec.vgg_layers.empty())
    throw ConfigError("vggm arch spec has no vgg_layer entries");
  std::mt19937_64 rng(seed);
  auto net = std::make_unique<SequentialNode>();
  net->children.push_back(
      conv_bn_relu(spec.input_channels, spec.stem_channels,
                   static_cast<std::size_t>(spec.stem_kernel), 1, rng, "stem",
                   "s"));
  std::size_t prev = spec.stem_channels;
  int denom = 1;
  for (std::size_t i = 0; i < spec.vgg_layers.size(); ++i) {
    const VggLayerSpec& l = spec.vgg_layers[i];
    std::string scale = denom == 1 ? "s" : "s/" + std::to_string(denom);
    net->children.push_back(convlstm_bn_relu(
        prev, l.out_ch, l.kernel, 1, rng, "vgg" + std::to_string(i), scale));
    if (l.pool) {
      auto pool = std::make_unique<MaxPoolNode>();
      pool->id = "vgg" + std::to_string(i) + ".pool";
      denom *= 2;
      pool->scale = "s/" + std::to_string(denom);
      net->children.push_back(std::move(pool));
    }
    prev = l.out_ch;
  }
  append_head(*net, prev, spec, rng);
  Model m;
  m.spec = spec;
  m.net = std::move(net);
  return m;
}

Model build_model(const ArchSpec& spec, std::uint64_t seed) {
  if (spec.kind == "resnet") return build_resnet_convlstm(spec, seed);
  if (spec.kind == "vggm") return build_vggm_convlstm(spec, seed);
  throw ConfigError("unknown arch kind: " + spec.kind);
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  net->collect_params(out);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::buffers() const {
  std::vector<std::pair<std::string, Tensor>> out;
  net->collect_buffers(out);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.size();
  return n;
}

LayerCensus census(Node& net) {
  LayerCensus c;
  net.visit([&](Node& n) {
    std::string kind = n.kind();
    bool counted = false;
    if (kind == "convlstm") {
      auto& cl = static_cast<ConvLstmNode&>(n);
      if (cl.layer.kernel == 3) ++c.convlstm_3x3;
      else ++c.convlstm_1x1;
      counted = true;
    } else if (kind == "conv2d") {
      auto& cv = static_cast<Conv2dNode&>(n);
      if (cv.layer.kernel() == 1) ++c.conv2d_1x1;
      else ++c.conv2d_other;
      counted = true;
    } else if (kind == "dense_lstm") {
      ++c.dense_lstm;
      counted = true;
    }
    if (counted) {
      ++c.total;
      ++c.by_scale[n.scale];
    }
  });
  return c;
}

std::uint64_t parameter_hash(const Model& m) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : m.parameters()) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.size() * sizeof(double));
  }
  return h;
}

// ---------------------------------------------------------------------------
// spec <-> config
// ---------------------------------------------------------------------------

ArchSpec ArchSpec::from_config(const Config& cfg) {
  ArchSpec spec;
  spec.kind = cfg.get_or("arch", "resnet");
  spec.input_channels =
      static_cast<std::size_t>(cfg.get_int_or("input_channels", 1));
  spec.classes = static_cast<std::size_t>(cfg.get_int_or("classes", 500));
  spec.stem_channels =
      static_cast<std::size_t>(cfg.get_int_or("stem_channels", 64));
  spec.stem_kernel = static_cast<int>(cfg.get_int_or("stem_kernel", 3));
  spec.lstm_hidden =
      static_cast<std::size_t>(cfg.get_int_or("lstm_hidden", 512));
  spec.dropout = cfg.get_real_or("dropout", 0.5);
  for (const std::string& line : cfg.get_all("stage")) {
    auto f = split_fields(line);
    if (f.size() < 4)
      throw ConfigError("stage line needs: sub_blocks in mid out [keep]");
    StageSpec st;
    st.sub_blocks = std::stoi(f[0]);
    st.in_ch = std::stoul(f[1]);
    st.mid_ch = std::stoul(f[2]);
    st.out_ch = std::stoul(f[3]);
    st.downsample = f.size() < 5 || f[4] != "keep";
    spec.stages.push_back(st);
  }
  for (const std::string& line : cfg.get_all("vgg_layer")) {
    auto f = split_fields(line);
    if (f.size() < 2)
      throw ConfigError("vgg_layer line needs: out_ch kernel [pool]");
    VggLayerSpec l;
    l.out_ch = std::stoul(f[0]);
    l.kernel = std::stoi(f[1]);
    l.pool = f.size() >= 3 && f[2] == "pool";
    spec.vgg_layers.push_back(l);
  }
  return spec;
}

Config ArchSpec::to_config() const {
  Config cfg;
  cfg.set("arch", kind);
  cfg.set("input_channels", std::to_string(input_channels));
  cfg.set("classes", std::to_string(classes));
  cfg.set("stem_channels", std::to_string(stem_channels));
  cfg.set("stem_kernel", std::to_string(stem_kernel));
  cfg.set("lstm_hidden", std::to_string(lstm_hidden));
  cfg.set("dropout", std::to_string(dropout));
  for (const StageSpec& st : stages)
    cfg.set("stage", std::to_string(st.sub_blocks) + " " +
                         std::to_string(st.in_ch) + " " +
                         std::to_string(st.mid_ch) + " " +
                         std::to_string(st.out_ch) +
                         (st.downsample ? "" : " keep"));
  for (const VggLayerSpec& l : vgg_layers)
    cfg.set("vgg_layer", std::to_string(l.out_ch) + " " +
                             std::to_string(l.kernel) +
                             (l.pool ? " pool" : ""));
  return cfg;
}

}  // namespace clstm
