#pragma once

#include <map>

#include "clstm/config.hpp"
#include "clstm/convlstm.hpp"

namespace clstm {

struct StageSpec {
  int sub_blocks = 1;
  std::size_t in_ch = 0;
  std::size_t mid_ch = 0;
  std::size_t out_ch = 0;
  bool downsample = true;
};

struct VggLayerSpec {
  std::size_t out_ch = 0;
  int kernel = 3;
  bool pool = false;
};

struct ArchSpec {
  std::string kind = "resnet";  // "resnet" | "vggm"
  std::size_t input_channels = 1;
  std::size_t classes = 500;
  std::size_t stem_channels = 64;
  int stem_kernel = 3;
  std::size_t lstm_hidden = 512;
  double dropout = 0.5;
  std::vector<StageSpec> stages;        // resnet
  std::vector<VggLayerSpec> vgg_layers;  // vggm

  static ArchSpec from_config(const Config& cfg);
  Config to_config() const;
};

struct LayerCensus {
  int convlstm_3x3 = 0;
  int convlstm_1x1 = 0;
  int conv2d_1x1 = 0;
  int conv2d_other = 0;
  int dense_lstm = 0;
  int total = 0;
  std::map<std::string, int> by_scale;
};

struct Model {
  ArchSpec spec;
  NodePtr net;

  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::vector<std::pair<std::string, Tensor>> buffers() const;
  std::size_t parameter_count() const;
};

// Residual sub-blocks. A: bottleneck main path with a strided 3x3 ConvLSTM
// plus a 1x1 ConvLSTM on the skip; B: identity skip. BN+ReLU after every
// parameterized layer.
NodePtr build_block_a(std::size_t in_ch, std::size_t mid_ch,
                      std::size_t out_ch, int stride, std::mt19937_64& rng,
                      const std::string& id, const std::string& scale);
NodePtr build_block_b(std::size_t in_ch, std::size_t mid_ch,
                      std::mt19937_64& rng, const std::string& id,
                      const std::string& scale);

Model build_resnet_convlstm(const ArchSpec& spec, std::uint64_t seed);
Model build_vggm_convlstm(const ArchSpec& spec, std::uint64_t seed);
Model build_model(const ArchSpec& spec, std::uint64_t seed);

// Pure inspection: counts parameterized layers by kind and scale tag.
LayerCensus census(Node& net);
inline LayerCensus census(const Model& m) { return census(*m.net); }

// FNV-1a over parameter bytes; used to assert probes leave the model alone.
std::uint64_t parameter_hash(const Model& m);

}  // namespace clstm
