#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clstm/tensor.hpp"

namespace clstm {

struct Model;

struct SequenceSample {
  std::string id;
  Tensor frames;  // [T, C, H, W], values in [0,1]
  int label = -1;                // word-task class index
  std::vector<int> char_target;  // transcription task
};

struct Dataset {
  std::vector<SequenceSample> train, val, test;
  int num_classes = 0;
  int frame_extent = 0;
  // Spatial scale carrying the discriminative motion (probe ground truth).
  std::string discriminative_scale;
};

struct AugmentConfig {
  int crop_min = 48;
  int crop_max = 68;
  double flip_prob = 0.5;
  double rotate_deg = 10.0;
  double brightness = 0.1;  // multiplicative +/- fraction
  int out_size = 48;
};

// One draw per sequence, applied identically to every frame.
struct AugmentParams {
  int crop_size = 48;
  int crop_x = 0, crop_y = 0;  // window origin in the source frame
  bool flip = false;
  double angle_deg = 0.0;
  double brightness = 1.0;
};

SequenceSample augment_sequence(const SequenceSample& seq,
                                const AugmentConfig& cfg, std::uint64_t seed,
                                AugmentParams* params_log = nullptr);

SequenceSample sample_subsequence(const SequenceSample& seq, std::size_t len,
                                  std::uint64_t seed);

// Deterministic center crop of `crop` pixels resized to `out` (inference
// path; crop == out is a plain crop).
Tensor center_crop_resize(const Tensor& frames, int crop, int out);
Tensor flip_horizontal(const Tensor& frames);
SequenceSample shuffle_frames(const SequenceSample& seq, std::uint64_t seed);

struct SyntheticTaskSpec {
  int classes = 2;  // motion direction orderings
  int frames = 12;
  int extent = 72;
  int sprite_size = 7;
  double noise = 0.08;
  int train_count = 128;
  int val_count = 32;
  int test_count = 64;
};

// Sequences whose label is encoded purely in the temporal ordering of the
// sprite positions; every class shares the same per-frame position marginals.
Dataset generate_synthetic_dataset(const SyntheticTaskSpec& spec,
                                   std::uint64_t seed);

// Six-transform inference: crops {48,56,64}, each with its flipped
// counterpart, resized to 48 and averaged in probability space.
Tensor multicrop_predict(const Model& model, const Tensor& frames);

// ---- raster ingestion ----
// Frame file format: magic "RAW8", u32 LE width/height/channels (1 or 3),
// then 8-bit row-major interleaved pixels.
void write_raster(const std::string& path, std::size_t width,
                  std::size_t height, std::size_t channels,
                  const std::vector<std::uint8_t>& pixels);
std::optional<Tensor> read_raster(const std::string& path,
                                  std::string* error);

// Manifest: UTF-8 text, one record per line:
// <sequence_id>\t<label>\t<frame_path_1,...>  (paths relative to `dir`).
// Broken sequences are skipped with an entry in `error_log`.
std::vector<SequenceSample> load_frame_directory(
    const std::string& dir, const std::string& manifest,
    std::vector<std::string>* error_log);

void save_frame_directory(const std::string& dir,
                          const std::vector<SequenceSample>& sequences);

}  // namespace clstm
