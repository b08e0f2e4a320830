#include "clstm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "clstm/arch.hpp"
#include "clstm/convlstm.hpp"

namespace clstm {

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// bilinear sample with edge clamping; (x,y) in pixel-center coordinates
double sample_bilinear(const double* img, std::size_t H, std::size_t W,
                       double y, double x) {
  double fx = std::floor(x), fy = std::floor(y);
  long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  double wx = x - fx, wy = y - fy;
  auto pix = [&](long yy, long xx) {
    yy = std::clamp(yy, 0l, static_cast<long>(H) - 1);
    xx = std::clamp(xx, 0l, static_cast<long>(W) - 1);
    return img[yy * static_cast<long>(W) + xx];
  };
  return (1 - wy) * ((1 - wx) * pix(y0, x0) + wx * pix(y0, x0 + 1)) +
         wy * ((1 - wx) * pix(y0 + 1, x0) + wx * pix(y0 + 1, x0 + 1));
}

}  // namespace

SequenceSample augment_sequence(const SequenceSample& seq,
                                const AugmentConfig& cfg, std::uint64_t seed,
                                AugmentParams* params_log) {
  const Tensor& frames = seq.frames;
  if (frames.rank() != 4)
    throw DimensionError("augment_sequence expects frames [T,C,H,W]");
  std::size_t T = frames.shape()[0], C = frames.shape()[1],
              H = frames.shape()[2], W = frames.shape()[3];
  if (static_cast<int>(H) < cfg.crop_max || static_cast<int>(W) < cfg.crop_max)
    throw UsageError("augment input " + shape_str(frames.shape()) +
                     " smaller than max crop " + std::to_string(cfg.crop_max));

  std::mt19937_64 rng(seed);
  AugmentParams p;
  p.crop_size = cfg.crop_min == cfg.crop_max
                    ? cfg.crop_min
                    : std::uniform_int_distribution<int>(cfg.crop_min,
                                                         cfg.crop_max)(rng);
  int max_x = static_cast<int>(W) - p.crop_size;
  int max_y = static_cast<int>(H) - p.crop_size;
  p.crop_x = max_x > 0 ? std::uniform_int_distribution<int>(0, max_x)(rng) : 0;
  p.crop_y = max_y > 0 ? std::uniform_int_distribution<int>(0, max_y)(rng) : 0;
  p.flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.flip_prob;
  p.angle_deg =
      cfg.rotate_deg > 0
          ? std::uniform_real_distribution<double>(-cfg.rotate_deg,
                                                   cfg.rotate_deg)(rng)
          : 0.0;
  p.brightness =
      cfg.brightness > 0
          ? std::uniform_real_distribution<double>(1.0 - cfg.brightness,
                                                   1.0 + cfg.brightness)(rng)
          : 1.0;
  if (params_log) *params_log = p;

  int out = cfg.out_size;
  double rad = p.angle_deg * std::numbers::pi / 180.0;
  double ca = std::cos(rad), sa = std::sin(rad);
  double ccx = p.crop_x + p.crop_size / 2.0 - 0.5;  // crop-window center
  double ccy = p.crop_y + p.crop_size / 2.0 - 0.5;
  double scale_f = static_cast<double>(p.crop_size) / out;
  bool identity = p.angle_deg == 0.0 && p.crop_size == out && !p.flip;

  std::vector<double> result(T * C * out * out);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      const double* img = frames.data().data() + (t * C + c) * H * W;
      double* dst = result.data() + (t * C + c) * out * out;
      for (int oy = 0; oy < out; ++oy)
        for (int ox = 0; ox < out; ++ox) {
          int oxm = p.flip ? out - 1 - ox : ox;
          double v;
          if (identity) {
            v = img[(p.crop_y + oy) * W + (p.crop_x + oxm)];
          } else {
            double px = p.crop_x + (oxm + 0.5) * scale_f - 0.5;
            double py = p.crop_y + (oy + 0.5) * scale_f - 0.5;
            double dx = px - ccx, dy = py - ccy;
            double sx = ccx + ca * dx - sa * dy;
            double sy = ccy + sa * dx + ca * dy;
            v = sample_bilinear(img, H, W, sy, sx);
          }
          dst[oy * out + ox] = clamp01(v * p.brightness);
        }
    }
  SequenceSample result_seq = seq;
  result_seq.frames = Tensor::from(
      {T, C, static_cast<std::size_t>(out), static_cast<std::size_t>(out)},
      std::move(result));
  return result_seq;
}

SequenceSample sample_subsequence(const SequenceSample& seq, std::size_t len,
                                  std::uint64_t seed) {
  std::size_t T = seq.frames.shape()[0];
  if (len > T)
    throw UsageError("subsequence length " + std::to_string(len) +
                     " exceeds sequence length " + std::to_string(T));
  std::mt19937_64 rng(seed);
  std::size_t start =
      len == T ? 0
               : std::uniform_int_distribution<std::size_t>(0, T - len)(rng);
  std::size_t frame = seq.frames.size() / T;
  std::vector<double> data(len * frame);
  std::copy_n(seq.frames.data().begin() + start * frame, len * frame,
              data.begin());
  SequenceSample out = seq;
  Shape shape = seq.frames.shape();
  shape[0] = len;
  out.frames = Tensor::from(std::move(shape), std::move(data));
  return out;
}

Tensor center_crop_resize(const Tensor& frames, int crop, int out) {
  std::size_t T = frames.shape()[0], C = frames.shape()[1],
              H = frames.shape()[2], W = frames.shape()[3];
  if (static_cast<int>(H) < crop || static_cast<int>(W) < crop)
    throw UsageError("source frames smaller than crop " + std::to_string(crop));
  int cy = (static_cast<int>(H) - crop) / 2;
  int cx = (static_cast<int>(W) - crop) / 2;
  double scale_f = static_cast<double>(crop) / out;
  std::vector<double> result(T * C * out * out);
  for (std::size_t tc = 0; tc < T * C; ++tc) {
    const double* img = frames.data().data() + tc * H * W;
    double* dst = result.data() + tc * out * out;
    for (int oy = 0; oy < out; ++oy)
      for (int ox = 0; ox < out; ++ox) {
        if (crop == out) {
          dst[oy * out + ox] = img[(cy + oy) * W + (cx + ox)];
        } else {
          double sx = cx + (ox + 0.5) * scale_f - 0.5;
          double sy = cy + (oy + 0.5) * scale_f - 0.5;
          dst[oy * out + ox] = sample_bilinear(img, H, W, sy, sx);
        }
      }
  }
  return Tensor::from(
      {T, C, static_cast<std::size_t>(out), static_cast<std::size_t>(out)},
      std::move(result));
}

Tensor flip_horizontal(const Tensor& frames) {
  std::size_t W = frames.shape().back();
  std::size_t rows = frames.size() / W;
  std::vector<double> out(frames.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t x = 0; x < W; ++x)
      out[r * W + x] = frames.data()[r * W + (W - 1 - x)];
  return Tensor::from(frames.shape(), std::move(out));
}

SequenceSample shuffle_frames(const SequenceSample& seq, std::uint64_t seed) {
  std::size_t T = seq.frames.shape()[0];
  std::vector<std::size_t> order(T);
  for (std::size_t i = 0; i < T; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t frame = seq.frames.size() / T;
  std::vector<double> data(seq.frames.size());
  for (std::size_t t = 0; t < T; ++t)
    std::copy_n(seq.frames.data().begin() + order[t] * frame, frame,
                data.begin() + t * frame);
  SequenceSample out = seq;
  out.frames = Tensor::from(seq.frames.shape(), std::move(data));
  return out;
}

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

namespace {

// Anti-aliased bright rectangle at (x,y) (top-left, fractional) over the
// noisy background.
void draw_sprite(std::vector<double>& img, std::size_t extent, double x,
                 double y, int size) {
  for (int py = static_cast<int>(std::floor(y)) - 1;
       py <= static_cast<int>(std::ceil(y)) + size; ++py)
    for (int px = static_cast<int>(std::floor(x)) - 1;
         px <= static_cast<int>(std::ceil(x)) + size; ++px) {
      if (px < 0 || py < 0 || px >= static_cast<int>(extent) ||
          py >= static_cast<int>(extent))
        continue;
      double cov_x = std::min<double>(px + 1.0, x + size) - std::max<double>(px, x);
      double cov_y = std::min<double>(py + 1.0, y + size) - std::max<double>(py, y);
      if (cov_x <= 0 || cov_y <= 0) continue;
      double& v = img[py * extent + px];
      v = clamp01(v + 0.85 * cov_x * cov_y);
    }
}

SequenceSample make_synthetic_sequence(const SyntheticTaskSpec& spec,
                                       int label, std::mt19937_64& rng,
                                       const std::string& id) {
  int T = spec.frames, E = spec.extent;
  // path positions inside the center 48x48 crop window, swept left to right
  double margin = (E - 48) / 2.0;
  double x_lo = margin + 4.0;
  double x_hi = margin + 48.0 - 4.0 - spec.sprite_size;
  double y_lo = margin + 6.0;
  double y_hi = margin + 48.0 - 6.0 - spec.sprite_size;
  double y0 = std::uniform_real_distribution<double>(y_lo, y_hi)(rng);
  std::uniform_real_distribution<double> noise(0.0, spec.noise);

  // class k rotates the direction pattern: class 0 sweeps lo->hi, class 1
  // hi->lo; with >2 classes the turnaround point encodes the class
  std::vector<double> xs(T);
  if (spec.classes == 2) {
    for (int t = 0; t < T; ++t) {
      double f = static_cast<double>(t) / (T - 1);
      xs[t] = x_lo + f * (x_hi - x_lo);
    }
    if (label == 1) std::reverse(xs.begin(), xs.end());
  } else {
    // multi-class: sweep direction + whether the path folds at the midpoint
    int dir = label % 2;
    bool fold = (label / 2) % 2;
    for (int t = 0; t < T; ++t) {
      double f = static_cast<double>(t) / (T - 1);
      if (fold) f = f < 0.5 ? 2 * f : 2 * (1 - f);
      xs[t] = x_lo + f * (x_hi - x_lo);
    }
    if (dir == 1) std::reverse(xs.begin(), xs.end());
  }

  std::vector<double> data(static_cast<std::size_t>(T) * E * E);
  for (int t = 0; t < T; ++t) {
    std::vector<double> img(static_cast<std::size_t>(E) * E);
    for (double& v : img) v = 0.1 + noise(rng);
    draw_sprite(img, E, xs[t], y0, spec.sprite_size);
    std::copy(img.begin(), img.end(),
              data.begin() + static_cast<std::size_t>(t) * E * E);
  }
  SequenceSample s;
  s.id = id;
  s.label = label;
  s.frames = Tensor::from({static_cast<std::size_t>(T), 1,
                           static_cast<std::size_t>(E),
                           static_cast<std::size_t>(E)},
                          std::move(data));
  return s;
}

std::vector<SequenceSample> make_split(const SyntheticTaskSpec& spec,
                                       int count, std::mt19937_64& rng,
                                       const std::string& prefix) {
  std::vector<SequenceSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    int label = i % spec.classes;  // balanced
    out.push_back(make_synthetic_sequence(spec, label, rng,
                                          prefix + std::to_string(i)));
  }
  return out;
}

}  // namespace

Dataset generate_synthetic_dataset(const SyntheticTaskSpec& spec,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset ds;
  ds.num_classes = spec.classes;
  ds.frame_extent = spec.extent;
  // The per-frame displacement is a few pixels: resolvable by the recurrent
  // layers at half resolution, sub-pixel below that.
  ds.discriminative_scale = "s/2";
  ds.train = make_split(spec, spec.train_count, rng, "train-");
  ds.val = make_split(spec, spec.val_count, rng, "val-");
  ds.test = make_split(spec, spec.test_count, rng, "test-");
  return ds;
}

// ---------------------------------------------------------------------------
// multi-crop inference
// ---------------------------------------------------------------------------

Tensor multicrop_predict(const Model& model, const Tensor& frames) {
  if (frames.rank() != 4)
    throw DimensionError("multicrop_predict expects frames [T,C,H,W]");
  if (frames.shape()[2] < 64 || frames.shape()[3] < 64)
    throw UsageError("multicrop_predict needs source frames of at least 64x64");
  std::size_t T = frames.shape()[0];
  std::vector<double> fused;
  for (int crop : {48, 56, 64}) {
    Tensor cropped = center_crop_resize(frames, crop, 48);
    for (bool flip : {false, true}) {
      Tensor variant = flip ? flip_horizontal(cropped) : cropped;
      Shape bshape{1, T, variant.shape()[1], variant.shape()[2],
                   variant.shape()[3]};
      Tensor batch = Tensor::from(bshape, variant.data());
      StateStore store;
      std::map<std::string, Tensor> masks;
      auto outputs =
          run_sequence(*model.net, batch, store, masks, false, nullptr);
      auto probs = softmax_values(outputs.back());
      if (fused.empty()) fused.assign(probs.size(), 0.0);
      for (std::size_t i = 0; i < probs.size(); ++i) fused[i] += probs[i];
    }
  }
  for (double& v : fused) v /= 6.0;
  return Tensor::from({1, static_cast<std::size_t>(model.spec.classes)},
                      std::move(fused));
}

// ---------------------------------------------------------------------------
// raster ingestion
// ---------------------------------------------------------------------------

void write_raster(const std::string& path, std::size_t width,
                  std::size_t height, std::size_t channels,
                  const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height * channels)
    throw UsageError("raster pixel count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write("RAW8", 4);
  std::uint32_t w = width, h = height, c = channels;
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  os.write(reinterpret_cast<const char*>(&c), 4);
  os.write(reinterpret_cast<const char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
}

std::optional<Tensor> read_raster(const std::string& path,
                                  std::string* error) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    if (error) *error = "missing frame file " + path;
    return std::nullopt;
  }
  char magic[4];
  std::uint32_t w = 0, h = 0, c = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&w), 4);
  is.read(reinterpret_cast<char*>(&h), 4);
  is.read(reinterpret_cast<char*>(&c), 4);
  if (!is || std::memcmp(magic, "RAW8", 4) != 0 || (c != 1 && c != 3)) {
    if (error) *error = "corrupt raster header in " + path;
    return std::nullopt;
  }
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(w) * h * c);
  is.read(reinterpret_cast<char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  if (!is) {
    if (error) *error = "truncated raster payload in " + path;
    return std::nullopt;
  }
  // normalize to [0,1]; RGB collapses to grayscale by channel mean
  std::vector<double> data(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < data.size(); ++i) {
    double v = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) v += pixels[i * c + ch];
    data[i] = v / (255.0 * c);
  }
  return Tensor::from({1, h, w}, std::move(data));
}

std::vector<SequenceSample> load_frame_directory(
    const std::string& dir, const std::string& manifest,
    std::vector<std::string>* error_log) {
  std::ifstream mf(dir + "/" + manifest);
  if (!mf) throw std::runtime_error("manifest not found: " + dir + "/" + manifest);
  std::vector<SequenceSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(mf, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, label, paths;
    if (!std::getline(ls, id, '\t') || !std::getline(ls, label, '\t') ||
        !std::getline(ls, paths)) {
      if (error_log)
        error_log->push_back("manifest line " + std::to_string(line_no) +
                             ": malformed record");
      continue;
    }
    std::vector<Tensor> frames;
    std::string frame_path, err;
    std::istringstream ps(paths);
    bool ok = true;
    while (std::getline(ps, frame_path, ',')) {
      auto frame = read_raster(dir + "/" + frame_path, &err);
      if (!frame) {
        if (error_log) error_log->push_back("sequence " + id + ": " + err);
        ok = false;
        break;
      }
      if (!frames.empty() && frame->shape() != frames.front().shape()) {
        if (error_log)
          error_log->push_back("sequence " + id + ": inconsistent extents in " +
                               frame_path);
        ok = false;
        break;
      }
      frames.push_back(*frame);
    }
    if (!ok || frames.empty()) continue;
    SequenceSample s;
    s.id = id;
    bool numeric = !label.empty() && label.find_first_not_of("0123456789") ==
                                         std::string::npos;
    if (numeric) {
      s.label = std::stoi(label);
    } else {
      for (char ch : label) s.char_target.push_back(static_cast<int>(ch));
    }
    std::size_t T = frames.size();
    Shape fs = frames.front().shape();  // [C,H,W]
    std::vector<double> data(T * numel(fs));
    for (std::size_t t = 0; t < T; ++t)
      std::copy(frames[t].data().begin(), frames[t].data().end(),
                data.begin() + t * numel(fs));
    s.frames = Tensor::from({T, fs[0], fs[1], fs[2]}, std::move(data));
    out.push_back(std::move(s));
  }
  return out;
}

void save_frame_directory(const std::string& dir,
                          const std::vector<SequenceSample>& sequences) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream mf(dir + "/manifest.tsv");
  if (!mf) throw std::runtime_error("cannot write manifest in " + dir);
  for (const auto& s : sequences) {
    std::size_t T = s.frames.shape()[0], C = s.frames.shape()[1],
                H = s.frames.shape()[2], W = s.frames.shape()[3];
    fs::create_directories(dir + "/" + s.id);
    std::string paths;
    for (std::size_t t = 0; t < T; ++t) {
      std::string rel = s.id + "/frame_" + std::to_string(t) + ".raw";
      std::vector<std::uint8_t> pixels(C * H * W);
      // stored interleaved HWC
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          for (std::size_t c = 0; c < C; ++c)
            pixels[(y * W + x) * C + c] = static_cast<std::uint8_t>(
                std::lround(clamp01(s.frames.data()[((t * C + c) * H + y) * W +
                                                    x]) *
                            255.0));
      write_raster(dir + "/" + rel, W, H, C, pixels);
      if (t) paths += ",";
      paths += rel;
    }
    mf << s.id << "\t" << s.label << "\t" << paths << "\n";
  }
}

}  // namespace clstm
