#include "clstm/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "clstm/serialize.hpp"

namespace clstm {

// ---------------------------------------------------------------------------
// Adam with global-norm clipping
// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<std::pair<std::string, Tensor>> params,
                             AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  slots_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    slots_[i].m.assign(params_[i].second.size(), 0.0);
    slots_[i].v.assign(params_[i].second.size(), 0.0);
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

double AdamOptimizer::global_grad_norm() const {
  double sq = 0.0;
  for (const auto& [name, p] : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

void AdamOptimizer::step() {
  const double norm = global_grad_norm();
  if (!std::isfinite(norm)) {
    throw NonFiniteGradientError(
        "gradient norm is not finite; update aborted");
  }
  last_clip_scale_ = 1.0;
  if (cfg_.clip_enabled && norm > cfg_.clip && norm > 0.0) {
    last_clip_scale_ = cfg_.clip / norm;
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    Slot& s = slots_[i];
    const bool has = p.has_grad();
    auto& data = p.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? p.grad()[j] * last_clip_scale_ : 0.0;
      s.m[j] = cfg_.beta1 * s.m[j] + (1.0 - cfg_.beta1) * g;
      s.v[j] = cfg_.beta2 * s.v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mh = s.m[j] / bc1;
      const double vh = s.v[j] / bc2;
      data[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.epsilon);
    }
  }
}

void AdamOptimizer::save(std::ostream& os) const {
  std::uint64_t step = static_cast<std::uint64_t>(step_);
  std::uint64_t n = params_.size();
  os.write(reinterpret_cast<const char*>(&step), 8);
  os.write(reinterpret_cast<const char*>(&n), 8);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    std::uint64_t len = slots_[i].m.size();
    os.write(reinterpret_cast<const char*>(&len), 8);
    os.write(reinterpret_cast<const char*>(slots_[i].m.data()),
             static_cast<std::streamsize>(len * 8));
    os.write(reinterpret_cast<const char*>(slots_[i].v.data()),
             static_cast<std::streamsize>(len * 8));
  }
}

void AdamOptimizer::load(std::istream& is) {
  std::uint64_t step = 0, n = 0;
  is.read(reinterpret_cast<char*>(&step), 8);
  is.read(reinterpret_cast<char*>(&n), 8);
  if (!is || n != params_.size()) {
    throw UsageError("optimizer state does not match the parameter list");
  }
  step_ = static_cast<long>(step);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    std::uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 8);
    if (!is || len != slots_[i].m.size()) {
      throw UsageError("optimizer slot size mismatch for parameter '" +
                       params_[i].first + "'");
    }
    is.read(reinterpret_cast<char*>(slots_[i].m.data()),
            static_cast<std::streamsize>(len * 8));
    is.read(reinterpret_cast<char*>(slots_[i].v.data()),
            static_cast<std::streamsize>(len * 8));
  }
  if (!is) throw UsageError("truncated optimizer state");
}

// ---------------------------------------------------------------------------
// truncated BPTT
// ---------------------------------------------------------------------------

namespace {

Tensor slice_window(const Tensor& frames, std::size_t t0, std::size_t len) {
  const Shape& s = frames.shape();
  Shape out_shape = s;
  out_shape[1] = len;
  Tensor out = Tensor::zeros(out_shape);
  const std::size_t frame = s[2] * s[3] * s[4];
  const std::size_t B = s[0], T = s[1];
  for (std::size_t b = 0; b < B; ++b) {
    const double* src = frames.data().data() + (b * T + t0) * frame;
    double* dst = out.data().data() + b * len * frame;
    std::memcpy(dst, src, len * frame * sizeof(double));
  }
  return out;
}

// [T,K] view of batch item b across per-timestep outputs, taped so CTC
// gradients reach the network.
Tensor stack_item_rows(const std::vector<Tensor>& outs, std::size_t b) {
  const std::size_t T = outs.size();
  const std::size_t K = outs[0].shape()[1];
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = {T, K};
  impl->data.resize(T * K);
  bool rg = false;
  for (std::size_t t = 0; t < T; ++t) {
    std::copy_n(outs[t].data().data() + b * K, K, impl->data.data() + t * K);
    impl->parents.push_back(outs[t].impl);
    rg = rg || outs[t].requires_grad();
  }
  impl->requires_grad = rg;
  if (rg) {
    impl->backprop = [b, K](TensorImpl& self) {
      for (std::size_t t = 0; t < self.parents.size(); ++t) {
        TensorImplPtr& par = self.parents[t];
        if (!par->requires_grad) continue;
        par->ensure_grad();
        for (std::size_t k = 0; k < K; ++k) {
          par->grad[b * K + k] += self.grad[t * K + k];
        }
      }
    };
  }
  return Tensor(impl);
}

}  // namespace

TbpttMetrics train_sequence_tbptt(Model& model, const Tensor& frames,
                                  const std::vector<int>& targets,
                                  const TbpttConfig& cfg, AdamOptimizer& opt,
                                  std::mt19937_64& rng) {
  if (frames.rank() != 5) {
    throw DimensionError("train_sequence_tbptt expects [B,T,C,H,W], got " +
                         shape_str(frames.shape()));
  }
  const std::size_t T = frames.shape()[1];
  if (cfg.window <= 0 || static_cast<std::size_t>(cfg.window) > T) {
    throw ConfigError("window " + std::to_string(cfg.window) +
                      " is invalid for a sequence of length " +
                      std::to_string(T));
  }
  const std::size_t w = static_cast<std::size_t>(cfg.window);

  StateStore store;
  std::map<std::string, Tensor> masks;
  opt.zero_grad();

  TbpttMetrics out;
  for (std::size_t t0 = 0; t0 < T; t0 += w) {
    const std::size_t len = std::min(w, T - t0);
    Tensor win = slice_window(frames, t0, len);
    std::vector<Tensor> outs =
        run_sequence(*model.net, win, store, masks, /*train=*/true, &rng, {},
                     static_cast<int>(t0));
    // Scaled so that the window losses sum to the full-sequence mean; with
    // window == T the factor is exactly 1 and the gradient matches full BPTT.
    Tensor loss = sequence_cross_entropy(outs, targets);
    if (len != T) loss = scale(loss, static_cast<double>(len) / T);
    loss.backward();
    out.loss += loss.value();
    ++out.windows;
    ++out.backward_calls;
    store.detach_all();
  }
  opt.step();
  out.updates = 1;
  return out;
}

TbpttMetrics train_sequence_ctc(Model& model, const Tensor& frames,
                                const std::vector<std::vector<int>>& targets,
                                AdamOptimizer& opt, std::mt19937_64& rng) {
  const std::size_t B = frames.shape()[0];
  if (targets.size() != B) {
    throw UsageError("target count does not match the batch size");
  }
  StateStore store;
  std::map<std::string, Tensor> masks;
  opt.zero_grad();

  std::vector<Tensor> outs =
      run_sequence(*model.net, frames, store, masks, /*train=*/true, &rng);
  Tensor total;
  for (std::size_t b = 0; b < B; ++b) {
    Tensor item = ctc_loss(stack_item_rows(outs, b), targets[b]);
    total = total.defined() ? add(total, item) : item;
  }
  Tensor loss = scale(total, 1.0 / static_cast<double>(B));
  loss.backward();
  opt.step();
  return {loss.value(), 1, 1, 1};
}

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

void CurriculumSchedule::validate() const {
  if (phases.empty()) throw ConfigError("curriculum has no phases");
  if (phases.front().start_step != 0) {
    throw ConfigError("the first curriculum phase must start at step 0");
  }
  for (std::size_t i = 1; i < phases.size(); ++i) {
    if (phases[i].start_step <= phases[i - 1].start_step) {
      throw ConfigError("curriculum phase starts must increase");
    }
    if (phases[i].seq_len < phases[i - 1].seq_len) {
      throw ConfigError("curriculum lengths must be non-decreasing");
    }
  }
}

std::size_t CurriculumSchedule::length_at(long step, int* phase_index) const {
  validate();
  int idx = 0;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    if (phases[i].start_step <= step) idx = static_cast<int>(i);
  }
  if (phase_index) *phase_index = idx;
  return phases[static_cast<std::size_t>(idx)].seq_len;
}

bool PlateauScheduler::observe(double metric, double& lr) {
  if (metric > best_) {
    best_ = metric;
    stale_ = 0;
    return false;
  }
  if (++stale_ >= patience_) {
    stale_ = 0;
    lr = std::max(floor_, lr * 0.5);
    return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

std::string arch_spec_hash(const ArchSpec& spec) {
  const std::string text = spec.to_config().to_text();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

namespace {

constexpr char kCkptMagic[4] = {'C', 'K', 'P', 'T'};

std::string meta_to_text(const CheckpointMeta& m) {
  std::ostringstream os;
  os.precision(17);
  os << "spec_hash=" << m.spec_hash << "\n"
     << "step=" << m.step << "\n"
     << "lr=" << m.lr << "\n"
     << "phase=" << m.phase << "\n"
     << "best_val=" << m.best_val << "\n"
     << "plateau_stale=" << m.plateau_stale << "\n"
     << "last_val=" << m.last_val << "\n"
     << "rng_state=" << m.rng_state << "\n";
  return os.str();
}

CheckpointMeta meta_from_text(const std::string& text) {
  CheckpointMeta m;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "spec_hash") m.spec_hash = val;
    else if (key == "step") m.step = std::stol(val);
    else if (key == "lr") m.lr = std::stod(val);
    else if (key == "phase") m.phase = std::stoi(val);
    else if (key == "best_val") m.best_val = std::stod(val);
    else if (key == "plateau_stale") m.plateau_stale = std::stoi(val);
    else if (key == "last_val") m.last_val = std::stod(val);
    else if (key == "rng_state") m.rng_state = val;
  }
  return m;
}

void write_string(std::ostream& os, const std::string& s) {
  std::uint64_t len = s.size();
  os.write(reinterpret_cast<const char*>(&len), 8);
  os.write(s.data(), static_cast<std::streamsize>(len));
}

std::string read_string(std::istream& is) {
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), 8);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw UsageError("truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     const AdamOptimizer* opt, const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot open checkpoint for writing: " + path);
  os.write(kCkptMagic, 4);
  std::uint32_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), 4);
  write_string(os, meta_to_text(meta));

  auto params = model.parameters();
  auto buffers = model.buffers();
  std::uint64_t count = params.size() + buffers.size();
  os.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto& [name, t] : params) {
    write_string(os, "param." + name);
    write_tensor(os, t);
  }
  for (const auto& [name, t] : buffers) {
    write_string(os, "buffer." + name);
    write_tensor(os, t);
  }
  std::uint8_t has_opt = opt ? 1 : 0;
  os.write(reinterpret_cast<const char*>(&has_opt), 1);
  if (opt) opt->save(os);
  if (!os) throw UsageError("checkpoint write failed: " + path);
}

CheckpointMeta load_checkpoint(const std::string& path, Model& model,
                               AdamOptimizer* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open checkpoint: " + path);
  char magic[4];
  std::uint32_t version = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&version), 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0 || version != 1) {
    throw UsageError("not a checkpoint file: " + path);
  }
  CheckpointMeta meta = meta_from_text(read_string(is));
  if (meta.spec_hash != arch_spec_hash(model.spec)) {
    throw VerificationError(
        "checkpoint was written for a different architecture (" +
                     meta.spec_hash + " vs " + arch_spec_hash(model.spec) +
                     ")");
  }

  std::map<std::string, Tensor> blobs;
  std::uint64_t count = 0;
  is.read(reinterpret_cast<char*>(&count), 8);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(is);
    blobs.emplace(name, read_tensor(is));
  }
  auto restore = [&](const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor>> targets) {
    for (auto& [name, t] : targets) {
      auto it = blobs.find(prefix + name);
      if (it == blobs.end()) {
        throw UsageError("checkpoint is missing tensor '" + prefix + name +
                         "'");
      }
      if (it->second.shape() != t.shape()) {
        throw UsageError("checkpoint tensor '" + name + "' has shape " +
                         shape_str(it->second.shape()) + ", expected " +
                         shape_str(t.shape()));
      }
      t.data() = it->second.data();
    }
  };
  restore("param.", model.parameters());
  restore("buffer.", model.buffers());

  std::uint8_t has_opt = 0;
  is.read(reinterpret_cast<char*>(&has_opt), 1);
  if (opt) {
    if (!has_opt) throw UsageError("checkpoint has no optimizer state");
    opt->load(is);
  }
  return meta;
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

Tensor predict_final_logits(const Model& model, const Tensor& frames,
                            const ResetPolicy& reset) {
  Tensor x = frames;
  if (x.rank() == 4) {
    Shape s = x.shape();
    x = reshape(x.detach(), {1, s[0], s[1], s[2], s[3]});
  }
  StateStore store;
  std::map<std::string, Tensor> masks;
  std::vector<Tensor> outs = run_sequence(*model.net, x, store, masks,
                                          /*train=*/false, nullptr, reset);
  return outs.back();
}

namespace {

Tensor reverse_time_axis(const Tensor& frames) {
  const Shape& s = frames.shape();  // [T,C,H,W]
  Tensor out = Tensor::zeros(s);
  const std::size_t T = s[0];
  const std::size_t frame = numel(s) / T;
  for (std::size_t t = 0; t < T; ++t) {
    std::copy_n(frames.data().data() + t * frame, frame,
                out.data().data() + (T - 1 - t) * frame);
  }
  return out;
}

int argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t K = logits.shape().back();
  int best = 0;
  double best_v = logits[row * K];
  for (std::size_t k = 1; k < K; ++k) {
    if (logits[row * K + k] > best_v) {
      best_v = logits[row * K + k];
      best = static_cast<int>(k);
    }
  }
  return best;
}

}  // namespace

Trainer::Trainer(Model& model, const Dataset& data, TrainConfig cfg)
    : model_(model),
      data_(data),
      cfg_(std::move(cfg)),
      opt_(model.parameters(), cfg_.adam),
      rng_(cfg_.seed),
      plateau_(cfg_.plateau_patience, cfg_.lr_floor) {
  if (cfg_.curriculum.phases.empty()) {
    cfg_.curriculum.phases.push_back({0, 0});  // 0 = native sequence length
  }
  cfg_.curriculum.validate();
  if (data_.train.empty()) throw UsageError("training split is empty");
}

Tensor Trainer::prepare_frames(const SequenceSample& s,
                               std::uint64_t seed) const {
  SequenceSample work = s;
  if (cfg_.shuffle_input_frames) work = shuffle_frames(work, seed ^ 0x51ull);
  if (cfg_.augment) {
    work = augment_sequence(work, cfg_.aug, seed);
  }
  Tensor frames = work.frames;
  if (cfg_.reverse_time) frames = reverse_time_axis(frames);
  return frames;
}

StepMetrics Trainer::step() {
  ++step_;
  int phase = 0;
  const std::size_t want_len = cfg_.curriculum.length_at(step_ - 1, &phase);

  std::uniform_int_distribution<std::size_t> pick(0, data_.train.size() - 1);
  std::vector<const SequenceSample*> batch;
  std::vector<std::uint64_t> seeds;
  for (int b = 0; b < cfg_.batch_size; ++b) {
    batch.push_back(&data_.train[pick(rng_)]);
    seeds.push_back(rng_());
  }

  Tensor stacked;
  std::vector<int> targets;
  std::vector<std::vector<int>> ctc_targets;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    SequenceSample sub = *batch[b];
    if (want_len > 0 && want_len < sub.frames.shape()[0]) {
      sub = sample_subsequence(sub, want_len, seeds[b] ^ 0x73ull);
    }
    Tensor frames = prepare_frames(sub, seeds[b]);
    if (!stacked.defined()) {
      Shape fs = frames.shape();
      stacked = Tensor::zeros({batch.size(), fs[0], fs[1], fs[2], fs[3]});
    }
    std::copy_n(frames.data().data(), frames.size(),
                stacked.data().data() + b * frames.size());
    targets.push_back(sub.label);
    if (cfg_.use_ctc) {
      ctc_targets.push_back(sub.char_target.empty()
                                ? std::vector<int>{sub.label}
                                : sub.char_target);
    }
  }

  TbpttMetrics tm =
      cfg_.use_ctc
          ? train_sequence_ctc(model_, stacked, ctc_targets, opt_, rng_)
          : train_sequence_tbptt(model_, stacked, targets, cfg_.tbptt, opt_,
                                 rng_);

  if (cfg_.eval_interval > 0 && step_ % cfg_.eval_interval == 0 &&
      !data_.val.empty()) {
    last_val_ = evaluate(data_.val);
    plateau_.observe(last_val_, opt_.config().lr);
  }
  return {step_, tm.loss, last_val_, opt_.config().lr, phase};
}

std::vector<StepMetrics> Trainer::run(long steps) {
  std::vector<StepMetrics> log;
  log.reserve(static_cast<std::size_t>(steps));
  for (long i = 0; i < steps; ++i) log.push_back(step());
  return log;
}

double Trainer::evaluate(const std::vector<SequenceSample>& split) const {
  if (split.empty()) return 0.0;
  std::size_t correct = 0;
  for (const SequenceSample& s : split) {
    Tensor frames = s.frames;
    if (cfg_.augment) {
      frames = center_crop_resize(frames, cfg_.aug.out_size, cfg_.aug.out_size);
    }
    if (cfg_.reverse_time) frames = reverse_time_axis(frames);
    Tensor logits = predict_final_logits(model_, frames);
    if (argmax_row(logits, 0) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

CheckpointMeta Trainer::snapshot_meta() const {
  CheckpointMeta m;
  m.spec_hash = arch_spec_hash(model_.spec);
  m.step = step_;
  m.lr = opt_.config().lr;
  cfg_.curriculum.length_at(step_ > 0 ? step_ - 1 : 0, &m.phase);
  std::ostringstream os;
  os << rng_;
  m.rng_state = os.str();
  m.best_val = plateau_.best();
  m.plateau_stale = plateau_.stale();
  m.last_val = last_val_;
  return m;
}

void Trainer::restore_meta(const CheckpointMeta& meta) {
  step_ = meta.step;
  opt_.config().lr = meta.lr;
  plateau_.restore(meta.best_val, meta.plateau_stale);
  last_val_ = meta.last_val;
  if (!meta.rng_state.empty()) {
    std::istringstream is(meta.rng_state);
    is >> rng_;
  }
}

}  // namespace clstm
