// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msanet/config.hpp"
#include "msanet/data.hpp"
#include "msanet/metrics.hpp"
#include "msanet/model.hpp"

namespace msanet {

// ---------------------------------------------------------------------------
// Objective: mean of |y - yhat|^p over all elements. The mean (rather than
// the sum) keeps gradient magnitudes independent of batch and patch size.
// For p=1 the subgradient at zero residual is zero.
// ---------------------------------------------------------------------------

inline Tensor loss_lp(Tape* tape, const Tensor& target, const Tensor& prediction, int p) {
  if (target.shape() != prediction.shape()) {
    throw ShapeError("loss operands disagree: " + target.shape().str() + " vs " +
                     prediction.shape().str());
  }
  if (p != 1 && p != 2) throw ArgumentError("loss exponent must be 1 or 2");
  const float* py = target.data();
  const float* ph = prediction.data();
  const std::int64_t m = target.numel();
  double acc = 0.0;
  if (p == 2) {
    for (std::int64_t i = 0; i < m; ++i) {
      const double d = static_cast<double>(py[i]) - ph[i];
      acc += d * d;
    }
  } else {
    for (std::int64_t i = 0; i < m; ++i) acc += std::fabs(static_cast<double>(py[i]) - ph[i]);
  }
  Tensor out = Tensor::constant(Shape(1, 1, 1, 1), static_cast<float>(acc / static_cast<double>(m)));
  if (detail::should_record(tape, {&target, &prediction})) {
    out.ensure_grad();
    Tensor yv = target, hv = prediction, ov = out;
    tape->record("loss_lp", [yv, hv, ov, p]() mutable {
      const float g = ov.grad()[0];
      const float* py = yv.data();
      const float* ph = hv.data();
      const std::int64_t m = yv.numel();
      const float inv_m = 1.0f / static_cast<float>(m);
      const auto d_pred = [&](std::int64_t i) {
        const float r = ph[i] - py[i];
        if (p == 2) return 2.0f * r * inv_m;
        return (r > 0.0f ? 1.0f : (r < 0.0f ? -1.0f : 0.0f)) * inv_m;
      };
      if (hv.tracked()) {
        hv.ensure_grad();
        float* gh = hv.grad();
        for (std::int64_t i = 0; i < m; ++i) gh[i] += g * d_pred(i);
      }
      if (yv.tracked()) {
        yv.ensure_grad();
        float* gy = yv.grad();
        for (std::int64_t i = 0; i < m; ++i) gy[i] -= g * d_pred(i);
      }
    });
  }
  return out;
}

// Single-cycle cosine annealing from lr0 down to zero.
inline float cosine_lr(std::int64_t step, std::int64_t total, float lr0) {
  if (total <= 0) throw ArgumentError("cosine_lr needs total > 0");
  if (step < 0 || step > total) throw ArgumentError("cosine_lr step out of [0, total]");
  const double x = 3.14159265358979323846 * static_cast<double>(step) / static_cast<double>(total);
  return static_cast<float>(static_cast<double>(lr0) * (1.0 + std::cos(x)) / 2.0);
}

// ---------------------------------------------------------------------------
// Adam with bias correction. Moments are float32 like the parameters.
// Gradients are left untouched; the caller zeroes them between steps.
// ---------------------------------------------------------------------------

struct AdamParams {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(const ParamStore& params, AdamParams hp = {}) : hp_(hp) {
    for (const auto& e : params.entries()) {
      m1_.push_back(Tensor::zeros(e.tensor.shape()));
      m2_.push_back(Tensor::zeros(e.tensor.shape()));
    }
  }

  std::int64_t step_count() const { return t_; }
  const AdamParams& hyperparams() const { return hp_; }

  void step(ParamStore& params, float lr) {
    if (m1_.size() != params.entries().size()) {
      throw ContractError("optimizer state does not match the parameter store");
    }
    ++t_;
    const float c1 = 1.0f - static_cast<float>(std::pow(static_cast<double>(hp_.beta1), static_cast<double>(t_)));
    const float c2 = 1.0f - static_cast<float>(std::pow(static_cast<double>(hp_.beta2), static_cast<double>(t_)));
    std::size_t idx = 0;
    for (const auto& e : params.entries()) {
      Tensor p = e.tensor;
      if (!p.has_grad()) throw ContractError("parameter " + e.name + " has no gradient");
      float* pd = p.data();
      const float* g = p.grad();
      float* m = m1_[idx].data();
      float* v = m2_[idx].data();
      const std::int64_t n = p.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        m[i] = hp_.beta1 * m[i] + (1.0f - hp_.beta1) * g[i];
        v[i] = hp_.beta2 * v[i] + (1.0f - hp_.beta2) * g[i] * g[i];
        const float mhat = m[i] / c1;
        const float vhat = v[i] / c2;
        pd[i] -= lr * mhat / (std::sqrt(vhat) + hp_.eps);
      }
      ++idx;
    }
  }

  // Checkpoint access: moments are stored alongside parameters by name.
  Tensor moment1(std::size_t i) { return m1_[i]; }
  Tensor moment2(std::size_t i) { return m2_[i]; }
  std::size_t size() const { return m1_.size(); }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  std::vector<Tensor> m1_, m2_;
  std::int64_t t_ = 0;
  AdamParams hp_;
};

// Global L2 norm clip across all parameter gradients; returns the pre-clip norm.
inline double clip_gradients(ParamStore& params, float max_norm) {
  double total = 0.0;
  for (const auto& e : params.entries()) {
    const float* g = e.tensor.grad();
    const std::int64_t n = e.tensor.numel();
    for (std::int64_t i = 0; i < n; ++i) total += static_cast<double>(g[i]) * g[i];
  }
  const double norm = std::sqrt(total);
  if (max_norm > 0.0f && norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (const auto& e : params.entries()) {
      Tensor t = e.tensor;
      float* g = t.grad();
      const std::int64_t n = t.numel();
      for (std::int64_t i = 0; i < n; ++i) g[i] *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoint container and its binary format:
//   magic "MSAN" | version u16 | config blob (u32 length + UTF-8 JSON) |
//   entry count u32 | per tensor: name (u16 length + UTF-8), rank u8,
//   dims u32 x rank, float32 data | scalar section: count u32, per entry
//   key (u16 length + UTF-8) + value f64.
// Everything little-endian. Optimizer moments ride along as tensors named
// "<param>.m1" / "<param>.m2".
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::map<std::string, double> scalars;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

constexpr std::uint16_t kCheckpointVersion = 1;

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u32(out, static_cast<std::uint32_t>(bits & 0xffffffffull));
  put_u32(out, static_cast<std::uint32_t>(bits >> 32));
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

  std::size_t offset() const { return pos_; }

  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) {
      throw FormatError(path_ + ": truncated at offset " + std::to_string(pos_));
    }
  }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(buf_[pos_]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    const std::uint64_t bits = lo | (hi << 32);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out;
  out += "MSAN";
  detail::put_u16(out, detail::kCheckpointVersion);
  const std::string blob = model_config_to_text(ckpt.config);
  detail::put_u32(out, static_cast<std::uint32_t>(blob.size()));
  out += blob;
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(4);  // rank
    const Shape& s = t.shape();
    detail::put_u32(out, static_cast<std::uint32_t>(s.n));
    detail::put_u32(out, static_cast<std::uint32_t>(s.c));
    detail::put_u32(out, static_cast<std::uint32_t>(s.h));
    detail::put_u32(out, static_cast<std::uint32_t>(s.w));
    for (float v : t.values()) detail::put_f32(out, v);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.scalars.size()));
  for (const auto& [key, value] : ckpt.scalars) {
    detail::put_u16(out, static_cast<std::uint16_t>(key.size()));
    out += key;
    detail::put_f64(out, value);
  }

  // Write-then-rename so a crash never leaves a half-written checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();

  detail::ByteReader r(buf, path);
  if (r.str(4) != "MSAN") throw FormatError(path + ": bad magic at offset 0");
  const std::uint16_t version = r.u16();
  if (version != detail::kCheckpointVersion) {
    throw FormatError(path + ": unsupported format version " + std::to_string(version) + " at offset 4");
  }
  Checkpoint ckpt;
  const std::uint32_t blob_len = r.u32();
  ckpt.config = model_config_from_text(r.str(blob_len));
  const std::uint32_t count = r.u32();
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    std::string name = r.str(name_len);
    const std::uint8_t rank = r.u8();
    if (rank != 4) {
      throw FormatError(path + ": unsupported tensor rank " + std::to_string(rank) + " at offset " +
                        std::to_string(r.offset() - 1));
    }
    Shape s;
    s.n = static_cast<int>(r.u32());
    s.c = static_cast<int>(r.u32());
    s.h = static_cast<int>(r.u32());
    s.w = static_cast<int>(r.u32());
    std::vector<float> values(static_cast<std::size_t>(s.numel()));
    for (float& v : values) v = r.f32();
    ckpt.tensors.emplace_back(std::move(name), Tensor::from(s, std::move(values)));
  }
  const std::uint32_t n_scalars = r.u32();
  for (std::uint32_t i = 0; i < n_scalars; ++i) {
    const std::uint16_t key_len = r.u16();
    std::string key = r.str(key_len);
    ckpt.scalars[key] = r.f64();
  }
  if (!r.at_end()) {
    throw FormatError(path + ": trailing bytes at offset " + std::to_string(r.offset()));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  float lr = 0.0f;
  double seconds = 0.0;
};

struct TrainingReport {
  std::vector<EpochStats> epochs;

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report " + path);
    out << "epoch,mean_loss,lr,seconds\n";
    for (const EpochStats& e : epochs) {
      out << e.epoch << "," << e.mean_loss << "," << e.lr << "," << e.seconds << "\n";
    }
  }
};

struct TrainerState {
  AdamState adam;
  std::int64_t global_step = 0;
  int epochs_done = 0;
  double best_val_psnr = -1.0;
};

inline Checkpoint make_checkpoint(const Model& model, const TrainerState& state, const TrainSchedule& sched) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  const auto& entries = model.params().entries();
  AdamState& adam = const_cast<TrainerState&>(state).adam;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ckpt.tensors.emplace_back(entries[i].name, entries[i].tensor.clone());
    ckpt.tensors.emplace_back(entries[i].name + ".m1", adam.moment1(i).clone());
    ckpt.tensors.emplace_back(entries[i].name + ".m2", adam.moment2(i).clone());
  }
  ckpt.scalars["adam.t"] = static_cast<double>(state.adam.step_count());
  ckpt.scalars["adam.beta1"] = state.adam.hyperparams().beta1;
  ckpt.scalars["adam.beta2"] = state.adam.hyperparams().beta2;
  ckpt.scalars["adam.eps"] = state.adam.hyperparams().eps;
  ckpt.scalars["progress.global_step"] = static_cast<double>(state.global_step);
  ckpt.scalars["progress.epochs_done"] = static_cast<double>(state.epochs_done);
  ckpt.scalars["progress.best_val_psnr"] = state.best_val_psnr;
  ckpt.scalars["schedule.epochs"] = sched.epochs;
  ckpt.scalars["schedule.steps_per_epoch"] = sched.steps_per_epoch;
  ckpt.scalars["schedule.lr0"] = sched.lr0;
  ckpt.scalars["schedule.loss_p"] = sched.loss_p;
  ckpt.scalars["schedule.batch"] = sched.batch;
  ckpt.scalars["schedule.patch"] = sched.patch;
  ckpt.scalars["schedule.seed"] = static_cast<double>(sched.seed);
  ckpt.scalars["schedule.sigma"] = sched.sigma;
  return ckpt;
}

// Applies parameter values and optimizer state from a checkpoint onto a
// built model. The configs must match exactly.
inline void apply_checkpoint(const Checkpoint& ckpt, Model& model, TrainerState& state) {
  if (auto field = model_config_diff(ckpt.config, model.config())) {
    throw ConfigError("checkpoint config mismatch in field '" + *field + "'");
  }
  const auto& entries = model.params().entries();
  if (state.adam.size() != entries.size()) state.adam = AdamState(model.params());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string& name = entries[i].name;
    const Tensor* src = ckpt.find(name);
    if (src == nullptr) throw FormatError("checkpoint is missing parameter " + name);
    if (src->shape() != entries[i].tensor.shape()) {
      throw FormatError("checkpoint tensor " + name + " has shape " + src->shape().str() + ", expected " +
                        entries[i].tensor.shape().str());
    }
    Tensor dst = entries[i].tensor;
    dst.values() = src->values();
    if (const Tensor* m1 = ckpt.find(name + ".m1")) state.adam.moment1(i).values() = m1->values();
    if (const Tensor* m2 = ckpt.find(name + ".m2")) state.adam.moment2(i).values() = m2->values();
  }
  const auto scalar = [&](const std::string& key, double fallback) {
    auto it = ckpt.scalars.find(key);
    return it == ckpt.scalars.end() ? fallback : it->second;
  };
  state.adam.set_step_count(static_cast<std::int64_t>(scalar("adam.t", 0)));
  state.global_step = static_cast<std::int64_t>(scalar("progress.global_step", 0));
  state.epochs_done = static_cast<int>(scalar("progress.epochs_done", 0));
  state.best_val_psnr = scalar("progress.best_val_psnr", -1.0);
}

struct FitOptions {
  std::string out_dir;                      // empty: no checkpoints/report on disk
  const std::vector<ImageSample>* val_set = nullptr;
  std::function<void(const std::string&)> log;  // optional progress sink
  std::function<void(int, double)> on_epoch;    // epoch index, mean loss
  int stop_after_epoch = 0;  // >0: interrupt once this epoch completes; schedule stays intact
};

inline int derive_steps_per_epoch(const std::vector<ImageSample>& dataset, const TrainSchedule& sched) {
  if (sched.steps_per_epoch > 0) return sched.steps_per_epoch;
  std::int64_t pixels = 0;
  for (const ImageSample& s : dataset) pixels += static_cast<std::int64_t>(s.clean.shape().h) * s.clean.shape().w;
  const std::int64_t per_batch = static_cast<std::int64_t>(sched.batch) * sched.patch * sched.patch;
  return static_cast<int>(std::max<std::int64_t>(1, (pixels + per_batch - 1) / per_batch));
}

// Runs (or resumes) the batch loop: sample -> forward -> loss -> backward ->
// adam -> zero grads. Checkpoints every `checkpoint_every` epochs (keeping
// the most recent `keep_last`) plus a best-validation snapshot.
inline TrainingReport fit(Model& model, const std::vector<ImageSample>& dataset, const TrainSchedule& sched,
                          TrainerState& state, const FitOptions& opts = {}) {
  sched.validate();
  if (dataset.empty() && sched.epochs > 0) throw ArgumentError("training dataset is empty");
  if (state.adam.size() != model.params().entries().size()) state.adam = AdamState(model.params());

  TrainingReport report;
  const int steps_per_epoch = sched.epochs == 0 ? 0 : derive_steps_per_epoch(dataset, sched);
  const std::int64_t total_steps = static_cast<std::int64_t>(sched.epochs) * steps_per_epoch;
  std::vector<std::string> kept;

  const auto emit = [&](const std::string& msg) {
    if (opts.log) opts.log(msg);
  };

  for (int epoch = state.epochs_done; epoch < sched.epochs; ++epoch) {
    if (opts.stop_after_epoch > 0 && epoch >= opts.stop_after_epoch) break;
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    float lr = 0.0f;
    for (int s = 0; s < steps_per_epoch; ++s) {
      lr = cosine_lr(state.global_step, total_steps, sched.lr0);
      PatchBatch batch = sample_patch_batch(dataset, sched.patch, sched.batch,
                                            mix_seed(sched.seed, static_cast<std::uint64_t>(state.global_step)));
      Tape tape;
      Tensor pred = model.forward(&tape, batch.noisy);
      Tensor loss = loss_lp(&tape, batch.clean, pred, sched.loss_p);
      tape.backward(loss);
      if (sched.grad_clip > 0.0f) clip_gradients(model.params(), sched.grad_clip);
      state.adam.step(model.params(), lr);
      model.params().zero_grads();
      loss_sum += loss.data()[0];
      ++state.global_step;
    }
    state.epochs_done = epoch + 1;

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.mean_loss = steps_per_epoch > 0 ? loss_sum / steps_per_epoch : 0.0;
    stats.lr = lr;
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(stats);
    emit("epoch " + std::to_string(stats.epoch) + "/" + std::to_string(sched.epochs) + " loss " +
         std::to_string(stats.mean_loss) + " lr " + std::to_string(stats.lr));
    if (opts.on_epoch) opts.on_epoch(stats.epoch, stats.mean_loss);

    if (!opts.out_dir.empty() && (stats.epoch % sched.checkpoint_every == 0 || stats.epoch == sched.epochs)) {
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04d.msan", stats.epoch);
      const std::string path = (std::filesystem::path(opts.out_dir) / name).string();
      save_checkpoint(make_checkpoint(model, state, sched), path);
      kept.push_back(path);
      while (static_cast<int>(kept.size()) > sched.keep_last) {
        std::filesystem::remove(kept.front());
        kept.erase(kept.begin());
      }
      if (opts.val_set != nullptr && !opts.val_set->empty()) {
        const MetricReport val = evaluate(&model, *opts.val_set);
        emit("  val psnr " + std::to_string(val.mean_psnr) + " ssim " + std::to_string(val.mean_ssim));
        if (val.mean_psnr > state.best_val_psnr) {
          state.best_val_psnr = val.mean_psnr;
          save_checkpoint(make_checkpoint(model, state, sched),
                          (std::filesystem::path(opts.out_dir) / "ckpt_best.msan").string());
        }
      }
    }
  }

  if (!opts.out_dir.empty()) {
    save_checkpoint(make_checkpoint(model, state, sched),
                    (std::filesystem::path(opts.out_dir) / "ckpt_final.msan").string());
    report.write_csv((std::filesystem::path(opts.out_dir) / "report.csv").string());
  }
  return report;
}

}  // namespace msanet
