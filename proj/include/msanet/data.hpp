// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msanet/image_io.hpp"

namespace msanet {

// ---------------------------------------------------------------------------
// Synthetic AWGN dataset: a directory of clean images plus (sigma, seed).
// Noise is added in the float domain and the noisy tensor is NOT clamped;
// clamping happens only when an image is written out.
// ---------------------------------------------------------------------------

inline Tensor add_awgn(const Tensor& clean, float sigma, std::uint64_t seed) {
  if (sigma < 0.0f) throw ArgumentError("sigma must be non-negative");
  Tensor noisy = clean.clone();
  if (sigma == 0.0f) return noisy;
  const float stddev = sigma / 255.0f;
  Rng rng(seed);
  for (float& v : noisy.values()) v += rng.normal(0.0f, stddev);
  return noisy;
}

struct ImageSample {
  Tensor clean;   // (1,C,H,W) in [0,1]
  Tensor noisy;   // same shape, unclamped
  float sigma = 0.0f;
  std::uint64_t seed = 0;
  std::string source_path;
};

// Per-image noise seeds derive from (seed, filename hash) so adding files to
// a directory never changes the noise on existing ones.
inline std::uint64_t image_noise_seed(std::uint64_t dataset_seed, const std::string& path) {
  return mix_seed(dataset_seed, fnv1a64(std::filesystem::path(path).filename().string()));
}

inline ImageSample make_sample(const std::string& path, float sigma, std::uint64_t dataset_seed,
                               bool grayscale = false, bool clamp_noisy = false) {
  ImageSample s;
  s.clean = load_image(path);
  if (grayscale) s.clean = to_grayscale(s.clean);
  s.sigma = sigma;
  s.seed = image_noise_seed(dataset_seed, path);
  s.source_path = path;
  s.noisy = add_awgn(s.clean, sigma, s.seed);
  if (clamp_noisy) {
    for (float& v : s.noisy.values()) v = std::min(1.0f, std::max(0.0f, v));
  }
  return s;
}

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string ext = detail::lower_ext(p.string());
  return ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

// Sorted so dataset order is stable across filesystems.
inline std::vector<std::string> list_images(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<std::string> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) paths.push_back(e.path().string());
  }
  std::sort(paths.begin(), paths.end());
  return paths;
}

// Plain-text manifest: one relative image path per line, '#' comments.
inline std::vector<std::string> read_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path);
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  std::vector<std::string> paths;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    paths.push_back((base / line).string());
  }
  return paths;
}

inline std::vector<ImageSample> load_dataset(const std::vector<std::string>& paths, float sigma,
                                             std::uint64_t seed, bool grayscale = false,
                                             bool clamp_noisy = false) {
  std::vector<ImageSample> out;
  out.reserve(paths.size());
  for (const std::string& p : paths) out.push_back(make_sample(p, sigma, seed, grayscale, clamp_noisy));
  return out;
}

// ---------------------------------------------------------------------------
// Patch sampling with crop/flip/rotate augmentation. The same transform is
// applied to the clean and noisy member of each pair.
// ---------------------------------------------------------------------------

struct PatchRecord {
  int image_index = 0;
  int top = 0, left = 0;
  bool hflip = false;
  int quarter_turns = 0;  // 0..3 counter-clockwise
};

struct PatchBatch {
  Tensor clean;  // (B,C,P,P)
  Tensor noisy;
  std::vector<PatchRecord> records;
};

namespace detail {

// Crops patch (top,left,P,P) from src image n=0, applies hflip then
// quarter-turn rotations, writes into dst batch slot b.
inline void copy_patch(const Tensor& src, Tensor& dst, int b, const PatchRecord& r, int patch) {
  const Shape& ss = src.shape();
  const Shape& ds = dst.shape();
  for (int c = 0; c < ss.c; ++c)
    for (int y = 0; y < patch; ++y)
      for (int x = 0; x < patch; ++x) {
        float v = src.at(0, c, r.top + y, r.left + x);
        int py = y;
        int px = r.hflip ? patch - 1 - x : x;
        for (int t = 0; t < r.quarter_turns; ++t) {
          const int ny = patch - 1 - px;
          const int nx = py;
          py = ny;
          px = nx;
        }
        dst.at(b, c, py, px) = v;
        (void)ds;
      }
}

}  // namespace detail

inline PatchBatch sample_patch_batch(const std::vector<ImageSample>& pairs, int patch, int batch,
                                     std::uint64_t seed) {
  if (pairs.empty()) throw ArgumentError("empty dataset");
  if (patch < 1 || batch < 1) throw ArgumentError("patch and batch must be positive");
  for (const ImageSample& s : pairs) {
    if (s.clean.shape().h < patch || s.clean.shape().w < patch) {
      throw ArgumentError("image " + s.source_path + " smaller than patch size " + std::to_string(patch));
    }
  }
  const int channels = pairs[0].clean.shape().c;
  PatchBatch out;
  out.clean = Tensor::zeros(Shape(batch, channels, patch, patch));
  out.noisy = Tensor::zeros(Shape(batch, channels, patch, patch));
  Rng rng(seed);
  for (int b = 0; b < batch; ++b) {
    PatchRecord r;
    r.image_index = static_cast<int>(rng.next_below(pairs.size()));
    const ImageSample& s = pairs[static_cast<std::size_t>(r.image_index)];
    r.top = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(s.clean.shape().h - patch + 1)));
    r.left = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(s.clean.shape().w - patch + 1)));
    r.hflip = rng.next_below(2) == 1;
    r.quarter_turns = static_cast<int>(rng.next_below(4));
    detail::copy_patch(s.clean, out.clean, b, r, patch);
    detail::copy_patch(s.noisy, out.noisy, b, r, patch);
    out.records.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reflective padding up to a resolution divisor, and the inverse crop. Used
// at inference/evaluation so arbitrary image sizes hit the strict
// divisibility contract of the model.
// ---------------------------------------------------------------------------

inline Tensor reflect_pad_to_multiple(const Tensor& x, int multiple, int& pad_h, int& pad_w) {
  const Shape& s = x.shape();
  pad_h = (multiple - s.h % multiple) % multiple;
  pad_w = (multiple - s.w % multiple) % multiple;
  if (pad_h == 0 && pad_w == 0) return x;
  if (pad_h >= s.h || pad_w >= s.w) {
    throw ArgumentError("image " + s.str() + " too small to reflect-pad to a multiple of " +
                        std::to_string(multiple));
  }
  Tensor out = Tensor::zeros(Shape(s.n, s.c, s.h + pad_h, s.w + pad_w));
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h + pad_h; ++y) {
        const int sy = y < s.h ? y : 2 * s.h - 2 - y;
        for (int x2 = 0; x2 < s.w + pad_w; ++x2) {
          const int sx = x2 < s.w ? x2 : 2 * s.w - 2 - x2;
          out.at(n, c, y, x2) = x.at(n, c, sy, sx);
        }
      }
  return out;
}

inline Tensor crop_to(const Tensor& x, int h, int w) {
  const Shape& s = x.shape();
  if (h > s.h || w > s.w) throw ShapeError("crop larger than tensor");
  if (h == s.h && w == s.w) return x;
  Tensor out = Tensor::zeros(Shape(s.n, s.c, h, w));
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int x2 = 0; x2 < w; ++x2) out.at(n, c, y, x2) = x.at(n, c, y, x2);
  return out;
}

}  // namespace msanet
