// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "msanet/data.hpp"
#include "msanet/model.hpp"

namespace msanet {

// PSNR over the full tensor (all channels and pixels pooled into one MSE).
inline double psnr(const Tensor& a, const Tensor& b, double peak = 1.0) {
  if (a.shape() != b.shape()) {
    throw ShapeError("psnr operands disagree: " + a.shape().str() + " vs " + b.shape().str());
  }
  const float* pa = a.data();
  const float* pb = b.data();
  const std::int64_t n = a.numel();
  double mse = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(n);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

namespace detail {

inline std::vector<double> gaussian_window_11(double sigma = 1.5) {
  std::vector<double> w(11);
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += w[static_cast<std::size_t>(i)];
  }
  for (double& v : w) v /= sum;
  return w;
}

// Single-channel SSIM with an 11x11 Gaussian window (std 1.5), valid-region
// windowing (no padding).
inline double ssim_plane(const float* a, const float* b, int H, int W, double peak) {
  static const std::vector<double> win = gaussian_window_11();
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const int ho = H - 10;
  const int wo = W - 10;

  // Separable window: blur rows then columns for each moment map.
  const auto blur = [&](const std::vector<double>& src, int h, int w, std::vector<double>& tmp,
                        std::vector<double>& dst) {
    tmp.assign(static_cast<std::size_t>(h) * (w - 10), 0.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x + 10 < w; ++x) {
        double acc = 0.0;
        for (int k = 0; k < 11; ++k) acc += win[static_cast<std::size_t>(k)] * src[static_cast<std::size_t>(y) * w + x + k];
        tmp[static_cast<std::size_t>(y) * (w - 10) + x] = acc;
      }
    dst.assign(static_cast<std::size_t>(h - 10) * (w - 10), 0.0);
    for (int y = 0; y + 10 < h; ++y)
      for (int x = 0; x + 10 < w; ++x) {
        double acc = 0.0;
        for (int k = 0; k < 11; ++k) acc += win[static_cast<std::size_t>(k)] * tmp[static_cast<std::size_t>(y + k) * (w - 10) + x];
        dst[static_cast<std::size_t>(y) * (w - 10) + x] = acc;
      }
  };

  const std::int64_t n = static_cast<std::int64_t>(H) * W;
  std::vector<double> da(static_cast<std::size_t>(n)), db(static_cast<std::size_t>(n)), daa(static_cast<std::size_t>(n)),
      dbb(static_cast<std::size_t>(n)), dab(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    da[static_cast<std::size_t>(i)] = a[i];
    db[static_cast<std::size_t>(i)] = b[i];
    daa[static_cast<std::size_t>(i)] = static_cast<double>(a[i]) * a[i];
    dbb[static_cast<std::size_t>(i)] = static_cast<double>(b[i]) * b[i];
    dab[static_cast<std::size_t>(i)] = static_cast<double>(a[i]) * b[i];
  }
  std::vector<double> tmp, mu_a, mu_b, m_aa, m_bb, m_ab;
  blur(da, H, W, tmp, mu_a);
  blur(db, H, W, tmp, mu_b);
  blur(daa, H, W, tmp, m_aa);
  blur(dbb, H, W, tmp, m_bb);
  blur(dab, H, W, tmp, m_ab);

  double total = 0.0;
  const std::int64_t cnt = static_cast<std::int64_t>(ho) * wo;
  for (std::int64_t i = 0; i < cnt; ++i) {
    const double ma = mu_a[static_cast<std::size_t>(i)];
    const double mb = mu_b[static_cast<std::size_t>(i)];
    const double va = m_aa[static_cast<std::size_t>(i)] - ma * ma;
    const double vb = m_bb[static_cast<std::size_t>(i)] - mb * mb;
    const double cov = m_ab[static_cast<std::size_t>(i)] - ma * mb;
    const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
    const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
    total += num / den;
  }
  return total / static_cast<double>(cnt);
}

}  // namespace detail

// Mean of per-channel single-scale SSIM.
inline double ssim(const Tensor& a, const Tensor& b, double peak = 1.0) {
  if (a.shape() != b.shape()) {
    throw ShapeError("ssim operands disagree: " + a.shape().str() + " vs " + b.shape().str());
  }
  const Shape& s = a.shape();
  if (s.h < 11 || s.w < 11) throw ArgumentError("ssim needs at least 11x11 images");
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  double total = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * s.c + c) * plane;
      total += detail::ssim_plane(a.data() + off, b.data() + off, s.h, s.w, peak);
    }
  return total / (static_cast<double>(s.n) * s.c);
}

// ---------------------------------------------------------------------------
// Dataset evaluation.
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string image_path;
  double psnr_db = 0.0;
  double ssim_value = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  void finalize() {
    mean_psnr = 0.0;
    mean_ssim = 0.0;
    for (const MetricRow& r : rows) {
      mean_psnr += r.psnr_db;
      mean_ssim += r.ssim_value;
    }
    if (!rows.empty()) {
      mean_psnr /= static_cast<double>(rows.size());
      mean_ssim /= static_cast<double>(rows.size());
    }
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report " + path);
    out << "image_path,psnr_db,ssim\n";
    for (const MetricRow& r : rows) out << r.image_path << "," << r.psnr_db << "," << r.ssim_value << "\n";
    out << "MEAN," << mean_psnr << "," << mean_ssim << "\n";
  }
};

inline Tensor clamp01(const Tensor& t) {
  Tensor out = t.clone();
  for (float& v : out.values()) v = std::min(1.0f, std::max(0.0f, v));
  return out;
}

// Runs the model over a padded copy of the noisy input and crops back.
inline Tensor denoise_image(const Model& model, const Tensor& noisy) {
  int pad_h = 0, pad_w = 0;
  Tensor padded = reflect_pad_to_multiple(noisy, model.config().resolution_divisor(), pad_h, pad_w);
  Tensor out = model.forward(nullptr, padded);
  return crop_to(out, noisy.shape().h, noisy.shape().w);
}

// Evaluates PSNR/SSIM of the (clamped) model output against the clean
// references. When model == nullptr the noisy input passes straight
// through, which calibrates the noise floor.
inline MetricReport evaluate(const Model* model, const std::vector<ImageSample>& dataset) {
  if (dataset.empty()) throw ArgumentError("evaluate needs a non-empty dataset");
  MetricReport report;
  for (const ImageSample& s : dataset) {
    Tensor restored = model == nullptr ? s.noisy : denoise_image(*model, s.noisy);
    restored = clamp01(restored);
    MetricRow row;
    row.image_path = s.source_path;
    row.psnr_db = psnr(restored, s.clean);
    row.ssim_value = ssim(restored, s.clean);
    report.rows.push_back(std::move(row));
  }
  report.finalize();
  return report;
}

}  // namespace msanet
