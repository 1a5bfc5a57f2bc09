// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "msanet/tensor.hpp"

namespace msanet {

// ---------------------------------------------------------------------------
// Convolution geometry.
// ---------------------------------------------------------------------------

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kh = 3, kw = 3;
  int sh = 1, sw = 1;
  int ph = 1, pw = 1;
  int dh = 1, dw = 1;

  static ConvSpec k3(int cin, int cout, int stride = 1, int dilation = 1) {
    ConvSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.kh = s.kw = 3;
    s.sh = s.sw = stride;
    s.ph = s.pw = dilation;  // keeps 3x3 convs resolution-aligned
    s.dh = s.dw = dilation;
    return s;
  }

  static ConvSpec k1(int cin, int cout, int stride = 1) {
    ConvSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.kh = s.kw = 1;
    s.sh = s.sw = stride;
    s.ph = s.pw = 0;
    s.dh = s.dw = 1;
    return s;
  }

  // Exact x2 upsampling geometry for the transpose convolution.
  static ConvSpec upsample2x(int cin, int cout) {
    ConvSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.kh = s.kw = 4;
    s.sh = s.sw = 2;
    s.ph = s.pw = 1;
    s.dh = s.dw = 1;
    return s;
  }

  int out_h(int h) const { return (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1; }
  int out_w(int w) const { return (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1; }
};

namespace detail {

inline void check_conv_args(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec,
                            const char* op) {
  const Shape& xs = x.shape();
  if (xs.c != spec.in_channels) {
    throw ShapeError(std::string(op) + ": input has " + std::to_string(xs.c) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (w.shape() != Shape(spec.out_channels, spec.in_channels, spec.kh, spec.kw)) {
    throw ShapeError(std::string(op) + ": weight shape " + w.shape().str() + " does not match spec");
  }
  if (bias != nullptr && bias->shape() != Shape(1, spec.out_channels, 1, 1)) {
    throw ShapeError(std::string(op) + ": bias shape " + bias->shape().str() + " does not match spec");
  }
  if (spec.out_h(xs.h) < 1 || spec.out_w(xs.w) < 1) {
    throw ShapeError(std::string(op) + ": degenerate output extent for input " + xs.str());
  }
}

// Valid output range [lo, hi] such that 0 <= ow*sw + off < W, or empty (lo > hi).
inline void valid_out_range(int off, int stride, int in_extent, int out_extent, int& lo, int& hi) {
  lo = off < 0 ? (-off + stride - 1) / stride : 0;
  hi = (in_extent - 1 - off) >= 0 ? (in_extent - 1 - off) / stride : -1;
  lo = std::max(lo, 0);
  hi = std::min(hi, out_extent - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: zero-padded cross-correlation. For each output element the taps
// accumulate in (ci, kh, kw) order; the modulated deformable convolution
// follows the same order so its integer-offset reduction is exact.
// ---------------------------------------------------------------------------

namespace detail {

inline void conv2d_forward_kernel(const float* x, const float* w, const float* bias, float* out,
                                  const Shape& xs, const ConvSpec& sp, int ho, int wo) {
  const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;
  const std::int64_t wk = static_cast<std::int64_t>(sp.kh) * sp.kw;
  parallel_for(static_cast<std::int64_t>(xs.n) * sp.out_channels, [&](std::int64_t b, std::int64_t e) {
    std::vector<float> row(static_cast<std::size_t>(wo));
    for (std::int64_t nc = b; nc < e; ++nc) {
      const int n = static_cast<int>(nc / sp.out_channels);
      const int co = static_cast<int>(nc % sp.out_channels);
      const float* xn = x + static_cast<std::int64_t>(n) * xs.c * in_plane;
      const float* wc = w + static_cast<std::int64_t>(co) * xs.c * wk;
      float* on = out + (static_cast<std::int64_t>(n) * sp.out_channels + co) * out_plane;
      const float b0 = bias == nullptr ? 0.0f : bias[co];
      for (int oh = 0; oh < ho; ++oh) {
        std::fill(row.begin(), row.end(), 0.0f);
        for (int ci = 0; ci < xs.c; ++ci) {
          const float* xc = xn + static_cast<std::int64_t>(ci) * in_plane;
          for (int kh = 0; kh < sp.kh; ++kh) {
            const int ih = oh * sp.sh - sp.ph + kh * sp.dh;
            if (ih < 0 || ih >= xs.h) continue;
            const float* xrow = xc + static_cast<std::int64_t>(ih) * xs.w;
            const float* wrow = wc + (static_cast<std::int64_t>(ci) * sp.kh + kh) * sp.kw;
            for (int kw = 0; kw < sp.kw; ++kw) {
              const float wv = wrow[kw];
              const int off = kw * sp.dw - sp.pw;
              int lo, hi;
              valid_out_range(off, sp.sw, xs.w, wo, lo, hi);
              const float* src = xrow + off;
              if (sp.sw == 1) {
                for (int ow = lo; ow <= hi; ++ow) row[static_cast<std::size_t>(ow)] += wv * src[ow];
              } else {
                for (int ow = lo; ow <= hi; ++ow) row[static_cast<std::size_t>(ow)] += wv * src[static_cast<std::int64_t>(ow) * sp.sw];
              }
            }
          }
        }
        float* orow = on + static_cast<std::int64_t>(oh) * wo;
        for (int ow = 0; ow < wo; ++ow) orow[ow] = row[static_cast<std::size_t>(ow)] + b0;
      }
    }
  });
}

}  // namespace detail

inline Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec) {
  detail::check_conv_args(x, w, bias, spec, "conv2d");
  const Shape& xs = x.shape();
  const int ho = spec.out_h(xs.h);
  const int wo = spec.out_w(xs.w);
  Tensor out = Tensor::zeros(Shape(xs.n, spec.out_channels, ho, wo));
  detail::conv2d_forward_kernel(x.data(), w.data(), bias == nullptr ? nullptr : bias->data(), out.data(), xs,
                                spec, ho, wo);
  out.check_finite("conv2d");

  const bool rec = bias == nullptr ? detail::should_record(tape, {&x, &w})
                                   : detail::should_record(tape, {&x, &w, bias});
  if (rec) {
    out.ensure_grad();
    Tensor xv = x, wv = w, ov = out;
    Tensor bv = bias == nullptr ? Tensor() : *bias;
    const bool has_bias = bias != nullptr;
    const ConvSpec sp = spec;
    tape->record("conv2d", [xv, wv, bv, ov, sp, has_bias, ho, wo]() mutable {
      const Shape& xs = xv.shape();
      const float* g = ov.grad();
      const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;
      const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;
      const std::int64_t wk = static_cast<std::int64_t>(sp.kh) * sp.kw;

      if (has_bias && bv.tracked()) {
        bv.ensure_grad();
        float* gb = bv.grad();
        for (int n = 0; n < xs.n; ++n)
          for (int co = 0; co < sp.out_channels; ++co) {
            const float* gp = g + (static_cast<std::int64_t>(n) * sp.out_channels + co) * out_plane;
            float acc = 0.0f;
            for (std::int64_t i = 0; i < out_plane; ++i) acc += gp[i];
            gb[co] += acc;
          }
      }

      if (wv.tracked()) {
        wv.ensure_grad();
        float* gw = wv.grad();
        const float* xd = xv.data();
        parallel_for(sp.out_channels, [&](std::int64_t b, std::int64_t e) {
          for (std::int64_t co = b; co < e; ++co) {
            for (int ci = 0; ci < xs.c; ++ci)
              for (int kh = 0; kh < sp.kh; ++kh)
                for (int kw = 0; kw < sp.kw; ++kw) {
                  float acc = 0.0f;
                  for (int n = 0; n < xs.n; ++n) {
                    const float* gp = g + (static_cast<std::int64_t>(n) * sp.out_channels + co) * out_plane;
                    const float* xc = xd + (static_cast<std::int64_t>(n) * xs.c + ci) * in_plane;
                    for (int oh = 0; oh < ho; ++oh) {
                      const int ih = oh * sp.sh - sp.ph + kh * sp.dh;
                      if (ih < 0 || ih >= xs.h) continue;
                      const int off = kw * sp.dw - sp.pw;
                      int lo, hi;
                      detail::valid_out_range(off, sp.sw, xs.w, wo, lo, hi);
                      const float* grow = gp + static_cast<std::int64_t>(oh) * wo;
                      const float* xrow = xc + static_cast<std::int64_t>(ih) * xs.w + off;
                      if (sp.sw == 1) {
                        for (int ow = lo; ow <= hi; ++ow) acc += grow[ow] * xrow[ow];
                      } else {
                        for (int ow = lo; ow <= hi; ++ow) acc += grow[ow] * xrow[static_cast<std::int64_t>(ow) * sp.sw];
                      }
                    }
                  }
                  gw[(static_cast<std::int64_t>(co) * xs.c + ci) * wk + static_cast<std::int64_t>(kh) * sp.kw + kw] += acc;
                }
          }
        });
      }

      if (xv.tracked()) {
        xv.ensure_grad();
        float* gx = xv.grad();
        const float* wd = wv.data();
        parallel_for(static_cast<std::int64_t>(xs.n) * xs.c, [&](std::int64_t b, std::int64_t e) {
          for (std::int64_t nc = b; nc < e; ++nc) {
            const int n = static_cast<int>(nc / xs.c);
            const int ci = static_cast<int>(nc % xs.c);
            float* gc = gx + (static_cast<std::int64_t>(n) * xs.c + ci) * in_plane;
            for (int co = 0; co < sp.out_channels; ++co) {
              const float* gp = g + (static_cast<std::int64_t>(n) * sp.out_channels + co) * out_plane;
              const float* wc = wd + (static_cast<std::int64_t>(co) * xs.c + ci) * wk;
              for (int kh = 0; kh < sp.kh; ++kh)
                for (int kw = 0; kw < sp.kw; ++kw) {
                  const float wval = wc[static_cast<std::int64_t>(kh) * sp.kw + kw];
                  if (wval == 0.0f) continue;
                  // ih = oh*sh - ph + kh*dh  =>  scatter g*w onto the input grid
                  for (int oh = 0; oh < ho; ++oh) {
                    const int ih = oh * sp.sh - sp.ph + kh * sp.dh;
                    if (ih < 0 || ih >= xs.h) continue;
                    const int off = kw * sp.dw - sp.pw;
                    int lo, hi;
                    detail::valid_out_range(off, sp.sw, xs.w, wo, lo, hi);
                    const float* grow = gp + static_cast<std::int64_t>(oh) * wo;
                    float* xrow = gc + static_cast<std::int64_t>(ih) * xs.w + off;
                    if (sp.sw == 1) {
                      for (int ow = lo; ow <= hi; ++ow) xrow[ow] += wval * grow[ow];
                    } else {
                      for (int ow = lo; ow <= hi; ++ow) xrow[static_cast<std::int64_t>(ow) * sp.sw] += wval * grow[ow];
                    }
                  }
                }
            }
          }
        });
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// transpose_conv2d: adjoint of conv2d with the roles of input and output
// swapped. Weight layout is shared with conv2d: (co_conv, ci_conv, kh, kw),
// so here the input carries weight.shape[0] channels and the output
// weight.shape[1]. Geometry is pinned to exact x2 upsampling (s=2, k=2+2p).
// ---------------------------------------------------------------------------

inline Tensor transpose_conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor* bias,
                               const ConvSpec& spec) {
  const Shape& xs = x.shape();
  if (spec.sh != 2 || spec.sw != 2 || spec.kh != 2 + 2 * spec.ph || spec.kw != 2 + 2 * spec.pw) {
    throw ShapeError("transpose_conv2d supports exact x2 upsampling only (stride 2, k = 2 + 2p)");
  }
  if (xs.c != spec.in_channels) {
    throw ShapeError("transpose_conv2d: input has " + std::to_string(xs.c) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (w.shape() != Shape(spec.in_channels, spec.out_channels, spec.kh, spec.kw)) {
    throw ShapeError("transpose_conv2d: weight shape " + w.shape().str() + " does not match spec");
  }
  if (bias != nullptr && bias->shape() != Shape(1, spec.out_channels, 1, 1)) {
    throw ShapeError("transpose_conv2d: bias shape " + bias->shape().str() + " does not match spec");
  }
  const int ho = (xs.h - 1) * spec.sh - 2 * spec.ph + spec.kh;
  const int wo = (xs.w - 1) * spec.sw - 2 * spec.pw + spec.kw;

  Tensor out = Tensor::zeros(Shape(xs.n, spec.out_channels, ho, wo));
  const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;
  const std::int64_t wk = static_cast<std::int64_t>(spec.kh) * spec.kw;
  const float* xd = x.data();
  const float* wd = w.data();
  const float* bd = bias == nullptr ? nullptr : bias->data();
  float* od = out.data();
  const ConvSpec sp = spec;

  // Gather form: output pixel (oh,ow) receives tap (kh,kw) from input pixel
  // ((oh+p-kh)/s, (ow+p-kw)/s) when the division is exact.
  parallel_for(static_cast<std::int64_t>(xs.n) * sp.out_channels, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t nc = b; nc < e; ++nc) {
      const int n = static_cast<int>(nc / sp.out_channels);
      const int co = static_cast<int>(nc % sp.out_channels);
      float* on = od + (static_cast<std::int64_t>(n) * sp.out_channels + co) * out_plane;
      const float b0 = bd == nullptr ? 0.0f : bd[co];
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          float acc = 0.0f;
          for (int ci = 0; ci < xs.c; ++ci) {
            const float* xc = xd + (static_cast<std::int64_t>(n) * xs.c + ci) * in_plane;
            const float* wc = wd + (static_cast<std::int64_t>(ci) * sp.out_channels + co) * wk;
            for (int kh = 0; kh < sp.kh; ++kh) {
              const int th = oh + sp.ph - kh;
              if (th < 0 || th % sp.sh != 0) continue;
              const int ih = th / sp.sh;
              if (ih >= xs.h) continue;
              for (int kw = 0; kw < sp.kw; ++kw) {
                const int tw = ow + sp.pw - kw;
                if (tw < 0 || tw % sp.sw != 0) continue;
                const int iw = tw / sp.sw;
                if (iw >= xs.w) continue;
                acc += wc[static_cast<std::int64_t>(kh) * sp.kw + kw] * xc[static_cast<std::int64_t>(ih) * xs.w + iw];
              }
            }
          }
          on[static_cast<std::int64_t>(oh) * wo + ow] = acc + b0;
        }
    }
  });
  out.check_finite("transpose_conv2d");

  const bool rec = bias == nullptr ? detail::should_record(tape, {&x, &w})
                                   : detail::should_record(tape, {&x, &w, bias});
  if (rec) {
    out.ensure_grad();
    Tensor xv = x, wv = w, ov = out;
    Tensor bv = bias == nullptr ? Tensor() : *bias;
    const bool has_bias = bias != nullptr;
    tape->record("transpose_conv2d", [xv, wv, bv, ov, sp, has_bias, ho, wo]() mutable {
      const Shape& xs = xv.shape();
      const float* g = ov.grad();
      const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;
      const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;
      const std::int64_t wk = static_cast<std::int64_t>(sp.kh) * sp.kw;

      if (has_bias && bv.tracked()) {
        bv.ensure_grad();
        float* gb = bv.grad();
        for (int n = 0; n < xs.n; ++n)
          for (int co = 0; co < sp.out_channels; ++co) {
            const float* gp = g + (static_cast<std::int64_t>(n) * sp.out_channels + co) * out_plane;
            float acc = 0.0f;
            for (std::int64_t i = 0; i < out_plane; ++i) acc += gp[i];
            gb[co] += acc;
          }
      }

      // d/d(input) is a plain strided conv2d gather of the output cotangent.
      if (xv.tracked()) {
        xv.ensure_grad();
        float* gx = xv.grad();
        const float* wd = wv.data();
        for (int n = 0; n < xs.n; ++n)
          for (int ci = 0; ci < xs.c; ++ci) {
            float* gc = gx + (static_cast<std::int64_t>(n) * xs.c + ci) * in_plane;
            for (int ih = 0; ih < xs.h; ++ih)
              for (int iw = 0; iw < xs.w; ++iw) {
                float acc = 0.0f;
                for (int co = 0; co < sp.out_channels; ++co) {
                  const float* gp = g + (static_cast<std::int64_t>(n) * sp.out_channels + co) * out_plane;
                  const float* wc = wv.data() + (static_cast<std::int64_t>(ci) * sp.out_channels + co) * wk;
                  for (int kh = 0; kh < sp.kh; ++kh) {
                    const int oh = ih * sp.sh - sp.ph + kh;
                    if (oh < 0 || oh >= ho) continue;
                    for (int kw = 0; kw < sp.kw; ++kw) {
                      const int ow = iw * sp.sw - sp.pw + kw;
                      if (ow < 0 || ow >= wo) continue;
                      acc += wc[static_cast<std::int64_t>(kh) * sp.kw + kw] * gp[static_cast<std::int64_t>(oh) * wo + ow];
                    }
                  }
                }
                gc[static_cast<std::int64_t>(ih) * xs.w + iw] += acc;
              }
          }
        (void)wd;
      }

      if (wv.tracked()) {
        wv.ensure_grad();
        float* gw = wv.grad();
        const float* xd = xv.data();
        for (int ci = 0; ci < xs.c; ++ci)
          for (int co = 0; co < sp.out_channels; ++co)
            for (int kh = 0; kh < sp.kh; ++kh)
              for (int kw = 0; kw < sp.kw; ++kw) {
                float acc = 0.0f;
                for (int n = 0; n < xs.n; ++n) {
                  const float* xc = xd + (static_cast<std::int64_t>(n) * xs.c + ci) * in_plane;
                  const float* gp = g + (static_cast<std::int64_t>(n) * sp.out_channels + co) * out_plane;
                  for (int ih = 0; ih < xs.h; ++ih) {
                    const int oh = ih * sp.sh - sp.ph + kh;
                    if (oh < 0 || oh >= ho) continue;
                    for (int iw = 0; iw < xs.w; ++iw) {
                      const int ow = iw * sp.sw - sp.pw + kw;
                      if (ow < 0 || ow >= wo) continue;
                      acc += xc[static_cast<std::int64_t>(ih) * xs.w + iw] * gp[static_cast<std::int64_t>(oh) * wo + ow];
                    }
                  }
                }
                gw[(static_cast<std::int64_t>(ci) * sp.out_channels + co) * wk + static_cast<std::int64_t>(kh) * sp.kw + kw] += acc;
              }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise activations.
// ---------------------------------------------------------------------------

inline Tensor leaky_relu(Tape* tape, const Tensor& x, float slope = 0.2f) {
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] >= 0.0f ? px[i] : slope * px[i];
  out.check_finite("leaky_relu");
  if (detail::should_record(tape, {&x})) {
    out.ensure_grad();
    Tensor xv = x, ov = out;
    tape->record("leaky_relu", [xv, ov, slope]() mutable {
      if (!xv.tracked()) return;
      xv.ensure_grad();
      const float* px = xv.data();
      const float* g = ov.grad();
      float* gx = xv.grad();
      const std::int64_t n = xv.numel();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += px[i] >= 0.0f ? g[i] : slope * g[i];
    });
  }
  return out;
}

inline Tensor sigmoid(Tape* tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const float v = px[i];
    // Saturation-safe in both tails.
    po[i] = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
  }
  out.check_finite("sigmoid");
  if (detail::should_record(tape, {&x})) {
    out.ensure_grad();
    Tensor xv = x, ov = out;
    tape->record("sigmoid", [xv, ov]() mutable {
      if (!xv.tracked()) return;
      xv.ensure_grad();
      const float* y = ov.data();
      const float* g = ov.grad();
      float* gx = xv.grad();
      const std::int64_t n = xv.numel();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (1.0f - y[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions used by the AMB rescaling path.
// ---------------------------------------------------------------------------

inline Tensor adaptive_avg_pool_global(Tape* tape, const Tensor& x) {
  const Shape& s = x.shape();
  if (s.h < 1 || s.w < 1) throw ShapeError("adaptive_avg_pool_global on empty spatial extent");
  Tensor out = Tensor::zeros(Shape(s.n, s.c, 1, 1));
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  const float inv = 1.0f / static_cast<float>(plane);
  const float* px = x.data();
  float* po = out.data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const float* p = px + (static_cast<std::int64_t>(n) * s.c + c) * plane;
      double acc = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      po[static_cast<std::int64_t>(n) * s.c + c] = static_cast<float>(acc) * inv;
    }
  out.check_finite("adaptive_avg_pool_global");
  if (detail::should_record(tape, {&x})) {
    out.ensure_grad();
    Tensor xv = x, ov = out;
    tape->record("adaptive_avg_pool_global", [xv, ov, plane, inv]() mutable {
      if (!xv.tracked()) return;
      xv.ensure_grad();
      const Shape& s = xv.shape();
      const float* g = ov.grad();
      float* gx = xv.grad();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const float gv = g[static_cast<std::int64_t>(n) * s.c + c] * inv;
          float* p = gx + (static_cast<std::int64_t>(n) * s.c + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) p[i] += gv;
        }
    });
  }
  return out;
}

inline Tensor channel_mean(Tape* tape, const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c < 1) throw ShapeError("channel_mean on zero channels");
  Tensor out = Tensor::zeros(Shape(s.n, 1, s.h, s.w));
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  const float inv = 1.0f / static_cast<float>(s.c);
  const float* px = x.data();
  float* po = out.data();
  for (int n = 0; n < s.n; ++n) {
    float* on = po + static_cast<std::int64_t>(n) * plane;
    for (int c = 0; c < s.c; ++c) {
      const float* p = px + (static_cast<std::int64_t>(n) * s.c + c) * plane;
      if (c == 0) {
        for (std::int64_t i = 0; i < plane; ++i) on[i] = p[i];
      } else {
        for (std::int64_t i = 0; i < plane; ++i) on[i] += p[i];
      }
    }
    for (std::int64_t i = 0; i < plane; ++i) on[i] *= inv;
  }
  out.check_finite("channel_mean");
  if (detail::should_record(tape, {&x})) {
    out.ensure_grad();
    Tensor xv = x, ov = out;
    tape->record("channel_mean", [xv, ov, plane, inv]() mutable {
      if (!xv.tracked()) return;
      xv.ensure_grad();
      const Shape& s = xv.shape();
      const float* g = ov.grad();
      float* gx = xv.grad();
      for (int n = 0; n < s.n; ++n) {
        const float* gn = g + static_cast<std::int64_t>(n) * plane;
        for (int c = 0; c < s.c; ++c) {
          float* p = gx + (static_cast<std::int64_t>(n) * s.c + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) p[i] += gn[i] * inv;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear: per-batch affine map on (N, C, 1, 1) vectors. Weight is stored as
// (c_out, c_in, 1, 1), bias as (1, c_out, 1, 1).
// ---------------------------------------------------------------------------

inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor* bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.h != 1 || xs.w != 1) throw ShapeError("linear expects (N,C,1,1) input, got " + xs.str());
  if (ws.h != 1 || ws.w != 1 || ws.c != xs.c) {
    throw ShapeError("linear weight " + ws.str() + " does not match input " + xs.str());
  }
  if (bias != nullptr && bias->shape() != Shape(1, ws.n, 1, 1)) {
    throw ShapeError("linear bias shape " + bias->shape().str() + " does not match weight");
  }
  Tensor out = Tensor::zeros(Shape(xs.n, ws.n, 1, 1));
  const float* px = x.data();
  const float* pw = w.data();
  const float* pb = bias == nullptr ? nullptr : bias->data();
  float* po = out.data();
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o) {
      float acc = 0.0f;
      const float* wrow = pw + static_cast<std::int64_t>(o) * ws.c;
      const float* xrow = px + static_cast<std::int64_t>(n) * xs.c;
      for (int i = 0; i < ws.c; ++i) acc += wrow[i] * xrow[i];
      po[static_cast<std::int64_t>(n) * ws.n + o] = acc + (pb == nullptr ? 0.0f : pb[o]);
    }
  out.check_finite("linear");

  const bool rec = bias == nullptr ? detail::should_record(tape, {&x, &w})
                                   : detail::should_record(tape, {&x, &w, bias});
  if (rec) {
    out.ensure_grad();
    Tensor xv = x, wv = w, ov = out;
    Tensor bv = bias == nullptr ? Tensor() : *bias;
    const bool has_bias = bias != nullptr;
    tape->record("linear", [xv, wv, bv, ov, has_bias]() mutable {
      const Shape& xs = xv.shape();
      const int co = wv.shape().n;
      const float* g = ov.grad();
      if (has_bias && bv.tracked()) {
        bv.ensure_grad();
        float* gb = bv.grad();
        for (int n = 0; n < xs.n; ++n)
          for (int o = 0; o < co; ++o) gb[o] += g[static_cast<std::int64_t>(n) * co + o];
      }
      if (wv.tracked()) {
        wv.ensure_grad();
        float* gw = wv.grad();
        const float* px = xv.data();
        for (int n = 0; n < xs.n; ++n)
          for (int o = 0; o < co; ++o) {
            const float gv = g[static_cast<std::int64_t>(n) * co + o];
            float* wrow = gw + static_cast<std::int64_t>(o) * xs.c;
            const float* xrow = px + static_cast<std::int64_t>(n) * xs.c;
            for (int i = 0; i < xs.c; ++i) wrow[i] += gv * xrow[i];
          }
      }
      if (xv.tracked()) {
        xv.ensure_grad();
        float* gx = xv.grad();
        const float* pw = wv.data();
        for (int n = 0; n < xs.n; ++n)
          for (int o = 0; o < co; ++o) {
            const float gv = g[static_cast<std::int64_t>(n) * co + o];
            const float* wrow = pw + static_cast<std::int64_t>(o) * xs.c;
            float* xrow = gx + static_cast<std::int64_t>(n) * xs.c;
            for (int i = 0; i < xs.c; ++i) xrow[i] += gv * wrow[i];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear sampling at fractional positions with zero padding outside the
// image. px is the horizontal (width) coordinate, py the vertical (height)
// one. Neighbours outside the image contribute zero, to both the value and
// every adjoint.
// ---------------------------------------------------------------------------

namespace detail {

struct BilinearCell {
  int x0, y0;
  float lx, ly;  // fractional parts
};

inline BilinearCell bilinear_cell(float px, float py) {
  const float fx = std::floor(px);
  const float fy = std::floor(py);
  return BilinearCell{static_cast<int>(fx), static_cast<int>(fy), px - fx, py - fy};
}

inline float plane_read(const float* plane, int H, int W, int y, int x) {
  return (y < 0 || y >= H || x < 0 || x >= W) ? 0.0f : plane[static_cast<std::int64_t>(y) * W + x];
}

inline float bilinear_read(const float* plane, int H, int W, float px, float py) {
  if (py <= -1.0f || py >= static_cast<float>(H) || px <= -1.0f || px >= static_cast<float>(W)) return 0.0f;
  const BilinearCell c = bilinear_cell(px, py);
  const float v00 = plane_read(plane, H, W, c.y0, c.x0);
  const float v01 = plane_read(plane, H, W, c.y0, c.x0 + 1);
  const float v10 = plane_read(plane, H, W, c.y0 + 1, c.x0);
  const float v11 = plane_read(plane, H, W, c.y0 + 1, c.x0 + 1);
  // Nested lerps: exact at integer positions and an exact partition of
  // unity on constant in-bounds neighbourhoods.
  const float top = v00 + c.lx * (v01 - v00);
  const float bot = v10 + c.lx * (v11 - v10);
  return top + c.ly * (bot - top);
}

inline void bilinear_scatter(float* plane, int H, int W, float px, float py, float g) {
  if (py <= -1.0f || py >= static_cast<float>(H) || px <= -1.0f || px >= static_cast<float>(W)) return;
  const BilinearCell c = bilinear_cell(px, py);
  const auto put = [&](int y, int x, float w) {
    if (y >= 0 && y < H && x >= 0 && x < W) plane[static_cast<std::int64_t>(y) * W + x] += g * w;
  };
  put(c.y0, c.x0, (1.0f - c.ly) * (1.0f - c.lx));
  put(c.y0, c.x0 + 1, (1.0f - c.ly) * c.lx);
  put(c.y0 + 1, c.x0, c.ly * (1.0f - c.lx));
  put(c.y0 + 1, c.x0 + 1, c.ly * c.lx);
}

inline void bilinear_coord_grad(const float* plane, int H, int W, float px, float py, float& d_px,
                                float& d_py) {
  d_px = 0.0f;
  d_py = 0.0f;
  if (py <= -1.0f || py >= static_cast<float>(H) || px <= -1.0f || px >= static_cast<float>(W)) return;
  const BilinearCell c = bilinear_cell(px, py);
  const float v00 = plane_read(plane, H, W, c.y0, c.x0);
  const float v01 = plane_read(plane, H, W, c.y0, c.x0 + 1);
  const float v10 = plane_read(plane, H, W, c.y0 + 1, c.x0);
  const float v11 = plane_read(plane, H, W, c.y0 + 1, c.x0 + 1);
  d_px = (1.0f - c.ly) * (v01 - v00) + c.ly * (v11 - v10);
  d_py = (1.0f - c.lx) * (v10 - v00) + c.lx * (v11 - v01);
}

}  // namespace detail

inline float bilinear_sample(const Tensor& x, int n, int c, float px, float py) {
  const Shape& s = x.shape();
  const float* plane = x.data() + (static_cast<std::int64_t>(n) * s.c + c) * s.h * s.w;
  return detail::bilinear_read(plane, s.h, s.w, px, py);
}

// Differentiable single-point sampler; pos is a (1,2,1,1) tensor holding
// (px, py). Mostly exercised by the gradient checker.
inline Tensor sample_point(Tape* tape, const Tensor& x, const Tensor& pos, int n, int c) {
  if (pos.shape() != Shape(1, 2, 1, 1)) throw ShapeError("sample_point expects a (1,2,1,1) position");
  const float px = pos.data()[0];
  const float py = pos.data()[1];
  Tensor out = Tensor::constant(Shape(1, 1, 1, 1), bilinear_sample(x, n, c, px, py));
  if (detail::should_record(tape, {&x, &pos})) {
    out.ensure_grad();
    Tensor xv = x, pv = pos, ov = out;
    tape->record("sample_point", [xv, pv, ov, n, c, px, py]() mutable {
      const Shape& s = xv.shape();
      const float g = ov.grad()[0];
      if (xv.tracked()) {
        xv.ensure_grad();
        float* plane = xv.grad() + (static_cast<std::int64_t>(n) * s.c + c) * s.h * s.w;
        detail::bilinear_scatter(plane, s.h, s.w, px, py, g);
      }
      if (pv.tracked()) {
        pv.ensure_grad();
        const float* plane = xv.data() + (static_cast<std::int64_t>(n) * s.c + c) * s.h * s.w;
        float dpx, dpy;
        detail::bilinear_coord_grad(plane, s.h, s.w, px, py, dpx, dpy);
        pv.grad()[0] += g * dpx;
        pv.grad()[1] += g * dpy;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Modulated deformable convolution. Offsets hold (dx_j, dy_j) pairs
// interleaved per tap ([dx_1, dy_1, ..., dx_K, dy_K] across 2K channels, x
// horizontal); mask holds the K per-tap modulation weights, already mapped
// into [0,1]. Stride is fixed to 1; K must equal kh*kw.
// ---------------------------------------------------------------------------

struct DeformField {
  Tensor offsets;  // (N, 2K, Ho, Wo)
  Tensor mask;     // (N, K, Ho, Wo)
};

inline Tensor modulated_deform_conv(Tape* tape, const Tensor& x, const DeformField& field, const Tensor& w,
                                    const Tensor* bias, const ConvSpec& spec) {
  detail::check_conv_args(x, w, bias, spec, "modulated_deform_conv");
  if (spec.sh != 1 || spec.sw != 1) {
    throw ShapeError("modulated_deform_conv supports stride 1 only");
  }
  const Shape& xs = x.shape();
  const int ho = spec.out_h(xs.h);
  const int wo = spec.out_w(xs.w);
  const int K = spec.kh * spec.kw;
  if (field.offsets.shape() != Shape(xs.n, 2 * K, ho, wo)) {
    throw ShapeError("deform offsets shape " + field.offsets.shape().str() + " does not match output (" +
                     std::to_string(2 * K) + " channels expected)");
  }
  if (field.mask.shape() != Shape(xs.n, K, ho, wo)) {
    throw ShapeError("deform mask shape " + field.mask.shape().str() + " does not match output");
  }

  Tensor out = Tensor::zeros(Shape(xs.n, spec.out_channels, ho, wo));
  const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;
  const float* xd = x.data();
  const float* od = field.offsets.data();
  const float* md = field.mask.data();
  const float* wd = w.data();
  const float* bd = bias == nullptr ? nullptr : bias->data();
  float* yd = out.data();
  const ConvSpec sp = spec;

  parallel_for(xs.n, [&](std::int64_t nb, std::int64_t ne) {
    // Per-pixel column of modulated samples, laid out (ci, j) to match the
    // (ci, kh, kw) accumulation order of conv2d.
    std::vector<float> column(static_cast<std::size_t>(xs.c) * K);
    for (std::int64_t n = nb; n < ne; ++n) {
      const float* xn = xd + n * xs.c * in_plane;
      const float* on = od + n * (2 * static_cast<std::int64_t>(K)) * out_plane;
      const float* mn = md + n * static_cast<std::int64_t>(K) * out_plane;
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          const std::int64_t pix = static_cast<std::int64_t>(oh) * wo + ow;
          for (int kh = 0; kh < sp.kh; ++kh)
            for (int kw = 0; kw < sp.kw; ++kw) {
              const int j = kh * sp.kw + kw;
              const float dx = on[(2 * j) * out_plane + pix];
              const float dy = on[(2 * j + 1) * out_plane + pix];
              const float m = mn[j * out_plane + pix];
              const float px = static_cast<float>(ow - sp.pw + kw * sp.dw) + dx;
              const float py = static_cast<float>(oh - sp.ph + kh * sp.dh) + dy;
              for (int ci = 0; ci < xs.c; ++ci) {
                const float v = detail::bilinear_read(xn + ci * in_plane, xs.h, xs.w, px, py);
                column[static_cast<std::size_t>(ci) * K + j] = v * m;
              }
            }
          for (int co = 0; co < sp.out_channels; ++co) {
            const float* wrow = wd + static_cast<std::int64_t>(co) * xs.c * K;
            float acc = 0.0f;
            for (std::size_t i = 0; i < column.size(); ++i) acc += wrow[i] * column[i];
            yd[(n * sp.out_channels + co) * out_plane + pix] = acc + (bd == nullptr ? 0.0f : bd[co]);
          }
        }
    }
  });
  out.check_finite("modulated_deform_conv");

  const bool rec =
      tape != nullptr && (x.tracked() || field.offsets.tracked() || field.mask.tracked() || w.tracked() ||
                          (bias != nullptr && bias->tracked()));
  if (rec) {
    out.ensure_grad();
    Tensor xv = x, offv = field.offsets, mv = field.mask, wv = w, ov = out;
    Tensor bv = bias == nullptr ? Tensor() : *bias;
    const bool has_bias = bias != nullptr;
    tape->record("modulated_deform_conv", [xv, offv, mv, wv, bv, ov, sp, has_bias, ho, wo, K]() mutable {
      const Shape& xs = xv.shape();
      const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;
      const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;
      const float* g = ov.grad();
      const float* xd = xv.data();
      const float* on = offv.data();
      const float* mn = mv.data();
      const float* wd = wv.data();

      const bool want_x = xv.tracked();
      const bool want_off = offv.tracked();
      const bool want_m = mv.tracked();
      const bool want_w = wv.tracked();
      const bool want_b = has_bias && bv.tracked();
      if (want_x) xv.ensure_grad();
      if (want_off) offv.ensure_grad();
      if (want_m) mv.ensure_grad();
      if (want_w) wv.ensure_grad();
      if (want_b) bv.ensure_grad();

      std::vector<float> upstream(static_cast<std::size_t>(xs.c));  // sum_co g*w per (ci) at one tap
      for (int n = 0; n < xs.n; ++n) {
        const float* xb = xd + static_cast<std::int64_t>(n) * xs.c * in_plane;
        const float* ob = on + static_cast<std::int64_t>(n) * 2 * K * out_plane;
        const float* mb = mn + static_cast<std::int64_t>(n) * K * out_plane;
        const float* gb = g + static_cast<std::int64_t>(n) * sp.out_channels * out_plane;
        for (int oh = 0; oh < ho; ++oh)
          for (int ow = 0; ow < wo; ++ow) {
            const std::int64_t pix = static_cast<std::int64_t>(oh) * wo + ow;
            if (want_b) {
              float* gbias = bv.grad();
              for (int co = 0; co < sp.out_channels; ++co) gbias[co] += gb[co * out_plane + pix];
            }
            for (int kh = 0; kh < sp.kh; ++kh)
              for (int kw = 0; kw < sp.kw; ++kw) {
                const int j = kh * sp.kw + kw;
                const float dx = ob[(2 * j) * out_plane + pix];
                const float dy = ob[(2 * j + 1) * out_plane + pix];
                const float m = mb[j * out_plane + pix];
                const float px = static_cast<float>(ow - sp.pw + kw * sp.dw) + dx;
                const float py = static_cast<float>(oh - sp.ph + kh * sp.dh) + dy;

                for (int ci = 0; ci < xs.c; ++ci) {
                  float a = 0.0f;
                  for (int co = 0; co < sp.out_channels; ++co) {
                    a += gb[co * out_plane + pix] * wd[(static_cast<std::int64_t>(co) * xs.c + ci) * K + j];
                  }
                  upstream[static_cast<std::size_t>(ci)] = a;
                }

                float gm = 0.0f;
                float gpx = 0.0f, gpy = 0.0f;
                for (int ci = 0; ci < xs.c; ++ci) {
                  const float* plane = xb + static_cast<std::int64_t>(ci) * in_plane;
                  const float a = upstream[static_cast<std::size_t>(ci)];
                  if (want_w || want_m) {
                    const float v = detail::bilinear_read(plane, xs.h, xs.w, px, py);
                    if (want_m) gm += a * v;
                    if (want_w) {
                      const float vm = v * m;
                      float* gw = wv.grad();
                      for (int co = 0; co < sp.out_channels; ++co) {
                        gw[(static_cast<std::int64_t>(co) * xs.c + ci) * K + j] += gb[co * out_plane + pix] * vm;
                      }
                    }
                  }
                  if (want_x) {
                    float* gplane = xv.grad() + ((static_cast<std::int64_t>(n) * xs.c) + ci) * in_plane;
                    detail::bilinear_scatter(gplane, xs.h, xs.w, px, py, a * m);
                  }
                  if (want_off) {
                    float dvx, dvy;
                    detail::bilinear_coord_grad(plane, xs.h, xs.w, px, py, dvx, dvy);
                    gpx += a * m * dvx;
                    gpy += a * m * dvy;
                  }
                }
                if (want_m) mv.grad()[static_cast<std::int64_t>(n) * K * out_plane + j * out_plane + pix] += gm;
                if (want_off) {
                  float* goff = offv.grad() + static_cast<std::int64_t>(n) * 2 * K * out_plane;
                  goff[(2 * j) * out_plane + pix] += gpx;
                  goff[(2 * j + 1) * out_plane + pix] += gpy;
                }
              }
          }
      }
    });
  }
  return out;
}

}  // namespace msanet
