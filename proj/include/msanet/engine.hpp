// SPDX-License-Identifier: Apache-2.0
//
// Two interchangeable evaluation engines over the same network topology.
// FloatEngine is the production float32 path, recording on a tape for
// reverse mode. RefEngine is a forward-only double-precision shadow; the
// gradient checker differentiates it numerically so the comparison is not
// drowned by float32 rounding noise. Layers and blocks are written once,
// generically over the engine.
#pragma once

#include <cmath>
#include <vector>

#include "msanet/ops.hpp"

namespace msanet {

struct RefTensor;
inline const Shape& shape_of(const Tensor& t) { return t.shape(); }
const Shape& shape_of(const RefTensor& t);

// Defined with the training objective; declared here so the engines can
// expose it uniformly.
Tensor loss_lp(Tape* tape, const Tensor& target, const Tensor& prediction, int p);

struct FloatEngine {
  using T = Tensor;
  Tape* tape = nullptr;

  const Tensor& param(const Tensor& t) const { return t; }

  T add(const T& a, const T& b) const { return msanet::add(tape, a, b); }
  T sub(const T& a, const T& b) const { return msanet::sub(tape, a, b); }
  T mul(const T& a, const T& b) const { return msanet::mul(tape, a, b); }
  T scale(const T& a, float s) const { return msanet::scale(tape, a, s); }
  T concat_channels(const std::vector<T>& parts) const { return msanet::concat_channels(tape, parts); }
  T slice_channels(const T& x, int c0, int count) const { return msanet::slice_channels(tape, x, c0, count); }
  T leaky_relu(const T& x, float slope = 0.2f) const { return msanet::leaky_relu(tape, x, slope); }
  T sigmoid(const T& x) const { return msanet::sigmoid(tape, x); }
  T adaptive_avg_pool_global(const T& x) const { return msanet::adaptive_avg_pool_global(tape, x); }
  T channel_mean(const T& x) const { return msanet::channel_mean(tape, x); }
  T linear(const T& x, const Tensor& w, const Tensor& b) const { return msanet::linear(tape, x, w, &b); }
  T conv2d(const T& x, const Tensor& w, const Tensor& b, const ConvSpec& sp) const {
    return msanet::conv2d(tape, x, w, &b, sp);
  }
  T transpose_conv2d(const T& x, const Tensor& w, const Tensor& b, const ConvSpec& sp) const {
    return msanet::transpose_conv2d(tape, x, w, &b, sp);
  }
  T deform_conv(const T& x, const T& offsets, const T& mask, const Tensor& w, const Tensor& b,
                const ConvSpec& sp) const {
    return msanet::modulated_deform_conv(tape, x, DeformField{offsets, mask}, w, &b, sp);
  }
  T loss_lp(const T& target, const T& pred, int p) const { return msanet::loss_lp(tape, target, pred, p); }
  T sample_point(const T& x, const T& pos, int n, int c) const {
    return msanet::sample_point(tape, x, pos, n, c);
  }
};

// ---------------------------------------------------------------------------
// Double-precision shadow.
// ---------------------------------------------------------------------------

struct RefTensor {
  Shape shape;
  std::vector<double> v;

  double at(int n, int c, int h, int w) const {
    return v[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape.c + c) * shape.h + h) * shape.w + w)];
  }
  double& at(int n, int c, int h, int w) {
    return v[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape.c + c) * shape.h + h) * shape.w + w)];
  }
};

inline const Shape& shape_of(const RefTensor& t) { return t.shape; }

struct RefEngine {
  using T = RefTensor;

  static T from_float(const Tensor& t) {
    T out;
    out.shape = t.shape();
    out.v.assign(t.values().begin(), t.values().end());
    return out;
  }

  T param(const Tensor& t) const { return from_float(t); }

  T add(const T& a, const T& b) const { return binary(a, b, [](double x, double y) { return x + y; }); }
  T sub(const T& a, const T& b) const { return binary(a, b, [](double x, double y) { return x - y; }); }
  T mul(const T& a, const T& b) const { return binary(a, b, [](double x, double y) { return x * y; }); }

  T scale(const T& a, float s) const {
    T out = a;
    for (double& x : out.v) x *= s;
    return out;
  }

  T concat_channels(const std::vector<T>& parts) const {
    const Shape& s0 = parts.front().shape;
    int c_total = 0;
    for (const T& p : parts) c_total += p.shape.c;
    T out;
    out.shape = Shape(s0.n, c_total, s0.h, s0.w);
    out.v.resize(static_cast<std::size_t>(out.shape.numel()));
    const std::int64_t plane = static_cast<std::int64_t>(s0.h) * s0.w;
    for (int n = 0; n < s0.n; ++n) {
      std::int64_t dst_c = 0;
      for (const T& p : parts) {
        for (int c = 0; c < p.shape.c; ++c)
          for (std::int64_t i = 0; i < plane; ++i)
            out.v[static_cast<std::size_t>(((n * c_total) + dst_c + c) * plane + i)] =
                p.v[static_cast<std::size_t>(((n * p.shape.c) + c) * plane + i)];
        dst_c += p.shape.c;
      }
    }
    return out;
  }

  T slice_channels(const T& x, int c0, int count) const {
    T out;
    out.shape = Shape(x.shape.n, count, x.shape.h, x.shape.w);
    out.v.resize(static_cast<std::size_t>(out.shape.numel()));
    const std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
    for (int n = 0; n < x.shape.n; ++n)
      for (int c = 0; c < count; ++c)
        for (std::int64_t i = 0; i < plane; ++i)
          out.v[static_cast<std::size_t>(((n * count) + c) * plane + i)] =
              x.v[static_cast<std::size_t>(((n * x.shape.c) + c0 + c) * plane + i)];
    return out;
  }

  T leaky_relu(const T& x, double slope = 0.2) const {
    T out = x;
    for (double& v : out.v) v = v >= 0.0 ? v : slope * v;
    return out;
  }

  T sigmoid(const T& x) const {
    T out = x;
    for (double& v : out.v) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    return out;
  }

  T adaptive_avg_pool_global(const T& x) const {
    T out;
    out.shape = Shape(x.shape.n, x.shape.c, 1, 1);
    out.v.assign(static_cast<std::size_t>(out.shape.numel()), 0.0);
    const std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
    for (int n = 0; n < x.shape.n; ++n)
      for (int c = 0; c < x.shape.c; ++c) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) acc += x.v[static_cast<std::size_t>((n * x.shape.c + c) * plane + i)];
        out.v[static_cast<std::size_t>(n * x.shape.c + c)] = acc / static_cast<double>(plane);
      }
    return out;
  }

  T channel_mean(const T& x) const {
    T out;
    out.shape = Shape(x.shape.n, 1, x.shape.h, x.shape.w);
    out.v.assign(static_cast<std::size_t>(out.shape.numel()), 0.0);
    const std::int64_t plane = static_cast<std::int64_t>(x.shape.h) * x.shape.w;
    for (int n = 0; n < x.shape.n; ++n)
      for (std::int64_t i = 0; i < plane; ++i) {
        double acc = 0.0;
        for (int c = 0; c < x.shape.c; ++c) acc += x.v[static_cast<std::size_t>((n * x.shape.c + c) * plane + i)];
        out.v[static_cast<std::size_t>(n * plane + i)] = acc / x.shape.c;
      }
    return out;
  }

  T linear(const T& x, const Tensor& w, const Tensor& b) const {
    const int cout = w.shape().n;
    const int cin = w.shape().c;
    T out;
    out.shape = Shape(x.shape.n, cout, 1, 1);
    out.v.resize(static_cast<std::size_t>(out.shape.numel()));
    for (int n = 0; n < x.shape.n; ++n)
      for (int o = 0; o < cout; ++o) {
        double acc = b.at(0, o, 0, 0);
        for (int i = 0; i < cin; ++i)
          acc += static_cast<double>(w.at(o, i, 0, 0)) * x.v[static_cast<std::size_t>(n * cin + i)];
        out.v[static_cast<std::size_t>(n * cout + o)] = acc;
      }
    return out;
  }

  T conv2d(const T& x, const Tensor& w, const Tensor& b, const ConvSpec& sp) const {
    const Shape& xs = x.shape;
    const int ho = sp.out_h(xs.h);
    const int wo = sp.out_w(xs.w);
    T out;
    out.shape = Shape(xs.n, sp.out_channels, ho, wo);
    out.v.resize(static_cast<std::size_t>(out.shape.numel()));
    for (int n = 0; n < xs.n; ++n)
      for (int co = 0; co < sp.out_channels; ++co)
        for (int oh = 0; oh < ho; ++oh)
          for (int ow = 0; ow < wo; ++ow) {
            double acc = b.at(0, co, 0, 0);
            for (int ci = 0; ci < xs.c; ++ci)
              for (int kh = 0; kh < sp.kh; ++kh)
                for (int kw = 0; kw < sp.kw; ++kw) {
                  const int ih = oh * sp.sh - sp.ph + kh * sp.dh;
                  const int iw = ow * sp.sw - sp.pw + kw * sp.dw;
                  if (ih < 0 || ih >= xs.h || iw < 0 || iw >= xs.w) continue;
                  acc += static_cast<double>(w.at(co, ci, kh, kw)) * x.at(n, ci, ih, iw);
                }
            out.at(n, co, oh, ow) = acc;
          }
    return out;
  }

  T transpose_conv2d(const T& x, const Tensor& w, const Tensor& b, const ConvSpec& sp) const {
    const Shape& xs = x.shape;
    const int ho = (xs.h - 1) * sp.sh - 2 * sp.ph + sp.kh;
    const int wo = (xs.w - 1) * sp.sw - 2 * sp.pw + sp.kw;
    T out;
    out.shape = Shape(xs.n, sp.out_channels, ho, wo);
    out.v.assign(static_cast<std::size_t>(out.shape.numel()), 0.0);
    for (int n = 0; n < xs.n; ++n)
      for (int co = 0; co < sp.out_channels; ++co)
        for (int oh = 0; oh < ho; ++oh)
          for (int ow = 0; ow < wo; ++ow) {
            double acc = b.at(0, co, 0, 0);
            for (int ci = 0; ci < xs.c; ++ci)
              for (int kh = 0; kh < sp.kh; ++kh) {
                const int th = oh + sp.ph - kh;
                if (th < 0 || th % sp.sh != 0 || th / sp.sh >= xs.h) continue;
                for (int kw = 0; kw < sp.kw; ++kw) {
                  const int tw = ow + sp.pw - kw;
                  if (tw < 0 || tw % sp.sw != 0 || tw / sp.sw >= xs.w) continue;
                  acc += static_cast<double>(w.at(ci, co, kh, kw)) * x.at(n, ci, th / sp.sh, tw / sp.sw);
                }
              }
            out.at(n, co, oh, ow) = acc;
          }
    return out;
  }

  static double bilinear(const T& x, int n, int c, double px, double py) {
    const int H = x.shape.h, W = x.shape.w;
    if (py <= -1.0 || py >= H || px <= -1.0 || px >= W) return 0.0;
    const int x0 = static_cast<int>(std::floor(px));
    const int y0 = static_cast<int>(std::floor(py));
    const double lx = px - x0, ly = py - y0;
    const auto read = [&](int y, int xx) {
      return (y < 0 || y >= H || xx < 0 || xx >= W) ? 0.0 : x.at(n, c, y, xx);
    };
    const double top = read(y0, x0) * (1.0 - lx) + read(y0, x0 + 1) * lx;
    const double bot = read(y0 + 1, x0) * (1.0 - lx) + read(y0 + 1, x0 + 1) * lx;
    return top * (1.0 - ly) + bot * ly;
  }

  T deform_conv(const T& x, const T& offsets, const T& mask, const Tensor& w, const Tensor& b,
                const ConvSpec& sp) const {
    const Shape& xs = x.shape;
    const int ho = sp.out_h(xs.h);
    const int wo = sp.out_w(xs.w);
    T out;
    out.shape = Shape(xs.n, sp.out_channels, ho, wo);
    out.v.resize(static_cast<std::size_t>(out.shape.numel()));
    for (int n = 0; n < xs.n; ++n)
      for (int co = 0; co < sp.out_channels; ++co)
        for (int oh = 0; oh < ho; ++oh)
          for (int ow = 0; ow < wo; ++ow) {
            double acc = b.at(0, co, 0, 0);
            for (int kh = 0; kh < sp.kh; ++kh)
              for (int kw = 0; kw < sp.kw; ++kw) {
                const int j = kh * sp.kw + kw;
                const double px = ow - sp.pw + kw * sp.dw + offsets.at(n, 2 * j, oh, ow);
                const double py = oh - sp.ph + kh * sp.dh + offsets.at(n, 2 * j + 1, oh, ow);
                const double m = mask.at(n, j, oh, ow);
                for (int ci = 0; ci < xs.c; ++ci) {
                  acc += static_cast<double>(w.at(co, ci, kh, kw)) * bilinear(x, n, ci, px, py) * m;
                }
              }
            out.at(n, co, oh, ow) = acc;
          }
    return out;
  }

  T loss_lp(const T& target, const T& pred, int p) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
      const double d = target.v[i] - pred.v[i];
      acc += p == 2 ? d * d : std::fabs(d);
    }
    T out;
    out.shape = Shape(1, 1, 1, 1);
    out.v = {acc / static_cast<double>(pred.v.size())};
    return out;
  }

  T sample_point(const T& x, const T& pos, int n, int c) const {
    T out;
    out.shape = Shape(1, 1, 1, 1);
    out.v = {bilinear(x, n, c, pos.v[0], pos.v[1])};
    return out;
  }

 private:
  template <typename F>
  T binary(const T& a, const T& b, F f) const {
    const Broadcast k = detail::broadcast_kind(a.shape, b.shape);
    T out = a;
    std::int64_t i = 0;
    for (int n = 0; n < a.shape.n; ++n)
      for (int c = 0; c < a.shape.c; ++c)
        for (int h = 0; h < a.shape.h; ++h)
          for (int w = 0; w < a.shape.w; ++w, ++i)
            out.v[static_cast<std::size_t>(i)] =
                f(a.v[static_cast<std::size_t>(i)],
                  b.v[static_cast<std::size_t>(detail::broadcast_index(k, a.shape, n, c, h, w))]);
    return out;
  }
};

}  // namespace msanet
