// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "msanet/common.hpp"

namespace msanet {

// ---------------------------------------------------------------------------
// Shape: four extents in NCHW order. Rank is fixed; vectors, matrices and
// scalars are embedded as (1,C,1,1), (A,B,1,1) and (1,1,1,1).
// ---------------------------------------------------------------------------

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  Shape() = default;
  Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {}

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty unless gradients are tracked
  bool requires_grad = false;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor: a cheap shared handle to dense float32 NCHW storage. Copies alias
// the same buffer; clone() makes an independent one. Gradients live in a
// same-size buffer that is allocated lazily and accumulated additively.
// ---------------------------------------------------------------------------

class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData>()) {}

  static Tensor zeros(Shape s) { return constant(s, 0.0f); }

  static Tensor constant(Shape s, float value) {
    check_shape(s);
    Tensor t;
    t.d_->shape = s;
    t.d_->data.assign(static_cast<std::size_t>(s.numel()), value);
    return t;
  }

  static Tensor from(Shape s, std::vector<float> values) {
    check_shape(s);
    if (static_cast<std::int64_t>(values.size()) != s.numel()) {
      throw ShapeError("explicit fill of " + std::to_string(values.size()) +
                       " values does not match shape " + s.str());
    }
    Tensor t;
    t.d_->shape = s;
    t.d_->data = std::move(values);
    return t;
  }

  static Tensor uniform(Shape s, float lo, float hi, std::uint64_t seed) {
    check_shape(s);
    Tensor t;
    t.d_->shape = s;
    t.d_->data.resize(static_cast<std::size_t>(s.numel()));
    Rng rng(seed);
    for (float& v : t.d_->data) v = rng.uniform(lo, hi);
    return t;
  }

  static Tensor normal(Shape s, float mean, float stddev, std::uint64_t seed) {
    check_shape(s);
    Tensor t;
    t.d_->shape = s;
    t.d_->data.resize(static_cast<std::size_t>(s.numel()));
    Rng rng(seed);
    for (float& v : t.d_->data) v = rng.normal(mean, stddev);
    return t;
  }

  const Shape& shape() const { return d_->shape; }
  std::int64_t numel() const { return d_->shape.numel(); }

  float* data() { return d_->data.data(); }
  const float* data() const { return d_->data.data(); }
  std::vector<float>& values() { return d_->data; }
  const std::vector<float>& values() const { return d_->data; }

  float& at(int n, int c, int h, int w) { return d_->data[static_cast<std::size_t>(index(n, c, h, w))]; }
  float at(int n, int c, int h, int w) const { return d_->data[static_cast<std::size_t>(index(n, c, h, w))]; }

  std::int64_t index(int n, int c, int h, int w) const {
    const Shape& s = d_->shape;
    return ((static_cast<std::int64_t>(n) * s.c + c) * s.h + h) * s.w + w;
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    d_->requires_grad = on;
    if (on) ensure_grad();
    return *this;
  }

  // A tensor is tracked if reverse mode must deliver a gradient to it:
  // either a leaf that requires grad or an intermediate with a grad buffer.
  bool tracked() const { return d_->requires_grad || !d_->grad.empty(); }

  bool has_grad() const { return !d_->grad.empty(); }
  float* grad() { return d_->grad.data(); }
  const float* grad() const { return d_->grad.data(); }
  std::vector<float>& grad_values() { return d_->grad; }
  const std::vector<float>& grad_values() const { return d_->grad; }

  void ensure_grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->data.size(), 0.0f);
  }

  void zero_grad() {
    if (!d_->grad.empty()) d_->grad.assign(d_->grad.size(), 0.0f);
  }

  Tensor clone() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->data = d_->data;
    t.d_->requires_grad = d_->requires_grad;
    if (t.d_->requires_grad) t.ensure_grad();
    return t;
  }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

  void check_finite(const char* op) const {
#if MSANET_CHECK_FINITE
    for (float v : d_->data) {
      if (!std::isfinite(v)) {
        throw ContractError(std::string("non-finite value produced by ") + op);
      }
    }
#else
    (void)op;
#endif
  }

 private:
  static void check_shape(const Shape& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
      throw ShapeError("negative extent in " + s.str());
    }
  }

  std::shared_ptr<detail::TensorData> d_;

  friend class Tape;
};

// ---------------------------------------------------------------------------
// Tape: a Wengert list. Operations append one node each while recording; the
// backward sweep walks the list once in reverse and then consumes it.
// Closures capture the tensors they need (shared handles), so intermediate
// buffers stay alive for the sweep.
// ---------------------------------------------------------------------------

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op_id, std::function<void()> backward_fn) {
    nodes_.push_back(Node{op_id, std::move(backward_fn)});
  }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  // Discards the recording. Tensor data is untouched.
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates d(loss)/d(t) into every
  // tracked tensor reachable from the loss. The tape is consumed.
  void backward(Tensor& loss) {
    if (loss.shape() != Shape(1, 1, 1, 1)) {
      throw ContractError("backward requires a scalar loss, got " + loss.shape().str());
    }
    loss.ensure_grad();
    loss.grad()[0] += 1.0f;
    run_reverse();
  }

  // Seeds an arbitrary cotangent on `out` and sweeps. Used by the gradient
  // checker, which projects non-scalar outputs through a fixed vector.
  void backward_seeded(Tensor& out, const std::vector<float>& seed) {
    if (static_cast<std::int64_t>(seed.size()) != out.numel()) {
      throw ContractError("backward seed size mismatch");
    }
    out.ensure_grad();
    float* g = out.grad();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    run_reverse();
  }

 private:
  struct Node {
    const char* op_id;
    std::function<void()> backward;
  };

  void run_reverse() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->backward) it->backward();
    }
    nodes_.clear();
  }

  std::vector<Node> nodes_;
};

namespace detail {

// Recording happens if a tape is present and any input is tracked. The
// output then gets a grad buffer so downstream nodes can deposit into it.
inline bool should_record(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->tracked()) return true;
  }
  return false;
}

inline void accumulate(Tensor& t, const std::vector<float>& contribution) {
  if (!t.tracked()) return;
  t.ensure_grad();
  float* g = t.grad();
  for (std::size_t i = 0; i < contribution.size(); ++i) g[i] += contribution[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops and the two broadcast patterns (per-channel (N,C,1,1)
// factors and per-position (N,1,H,W) factors) that the blocks need.
// ---------------------------------------------------------------------------

enum class Broadcast { None, PerChannel, PerPosition };

namespace detail {

inline Broadcast broadcast_kind(const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::None;
  if (b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1) return Broadcast::PerChannel;
  if (b.n == a.n && b.c == 1 && b.h == a.h && b.w == a.w) return Broadcast::PerPosition;
  throw ShapeError("operands " + a.str() + " and " + b.str() +
                   " are neither equal nor per-channel/per-position broadcastable");
}

// Index of the broadcast operand element paired with dense index (n,c,h,w).
inline std::int64_t broadcast_index(Broadcast k, const Shape& a, int n, int c, int h, int w) {
  switch (k) {
    case Broadcast::None:
      return ((static_cast<std::int64_t>(n) * a.c + c) * a.h + h) * a.w + w;
    case Broadcast::PerChannel:
      return static_cast<std::int64_t>(n) * a.c + c;
    case Broadcast::PerPosition:
    default:
      return (static_cast<std::int64_t>(n) * a.h + h) * a.w + w;
  }
}

template <typename Fwd>
inline Tensor binary_forward(const Tensor& a, const Tensor& b, Fwd f) {
  const Broadcast k = broadcast_kind(a.shape(), b.shape());
  Tensor out = Tensor::zeros(a.shape());
  const Shape& s = a.shape();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  std::int64_t i = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w, ++i) po[i] = f(pa[i], pb[broadcast_index(k, s, n, c, h, w)]);
  return out;
}

// Sum-reduces a dense cotangent over broadcast axes into b's layout.
inline std::vector<float> reduce_to_operand(Broadcast k, const Shape& s, const Shape& bs,
                                            const std::vector<float>& dense) {
  std::vector<float> out(static_cast<std::size_t>(bs.numel()), 0.0f);
  std::int64_t i = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w, ++i) out[static_cast<std::size_t>(broadcast_index(k, s, n, c, h, w))] += dense[static_cast<std::size_t>(i)];
  return out;
}

}  // namespace detail

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  Tensor out = detail::binary_forward(a, b, [](float x, float y) { return x + y; });
  out.check_finite("add");
  if (detail::should_record(tape, {&a, &b})) {
    out.ensure_grad();
    Tensor av = a, bv = b, ov = out;
    const Broadcast k = detail::broadcast_kind(a.shape(), b.shape());
    tape->record("add", [av, bv, ov, k]() mutable {
      detail::accumulate(av, ov.grad_values());
      if (bv.tracked()) {
        if (k == Broadcast::None) {
          detail::accumulate(bv, ov.grad_values());
        } else {
          detail::accumulate(bv, detail::reduce_to_operand(k, ov.shape(), bv.shape(), ov.grad_values()));
        }
      }
    });
  }
  return out;
}

inline Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  Tensor out = detail::binary_forward(a, b, [](float x, float y) { return x - y; });
  out.check_finite("sub");
  if (detail::should_record(tape, {&a, &b})) {
    out.ensure_grad();
    Tensor av = a, bv = b, ov = out;
    const Broadcast k = detail::broadcast_kind(a.shape(), b.shape());
    tape->record("sub", [av, bv, ov, k]() mutable {
      detail::accumulate(av, ov.grad_values());
      if (bv.tracked()) {
        std::vector<float> neg(ov.grad_values());
        for (float& v : neg) v = -v;
        if (k == Broadcast::None) {
          detail::accumulate(bv, neg);
        } else {
          detail::accumulate(bv, detail::reduce_to_operand(k, ov.shape(), bv.shape(), neg));
        }
      }
    });
  }
  return out;
}

inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  Tensor out = detail::binary_forward(a, b, [](float x, float y) { return x * y; });
  out.check_finite("mul");
  if (detail::should_record(tape, {&a, &b})) {
    out.ensure_grad();
    Tensor av = a, bv = b, ov = out;
    const Broadcast k = detail::broadcast_kind(a.shape(), b.shape());
    tape->record("mul", [av, bv, ov, k]() mutable {
      const Shape& s = ov.shape();
      const std::vector<float>& g = ov.grad_values();
      if (av.tracked()) {
        std::vector<float> da(g.size());
        const float* pb = bv.data();
        std::int64_t i = 0;
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
              for (int w = 0; w < s.w; ++w, ++i)
                da[static_cast<std::size_t>(i)] =
                    g[static_cast<std::size_t>(i)] * pb[detail::broadcast_index(k, s, n, c, h, w)];
        detail::accumulate(av, da);
      }
      if (bv.tracked()) {
        std::vector<float> dense(g.size());
        const float* pa = av.data();
        for (std::size_t i = 0; i < g.size(); ++i) dense[i] = g[i] * pa[i];
        if (k == Broadcast::None) {
          detail::accumulate(bv, dense);
        } else {
          detail::accumulate(bv, detail::reduce_to_operand(k, s, bv.shape(), dense));
        }
      }
    });
  }
  return out;
}

inline Tensor scale(Tape* tape, const Tensor& a, float factor) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  float* po = out.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * factor;
  out.check_finite("scale");
  if (detail::should_record(tape, {&a})) {
    out.ensure_grad();
    Tensor av = a, ov = out;
    tape->record("scale", [av, ov, factor]() mutable {
      if (!av.tracked()) return;
      std::vector<float> da(ov.grad_values());
      for (float& v : da) v *= factor;
      detail::accumulate(av, da);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel concatenation and its inverse band slice.
// ---------------------------------------------------------------------------

inline Tensor concat_channels(Tape* tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("concat_channels needs at least one part");
  const Shape& s0 = parts[0].shape();
  int c_total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels parts disagree: " + s0.str() + " vs " + s.str());
    }
    c_total += s.c;
  }
  Tensor out = Tensor::zeros(Shape(s0.n, c_total, s0.h, s0.w));
  const std::int64_t plane = static_cast<std::int64_t>(s0.h) * s0.w;
  float* po = out.data();
  for (int n = 0; n < s0.n; ++n) {
    std::int64_t dst_c = 0;
    for (const Tensor& p : parts) {
      const float* ps = p.data() + static_cast<std::int64_t>(n) * p.shape().c * plane;
      std::copy(ps, ps + static_cast<std::int64_t>(p.shape().c) * plane,
                po + (static_cast<std::int64_t>(n) * c_total + dst_c) * plane);
      dst_c += p.shape().c;
    }
  }
  bool any_tracked = false;
  for (const Tensor& p : parts) any_tracked |= p.tracked();
  if (tape != nullptr && any_tracked) {
    out.ensure_grad();
    std::vector<Tensor> held = parts;
    Tensor ov = out;
    tape->record("concat_channels", [held, ov, plane, c_total]() mutable {
      const std::vector<float>& g = ov.grad_values();
      const Shape& s = ov.shape();
      std::int64_t src_c = 0;
      for (Tensor& p : held) {
        if (p.tracked()) {
          p.ensure_grad();
          float* pg = p.grad();
          for (int n = 0; n < s.n; ++n) {
            const float* gn = g.data() + (static_cast<std::int64_t>(n) * c_total + src_c) * plane;
            float* dn = pg + static_cast<std::int64_t>(n) * p.shape().c * plane;
            const std::int64_t len = static_cast<std::int64_t>(p.shape().c) * plane;
            for (std::int64_t i = 0; i < len; ++i) dn[i] += gn[i];
          }
        }
        src_c += p.shape().c;
      }
    });
  }
  return out;
}

inline Tensor slice_channels(Tape* tape, const Tensor& x, int c_begin, int c_count) {
  const Shape& s = x.shape();
  if (c_begin < 0 || c_count <= 0 || c_begin + c_count > s.c) {
    throw ShapeError("channel slice [" + std::to_string(c_begin) + "," +
                     std::to_string(c_begin + c_count) + ") out of range for " + s.str());
  }
  Tensor out = Tensor::zeros(Shape(s.n, c_count, s.h, s.w));
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    const float* ps = x.data() + (static_cast<std::int64_t>(n) * s.c + c_begin) * plane;
    std::copy(ps, ps + static_cast<std::int64_t>(c_count) * plane,
              out.data() + static_cast<std::int64_t>(n) * c_count * plane);
  }
  if (detail::should_record(tape, {&x})) {
    out.ensure_grad();
    Tensor xv = x, ov = out;
    tape->record("slice_channels", [xv, ov, c_begin, c_count, plane]() mutable {
      if (!xv.tracked()) return;
      xv.ensure_grad();
      const Shape& s = xv.shape();
      const std::vector<float>& g = ov.grad_values();
      for (int n = 0; n < s.n; ++n) {
        float* dst = xv.grad() + (static_cast<std::int64_t>(n) * s.c + c_begin) * plane;
        const float* src = g.data() + static_cast<std::int64_t>(n) * c_count * plane;
        const std::int64_t len = static_cast<std::int64_t>(c_count) * plane;
        for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// Sum of all elements as a scalar tensor. Reduction runs in double.
inline Tensor sum_all(Tape* tape, const Tensor& x) {
  double acc = 0.0;
  const float* p = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += p[i];
  Tensor out = Tensor::constant(Shape(1, 1, 1, 1), static_cast<float>(acc));
  if (detail::should_record(tape, {&x})) {
    out.ensure_grad();
    Tensor xv = x, ov = out;
    tape->record("sum_all", [xv, ov]() mutable {
      if (!xv.tracked()) return;
      xv.ensure_grad();
      const float g = ov.grad()[0];
      float* px = xv.grad();
      const std::int64_t m = xv.numel();
      for (std::int64_t i = 0; i < m; ++i) px[i] += g;
    });
  }
  return out;
}

}  // namespace msanet
