// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "msanet/model.hpp"
#include "msanet/train.hpp"

namespace msanet {

// ---------------------------------------------------------------------------
// Central-difference gradient checking. Each registered case builds its
// inputs from a seed and evaluates one forward expression on two engines:
// the float32 tape path supplies the analytic gradient of a fixed random
// projection of the output, and the double-precision shadow supplies the
// numeric side, so the comparison is not limited by float32 forward noise.
// The two paths are asserted consistent before any differencing.
// ---------------------------------------------------------------------------

struct GradCheckCase {
  std::vector<Tensor> inputs;
  // Parallel to inputs; an empty inner list means "check every element".
  std::vector<std::vector<std::int64_t>> check_elements;
  std::function<Tensor(Tape*)> forward;
  std::function<RefTensor()> forward_ref;

  template <class G>
  void set_forward(G g) {
    forward = [g](Tape* tape) {
      FloatEngine eng{tape};
      return g(eng);
    };
    forward_ref = [g]() {
      RefEngine eng;
      return g(eng);
    };
  }
};

inline double grad_check_case(GradCheckCase& c, float eps, std::uint64_t proj_seed = 12345) {
  if (eps <= 0.0f) throw ArgumentError("grad check eps must be positive");
  for (Tensor& t : c.inputs) t.set_requires_grad(true);

  Tape tape;
  Tensor out = c.forward(&tape);
  {
    // Shadow consistency guard: both engines must describe the same math.
    const RefTensor ref = c.forward_ref();
    if (shape_of(out) != ref.shape) throw ContractError("shadow forward shape mismatch");
    double scale = 1.0;
    for (double v : ref.v) scale = std::max(scale, std::fabs(v));
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      if (std::fabs(out.data()[i] - ref.v[static_cast<std::size_t>(i)]) > 1e-3 * scale) {
        throw ContractError("shadow forward deviates from the float path");
      }
    }
  }

  std::vector<float> proj(static_cast<std::size_t>(out.numel()));
  {
    Rng rng(proj_seed);
    for (float& v : proj) v = rng.uniform(-1.0f, 1.0f);
  }
  for (Tensor& t : c.inputs) t.zero_grad();
  tape.backward_seeded(out, proj);

  std::vector<std::vector<float>> analytic;
  analytic.reserve(c.inputs.size());
  for (Tensor& t : c.inputs) analytic.push_back(t.grad_values());

  const auto objective = [&]() {
    const RefTensor o = c.forward_ref();
    double acc = 0.0;
    for (std::size_t i = 0; i < proj.size(); ++i) acc += static_cast<double>(proj[i]) * o.v[i];
    return acc;
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    Tensor& t = c.inputs[i];
    std::vector<std::int64_t> elems;
    if (i < c.check_elements.size() && !c.check_elements[i].empty()) {
      elems = c.check_elements[i];
    } else {
      elems.resize(static_cast<std::size_t>(t.numel()));
      for (std::int64_t e = 0; e < t.numel(); ++e) elems[static_cast<std::size_t>(e)] = e;
    }
    for (std::int64_t e : elems) {
      float& v = t.values()[static_cast<std::size_t>(e)];
      const float orig = v;
      const float hi = orig + eps;
      const float lo = orig - eps;
      v = hi;
      const double lp = objective();
      v = lo;
      const double lm = objective();
      v = orig;
      const double numeric = (lp - lm) / (static_cast<double>(hi) - static_cast<double>(lo));
      const double a = analytic[i][static_cast<std::size_t>(e)];
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Case registry.
// ---------------------------------------------------------------------------

namespace detail {

// Uniform values bounded away from zero, for inputs that feed kinked ops.
inline Tensor signed_uniform(Shape s, float lo, float hi, std::uint64_t seed) {
  Tensor t = Tensor::zeros(s);
  Rng rng(seed);
  for (float& v : t.values()) {
    const float mag = rng.uniform(lo, hi);
    v = rng.next_below(2) == 0 ? mag : -mag;
  }
  return t;
}

// Shifts deformable offset predictions away from the integer grid, where
// the bilinear kernel has kinks: offset biases move to mid-cell and offset
// weights become small but non-zero.
inline void nudge_deform_offsets(ParamStore& ps, std::uint64_t seed) {
  for (const auto& e : ps.entries()) {
    const std::string& name = e.name;
    const auto ends_with = [&name](const char* suffix) {
      const std::size_t n = std::string(suffix).size();
      return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
    };
    if (ends_with(".offset_conv.bias")) {
      Tensor t = e.tensor;
      const int k = t.shape().c / 3;
      for (int c = 0; c < t.shape().c; ++c) t.values()[static_cast<std::size_t>(c)] = c < 2 * k ? 0.25f : 0.2f;
    } else if (ends_with(".offset_conv.weight")) {
      Tensor t = e.tensor;
      Rng rng(mix_seed(seed, fnv1a64(name)));
      for (float& v : t.values()) v = rng.normal(0.0f, 0.02f);
    }
  }
}

struct BlockCaseHolder {
  std::shared_ptr<ParamStore> store = std::make_shared<ParamStore>();

  void finish(GradCheckCase& c, std::uint64_t seed, bool nudge) const {
    store->initialize(seed);
    if (nudge) nudge_deform_offsets(*store, seed);
    for (const auto& e : store->entries()) c.inputs.push_back(e.tensor);
  }
};

}  // namespace detail

inline GradCheckCase make_grad_check_case(const std::string& op_id, std::uint64_t seed) {
  GradCheckCase c;
  const std::uint64_t s1 = mix_seed(seed, 1), s2 = mix_seed(seed, 2), s3 = mix_seed(seed, 3);

  if (op_id == "add" || op_id == "sub" || op_id == "mul") {
    Tensor a = Tensor::uniform(Shape(1, 2, 4, 4), -1.0f, 1.0f, s1);
    Tensor b = Tensor::uniform(Shape(1, 2, 4, 4), -1.0f, 1.0f, s2);
    c.inputs = {a, b};
    c.set_forward([a, b, op_id](auto& eng) {
      if (op_id == "add") return eng.add(eng.param(a), eng.param(b));
      if (op_id == "sub") return eng.sub(eng.param(a), eng.param(b));
      return eng.mul(eng.param(a), eng.param(b));
    });
  } else if (op_id == "mul_per_channel" || op_id == "mul_per_position") {
    Tensor a = Tensor::uniform(Shape(1, 3, 4, 4), -1.0f, 1.0f, s1);
    Tensor b = op_id == "mul_per_channel" ? Tensor::uniform(Shape(1, 3, 1, 1), -1.0f, 1.0f, s2)
                                          : Tensor::uniform(Shape(1, 1, 4, 4), -1.0f, 1.0f, s2);
    c.inputs = {a, b};
    c.set_forward([a, b](auto& eng) { return eng.mul(eng.param(a), eng.param(b)); });
  } else if (op_id == "scale") {
    Tensor a = Tensor::uniform(Shape(1, 2, 4, 4), -1.0f, 1.0f, s1);
    c.inputs = {a};
    c.set_forward([a](auto& eng) { return eng.scale(eng.param(a), 1.7f); });
  } else if (op_id == "concat_slice") {
    Tensor a = Tensor::uniform(Shape(1, 2, 4, 4), -1.0f, 1.0f, s1);
    Tensor b = Tensor::uniform(Shape(1, 3, 4, 4), -1.0f, 1.0f, s2);
    c.inputs = {a, b};
    c.set_forward([a, b](auto& eng) {
      return eng.slice_channels(eng.concat_channels({eng.param(a), eng.param(b)}), 1, 3);
    });
  } else if (op_id == "leaky_relu") {
    Tensor a = detail::signed_uniform(Shape(1, 2, 4, 4), 0.05f, 1.0f, s1);
    c.inputs = {a};
    c.set_forward([a](auto& eng) { return eng.leaky_relu(eng.param(a)); });
  } else if (op_id == "sigmoid") {
    Tensor a = Tensor::uniform(Shape(1, 2, 4, 4), -2.0f, 2.0f, s1);
    c.inputs = {a};
    c.set_forward([a](auto& eng) { return eng.sigmoid(eng.param(a)); });
  } else if (op_id == "adaptive_avg_pool_global") {
    Tensor a = Tensor::uniform(Shape(2, 3, 5, 4), -1.0f, 1.0f, s1);
    c.inputs = {a};
    c.set_forward([a](auto& eng) { return eng.adaptive_avg_pool_global(eng.param(a)); });
  } else if (op_id == "channel_mean") {
    Tensor a = Tensor::uniform(Shape(2, 3, 4, 4), -1.0f, 1.0f, s1);
    c.inputs = {a};
    c.set_forward([a](auto& eng) { return eng.channel_mean(eng.param(a)); });
  } else if (op_id == "linear") {
    Tensor x = Tensor::uniform(Shape(2, 5, 1, 1), -1.0f, 1.0f, s1);
    Tensor w = Tensor::uniform(Shape(4, 5, 1, 1), -1.0f, 1.0f, s2);
    Tensor b = Tensor::uniform(Shape(1, 4, 1, 1), -0.5f, 0.5f, s3);
    c.inputs = {x, w, b};
    c.set_forward([x, w, b](auto& eng) { return eng.linear(eng.param(x), w, b); });
  } else if (op_id == "conv2d" || op_id == "conv2d_stride2" || op_id == "conv2d_dilated") {
    ConvSpec spec = ConvSpec::k3(2, 3);
    Shape xs(1, 2, 5, 5);
    if (op_id == "conv2d_stride2") {
      spec = ConvSpec::k3(2, 3, 2);
      xs = Shape(1, 2, 6, 6);
    } else if (op_id == "conv2d_dilated") {
      spec = ConvSpec::k3(2, 3, 1, 2);
      xs = Shape(1, 2, 7, 7);
    }
    Tensor x = Tensor::uniform(xs, -1.0f, 1.0f, s1);
    Tensor w = Tensor::uniform(Shape(3, 2, 3, 3), -0.7f, 0.7f, s2);
    Tensor b = Tensor::uniform(Shape(1, 3, 1, 1), -0.5f, 0.5f, s3);
    c.inputs = {x, w, b};
    c.set_forward([x, w, b, spec](auto& eng) { return eng.conv2d(eng.param(x), w, b, spec); });
  } else if (op_id == "transpose_conv2d") {
    const ConvSpec spec = ConvSpec::upsample2x(2, 3);
    Tensor x = Tensor::uniform(Shape(1, 2, 4, 4), -1.0f, 1.0f, s1);
    Tensor w = Tensor::uniform(Shape(2, 3, 4, 4), -0.7f, 0.7f, s2);
    Tensor b = Tensor::uniform(Shape(1, 3, 1, 1), -0.5f, 0.5f, s3);
    c.inputs = {x, w, b};
    c.set_forward([x, w, b, spec](auto& eng) { return eng.transpose_conv2d(eng.param(x), w, b, spec); });
  } else if (op_id == "bilinear_sample") {
    Tensor x = Tensor::uniform(Shape(1, 1, 4, 4), -1.0f, 1.0f, s1);
    Rng rng(s2);
    Tensor pos = Tensor::from(Shape(1, 2, 1, 1), {rng.uniform(0.15f, 2.4f), rng.uniform(0.15f, 2.4f)});
    // keep the sample point away from the integer lattice
    for (float& v : pos.values()) {
      const float frac = v - std::floor(v);
      if (frac < 0.15f) v += 0.2f;
      if (frac > 0.85f) v -= 0.2f;
    }
    c.inputs = {x, pos};
    c.set_forward([x, pos](auto& eng) { return eng.sample_point(eng.param(x), eng.param(pos), 0, 0); });
  } else if (op_id == "modulated_deform_conv") {
    const ConvSpec spec = ConvSpec::k3(2, 3);
    const int K = 9;
    Tensor x = Tensor::uniform(Shape(1, 2, 5, 5), -1.0f, 1.0f, s1);
    Tensor off = detail::signed_uniform(Shape(1, 2 * K, 5, 5), 0.15f, 0.4f, s2);
    Tensor mask = Tensor::uniform(Shape(1, K, 5, 5), 0.2f, 0.9f, s3);
    Tensor w = Tensor::uniform(Shape(3, 2, 3, 3), -0.7f, 0.7f, mix_seed(seed, 4));
    Tensor b = Tensor::uniform(Shape(1, 3, 1, 1), -0.5f, 0.5f, mix_seed(seed, 5));
    c.inputs = {x, off, mask, w, b};
    c.set_forward([x, off, mask, w, b, spec](auto& eng) {
      return eng.deform_conv(eng.param(x), eng.param(off), eng.param(mask), w, b, spec);
    });
  } else if (op_id == "loss_l1" || op_id == "loss_l2") {
    Tensor y = Tensor::uniform(Shape(1, 2, 4, 4), -1.0f, 1.0f, s1);
    Tensor r = detail::signed_uniform(Shape(1, 2, 4, 4), 0.1f, 0.5f, s2);
    Tensor yhat = add(nullptr, y, r);
    const int p = op_id == "loss_l1" ? 1 : 2;
    c.inputs = {yhat};
    c.set_forward([y, yhat, p](auto& eng) { return eng.loss_lp(eng.param(y), eng.param(yhat), p); });
  } else if (op_id == "residual_block" || op_id == "residual_block_s2") {
    detail::BlockCaseHolder h;
    const int stride = op_id == "residual_block_s2" ? 2 : 1;
    auto block = std::make_shared<ResidualBlock>(*h.store, "blk", 4, stride == 2 ? 8 : 4, stride);
    Tensor x = Tensor::uniform(Shape(1, 4, 8, 8), -1.0f, 1.0f, s1);
    c.inputs = {x};
    h.finish(c, seed, false);
    c.set_forward([block, x, h](auto& eng) { return block->forward_with(eng, eng.param(x)); });
  } else if (op_id == "afeb") {
    detail::BlockCaseHolder h;
    auto block = std::make_shared<AFeB>(*h.store, "blk", 4);
    Tensor x = Tensor::uniform(Shape(1, 4, 8, 8), -1.0f, 1.0f, s1);
    c.inputs = {x};
    h.finish(c, seed, true);
    c.set_forward([block, x, h](auto& eng) { return block->forward_with(eng, eng.param(x)); });
  } else if (op_id == "amb") {
    detail::BlockCaseHolder h;
    auto block = std::make_shared<AMB>(*h.store, "blk", 4, std::vector<int>{1, 2, 3, 4});
    Tensor x = Tensor::uniform(Shape(1, 4, 8, 8), -1.0f, 1.0f, s1);
    c.inputs = {x};
    h.finish(c, seed, false);
    c.set_forward([block, x, h](auto& eng) { return block->forward_with(eng, eng.param(x)); });
  } else if (op_id == "afub" || op_id == "afub_noup") {
    detail::BlockCaseHolder h;
    const bool up = op_id == "afub";
    auto block = std::make_shared<AFuB>(*h.store, "blk", 4, up);
    Tensor coarse = up ? Tensor::uniform(Shape(1, 8, 4, 4), -1.0f, 1.0f, s1)
                       : Tensor::uniform(Shape(1, 4, 8, 8), -1.0f, 1.0f, s1);
    Tensor fine = Tensor::uniform(Shape(1, 4, 8, 8), -1.0f, 1.0f, s2);
    c.inputs = {coarse, fine};
    h.finish(c, seed, true);
    c.set_forward([block, coarse, fine, h](auto& eng) {
      return block->forward_with(eng, eng.param(coarse), eng.param(fine));
    });
  } else if (op_id == "model") {
    ModelConfig cfg;  // default full architecture
    auto model = std::make_shared<Model>(cfg, seed);
    detail::nudge_deform_offsets(model->params(), seed);
    Tensor x = Tensor::uniform(Shape(1, 3, 16, 16), -0.5f, 0.5f, s1);

    // A 20-parameter random subset; checking all ~8M is out of the question.
    Rng rng(s2);
    const auto& entries = model->params().entries();
    std::map<std::size_t, std::vector<std::int64_t>> picks;
    for (int k = 0; k < 20; ++k) {
      const std::size_t pi = static_cast<std::size_t>(rng.next_below(entries.size()));
      picks[pi].push_back(static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(entries[pi].tensor.numel()))));
    }
    for (const auto& [pi, elems] : picks) {
      c.inputs.push_back(entries[pi].tensor);
      c.check_elements.push_back(elems);
    }
    c.set_forward([model, x](auto& eng) { return model->forward_with(eng, eng.param(x)); });
  } else {
    throw ArgumentError("unknown grad-check op id: " + op_id);
  }
  return c;
}

inline const std::vector<std::string>& grad_check_op_ids() {
  static const std::vector<std::string> ids = {
      "add",          "sub",          "mul",          "mul_per_channel",
      "mul_per_position", "scale",    "concat_slice", "leaky_relu",
      "sigmoid",      "adaptive_avg_pool_global",     "channel_mean",
      "linear",       "conv2d",       "conv2d_stride2", "conv2d_dilated",
      "transpose_conv2d", "bilinear_sample", "modulated_deform_conv",
      "loss_l1",      "loss_l2"};
  return ids;
}

inline const std::vector<std::string>& grad_check_block_ids() {
  static const std::vector<std::string> ids = {"residual_block", "residual_block_s2", "afeb",
                                               "amb",            "afub",              "afub_noup"};
  return ids;
}

// Pointwise ops get the tighter tolerance.
inline double grad_check_tolerance(const std::string& op_id) {
  static const std::vector<std::string> pointwise = {"add",    "sub",        "mul",     "scale",
                                                     "leaky_relu", "sigmoid", "loss_l1", "loss_l2"};
  for (const std::string& p : pointwise) {
    if (p == op_id) return 1e-3;
  }
  return 1e-2;
}

// Composite cases (blocks, model) use a smaller step: their interior
// leaky-relu pre-activations sit at arbitrary distances from the kink, and
// the double-precision shadow keeps the smaller step noise-free.
inline float grad_check_default_eps(const std::string& op_id) {
  for (const std::string& b : grad_check_block_ids()) {
    if (b == op_id) return 1e-4f;
  }
  return op_id == "model" ? 1e-5f : 1e-3f;
}

inline double grad_check(const std::string& op_id, std::uint64_t seed, float eps = 0.0f) {
  GradCheckCase c = make_grad_check_case(op_id, seed);
  if (eps <= 0.0f) eps = grad_check_default_eps(op_id);
  return grad_check_case(c, eps, mix_seed(seed, 99));
}

}  // namespace msanet
