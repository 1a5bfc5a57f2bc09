// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msanet/engine.hpp"
#include "msanet/ops.hpp"

namespace msanet {

// ---------------------------------------------------------------------------
// Parameter store: named learnable tensors with their initialization specs.
// Initialization is derived from (seed, name hash) so the result does not
// depend on registration order.
// ---------------------------------------------------------------------------

struct InitSpec {
  enum class Kind { Zero, Normal } kind = Kind::Zero;
  float stddev = 0.0f;

  static InitSpec zero() { return InitSpec{Kind::Zero, 0.0f}; }
  static InitSpec normal(float stddev) { return InitSpec{Kind::Normal, stddev}; }
  static InitSpec kaiming(int fan_in) {
    return normal(std::sqrt(2.0f / static_cast<float>(fan_in)));
  }
};

class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    InitSpec init;
  };

  Tensor add(const std::string& name, Shape shape, InitSpec init) {
    if (index_.count(name) != 0) throw ContractError("duplicate parameter name: " + name);
    Tensor t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, t, init});
    return t;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  void initialize(std::uint64_t seed) {
    for (Entry& e : entries_) {
      switch (e.init.kind) {
        case InitSpec::Kind::Zero:
          e.tensor.values().assign(e.tensor.values().size(), 0.0f);
          break;
        case InitSpec::Kind::Normal: {
          Rng rng(mix_seed(seed, fnv1a64(e.name)));
          for (float& v : e.tensor.values()) v = rng.normal(0.0f, e.init.stddev);
          break;
        }
      }
    }
  }

  void zero_grads() {
    for (Entry& e : entries_) e.tensor.zero_grad();
  }

  std::int64_t count() const {
    std::int64_t total = 0;
    for (const Entry& e : entries_) total += e.tensor.numel();
    return total;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Layers: thin parameter-owning wrappers over the ops. Every forward is
// written once, generically over the evaluation engine.
// ---------------------------------------------------------------------------

struct Conv2dLayer {
  ConvSpec spec;
  Tensor weight, bias;

  Conv2dLayer() = default;
  Conv2dLayer(ParamStore& ps, const std::string& prefix, const ConvSpec& sp, bool zero_init = false)
      : spec(sp) {
    const int fan_in = sp.in_channels * sp.kh * sp.kw;
    weight = ps.add(prefix + ".weight", Shape(sp.out_channels, sp.in_channels, sp.kh, sp.kw),
                    zero_init ? InitSpec::zero() : InitSpec::kaiming(fan_in));
    bias = ps.add(prefix + ".bias", Shape(1, sp.out_channels, 1, 1), InitSpec::zero());
  }

  template <class E>
  typename E::T forward_with(E& eng, const typename E::T& x) const {
    return eng.conv2d(x, weight, bias, spec);
  }

  Tensor forward(Tape* tape, const Tensor& x) const { return conv2d(tape, x, weight, &bias, spec); }

  static std::int64_t param_count(int cin, int cout, int k) {
    return static_cast<std::int64_t>(cout) * cin * k * k + cout;
  }
};

struct TransposeConv2dLayer {
  ConvSpec spec;
  Tensor weight, bias;

  TransposeConv2dLayer() = default;
  TransposeConv2dLayer(ParamStore& ps, const std::string& prefix, int cin, int cout)
      : spec(ConvSpec::upsample2x(cin, cout)) {
    // Each output pixel gathers k^2/s^2 taps per input channel.
    const int fan_in = cin * (spec.kh / spec.sh) * (spec.kw / spec.sw);
    weight = ps.add(prefix + ".weight", Shape(cin, cout, spec.kh, spec.kw), InitSpec::kaiming(fan_in));
    bias = ps.add(prefix + ".bias", Shape(1, cout, 1, 1), InitSpec::zero());
  }

  template <class E>
  typename E::T forward_with(E& eng, const typename E::T& x) const {
    return eng.transpose_conv2d(x, weight, bias, spec);
  }

  Tensor forward(Tape* tape, const Tensor& x) const {
    return transpose_conv2d(tape, x, weight, &bias, spec);
  }

  static std::int64_t param_count(int cin, int cout) {
    return static_cast<std::int64_t>(cin) * cout * 16 + cout;
  }
};

struct LinearLayer {
  Tensor weight, bias;

  LinearLayer() = default;
  LinearLayer(ParamStore& ps, const std::string& prefix, int cin, int cout) {
    weight = ps.add(prefix + ".weight", Shape(cout, cin, 1, 1), InitSpec::kaiming(cin));
    bias = ps.add(prefix + ".bias", Shape(1, cout, 1, 1), InitSpec::zero());
  }

  template <class E>
  typename E::T forward_with(E& eng, const typename E::T& x) const {
    return eng.linear(x, weight, bias);
  }

  Tensor forward(Tape* tape, const Tensor& x) const { return linear(tape, x, weight, &bias); }

  static std::int64_t param_count(int cin, int cout) {
    return static_cast<std::int64_t>(cout) * cin + cout;
  }
};

// Offset/mask prediction plus the modulated deformable convolution itself.
// The predicting conv emits 3K channels: 2K raw offsets followed by K mask
// logits that are squashed through a sigmoid. Zero initialization puts the
// start point at zero offsets and mask 0.5.
struct DeformSampler {
  Conv2dLayer offset_conv;
  ConvSpec spec;
  Tensor weight, bias;

  DeformSampler() = default;
  DeformSampler(ParamStore& ps, const std::string& prefix, int offset_src_channels, int channels)
      : offset_conv(ps, prefix + ".offset_conv",
                    ConvSpec::k3(offset_src_channels, 3 * 9), /*zero_init=*/true),
        spec(ConvSpec::k3(channels, channels)) {
    const int fan_in = spec.in_channels * spec.kh * spec.kw;
    weight = ps.add(prefix + ".weight", Shape(channels, channels, 3, 3), InitSpec::kaiming(fan_in));
    bias = ps.add(prefix + ".bias", Shape(1, channels, 1, 1), InitSpec::zero());
  }

  template <class E>
  typename E::T forward_with(E& eng, const typename E::T& offset_src, const typename E::T& sample_src) const {
    const int K = spec.kh * spec.kw;
    typename E::T raw = offset_conv.forward_with(eng, offset_src);
    typename E::T offsets = eng.slice_channels(raw, 0, 2 * K);
    typename E::T mask = eng.sigmoid(eng.slice_channels(raw, 2 * K, K));
    return eng.deform_conv(sample_src, offsets, mask, weight, bias, spec);
  }

  Tensor forward(Tape* tape, const Tensor& offset_src, const Tensor& sample_src) const {
    FloatEngine eng{tape};
    return forward_with(eng, offset_src, sample_src);
  }

  static std::int64_t param_count(int offset_src_channels, int channels) {
    return Conv2dLayer::param_count(offset_src_channels, 27, 3) +
           Conv2dLayer::param_count(channels, channels, 3);
  }
};

// ---------------------------------------------------------------------------
// Residual block: conv/lrelu/conv plus an identity or 1x1 projection skip.
// Stride 2 halves the resolution while (typically) doubling the channels.
// ---------------------------------------------------------------------------

struct ResidualBlock {
  ResidualBlock() = default;
  ResidualBlock(ParamStore& ps, const std::string& prefix, int c_in, int c_out, int stride)
      : conv1(ps, prefix + ".conv1", ConvSpec::k3(c_in, c_out, stride)),
        conv2(ps, prefix + ".conv2", ConvSpec::k3(c_out, c_out)) {
    if (stride != 1 || c_in != c_out) {
      proj.emplace(ps, prefix + ".proj", ConvSpec::k1(c_in, c_out, stride));
    }
  }

  template <class E>
  typename E::T forward_with(E& eng, const typename E::T& x) const {
    typename E::T main = conv2.forward_with(eng, eng.leaky_relu(conv1.forward_with(eng, x)));
    typename E::T skip = proj.has_value() ? proj->forward_with(eng, x) : x;
    return eng.add(main, skip);
  }

  Tensor forward(Tape* tape, const Tensor& x) const {
    FloatEngine eng{tape};
    return forward_with(eng, x);
  }

  static std::int64_t param_count(int c_in, int c_out, int stride) {
    std::int64_t n = Conv2dLayer::param_count(c_in, c_out, 3) + Conv2dLayer::param_count(c_out, c_out, 3);
    if (stride != 1 || c_in != c_out) n += Conv2dLayer::param_count(c_in, c_out, 1);
    return n;
  }

  Conv2dLayer conv1, conv2;
  std::optional<Conv2dLayer> proj;
};

// ---------------------------------------------------------------------------
// AFeB: deformable sampling of the input driven by offsets predicted from
// the input itself, then a conv refinement on a skip connection.
// ---------------------------------------------------------------------------

struct AFeB {
  AFeB() = default;
  AFeB(ParamStore& ps, const std::string& prefix, int channels)
      : sampler(ps, prefix + ".sampler", channels, channels),
        refine(ps, prefix + ".refine", ConvSpec::k3(channels, channels)) {}

  template <class E>
  typename E::T forward_with(E& eng, const typename E::T& x) const {
    typename E::T sampled = sampler.forward_with(eng, x, x);
    typename E::T refined = refine.forward_with(eng, eng.leaky_relu(sampled));
    return eng.add(x, refined);
  }

  Tensor forward(Tape* tape, const Tensor& x) const {
    FloatEngine eng{tape};
    return forward_with(eng, x);
  }

  static std::int64_t param_count(int channels) {
    return DeformSampler::param_count(channels, channels) + Conv2dLayer::param_count(channels, channels, 3);
  }

  DeformSampler sampler;
  Conv2dLayer refine;
};

// ---------------------------------------------------------------------------
// AMB: parallel dilated branches concatenated back to the block width, then
// channel and spatial rescaling, each a 2*sigmoid gate so the neutral point
// of a zeroed gate is an exact factor of one.
// ---------------------------------------------------------------------------

struct AMB {
  AMB() = default;
  AMB(ParamStore& ps, const std::string& prefix, int channels, const std::vector<int>& dilations)
      : fc(ps, prefix + ".fc", channels, channels),
        spatial(ps, prefix + ".spatial", ConvSpec::k3(1, 1)),
        refine(ps, prefix + ".refine", ConvSpec::k3(channels, channels)) {
    if (dilations.empty()) throw ConfigError("AMB needs at least one dilation");
    if (channels % static_cast<int>(dilations.size()) != 0) {
      throw ConfigError("AMB channels " + std::to_string(channels) + " not divisible by " +
                        std::to_string(dilations.size()) + " branches");
    }
    const int branch_c = channels / static_cast<int>(dilations.size());
    for (std::size_t i = 0; i < dilations.size(); ++i) {
      branches.emplace_back(ps, prefix + ".branch" + std::to_string(i + 1),
                            ConvSpec::k3(channels, branch_c, 1, dilations[i]));
    }
  }

  template <class E>
  typename E::T forward_with(E& eng, const typename E::T& x) const {
    std::vector<typename E::T> parts;
    parts.reserve(branches.size());
    for (const Conv2dLayer& b : branches) parts.push_back(b.forward_with(eng, x));
    typename E::T f = eng.concat_channels(parts);

    typename E::T ch_gate =
        eng.scale(eng.sigmoid(fc.forward_with(eng, eng.adaptive_avg_pool_global(f))), 2.0f);
    f = eng.mul(f, ch_gate);
    typename E::T sp_gate = eng.scale(eng.sigmoid(spatial.forward_with(eng, eng.channel_mean(f))), 2.0f);
    f = eng.mul(f, sp_gate);

    typename E::T refined = refine.forward_with(eng, eng.leaky_relu(f));
    return eng.add(x, refined);
  }

  Tensor forward(Tape* tape, const Tensor& x) const {
    FloatEngine eng{tape};
    return forward_with(eng, x);
  }

  static std::int64_t param_count(int channels, int num_dilations) {
    const int branch_c = channels / num_dilations;
    return num_dilations * Conv2dLayer::param_count(channels, branch_c, 3) +
           LinearLayer::param_count(channels, channels) + Conv2dLayer::param_count(1, 1, 3) +
           Conv2dLayer::param_count(channels, channels, 3);
  }

  std::vector<Conv2dLayer> branches;
  LinearLayer fc;
  Conv2dLayer spatial;
  Conv2dLayer refine;
};

// ---------------------------------------------------------------------------
// AFuB: optionally upsample the coarse stream to the fine resolution, then
// deformably sample the fine stream with offsets predicted from both, add it
// onto the coarse stream and refine with conv/lrelu/conv on a skip.
// ---------------------------------------------------------------------------

struct AFuB {
  AFuB() = default;
  AFuB(ParamStore& ps, const std::string& prefix, int channels, bool upsample_on)
      : upsample(upsample_on),
        sampler(ps, prefix + ".sampler", 2 * channels, channels),
        refine1(ps, prefix + ".refine1", ConvSpec::k3(channels, channels)),
        refine2(ps, prefix + ".refine2", ConvSpec::k3(channels, channels)) {
    if (upsample_on) up.emplace(ps, prefix + ".up", 2 * channels, channels);
  }

  template <class E>
  typename E::T forward_with(E& eng, const typename E::T& coarse_low, const typename E::T& fine) const {
    typename E::T coarse = upsample ? up->forward_with(eng, coarse_low) : coarse_low;
    if (shape_of(coarse) != shape_of(fine)) {
      throw ShapeError("AFuB streams disagree: coarse " + shape_of(coarse).str() + " vs fine " +
                       shape_of(fine).str());
    }
    typename E::T offset_src = eng.concat_channels({coarse, fine});
    typename E::T fused = eng.add(coarse, sampler.forward_with(eng, offset_src, fine));
    typename E::T refined = refine2.forward_with(eng, eng.leaky_relu(refine1.forward_with(eng, fused)));
    return eng.add(fused, refined);
  }

  Tensor forward(Tape* tape, const Tensor& coarse_low, const Tensor& fine) const {
    FloatEngine eng{tape};
    return forward_with(eng, coarse_low, fine);
  }

  static std::int64_t param_count(int channels, bool upsample) {
    std::int64_t n = DeformSampler::param_count(2 * channels, channels) +
                     2 * Conv2dLayer::param_count(channels, channels, 3);
    if (upsample) n += TransposeConv2dLayer::param_count(2 * channels, channels);
    return n;
  }

  bool upsample = false;
  std::optional<TransposeConv2dLayer> up;
  DeformSampler sampler;
  Conv2dLayer refine1, refine2;
};

}  // namespace msanet
