// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "msanet/blocks.hpp"

namespace msanet {

enum class BlockKind { Residual, AFeB, AMB };

enum class Variant { Full, ED, ResB, AFeB, AMB, AFuB, AFeBAMB, AFeBAFuB, AMBAFuB };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::ED: return "ed";
    case Variant::ResB: return "resb";
    case Variant::AFeB: return "afeb";
    case Variant::AMB: return "amb";
    case Variant::AFuB: return "afub";
    case Variant::AFeBAMB: return "afeb+amb";
    case Variant::AFeBAFuB: return "afeb+afub";
    case Variant::AMBAFuB: return "amb+afub";
  }
  return "full";
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::Full, Variant::ED, Variant::ResB, Variant::AFeB, Variant::AMB, Variant::AFuB,
                    Variant::AFeBAMB, Variant::AFeBAFuB, Variant::AMBAFuB}) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown variant: " + s);
}

inline bool variant_uses_afeb(Variant v) {
  return v == Variant::Full || v == Variant::AFeB || v == Variant::AFeBAMB || v == Variant::AFeBAFuB;
}
inline bool variant_uses_amb(Variant v) {
  return v == Variant::Full || v == Variant::AMB || v == Variant::AFeBAMB || v == Variant::AMBAFuB;
}
inline bool variant_uses_afub(Variant v) {
  return v == Variant::Full || v == Variant::AFuB || v == Variant::AFeBAFuB || v == Variant::AMBAFuB;
}

// Subnetwork layout rules: the bottom (highest resolution) subnetwork
// alternates AFeB/AMB starting with AFeB; the top one is all AMB; middle
// ones start and end with AFeB, the lower middle alternating AMB/AFeB in
// between and the upper middle filling with AMB.
inline std::vector<BlockKind> default_subnet_blocks(int scale, int num_scales, int depth) {
  std::vector<BlockKind> blocks;
  blocks.reserve(static_cast<std::size_t>(depth));
  if (depth <= 0) return blocks;
  if (scale == num_scales - 1) {
    blocks.assign(static_cast<std::size_t>(depth), BlockKind::AMB);
    return blocks;
  }
  if (scale == 0) {
    for (int i = 0; i < depth; ++i) blocks.push_back(i % 2 == 0 ? BlockKind::AFeB : BlockKind::AMB);
    return blocks;
  }
  const bool near_bottom = scale <= (num_scales - 1) / 2;
  for (int i = 0; i < depth; ++i) {
    if (i == 0 || i == depth - 1) {
      blocks.push_back(BlockKind::AFeB);
    } else if (near_bottom) {
      blocks.push_back(i % 2 == 1 ? BlockKind::AMB : BlockKind::AFeB);
    } else {
      blocks.push_back(BlockKind::AMB);
    }
  }
  return blocks;
}

// ---------------------------------------------------------------------------
// ModelConfig: the full architectural description, including the ablation
// variant switches.
// ---------------------------------------------------------------------------

struct ModelConfig {
  int in_channels = 3;
  int base_channels = 32;
  std::vector<int> scale_channels;                  // derived from base_channels if empty
  std::vector<int> subnet_depths = {6, 5, 4, 2};
  std::vector<std::vector<BlockKind>> subnet_specs;  // derived from depths if empty
  std::vector<int> dilations = {1, 2, 3, 4};
  Variant variant = Variant::Full;

  int num_scales() const { return static_cast<int>(subnet_depths.size()); }
  int resolution_divisor() const { return 1 << (num_scales() - 1); }

  std::vector<int> channels() const {
    if (!scale_channels.empty()) return scale_channels;
    std::vector<int> cs;
    for (int i = 0; i < num_scales(); ++i) cs.push_back(base_channels << i);
    return cs;
  }

  // Block sequences after applying the variant substitution rules: excluded
  // kinds fall back to stride-1 residual blocks, the ED variant drops the
  // subnetworks entirely.
  std::vector<std::vector<BlockKind>> effective_subnets() const {
    const int scales = num_scales();
    if (variant == Variant::ED) return std::vector<std::vector<BlockKind>>(static_cast<std::size_t>(scales));
    std::vector<std::vector<BlockKind>> specs = subnet_specs;
    if (specs.empty()) {
      for (int s = 0; s < scales; ++s) specs.push_back(default_subnet_blocks(s, scales, subnet_depths[static_cast<std::size_t>(s)]));
    }
    for (auto& seq : specs) {
      for (BlockKind& k : seq) {
        if (k == BlockKind::AFeB && !variant_uses_afeb(variant)) k = BlockKind::Residual;
        if (k == BlockKind::AMB && !variant_uses_amb(variant)) k = BlockKind::Residual;
      }
    }
    return specs;
  }

  void validate() const {
    if (in_channels != 1 && in_channels != 3) {
      throw ConfigError("in_channels must be 1 or 3, got " + std::to_string(in_channels));
    }
    const int scales = num_scales();
    if (scales < 2 || scales > 5) {
      throw ConfigError("number of scales must be in [2,5], got " + std::to_string(scales));
    }
    const std::vector<int> cs = channels();
    if (static_cast<int>(cs.size()) != scales) {
      throw ConfigError("scale_channels length does not match the number of scales");
    }
    for (int i = 0; i < scales; ++i) {
      if (cs[static_cast<std::size_t>(i)] <= 0) throw ConfigError("scale channels must be positive");
      if (i > 0 && cs[static_cast<std::size_t>(i)] != 2 * cs[static_cast<std::size_t>(i - 1)]) {
        throw ConfigError("scale channels must strictly double per scale");
      }
    }
    if (dilations.empty()) throw ConfigError("dilation set must be non-empty");
    for (int d : dilations) {
      if (d < 1) throw ConfigError("dilation rates must be >= 1");
    }
    if (!subnet_specs.empty() && static_cast<int>(subnet_specs.size()) != scales) {
      throw ConfigError("subnet_specs length does not match the number of scales");
    }
    for (int d : subnet_depths) {
      if (d < 0) throw ConfigError("subnet depths must be non-negative");
    }
    if (variant_uses_amb(variant)) {
      const int branches = static_cast<int>(dilations.size());
      for (int c : cs) {
        if (c % branches != 0) {
          throw ConfigError("channel width " + std::to_string(c) + " not divisible by " +
                            std::to_string(branches) + " AMB branches");
        }
      }
    }
  }

  bool operator==(const ModelConfig& o) const {
    return in_channels == o.in_channels && base_channels == o.base_channels &&
           scale_channels == o.scale_channels && subnet_depths == o.subnet_depths &&
           subnet_specs == o.subnet_specs && dilations == o.dilations && variant == o.variant;
  }
};

// ---------------------------------------------------------------------------
// Model: encoder -> scale-specific subnetworks -> coarse-to-fine decoder.
// ---------------------------------------------------------------------------

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    build();
    params_.initialize(seed);
  }

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::int64_t param_count() const { return params_.count(); }

  // Encoder activations at every scale, shallowest first.
  std::vector<Tensor> encoder_features(Tape* tape, const Tensor& x) const {
    FloatEngine eng{tape};
    return encoder_features_with(eng, x);
  }

  template <class E>
  std::vector<typename E::T> encoder_features_with(E& eng, const typename E::T& x) const {
    const Shape& s = shape_of(x);
    if (s.c != config_.in_channels) {
      throw ShapeError("model expects " + std::to_string(config_.in_channels) + " input channels, got " +
                       std::to_string(s.c));
    }
    const int div = config_.resolution_divisor();
    if (s.h % div != 0 || s.w % div != 0) {
      throw ShapeError("input extent " + s.str() + " must be divisible by " + std::to_string(div) +
                       " (callers pad beforehand)");
    }
    std::vector<typename E::T> feats;
    feats.reserve(static_cast<std::size_t>(config_.num_scales()));
    typename E::T f = x;
    for (const ResidualBlock& block : encoder_) {
      f = block.forward_with(eng, f);
      feats.push_back(f);
    }
    return feats;
  }

  template <class E>
  typename E::T forward_with(E& eng, const typename E::T& x) const {
    const int scales = config_.num_scales();
    std::vector<typename E::T> feats = encoder_features_with(eng, x);
    for (int i = 0; i < scales; ++i) {
      typename E::T r = feats[static_cast<std::size_t>(i)];
      for (const auto& blk : subnets_[static_cast<std::size_t>(i)]) {
        r = std::visit([&](const auto& b) { return b.forward_with(eng, r); }, blk);
      }
      feats[static_cast<std::size_t>(i)] = r;
    }

    typename E::T d = feats[static_cast<std::size_t>(scales - 1)];
    for (int step = 0; step < scales; ++step) {
      const bool last = step == scales - 1;
      const typename E::T fine =
          last ? lift_.forward_with(eng, x) : feats[static_cast<std::size_t>(scales - 2 - step)];
      d = fuse_forward_with(eng, step, d, fine);
    }
    return out_conv_.forward_with(eng, d);
  }

  Tensor forward(Tape* tape, const Tensor& x) const {
    FloatEngine eng{tape};
    return forward_with(eng, x);
  }

 private:
  using SubnetBlock = std::variant<ResidualBlock, AFeB, AMB>;

  // One decoder fusion stage. The ablation variants swap the AFuB for a
  // transpose-conv upsample + skip concat + merge conv, optionally followed
  // by a residual block.
  struct EdFusion {
    bool upsample = false;
    std::optional<TransposeConv2dLayer> up;
    Conv2dLayer merge;
    std::optional<ResidualBlock> post;
  };

  void build() {
    const std::vector<int> cs = config_.channels();
    const int scales = config_.num_scales();

    int prev_c = config_.in_channels;
    for (int i = 0; i < scales; ++i) {
      const int stride = i == 0 ? 1 : 2;
      encoder_.emplace_back(params_, "enc" + std::to_string(i + 1), prev_c, cs[static_cast<std::size_t>(i)], stride);
      prev_c = cs[static_cast<std::size_t>(i)];
    }

    const auto specs = config_.effective_subnets();
    subnets_.resize(static_cast<std::size_t>(scales));
    for (int i = 0; i < scales; ++i) {
      const int c = cs[static_cast<std::size_t>(i)];
      int b = 0;
      for (BlockKind kind : specs[static_cast<std::size_t>(i)]) {
        const std::string prefix = "sub" + std::to_string(i + 1) + ".b" + std::to_string(++b);
        switch (kind) {
          case BlockKind::Residual:
            subnets_[static_cast<std::size_t>(i)].emplace_back(std::in_place_type<ResidualBlock>, params_, prefix, c, c, 1);
            break;
          case BlockKind::AFeB:
            subnets_[static_cast<std::size_t>(i)].emplace_back(std::in_place_type<AFeB>, params_, prefix, c);
            break;
          case BlockKind::AMB:
            subnets_[static_cast<std::size_t>(i)].emplace_back(std::in_place_type<AMB>, params_, prefix, c, config_.dilations);
            break;
        }
      }
    }

    lift_ = Conv2dLayer(params_, "dec.lift", ConvSpec::k3(config_.in_channels, cs[0]));
    const bool afub = variant_uses_afub(config_.variant);
    const bool post_res = !afub && config_.variant != Variant::ED;
    for (int step = 0; step < scales; ++step) {
      const bool upsample = step < scales - 1;
      const int c = upsample ? cs[static_cast<std::size_t>(scales - 2 - step)] : cs[0];
      const std::string prefix = "dec.fuse" + std::to_string(step + 1);
      if (afub) {
        afubs_.emplace_back(params_, prefix, c, upsample);
      } else {
        EdFusion fu;
        fu.upsample = upsample;
        if (upsample) fu.up.emplace(params_, prefix + ".up", 2 * c, c);
        fu.merge = Conv2dLayer(params_, prefix + ".merge", ConvSpec::k3(2 * c, c));
        if (post_res) fu.post.emplace(params_, prefix + ".post", c, c, 1);
        ed_steps_.push_back(std::move(fu));
      }
    }
    out_conv_ = Conv2dLayer(params_, "dec.out", ConvSpec::k3(cs[0], config_.in_channels));
  }

  template <class E>
  typename E::T fuse_forward_with(E& eng, int step, const typename E::T& coarse,
                                  const typename E::T& fine) const {
    if (!afubs_.empty()) return afubs_[static_cast<std::size_t>(step)].forward_with(eng, coarse, fine);
    const EdFusion& fu = ed_steps_[static_cast<std::size_t>(step)];
    typename E::T up = fu.upsample ? fu.up->forward_with(eng, coarse) : coarse;
    if (shape_of(up) != shape_of(fine)) {
      throw ShapeError("decoder streams disagree: " + shape_of(up).str() + " vs " + shape_of(fine).str());
    }
    typename E::T merged = fu.merge.forward_with(eng, eng.concat_channels({up, fine}));
    if (fu.post.has_value()) merged = fu.post->forward_with(eng, merged);
    return merged;
  }

  ModelConfig config_;
  ParamStore params_;
  std::vector<ResidualBlock> encoder_;
  std::vector<std::vector<SubnetBlock>> subnets_;
  std::vector<AFuB> afubs_;
  std::vector<EdFusion> ed_steps_;
  Conv2dLayer lift_;
  Conv2dLayer out_conv_;
};

}  // namespace msanet
