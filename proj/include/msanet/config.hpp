// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msanet/model.hpp"

namespace msanet {

// Config documents are JSON with a fixed schema; unknown keys are hard
// errors so typos cannot silently fall back to defaults.

inline std::string block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::Residual: return "residual";
    case BlockKind::AFeB: return "afeb";
    case BlockKind::AMB: return "amb";
  }
  return "residual";
}

inline BlockKind block_kind_from_name(const std::string& s) {
  if (s == "residual") return BlockKind::Residual;
  if (s == "afeb") return BlockKind::AFeB;
  if (s == "amb") return BlockKind::AMB;
  throw ConfigError("unknown block kind: " + s);
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
  for (const auto& item : obj.items()) {
    if (allowed.count(item.key()) == 0) {
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
  }
}

template <typename T>
inline void read_field(const nlohmann::json& obj, const std::string& key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for '" + key + "' in " + where + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["in_channels"] = c.in_channels;
  j["base_channels"] = c.base_channels;
  if (!c.scale_channels.empty()) j["scale_channels"] = c.scale_channels;
  j["subnet_depths"] = c.subnet_depths;
  if (!c.subnet_specs.empty()) {
    nlohmann::json specs = nlohmann::json::array();
    for (const auto& seq : c.subnet_specs) {
      nlohmann::json one = nlohmann::json::array();
      for (BlockKind k : seq) one.push_back(block_kind_name(k));
      specs.push_back(one);
    }
    j["subnet_specs"] = specs;
  }
  j["dilations"] = c.dilations;
  j["variant"] = variant_name(c.variant);
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  detail::reject_unknown_keys(j, {"in_channels", "base_channels", "scale_channels", "subnet_depths",
                                  "subnet_specs", "dilations", "variant"},
                              "model config");
  ModelConfig c;
  detail::read_field(j, "in_channels", c.in_channels, "model config");
  detail::read_field(j, "base_channels", c.base_channels, "model config");
  std::vector<int> scale_channels;
  detail::read_field(j, "scale_channels", scale_channels, "model config");
  c.scale_channels = scale_channels;
  detail::read_field(j, "subnet_depths", c.subnet_depths, "model config");
  if (j.contains("subnet_specs")) {
    c.subnet_specs.clear();
    for (const auto& seq : j.at("subnet_specs")) {
      std::vector<BlockKind> kinds;
      for (const auto& name : seq) kinds.push_back(block_kind_from_name(name.get<std::string>()));
      c.subnet_specs.push_back(std::move(kinds));
    }
  }
  detail::read_field(j, "dilations", c.dilations, "model config");
  if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.validate();
  return c;
}

inline std::string model_config_to_text(const ModelConfig& c) { return model_config_to_json(c).dump(2); }

inline ModelConfig model_config_from_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config blob is not valid JSON: ") + e.what());
  }
  return model_config_from_json(j);
}

// First differing field between two model configs, if any.
inline std::optional<std::string> model_config_diff(const ModelConfig& a, const ModelConfig& b) {
  if (a.in_channels != b.in_channels) return "in_channels";
  if (a.base_channels != b.base_channels) return "base_channels";
  if (a.scale_channels != b.scale_channels) return "scale_channels";
  if (a.subnet_depths != b.subnet_depths) return "subnet_depths";
  if (a.subnet_specs != b.subnet_specs) return "subnet_specs";
  if (a.dilations != b.dilations) return "dilations";
  if (a.variant != b.variant) return "variant";
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Training schedule and the full run configuration document.
// ---------------------------------------------------------------------------

struct TrainSchedule {
  int epochs = 30;
  int steps_per_epoch = 0;  // 0: derive from dataset size at fit time
  float lr0 = 1e-4f;
  int loss_p = 2;
  int batch = 8;
  int patch = 64;
  std::uint64_t seed = 1;
  float sigma = 30.0f;
  float grad_clip = 0.0f;  // 0: off
  int checkpoint_every = 1;
  int keep_last = 3;
  bool clamp_noisy = false;
  bool grayscale = false;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be >= 0");
    if (lr0 < 0.0f) throw ConfigError("lr0 must be >= 0");
    if (loss_p != 1 && loss_p != 2) throw ConfigError("loss must be l1 or l2");
    if (batch < 1 || patch < 1) throw ConfigError("batch and patch must be >= 1");
    if (sigma < 0.0f) throw ConfigError("sigma must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (keep_last < 1) throw ConfigError("keep_last must be >= 1");
  }
};

inline nlohmann::json train_schedule_to_json(const TrainSchedule& s) {
  nlohmann::json j;
  j["epochs"] = s.epochs;
  j["steps_per_epoch"] = s.steps_per_epoch;
  j["lr0"] = s.lr0;
  j["loss"] = s.loss_p == 1 ? "l1" : "l2";
  j["batch"] = s.batch;
  j["patch"] = s.patch;
  j["seed"] = s.seed;
  j["sigma"] = s.sigma;
  j["grad_clip"] = s.grad_clip;
  j["checkpoint_every"] = s.checkpoint_every;
  j["keep_last"] = s.keep_last;
  j["clamp_noisy"] = s.clamp_noisy;
  j["grayscale"] = s.grayscale;
  return j;
}

inline TrainSchedule train_schedule_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  detail::reject_unknown_keys(j,
                              {"epochs", "steps_per_epoch", "lr0", "loss", "batch", "patch", "seed", "sigma",
                               "grad_clip", "checkpoint_every", "keep_last", "clamp_noisy", "grayscale"},
                              "train config");
  TrainSchedule s;
  detail::read_field(j, "epochs", s.epochs, "train config");
  detail::read_field(j, "steps_per_epoch", s.steps_per_epoch, "train config");
  detail::read_field(j, "lr0", s.lr0, "train config");
  if (j.contains("loss")) {
    const std::string loss = j.at("loss").get<std::string>();
    if (loss == "l1") {
      s.loss_p = 1;
    } else if (loss == "l2") {
      s.loss_p = 2;
    } else {
      throw ConfigError("loss must be 'l1' or 'l2', got '" + loss + "'");
    }
  }
  detail::read_field(j, "batch", s.batch, "train config");
  detail::read_field(j, "patch", s.patch, "train config");
  detail::read_field(j, "seed", s.seed, "train config");
  detail::read_field(j, "sigma", s.sigma, "train config");
  detail::read_field(j, "grad_clip", s.grad_clip, "train config");
  detail::read_field(j, "checkpoint_every", s.checkpoint_every, "train config");
  detail::read_field(j, "keep_last", s.keep_last, "train config");
  detail::read_field(j, "clamp_noisy", s.clamp_noisy, "train config");
  detail::read_field(j, "grayscale", s.grayscale, "train config");
  s.validate();
  return s;
}

struct RunConfig {
  ModelConfig model;
  TrainSchedule train;
  std::string train_dir;
  std::string val_dir;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = model_config_to_json(model);
    j["train"] = train_schedule_to_json(train);
    nlohmann::json data;
    data["train_dir"] = train_dir;
    data["val_dir"] = val_dir;
    j["data"] = data;
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("run config must be an object");
    detail::reject_unknown_keys(j, {"model", "train", "data"}, "run config");
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_schedule_from_json(j.at("train"));
    if (j.contains("data")) {
      const nlohmann::json& d = j.at("data");
      detail::reject_unknown_keys(d, {"train_dir", "val_dir"}, "data config");
      detail::read_field(d, "train_dir", c.train_dir, "data config");
      detail::read_field(d, "val_dir", c.val_dir, "data config");
    }
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
  }
};

}  // namespace msanet
