// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON file resolves into everything a run needs.
// Unknown keys are rejected (with their full dotted path), defaults fill the
// gaps, and the resolved form serializes back to JSON so every run can write
// an exact snapshot of what it executed.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "faceadapt/manifest.hpp"
#include "faceadapt/synthetic.hpp"
#include "faceadapt/trainer.hpp"
#include "faceadapt/vit.hpp"

namespace faceadapt {

/// Fully resolved run description. A single global seed feeds the training
/// loop directly and derives the subset seed through the usual label chain;
/// either can still be pinned explicitly in the file.
struct RunConfig {
  std::string command;  // one of train/evaluate/merge/subset/synth/report-bias
  ViTConfig vit;        // defaults to the desk-scale backbone
  TrainConfig train;    // defaults to the full-scale training presets
  SubsetSpec subset;    // width 0 means "no subsetting requested"
  SyntheticConfig synth;
  Index synth_pairs = 300;  // per-label protocol size for generated datasets
  std::vector<double> far_targets = {1e-3, 1e-4, 1e-5};
  std::string manifest;
  std::string protocol;
  std::string checkpoint;
  std::string base_model;
  std::string out;
};

namespace detail {

inline std::string jpath(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

inline std::int64_t as_int(const nlohmann::json& v, const std::string& path) {
  if (!v.is_number_integer())
    throw ConfigError("config key '" + path + "' expects an integer");
  return v.get<std::int64_t>();
}

inline double as_double(const nlohmann::json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError("config key '" + path + "' expects a number");
  return v.get<double>();
}

inline bool as_bool(const nlohmann::json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError("config key '" + path + "' expects a boolean");
  return v.get<bool>();
}

inline std::string as_string(const nlohmann::json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError("config key '" + path + "' expects a string");
  return v.get<std::string>();
}

inline std::vector<double> as_doubles(const nlohmann::json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError("config key '" + path + "' expects an array of numbers");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number())
      throw ConfigError("config key '" + path + "' expects an array of numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

inline void require_object(const nlohmann::json& v, const std::string& path) {
  if (!v.is_object()) throw ConfigError("config key '" + path + "' expects an object");
}

inline void parse_model(const nlohmann::json& j, ViTConfig& vit, const std::string& base) {
  require_object(j, base);
  for (const auto& [key, val] : j.items()) {
    const auto path = jpath(base, key);
    if (key == "image_size") vit.image_size = Index(as_int(val, path));
    else if (key == "patch_size") vit.patch_size = Index(as_int(val, path));
    else if (key == "channels") vit.channels = Index(as_int(val, path));
    else if (key == "d_model") vit.d_model = Index(as_int(val, path));
    else if (key == "n_heads") vit.n_heads = Index(as_int(val, path));
    else if (key == "n_layers") vit.n_layers = Index(as_int(val, path));
    else if (key == "mlp_ratio") vit.mlp_ratio = as_double(val, path);
    else throw ConfigError("unknown config key '" + path + "'");
  }
}

inline void parse_augment(const nlohmann::json& j, AugmentPolicy& aug, const std::string& base) {
  require_object(j, base);
  for (const auto& [key, val] : j.items()) {
    const auto path = jpath(base, key);
    if (key == "num_ops") aug.num_ops = int(as_int(val, path));
    else if (key == "magnitude") aug.magnitude = int(as_int(val, path));
    else if (key == "flip_prob") aug.flip_prob = as_double(val, path);
    else throw ConfigError("unknown config key '" + path + "'");
  }
}

inline void parse_train(const nlohmann::json& j, TrainConfig& t, bool& seed_set,
                        const std::string& base) {
  require_object(j, base);
  for (const auto& [key, val] : j.items()) {
    const auto path = jpath(base, key);
    if (key == "epochs") t.epochs = Index(as_int(val, path));
    else if (key == "batch_size") t.batch_size = Index(as_int(val, path));
    else if (key == "base_lr") t.base_lr = as_double(val, path);
    else if (key == "weight_decay") t.weight_decay = as_double(val, path);
    else if (key == "margin") t.margin = as_double(val, path);
    else if (key == "scale") t.scale = as_double(val, path);
    else if (key == "rank") t.rank = Index(as_int(val, path));
    else if (key == "alpha") t.alpha = as_double(val, path);
    else if (key == "mode") t.mode = parse_scaling_mode(as_string(val, path));
    else if (key == "per_head") t.per_head = as_bool(val, path);
    else if (key == "neck_dim") t.neck_dim = Index(as_int(val, path));
    else if (key == "grad_clip") t.grad_clip = as_double(val, path);
    else if (key == "seed") {
      t.seed = std::uint64_t(as_int(val, path));
      seed_set = true;
    } else if (key == "augment") parse_augment(val, t.augment, path);
    else if (key == "norm_mean") t.norm_mean = as_doubles(val, path);
    else if (key == "norm_std") t.norm_std = as_doubles(val, path);
    else throw ConfigError("unknown config key '" + path + "'");
  }
}

inline void parse_subset(const nlohmann::json& j, SubsetSpec& s, bool& seed_set,
                         const std::string& base) {
  require_object(j, base);
  for (const auto& [key, val] : j.items()) {
    const auto path = jpath(base, key);
    if (key == "width") s.n = Index(as_int(val, path));
    else if (key == "mode") s.mode = parse_depth_mode(as_string(val, path));
    else if (key == "seed") {
      s.seed = std::uint64_t(as_int(val, path));
      seed_set = true;
    } else throw ConfigError("unknown config key '" + path + "'");
  }
}

inline void parse_synth(const nlohmann::json& j, SyntheticConfig& sc, Index& pairs,
                        bool& seed_set, const std::string& base) {
  require_object(j, base);
  for (const auto& [key, val] : j.items()) {
    const auto path = jpath(base, key);
    if (key == "identities") sc.n_identities = Index(as_int(val, path));
    else if (key == "per_id") sc.images_per_identity = Index(as_int(val, path));
    else if (key == "image_size") sc.image_size = Index(as_int(val, path));
    else if (key == "groups") sc.n_groups = Index(as_int(val, path));
    else if (key == "first_image_index") sc.first_image_index = Index(as_int(val, path));
    else if (key == "noise") sc.noise = as_double(val, path);
    else if (key == "max_shift") sc.max_shift = as_double(val, path);
    else if (key == "brightness_lo") sc.brightness_lo = as_double(val, path);
    else if (key == "brightness_hi") sc.brightness_hi = as_double(val, path);
    else if (key == "pairs") pairs = Index(as_int(val, path));
    else if (key == "seed") {
      sc.seed = std::uint64_t(as_int(val, path));
      seed_set = true;
    } else throw ConfigError("unknown config key '" + path + "'");
  }
}

}  // namespace detail

/// Resolves a JSON object against the defaults. Every key is optional; any
/// key the schema does not know is an error naming its dotted path.
inline RunConfig parse_run_config(const nlohmann::json& root) {
  if (!root.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig rc;
  std::uint64_t global_seed = rc.train.seed;
  bool global_seed_set = false, train_seed_set = false, subset_seed_set = false,
       synth_seed_set = false;

  for (const auto& [key, val] : root.items()) {
    if (key == "seed") {
      global_seed = std::uint64_t(detail::as_int(val, "seed"));
      global_seed_set = true;
    } else if (key == "command") rc.command = detail::as_string(val, "command");
    else if (key == "out") rc.out = detail::as_string(val, "out");
    else if (key == "manifest") rc.manifest = detail::as_string(val, "manifest");
    else if (key == "protocol") rc.protocol = detail::as_string(val, "protocol");
    else if (key == "checkpoint") rc.checkpoint = detail::as_string(val, "checkpoint");
    else if (key == "base_model") rc.base_model = detail::as_string(val, "base_model");
    else if (key == "model") detail::parse_model(val, rc.vit, "model");
    else if (key == "train") detail::parse_train(val, rc.train, train_seed_set, "train");
    else if (key == "subset") detail::parse_subset(val, rc.subset, subset_seed_set, "subset");
    else if (key == "synth")
      detail::parse_synth(val, rc.synth, rc.synth_pairs, synth_seed_set, "synth");
    else if (key == "eval") {
      detail::require_object(val, "eval");
      for (const auto& [ekey, eval_val] : val.items()) {
        const auto path = detail::jpath("eval", ekey);
        if (ekey == "far_targets") rc.far_targets = detail::as_doubles(eval_val, path);
        else throw ConfigError("unknown config key '" + path + "'");
      }
    } else throw ConfigError("unknown config key '" + key + "'");
  }

  if (global_seed_set && !train_seed_set) rc.train.seed = global_seed;
  if (!subset_seed_set) rc.subset.seed = derive_seed(rc.train.seed, "subset");
  if (!synth_seed_set) rc.synth.seed = derive_seed(rc.train.seed, "synth");

  if (!rc.command.empty() && rc.command != "train" && rc.command != "evaluate" &&
      rc.command != "merge" && rc.command != "subset" && rc.command != "synth" &&
      rc.command != "report-bias")
    throw ConfigError("unknown command '" + rc.command + "'");
  rc.vit.validate();
  rc.train.validate();
  if (rc.synth.n_identities < 1) throw ConfigError("synth.identities must be positive");
  if (rc.synth.images_per_identity < 1) throw ConfigError("synth.per_id must be positive");
  if (rc.synth_pairs < 1) throw ConfigError("synth.pairs must be positive");
  if (rc.far_targets.empty()) throw ConfigError("eval.far_targets must not be empty");
  for (double t : rc.far_targets)
    if (!(t > 0.0 && t < 1.0))
      throw ConfigError("eval.far_targets entries must lie in (0, 1)");
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

/// Complete resolved form: feeding this back through parse_run_config
/// reproduces the same RunConfig, which is what makes snapshots rerunnable.
inline nlohmann::json resolved_run_config(const RunConfig& rc) {
  nlohmann::json j;
  j["seed"] = rc.train.seed;
  if (!rc.command.empty()) j["command"] = rc.command;
  if (!rc.out.empty()) j["out"] = rc.out;
  if (!rc.manifest.empty()) j["manifest"] = rc.manifest;
  if (!rc.protocol.empty()) j["protocol"] = rc.protocol;
  if (!rc.checkpoint.empty()) j["checkpoint"] = rc.checkpoint;
  if (!rc.base_model.empty()) j["base_model"] = rc.base_model;

  nlohmann::json m;
  m["image_size"] = rc.vit.image_size;
  m["patch_size"] = rc.vit.patch_size;
  m["channels"] = rc.vit.channels;
  m["d_model"] = rc.vit.d_model;
  m["n_heads"] = rc.vit.n_heads;
  m["n_layers"] = rc.vit.n_layers;
  m["mlp_ratio"] = rc.vit.mlp_ratio;
  j["model"] = m;

  nlohmann::json t;
  t["epochs"] = rc.train.epochs;
  t["batch_size"] = rc.train.batch_size;
  t["base_lr"] = rc.train.base_lr;
  t["weight_decay"] = rc.train.weight_decay;
  t["margin"] = rc.train.margin;
  t["scale"] = rc.train.scale;
  t["rank"] = rc.train.rank;
  t["alpha"] = rc.train.alpha;
  t["mode"] = scaling_mode_name(rc.train.mode);
  t["per_head"] = rc.train.per_head;
  t["neck_dim"] = rc.train.neck_dim;
  t["grad_clip"] = rc.train.grad_clip;
  t["seed"] = rc.train.seed;
  t["augment"] = {{"num_ops", rc.train.augment.num_ops},
                  {"magnitude", rc.train.augment.magnitude},
                  {"flip_prob", rc.train.augment.flip_prob}};
  t["norm_mean"] = rc.train.norm_mean;
  t["norm_std"] = rc.train.norm_std;
  j["train"] = t;

  nlohmann::json s;
  s["width"] = rc.subset.n;
  s["mode"] = rc.subset.mode == DepthMode::RandomIdentities ? "random_identities"
                                                            : "top_by_image_count";
  s["seed"] = rc.subset.seed;
  j["subset"] = s;

  nlohmann::json sy;
  sy["identities"] = rc.synth.n_identities;
  sy["per_id"] = rc.synth.images_per_identity;
  sy["image_size"] = rc.synth.image_size;
  sy["groups"] = rc.synth.n_groups;
  sy["first_image_index"] = rc.synth.first_image_index;
  sy["noise"] = rc.synth.noise;
  sy["max_shift"] = rc.synth.max_shift;
  sy["brightness_lo"] = rc.synth.brightness_lo;
  sy["brightness_hi"] = rc.synth.brightness_hi;
  sy["pairs"] = rc.synth_pairs;
  sy["seed"] = rc.synth.seed;
  j["synth"] = sy;

  j["eval"] = {{"far_targets", rc.far_targets}};
  return j;
}

}  // namespace faceadapt
