#pragma once

// Run configuration document (JSON, schema_version 1):
//
// {
//   "schema_version": 1,
//   "seed": 0,
//   "paper_scale": false,
//   "networks": {"gen": "6B-Oct", "disc": "3L-OctN", "width": 32},
//   "loss": {"components": "CPD", "depth_normalization": "median_scale",
//            "perceptual_backbone": "stub",
//            "weights": {"adv": 1, "cyc": 10, "idt": 5, "perc": 0.1, "depth": 0.5, "ssim": 0.5}},
//   "train": {"epochs": 200, "constant_epochs": 100, "decay_epochs": 100, "max_steps": 0,
//             "batch_size": 2, "lr": 0.0002, "beta1": 0.5, "beta2": 0.999, "image_size": 64,
//             "flip_prob": 0.5, "pool_size": 50, "checkpoint_every": 0, "deterministic": true},
//   "depth": {"backend": "proxy", "weights": "proxy.ckpt"},
//   "synth": {"per_image": 4, "A_range": [0.5, 1.0], "beta_range": [0.4, 1.6]}
// }
//
// Every section and key is optional; unknown keys are rejected.

#include <set>
#include <string>

#include "dehaze/depth_proxy.hpp"
#include "dehaze/haze_synth.hpp"
#include "dehaze/trainer.hpp"
#include "json.hpp"

namespace dehaze {

constexpr int kConfigSchemaVersion = 1;

struct RunConfig {
  TrainConfig train;
  bool paper_scale = false;
  std::string perceptual_backbone = "stub";
  DepthBackend depth_backend = DepthBackend::proxy;
  std::string depth_weights;
  SynthOptions synth;

  /// Desk-scale defaults versus 256x256 images at width 64.
  void apply_scale(bool paper) {
    paper_scale = paper;
    train.image_size = paper ? 256 : 64;
    train.width = paper ? 64 : 32;
  }
};

namespace detail {
inline void check_keys(const nlohmann::ordered_json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <typename V>
void read_key(const nlohmann::ordered_json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

inline const char* depth_norm_name(DepthNormalization n) {
  return n == DepthNormalization::none ? "none" : "median_scale";
}
}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  const LossWeights& w = t.weights;
  return {{"schema_version", kConfigSchemaVersion},
          {"seed", t.seed},
          {"paper_scale", c.paper_scale},
          {"networks", {{"gen", t.gen}, {"disc", t.disc}, {"width", t.width}}},
          {"loss",
           {{"components", t.loss.name()},
            {"depth_normalization", detail::depth_norm_name(t.depth_norm)},
            {"perceptual_backbone", c.perceptual_backbone},
            {"weights",
             {{"adv", w.adv}, {"cyc", w.cyc}, {"idt", w.idt}, {"perc", w.perc}, {"depth", w.depth}, {"ssim", w.ssim}}}}},
          {"train",
           {{"epochs", t.epochs},
            {"constant_epochs", t.constant_epochs},
            {"decay_epochs", t.decay_epochs},
            {"max_steps", t.max_steps},
            {"batch_size", t.batch_size},
            {"lr", t.lr},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"image_size", t.image_size},
            {"flip_prob", t.flip_prob},
            {"pool_size", t.pool_size},
            {"checkpoint_every", t.checkpoint_every},
            {"deterministic", t.deterministic}}},
          {"depth", {{"backend", to_string(c.depth_backend)}, {"weights", c.depth_weights}}},
          {"synth",
           {{"per_image", c.synth.samples_per_image},
            {"A_range", {c.synth.atmospheric_light.lo, c.synth.atmospheric_light.hi}},
            {"beta_range", {c.synth.beta.lo, c.synth.beta.hi}}}}};
}

/// Overlays the keys present in `j` onto `c`.
inline void apply_json(const nlohmann::ordered_json& j, RunConfig& c) {
  using detail::read_key;
  detail::check_keys(j, {"schema_version", "seed", "paper_scale", "networks", "loss", "train", "depth", "synth"},
                     "config");
  if (j.contains("schema_version") && j["schema_version"] != kConfigSchemaVersion)
    throw ConfigError("config: unsupported schema_version " + j["schema_version"].dump() + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  TrainConfig& t = c.train;
  if (j.contains("paper_scale")) c.apply_scale(j["paper_scale"].get<bool>());
  read_key(j, "seed", t.seed);
  if (j.contains("networks")) {
    const auto& n = j["networks"];
    detail::check_keys(n, {"gen", "disc", "width"}, "networks");
    read_key(n, "gen", t.gen);
    read_key(n, "disc", t.disc);
    read_key(n, "width", t.width);
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    detail::check_keys(l, {"components", "depth_normalization", "perceptual_backbone", "weights"}, "loss");
    if (l.contains("components")) t.loss = LossFlags::parse(l["components"].get<std::string>());
    if (l.contains("depth_normalization")) {
      const std::string n = l["depth_normalization"].get<std::string>();
      if (n == "none") t.depth_norm = DepthNormalization::none;
      else if (n == "median_scale") t.depth_norm = DepthNormalization::median_scale;
      else throw ConfigError("config: depth_normalization must be 'none' or 'median_scale'");
    }
    read_key(l, "perceptual_backbone", c.perceptual_backbone);
    if (l.contains("weights")) {
      const auto& w = l["weights"];
      detail::check_keys(w, {"adv", "cyc", "idt", "perc", "depth", "ssim"}, "loss.weights");
      read_key(w, "adv", t.weights.adv);
      read_key(w, "cyc", t.weights.cyc);
      read_key(w, "idt", t.weights.idt);
      read_key(w, "perc", t.weights.perc);
      read_key(w, "depth", t.weights.depth);
      read_key(w, "ssim", t.weights.ssim);
    }
  }
  if (j.contains("train")) {
    const auto& s = j["train"];
    detail::check_keys(s,
                       {"epochs", "constant_epochs", "decay_epochs", "max_steps", "batch_size", "lr", "beta1", "beta2",
                        "image_size", "flip_prob", "pool_size", "checkpoint_every", "deterministic"},
                       "train");
    read_key(s, "epochs", t.epochs);
    read_key(s, "constant_epochs", t.constant_epochs);
    read_key(s, "decay_epochs", t.decay_epochs);
    read_key(s, "max_steps", t.max_steps);
    read_key(s, "batch_size", t.batch_size);
    read_key(s, "lr", t.lr);
    read_key(s, "beta1", t.beta1);
    read_key(s, "beta2", t.beta2);
    read_key(s, "image_size", t.image_size);
    read_key(s, "flip_prob", t.flip_prob);
    read_key(s, "pool_size", t.pool_size);
    read_key(s, "checkpoint_every", t.checkpoint_every);
    read_key(s, "deterministic", t.deterministic);
  }
  if (j.contains("depth")) {
    const auto& d = j["depth"];
    detail::check_keys(d, {"backend", "weights"}, "depth");
    if (d.contains("backend")) c.depth_backend = parse_depth_backend(d["backend"].get<std::string>());
    read_key(d, "weights", c.depth_weights);
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    detail::check_keys(s, {"per_image", "A_range", "beta_range"}, "synth");
    read_key(s, "per_image", c.synth.samples_per_image);
    for (const auto& [key, range] : {std::pair{"A_range", &c.synth.atmospheric_light}, std::pair{"beta_range", &c.synth.beta}})
      if (s.contains(key)) {
        const auto v = s[key].get<std::vector<double>>();
        if (v.size() != 2) throw ConfigError(std::string("config: ") + key + " must be [lo, hi]");
        *range = {v[0], v[1]};
      }
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  RunConfig c;
  c.apply_scale(false);
  apply_json(j, c);
  return c;
}

}  // namespace dehaze
