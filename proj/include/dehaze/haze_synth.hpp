#pragma once

// Atmospheric scattering model and synthetic hazy/clear pair generation.
//
//   I(x) = J(x) t(x) + A (1 - t(x)),   t(x) = exp(-beta d(x))
//
// Images are [3, H, W] tensors in [0, 1]; depth and transmission are [H, W].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dehaze/rng.hpp"
#include "dehaze/tensor.hpp"

namespace dehaze {

using Image = Tensor<double>;  // [3, H, W]
using Plane = Tensor<double>;  // [H, W]

struct RgbdSample {
  Image image;
  Plane depth;  // meters
  std::string id;

  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }

  void validate(bool allow_zero_depth = false) const {
    if (image.rank() != 3 || image.dim(0) != 3) throw ValidationError(id + ": image must be [3,H,W]");
    if (depth.rank() != 2 || depth.dim(0) != image.dim(1) || depth.dim(1) != image.dim(2))
      throw ValidationError(id + ": depth " + shape_str(depth.shape()) + " does not match image " +
                            shape_str(image.shape()));
    for (double v : image.values())
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(id + ": image values must lie in [0, 1]");
    std::size_t bad = 0;
    for (double d : depth.values())
      if (!std::isfinite(d) || d < 0.0 || (d == 0.0 && !allow_zero_depth)) ++bad;
    if (bad) throw ValidationError(id + ": " + std::to_string(bad) + " depth pixels are non-finite or non-positive");
  }
};

struct HazeParams {
  double atmospheric_light = 1.0;  // A
  double beta = 1.0;               // scattering coefficient

  void validate() const {
    if (!std::isfinite(atmospheric_light) || !(atmospheric_light > 0.0) || atmospheric_light > 1.0)
      throw ValidationError("atmospheric light must lie in (0, 1], got " + std::to_string(atmospheric_light));
    if (!std::isfinite(beta) || beta < 0.0)
      throw ValidationError("beta must be finite and >= 0, got " + std::to_string(beta));
  }
};

struct TransmissionMap {
  Plane t;  // (0, 1]
};

struct HazePair {
  Image hazy;
  Image clear;
  HazeParams params;
  Plane depth;
  std::string source_id;
  std::string pair_id;
};

/// t = exp(-depth * beta). Zero depth is rejected unless `allow_zero_depth`.
inline TransmissionMap transmission_from_depth(const Plane& depth, double beta, bool allow_zero_depth = false) {
  if (!std::isfinite(beta) || beta < 0.0) throw ValidationError("beta must be finite and >= 0");
  std::size_t bad = 0;
  for (double d : depth.values())
    if (!std::isfinite(d) || d < 0.0 || (d == 0.0 && !allow_zero_depth)) ++bad;
  if (bad)
    throw ValidationError("transmission_from_depth: " + std::to_string(bad) +
                          " depth pixels are non-finite or non-positive");
  Plane t(depth.shape());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::exp(-depth[i] * beta);
  return {std::move(t)};
}

namespace detail {
inline void check_image_vs_plane(const Image& img, const Plane& p, const char* op) {
  if (img.rank() != 3 || p.rank() != 2 || img.dim(1) != p.dim(0) || img.dim(2) != p.dim(1))
    throw ValidationError(std::string(op) + ": image " + shape_str(img.shape()) + " and transmission " +
                          shape_str(p.shape()) + " differ in spatial shape");
}
}  // namespace detail

/// I = J t + A (1 - t) per channel, clipped to [0, 1]. `clipped` receives the
/// number of clipped values when non-null.
inline Image apply_scattering(const Image& clear, const TransmissionMap& tm, double A, std::size_t* clipped = nullptr) {
  detail::check_image_vs_plane(clear, tm.t, "apply_scattering");
  HazeParams{A, 0.0}.validate();
  Image out(clear.shape());
  const std::size_t plane = tm.t.size();
  std::size_t n_clip = 0;
  for (int c = 0; c < clear.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      const double t = tm.t[i];
      double v = clear[c * plane + i] * t + A * (1.0 - t);
      if (v < 0.0 || v > 1.0) {
        ++n_clip;
        v = std::clamp(v, 0.0, 1.0);
      }
      out[c * plane + i] = v;
    }
  if (n_clip) log_info("apply_scattering: clipped " + std::to_string(n_clip) + " values");
  if (clipped) *clipped = n_clip;
  return out;
}

/// J = (I - A (1 - t')) / t' with t' = max(t, t_min), clipped to [0, 1].
inline Image invert_scattering(const Image& hazy, const TransmissionMap& tm, double A, double t_min = 0.05) {
  detail::check_image_vs_plane(hazy, tm.t, "invert_scattering");
  if (!(t_min >= 0.0)) throw ValidationError("invert_scattering: t_min must be >= 0");
  Image out(hazy.shape());
  const std::size_t plane = tm.t.size();
  for (int c = 0; c < hazy.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      const double t = std::max(tm.t[i], t_min);
      out[c * plane + i] = std::clamp((hazy[c * plane + i] - A * (1.0 - t)) / t, 0.0, 1.0);
    }
  return out;
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct SynthOptions {
  int samples_per_image = 4;
  Range atmospheric_light{0.5, 1.0};
  Range beta{0.4, 1.6};
  std::uint64_t seed = 0;
  bool allow_zero_depth = false;
};

struct ManifestRecord {
  std::string pair_id;
  std::string source_id;
  double atmospheric_light = 0.0;
  double beta = 0.0;
};

struct SynthResult {
  std::vector<HazePair> pairs;
  std::vector<ManifestRecord> manifest;
};

/// Draws (A, beta) per output pair, in source order, before any image work.
inline std::vector<HazeParams> draw_haze_params(std::size_t count, const SynthOptions& opt) {
  Rng rng(opt.seed);
  std::vector<HazeParams> params(count);
  for (auto& p : params) {
    p.atmospheric_light = rng.uniform(opt.atmospheric_light.lo, opt.atmospheric_light.hi);
    p.beta = rng.uniform(opt.beta.lo, opt.beta.hi);
  }
  return params;
}

inline SynthResult synthesize_dataset(const std::vector<RgbdSample>& sources, const SynthOptions& opt) {
  if (sources.empty()) throw ValidationError("synthesize_dataset: empty source list");
  if (opt.samples_per_image < 1) throw ValidationError("synthesize_dataset: samples_per_image must be >= 1");
  for (const Range& r : {opt.atmospheric_light, opt.beta})
    if (!(r.lo > 0.0) || r.lo > r.hi || !std::isfinite(r.hi))
      throw ValidationError("synthesize_dataset: ranges must satisfy 0 < lo <= hi");
  if (opt.atmospheric_light.hi > 1.0) throw ValidationError("synthesize_dataset: atmospheric light must be <= 1");

  const auto params = draw_haze_params(sources.size() * opt.samples_per_image, opt);
  SynthResult out;
  out.pairs.reserve(params.size());
  std::size_t k = 0;
  for (const auto& src : sources) {
    src.validate(opt.allow_zero_depth);
    for (int j = 0; j < opt.samples_per_image; ++j, ++k) {
      const HazeParams& p = params[k];
      const auto tm = transmission_from_depth(src.depth, p.beta, opt.allow_zero_depth);
      HazePair pair{apply_scattering(src.image, tm, p.atmospheric_light), src.image, p, src.depth, src.id,
                    src.id + "_" + std::to_string(j)};
      out.manifest.push_back({pair.pair_id, src.id, p.atmospheric_light, p.beta});
      out.pairs.push_back(std::move(pair));
    }
  }
  return out;
}

inline SynthResult synthesize_dataset(const std::vector<RgbdSample>& sources, int samples_per_image, Range a_range,
                                      Range beta_range, std::uint64_t seed) {
  return synthesize_dataset(sources, SynthOptions{samples_per_image, a_range, beta_range, seed, false});
}

}  // namespace dehaze
