#pragma once

// Evaluation metrics and reports.
//
// PSNR = 10 log10(peak^2 / MSE) with peak 1 for [0,1] images; identical images
// (MSE = 0) report kPsnrCap. SSIM uses the loss module's definition with L = 1.
// Parameter counts follow BuiltNetwork::param_count (trainable elements plus
// persistent spectral-norm vectors). FLOPs are 2 x multiply-accumulates of
// convolutions and attention products.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "dehaze/haze_synth.hpp"
#include "dehaze/networks.hpp"
#include "dehaze/ssim.hpp"
#include "json.hpp"

namespace dehaze {

constexpr double kPsnrCap = 100.0;

inline double mse(const Tensor<double>& x, const Tensor<double>& y) {
  x.require_same(y, "mse");
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.size());
}

inline double psnr(const Tensor<double>& x, const Tensor<double>& y, double peak = 1.0) {
  if (!(peak > 0.0)) throw ValidationError("psnr: peak must be positive");
  const double m = mse(x, y);
  if (m == 0.0) return kPsnrCap;
  return 10.0 * std::log10(peak * peak / m);
}

/// SSIM of two [3,H,W] (or [N,C,H,W]) images in [0,1].
inline double image_ssim(const Tensor<double>& x, const Tensor<double>& y) {
  x.require_same(y, "image_ssim");
  if (x.rank() == 3) {
    const Shape s{1, x.dim(0), x.dim(1), x.dim(2)};
    return ssim_value(x.reshaped(s), y.reshaped(s), 1.0);
  }
  return ssim_value(x, y, 1.0);
}

inline std::int64_t count_params(const BuiltNetwork& n) { return n.param_count(); }

/// Total trainable elements of a live module.
template <typename T>
std::int64_t count_params(Module<T>& m) {
  std::int64_t n = 0;
  for (const auto& r : m.tensors())
    if (r.param) n += static_cast<std::int64_t>(r.tensor->size());
  return n;
}

inline std::int64_t count_flops(const BuiltNetwork& n, int batch = 1) { return n.flops * batch; }

inline std::int64_t count_flops(const NetworkSpec& spec, int height, int width, int batch = 1) {
  Rng rng(0);
  if (spec.kind == NetworkKind::generator) return Generator<float>(spec, rng).describe(height, width).flops * batch;
  return Discriminator<float>(spec, rng).describe(height, width).flops * batch;
}

/// 64-bit FNV-1a over "gen|disc|loss|seed", as 16 hex digits.
inline std::string config_fingerprint(const std::string& gen, const std::string& disc, const std::string& loss,
                                      std::uint64_t seed) {
  const std::string key = gen + "|" + disc + "|" + loss + "|" + std::to_string(seed);
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct ImageScore {
  std::string pair_id;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricsReport {
  std::string model;  // "checkpoint", "oracle", "identity"
  std::string gen, disc, loss;
  std::vector<ImageScore> per_image;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  std::int64_t param_count = 0;
  std::int64_t flop_count = 0;
  int flop_height = 0, flop_width = 0;
  std::string fingerprint;
};

/// Maps a test pair to a dehazed [3,H,W] image in [0,1]. Only the hazy image
/// may be used by real models; the oracle also reads the synthesis parameters.
using DehazeFn = std::function<Image(const HazePair&)>;

inline MetricsReport evaluate(const DehazeFn& model, const std::vector<HazePair>& test_pairs, MetricsReport info = {}) {
  if (test_pairs.empty()) throw ValidationError("evaluate: empty test set");
  info.per_image.clear();
  double sp = 0, ss = 0;
  for (const auto& p : test_pairs) {
    const Image out = model(p);
    if (out.shape() != p.clear.shape())
      throw ValidationError("evaluate: model output " + shape_str(out.shape()) + " does not match " +
                            shape_str(p.clear.shape()));
    ImageScore s{p.pair_id, psnr(out, p.clear), image_ssim(out, p.clear)};
    sp += s.psnr;
    ss += s.ssim;
    info.per_image.push_back(s);
  }
  info.mean_psnr = sp / static_cast<double>(test_pairs.size());
  info.mean_ssim = ss / static_cast<double>(test_pairs.size());
  return info;
}

inline Image identity_dehaze(const HazePair& p) { return p.hazy; }

/// Analytic inverse with the true transmission and atmospheric light.
inline Image oracle_dehaze(const HazePair& p, double t_min = 0.05) {
  const auto tm = transmission_from_depth(p.depth, p.params.beta);
  return invert_scattering(p.hazy, tm, p.params.atmospheric_light, t_min);
}

inline nlohmann::ordered_json report_json(const MetricsReport& r) {
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& s : r.per_image) per.push_back({{"pair_id", s.pair_id}, {"psnr", s.psnr}, {"ssim", s.ssim}});
  return {{"schema_version", 1},
          {"model", r.model},
          {"gen", r.gen},
          {"disc", r.disc},
          {"loss", r.loss},
          {"fingerprint", r.fingerprint},
          {"mean_psnr", r.mean_psnr},
          {"mean_ssim", r.mean_ssim},
          {"param_count", r.param_count},
          {"flop_count", r.flop_count},
          {"flop_input", {r.flop_height, r.flop_width}},
          {"num_images", r.per_image.size()},
          {"per_image", per}};
}

/// Fixed-width table with columns G, D, Loss, PSNR, SSIM, #param.
inline std::string report_table(const std::vector<MetricsReport>& rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-8s %-8s %-9s %8s %7s %9s\n", "G", "D", "Loss", "PSNR", "SSIM", "#param");
  out += buf;
  for (const auto& r : rows) {
    char psnr_s[16] = "-", ssim_s[16] = "-";
    if (!r.per_image.empty()) {
      std::snprintf(psnr_s, sizeof psnr_s, "%.2f", r.mean_psnr);
      std::snprintf(ssim_s, sizeof ssim_s, "%.3f", r.mean_ssim);
    }
    std::snprintf(buf, sizeof buf, "%-8s %-8s %-9s %8s %7s %8.2fM\n", r.gen.c_str(), r.disc.c_str(), r.loss.c_str(),
                  psnr_s, ssim_s, r.param_count / 1e6);
    out += buf;
  }
  return out;
}

}  // namespace dehaze
