#pragma once

// On-disk formats.
//
// RGBD source directory:
//   <id>.png         8-bit RGB
//   <id>.depth.png   16-bit grayscale; meters = min_m + v / 65535 * (max_m - min_m)
//   depth_meta.json  {"min_m": ..., "max_m": ...}
//
// Synthesized dataset directory:
//   hazy/<pair_id>.png, clear/<pair_id>.png, depth/<pair_id>.depth.png,
//   depth_meta.json, manifest.json

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "dehaze/haze_synth.hpp"
#include "json.hpp"

namespace dehaze {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct DepthMeta {
  double min_m = 0.0;
  double max_m = 10.0;
};

inline Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline Image read_png_rgb(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw ValidationError("cannot read image " + path.string());
  Image img({3, m.rows, m.cols});
  const std::size_t plane = static_cast<std::size_t>(m.rows) * m.cols;
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) {
      const auto px = m.at<cv::Vec3b>(r, c);  // BGR
      for (int ch = 0; ch < 3; ++ch) img[ch * plane + r * m.cols + c] = px[2 - ch] / 255.0;
    }
  return img;
}

inline void write_png_rgb(const fs::path& path, const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ValidationError("write_png_rgb: image must be [3,H,W]");
  const int H = img.dim(1), W = img.dim(2);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  cv::Mat m(H, W, CV_8UC3);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      cv::Vec3b px;
      for (int ch = 0; ch < 3; ++ch)
        px[2 - ch] = static_cast<unsigned char>(std::lround(std::clamp(img[ch * plane + r * W + c], 0.0, 1.0) * 255.0));
      m.at<cv::Vec3b>(r, c) = px;
    }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write " + path.string());
}

inline Plane read_depth_png(const fs::path& path, const DepthMeta& meta) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_ANYDEPTH);
  if (m.empty()) throw ValidationError("cannot read depth map " + path.string());
  if (m.type() != CV_16UC1) throw ValidationError(path.string() + " is not a 16-bit grayscale PNG");
  Plane d({m.rows, m.cols});
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c)
      d[static_cast<std::size_t>(r) * m.cols + c] =
          meta.min_m + m.at<std::uint16_t>(r, c) / 65535.0 * (meta.max_m - meta.min_m);
  return d;
}

inline void write_depth_png(const fs::path& path, const Plane& depth, const DepthMeta& meta) {
  const int H = depth.dim(0), W = depth.dim(1);
  cv::Mat m(H, W, CV_16UC1);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const double v = (depth[static_cast<std::size_t>(r) * W + c] - meta.min_m) / (meta.max_m - meta.min_m);
      m.at<std::uint16_t>(r, c) = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write " + path.string());
}

inline DepthMeta read_depth_meta(const fs::path& dir) {
  const fs::path p = dir / "depth_meta.json";
  if (!fs::exists(p))
    throw ValidationError("missing " + p.string() +
                          "; create it with {\"min_m\": <meters at 0>, \"max_m\": <meters at 65535>}");
  const Json j = read_json(p);
  if (!j.contains("min_m") || !j.contains("max_m"))
    throw ValidationError(p.string() + " must define numeric min_m and max_m");
  DepthMeta m{j["min_m"].get<double>(), j["max_m"].get<double>()};
  if (!(m.max_m > m.min_m)) throw ValidationError(p.string() + ": max_m must exceed min_m");
  return m;
}

inline void write_depth_meta(const fs::path& dir, const DepthMeta& m) {
  write_json(dir / "depth_meta.json", Json{{"min_m", m.min_m}, {"max_m", m.max_m}});
}

/// Writes RGBD sources; depth is quantized over [0, ceil(max depth)].
inline void write_rgbd_dir(const fs::path& dir, const std::vector<RgbdSample>& samples) {
  double max_d = 1.0;
  for (const auto& s : samples) max_d = std::max(max_d, s.depth.max());
  const DepthMeta meta{0.0, std::ceil(max_d)};
  fs::create_directories(dir);
  write_depth_meta(dir, meta);
  for (const auto& s : samples) {
    write_png_rgb(dir / (s.id + ".png"), s.image);
    write_depth_png(dir / (s.id + ".depth.png"), s.depth, meta);
  }
}

/// Reads every <id>.png with a matching <id>.depth.png, sorted by id.
inline std::vector<RgbdSample> read_rgbd_dir(const fs::path& dir, bool allow_zero_depth = false) {
  if (!fs::is_directory(dir)) throw ValidationError("RGBD source directory " + dir.string() + " does not exist");
  const DepthMeta meta = read_depth_meta(dir);
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() > 4 && name.ends_with(".png") && !name.ends_with(".depth.png"))
      ids.push_back(name.substr(0, name.size() - 4));
  }
  std::sort(ids.begin(), ids.end());
  std::vector<RgbdSample> out;
  for (const auto& id : ids) {
    const fs::path dp = dir / (id + ".depth.png");
    if (!fs::exists(dp)) throw ValidationError("missing depth map " + dp.string());
    RgbdSample s{read_png_rgb(dir / (id + ".png")), read_depth_png(dp, meta), id};
    s.validate(allow_zero_depth);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ValidationError("no RGBD samples in " + dir.string());
  return out;
}

inline Json manifest_json(const SynthResult& r, const SynthOptions& opt) {
  Json pairs = Json::array();
  for (const auto& m : r.manifest)
    pairs.push_back({{"pair_id", m.pair_id},
                     {"source_id", m.source_id},
                     {"A", m.atmospheric_light},
                     {"beta", m.beta},
                     {"hazy", "hazy/" + m.pair_id + ".png"},
                     {"clear", "clear/" + m.pair_id + ".png"},
                     {"depth", "depth/" + m.pair_id + ".depth.png"}});
  return Json{{"schema_version", 1},
              {"seed", opt.seed},
              {"samples_per_image", opt.samples_per_image},
              {"A_range", {opt.atmospheric_light.lo, opt.atmospheric_light.hi}},
              {"beta_range", {opt.beta.lo, opt.beta.hi}},
              {"pairs", pairs}};
}

inline void write_dataset(const fs::path& dir, const SynthResult& r, const SynthOptions& opt) {
  double max_d = 1.0;
  for (const auto& p : r.pairs) max_d = std::max(max_d, p.depth.max());
  const DepthMeta meta{0.0, std::ceil(max_d)};
  fs::create_directories(dir / "hazy");
  fs::create_directories(dir / "clear");
  fs::create_directories(dir / "depth");
  write_depth_meta(dir, meta);
  for (const auto& p : r.pairs) {
    write_png_rgb(dir / "hazy" / (p.pair_id + ".png"), p.hazy);
    write_png_rgb(dir / "clear" / (p.pair_id + ".png"), p.clear);
    write_depth_png(dir / "depth" / (p.pair_id + ".depth.png"), p.depth, meta);
  }
  write_json(dir / "manifest.json", manifest_json(r, opt));
}

/// Loads a synthesized dataset (quantized to 8 bits by storage).
inline std::vector<HazePair> read_dataset(const fs::path& dir) {
  const fs::path mp = dir / "manifest.json";
  if (!fs::exists(mp)) throw ValidationError("missing " + mp.string() + "; run `synth` first");
  const Json j = read_json(mp);
  const DepthMeta meta = read_depth_meta(dir);
  std::vector<HazePair> out;
  for (const auto& rec : j.at("pairs")) {
    HazePair p;
    p.pair_id = rec.at("pair_id").get<std::string>();
    p.source_id = rec.at("source_id").get<std::string>();
    p.params = {rec.at("A").get<double>(), rec.at("beta").get<double>()};
    p.hazy = read_png_rgb(dir / rec.at("hazy").get<std::string>());
    p.clear = read_png_rgb(dir / rec.at("clear").get<std::string>());
    p.depth = read_depth_png(dir / rec.at("depth").get<std::string>(), meta);
    out.push_back(std::move(p));
  }
  if (out.empty()) throw ValidationError("dataset " + dir.string() + " has no pairs");
  return out;
}

}  // namespace dehaze
