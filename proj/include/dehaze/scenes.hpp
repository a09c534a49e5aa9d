#pragma once

// Procedural indoor RGBD scenes: a box room seen from its open end, with a few
// fronto-parallel objects in front of the back wall. Surfaces carry random
// colours and textures; shading falls off with distance from a camera-mounted
// light, so brightness correlates with depth as in real indoor captures.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dehaze/haze_synth.hpp"

namespace dehaze {

struct SceneOptions {
  int height = 64;
  int width = 64;
  double min_back_depth = 2.5;
  double max_back_depth = 4.0;
  int max_objects = 3;
};

namespace detail {

struct SurfaceLook {
  std::array<double, 3> albedo;
  int pattern;  // 0 flat, 1 stripes, 2 checker
  double freq;
  double contrast;
};

inline SurfaceLook random_look(Rng& rng) {
  SurfaceLook s;
  for (auto& a : s.albedo) a = rng.uniform(0.15, 0.95);
  s.pattern = static_cast<int>(rng.below(3));
  s.freq = rng.uniform(2.0, 6.0);
  s.contrast = rng.uniform(0.1, 0.35);
  return s;
}

inline double texture(const SurfaceLook& s, double a, double b) {
  switch (s.pattern) {
    case 1: return 1.0 + s.contrast * std::sin(a * s.freq * 3.14159265358979);
    case 2: {
      const int ca = static_cast<int>(std::floor(a * s.freq)), cb = static_cast<int>(std::floor(b * s.freq));
      return 1.0 + s.contrast * (((ca + cb) & 1) ? 1.0 : -1.0);
    }
    default: return 1.0;
  }
}

}  // namespace detail

inline RgbdSample generate_scene(const std::string& id, Rng& rng, const SceneOptions& opt = {}) {
  if (opt.height < 8 || opt.width < 8) throw ValidationError("generate_scene: size must be at least 8x8");
  const int H = opt.height, W = opt.width;
  const double back = rng.uniform(opt.min_back_depth, opt.max_back_depth);
  const double half_w = rng.uniform(0.9, 1.4), half_h = rng.uniform(0.8, 1.2);
  const double focal = rng.uniform(0.9, 1.2);  // tangent of half field of view
  const double cam_y = rng.uniform(-0.3, 0.3);
  const double light_scale = rng.uniform(2.0, 3.0);

  // Surfaces: 0 left, 1 right, 2 floor, 3 ceiling, 4 back, 5.. objects.
  std::vector<detail::SurfaceLook> looks;
  for (int i = 0; i < 5; ++i) looks.push_back(detail::random_look(rng));

  struct Box {
    double x0, x1, y0, y1, z;
  };
  std::vector<Box> boxes;
  const int n_obj = static_cast<int>(rng.below(opt.max_objects + 1));
  for (int i = 0; i < n_obj; ++i) {
    const double z = rng.uniform(0.7, back - 0.3);
    const double cx = rng.uniform(-0.6, 0.6), cy = rng.uniform(-0.6, 0.6);
    const double sx = rng.uniform(0.1, 0.45), sy = rng.uniform(0.1, 0.45);
    boxes.push_back({cx - sx, cx + sx, cy - sy, cy + sy, z});
    looks.push_back(detail::random_look(rng));
  }

  RgbdSample s{Image({3, H, W}), Plane({H, W}), id};
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const double u = ((c + 0.5) / W * 2.0 - 1.0) * focal;
      const double v = (1.0 - (r + 0.5) / H * 2.0) * focal;  // up is positive
      double z = back;
      int surf = 4;
      double ta = u * back, tb = v * back;
      if (u != 0.0) {
        const double zw = half_w / std::abs(u);
        if (zw < z) z = zw, surf = u < 0 ? 0 : 1, ta = zw, tb = v * zw;
      }
      if (v != 0.0) {
        const double zf = (v < 0 ? half_h + cam_y : half_h - cam_y) / std::abs(v);
        if (zf < z) z = zf, surf = v < 0 ? 2 : 3, ta = u * zf, tb = zf;
      }
      for (std::size_t b = 0; b < boxes.size(); ++b) {
        const Box& bx = boxes[b];
        const double px = u * bx.z, py = v * bx.z;
        if (bx.z < z && px >= bx.x0 && px <= bx.x1 && py >= bx.y0 && py <= bx.y1)
          z = bx.z, surf = static_cast<int>(5 + b), ta = px - bx.x0, tb = py - bx.y0;
      }
      const auto& look = looks[surf];
      const double shade = 0.3 + 0.7 / (1.0 + (z / light_scale) * (z / light_scale));
      const double tex = detail::texture(look, ta, tb);
      for (int ch = 0; ch < 3; ++ch)
        s.image[ch * plane + r * W + c] = std::clamp(look.albedo[ch] * tex * shade, 0.0, 1.0);
      s.depth[static_cast<std::size_t>(r) * W + c] = z;
    }
  return s;
}

/// `count` scenes with ids scene_0000, scene_0001, ... drawn from one seeded stream.
inline std::vector<RgbdSample> generate_scenes(int count, std::uint64_t seed, const SceneOptions& opt = {}) {
  if (count < 1) throw ValidationError("generate_scenes: count must be >= 1");
  Rng rng(seed);
  std::vector<RgbdSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04d", i);
    out.push_back(generate_scene(id, rng, opt));
  }
  return out;
}

}  // namespace dehaze
