#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "dehaze/haze_synth.hpp"
#include "dehaze/scenes.hpp"
#include "test_util.hpp"

using namespace dehaze;
using namespace dehaze::testing;

namespace {

RgbdSample random_sample(Rng& rng, int h, int w, const std::string& id) {
  RgbdSample s{random_tensor({3, h, w}, rng, 0, 1), random_tensor({h, w}, rng, 0.5, 10), id};
  return s;
}

}  // namespace

TEST(Transmission, ClosedFormExamples) {
  const Plane d({1, 3}, std::vector<double>{std::log(2.0), 1.0, 3.0});
  const auto t = transmission_from_depth(d, 1.0).t;
  EXPECT_NEAR(t[0], 0.5, 1e-15);
  EXPECT_NEAR(t[1], std::exp(-1.0), 1e-15);
  const auto t0 = transmission_from_depth(d, 0.0).t;
  for (double v : t0.values()) EXPECT_EQ(v, 1.0);
}

TEST(Transmission, DecreasesWithDepthAndBeta) {
  Rng rng(1);
  const auto d = random_tensor({8, 8}, rng, 0.1, 20);
  const auto t1 = transmission_from_depth(d, 0.5).t, t2 = transmission_from_depth(d, 1.5).t;
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_GT(t1[i], 0.0);
    EXPECT_LE(t1[i], 1.0);
    EXPECT_LT(t2[i], t1[i]);
    for (std::size_t j = 0; j < d.size(); ++j)
      if (d[i] < d[j]) EXPECT_GT(t1[i], t1[j]);
  }
}

TEST(Transmission, ZeroDepthNeedsOptIn) {
  const Plane d({2, 2}, std::vector<double>{0.0, 1.0, 0.0, 2.0});
  try {
    transmission_from_depth(d, 1.0);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("2 depth pixels"), std::string::npos) << e.what();
  }
  EXPECT_EQ(transmission_from_depth(d, 1.0, true).t[0], 1.0);
  const Plane neg({1, 2}, std::vector<double>{-1.0, std::nan("")});
  EXPECT_THROW(transmission_from_depth(neg, 1.0, true), ValidationError);
  EXPECT_THROW(transmission_from_depth(d, -0.1, true), ValidationError);
}

TEST(Scattering, ClosedFormExamples) {
  const Image j({3, 1, 1}, 0.2);
  const auto out = apply_scattering(j, {Plane({1, 1}, 0.5)}, 1.0);
  for (double v : out.values()) EXPECT_NEAR(v, 0.6, 1e-15);
  // t = 1 leaves the scene; t -> 0 gives the airlight.
  EXPECT_EQ(apply_scattering(j, {Plane({1, 1}, 1.0)}, 0.7), j);
  const auto air = apply_scattering(j, {Plane({1, 1}, 0.0)}, 0.7);
  for (double v : air.values()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Scattering, MatchesScalarOracle) {
  Rng rng(2);
  const auto j = random_tensor({3, 8, 8}, rng, 0, 1), t = random_tensor({8, 8}, rng, 0.05, 1);
  const double A = 0.83;
  const auto out = apply_scattering(j, {t}, A);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 8; ++r)
      for (int q = 0; q < 8; ++q) {
        const double tv = t.at(r, q), jv = j[(c * 8 + r) * 8 + q];
        EXPECT_NEAR(out[(c * 8 + r) * 8 + q], jv * tv + A * (1 - tv), 1e-12);
      }
}

TEST(Scattering, ConvexCombinationBoundAndMonotonicity) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_sample(rng, 6, 6, "s");
    const double A = rng.uniform(0.5, 1.0), b1 = rng.uniform(0.1, 1.0), b2 = b1 + rng.uniform(0.1, 1.0);
    const auto h1 = apply_scattering(s.image, transmission_from_depth(s.depth, b1), A);
    const auto h2 = apply_scattering(s.image, transmission_from_depth(s.depth, b2), A);
    for (std::size_t i = 0; i < h1.size(); ++i) {
      const double j = s.image[i];
      EXPECT_GE(h1[i], std::min(j, A) - 1e-12);
      EXPECT_LE(h1[i], std::max(j, A) + 1e-12);
      // More scattering moves every pixel closer to the airlight.
      EXPECT_LE(std::abs(h2[i] - A), std::abs(h1[i] - A) + 1e-12);
    }
  }
}

TEST(Scattering, InversionRoundTrip) {
  Rng rng(4);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_sample(rng, 5, 7, "s");
    const double A = rng.uniform(0.5, 1.0), beta = rng.uniform(0.05, 0.3);
    const auto tm = transmission_from_depth(s.depth, beta);
    const auto back = invert_scattering(apply_scattering(s.image, tm, A), tm, A);
    worst = std::max(worst, max_abs(back, s.image));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Scattering, RejectsShapeMismatchAndBadAirlight) {
  const Image j({3, 4, 4}, 0.5);
  EXPECT_THROW(apply_scattering(j, {Plane({4, 5}, 0.5)}, 1.0), ValidationError);
  EXPECT_THROW(apply_scattering(j, {Plane({4, 4}, 0.5)}, 0.0), ValidationError);
  EXPECT_THROW(apply_scattering(j, {Plane({4, 4}, 0.5)}, 1.2), ValidationError);
  EXPECT_THROW(invert_scattering(j, {Plane({3, 4}, 0.5)}, 1.0), ValidationError);
}

TEST(Synthesis, CountsAndIds) {
  const auto sources = generate_scenes(10, 5, SceneOptions{16, 16});
  const auto r = synthesize_dataset(sources, 4, {0.5, 1.0}, {0.4, 1.6}, 9);
  ASSERT_EQ(r.pairs.size(), 40u);
  ASSERT_EQ(r.manifest.size(), 40u);
  std::set<std::string> ids;
  for (std::size_t k = 0; k < r.pairs.size(); ++k) {
    const auto& p = r.pairs[k];
    ids.insert(p.pair_id);
    EXPECT_EQ(p.source_id, sources[k / 4].id);
    EXPECT_EQ(p.clear, sources[k / 4].image);
    EXPECT_EQ(r.manifest[k].pair_id, p.pair_id);
    EXPECT_EQ(r.manifest[k].beta, p.params.beta);
    EXPECT_GE(p.params.beta, 0.4);
    EXPECT_LE(p.params.beta, 1.6);
    EXPECT_GE(p.params.atmospheric_light, 0.5);
    EXPECT_LE(p.params.atmospheric_light, 1.0);
    for (double v : p.hazy.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_EQ(ids.size(), 40u);
}

TEST(Synthesis, DeterministicBySeed) {
  const auto sources = generate_scenes(3, 11, SceneOptions{16, 16});
  const auto a = synthesize_dataset(sources, 3, {0.5, 1.0}, {0.4, 1.6}, 42);
  const auto b = synthesize_dataset(sources, 3, {0.5, 1.0}, {0.4, 1.6}, 42);
  const auto c = synthesize_dataset(sources, 3, {0.5, 1.0}, {0.4, 1.6}, 43);
  ASSERT_EQ(a.pairs.size(), b.pairs.size());
  bool differs = false;
  for (std::size_t k = 0; k < a.pairs.size(); ++k) {
    EXPECT_EQ(a.pairs[k].hazy, b.pairs[k].hazy);
    EXPECT_EQ(a.manifest[k].beta, b.manifest[k].beta);
    differs |= a.manifest[k].beta != c.manifest[k].beta;
  }
  EXPECT_TRUE(differs);
}

TEST(Synthesis, RejectsBadInputs) {
  const auto sources = generate_scenes(2, 1, SceneOptions{16, 16});
  EXPECT_THROW(synthesize_dataset({}, 4, {0.5, 1.0}, {0.4, 1.6}, 0), ValidationError);
  EXPECT_THROW(synthesize_dataset(sources, 0, {0.5, 1.0}, {0.4, 1.6}, 0), ValidationError);
  EXPECT_THROW(synthesize_dataset(sources, 1, {0.5, 1.2}, {0.4, 1.6}, 0), ValidationError);
  EXPECT_THROW(synthesize_dataset(sources, 1, {0.5, 1.0}, {1.6, 0.4}, 0), ValidationError);
  auto broken = sources;
  broken[1].depth[3] = 0.0;
  EXPECT_THROW(synthesize_dataset(broken, 1, {0.5, 1.0}, {0.4, 1.6}, 0), ValidationError);
  SynthOptions opt;
  opt.allow_zero_depth = true;
  EXPECT_NO_THROW(synthesize_dataset(broken, opt));
}

// Kolmogorov-Smirnov against U(0.4, 1.6), 1% critical value 1.63 / sqrt(n).
TEST(Synthesis, BetaDrawsAreUniform) {
  SynthOptions opt;
  opt.seed = 2024;
  const std::size_t n = 10000;
  const auto params = draw_haze_params(n, opt);
  std::vector<double> beta, light;
  for (const auto& p : params) {
    beta.push_back(p.beta);
    light.push_back(p.atmospheric_light);
  }
  auto ks = [&](std::vector<double> v, double lo, double hi) {
    std::sort(v.begin(), v.end());
    double d = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double f = (v[i] - lo) / (hi - lo);
      d = std::max({d, std::abs(f - double(i) / n), std::abs(f - double(i + 1) / n)});
    }
    return d;
  };
  EXPECT_LT(ks(beta, 0.4, 1.6), 1.63 / std::sqrt(double(n)));
  EXPECT_LT(ks(light, 0.5, 1.0), 1.63 / std::sqrt(double(n)));
}

TEST(Scenes, ValidAndDeterministic) {
  const auto a = generate_scenes(6, 3, SceneOptions{24, 20});
  const auto b = generate_scenes(6, 3, SceneOptions{24, 20});
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NO_THROW(a[i].validate());
    EXPECT_EQ(a[i].height(), 24);
    EXPECT_EQ(a[i].width(), 20);
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].depth, b[i].depth);
  }
}
