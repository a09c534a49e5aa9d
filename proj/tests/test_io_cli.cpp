#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "dehaze/cli.hpp"
#include "test_util.hpp"

using namespace dehaze;
using namespace dehaze::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dehaze_io_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::vector<std::string> store{"dehaze"};
  store.insert(store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : store) argv.push_back(s.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

/// Ten 16x16 sources, a 40-pair dataset and a fitted proxy, built once.
struct Fixture {
  fs::path root, src, data, phi;
  Fixture() {
    root = scratch("fixture");
    src = root / "src";
    data = root / "data";
    phi = root / "phi.bin";
    const auto s = invoke({"scenes", "--out", src.string(), "--count", "10", "--size", "16", "--seed", "3"});
    EXPECT_EQ(s.code, 0) << s.err;
    const auto y = invoke({"synth", "--sources", src.string(), "--out", data.string(), "--per-image", "4", "--seed", "3"});
    EXPECT_EQ(y.code, 0) << y.err;
    const auto f = invoke({"fit-depth-proxy", "--sources", src.string(), "--out", phi.string(), "--epochs", "2"});
    EXPECT_EQ(f.code, 0) << f.err;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

Result train(const fs::path& out, std::initializer_list<std::string> extra = {}) {
  const auto& fx = fixture();
  std::vector<std::string> a{"train",   "--data",       fx.data.string(), "--out",         out.string(),
                             "--width", "8",            "--image-size",   "16",            "--epochs",
                             "1",       "--max-steps",  "3",              "--batch-size",  "2",
                             "--depth-weights",         fx.phi.string(),  "--log-every",   "0"};
  a.insert(a.end(), extra);
  return invoke(a);
}

}  // namespace

TEST(PngIo, RgbRoundTripIsExactOn8BitValues) {
  const fs::path dir = scratch("png");
  Rng rng(1);
  Image img({3, 5, 7});
  for (auto& v : img.values()) v = std::floor(rng.uniform(0, 256)) / 255.0;
  write_png_rgb(dir / "a.png", img);
  const Image back = read_png_rgb(dir / "a.png");
  EXPECT_LT(max_abs(img, back), 1e-12);
}

TEST(PngIo, DepthRoundTripWithinQuantizationStep) {
  const fs::path dir = scratch("depth");
  Rng rng(2);
  Plane d({6, 9});
  for (auto& v : d.values()) v = rng.uniform(0.1, 9.9);
  const DepthMeta meta{0.0, 10.0};
  write_depth_png(dir / "d.depth.png", d, meta);
  const Plane back = read_depth_png(dir / "d.depth.png", meta);
  EXPECT_LE(max_abs(d, back), 10.0 / 65535 / 2 + 1e-12);
  EXPECT_THROW(read_depth_png(dir / "missing.png", meta), ValidationError);
}

TEST(DatasetIo, RoundTripKeepsManifestAndImages) {
  const fs::path dir = scratch("dataset");
  SynthOptions opt;
  opt.samples_per_image = 2;
  opt.seed = 4;
  const SynthResult r = synthesize_dataset(generate_scenes(3, 4, SceneOptions{16, 16}), opt);
  write_dataset(dir, r, opt);
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), r.pairs.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].pair_id, r.pairs[i].pair_id);
    EXPECT_EQ(back[i].source_id, r.pairs[i].source_id);
    EXPECT_EQ(back[i].params.atmospheric_light, r.pairs[i].params.atmospheric_light);
    EXPECT_EQ(back[i].params.beta, r.pairs[i].params.beta);
    EXPECT_LE(max_abs(back[i].hazy, r.pairs[i].hazy), 0.5 / 255 + 1e-9);
    EXPECT_LE(max_abs(back[i].clear, r.pairs[i].clear), 0.5 / 255 + 1e-9);
  }
}

TEST(DatasetIo, MissingDepthMetaExplainsTheFix) {
  const fs::path dir = scratch("nometa");
  write_rgbd_dir(dir, generate_scenes(2, 5, SceneOptions{16, 16}));
  fs::remove(dir / "depth_meta.json");
  try {
    read_rgbd_dir(dir);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("depth_meta.json"), std::string::npos) << msg;
    EXPECT_NE(msg.find("min_m"), std::string::npos) << msg;
  }
}

TEST(Cli, ExitCodes) {
  const auto& fx = fixture();
  const fs::path dir = scratch("codes");
  EXPECT_EQ(invoke({"--help"}).code, 0);
  EXPECT_EQ(invoke({"train", "--help"}).code, 0);
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"frobnicate"}).code, 1);
  EXPECT_EQ(invoke({"synth", "--out", dir.string()}).code, 1);

  const auto no_manifest = invoke({"train", "--data", (dir / "empty").string(), "--out", (dir / "r").string()});
  EXPECT_EQ(no_manifest.code, 1);
  EXPECT_NE(no_manifest.err.find("synth"), std::string::npos) << no_manifest.err;

  const auto bad_loss = train(dir / "r", {"--loss", "L1"});
  EXPECT_EQ(bad_loss.code, 1);
  const auto bad_backend = train(dir / "r", {"--depth-backend", "lidar"});
  EXPECT_EQ(bad_backend.code, 1);
  EXPECT_NE(bad_backend.err.find("proxy"), std::string::npos) << bad_backend.err;

  write_text(dir / "broken.json", "{ \"train\": { \"epochs\": \"many\" } }");
  EXPECT_EQ(train(dir / "r", {"--config", (dir / "broken.json").string()}).code, 1);
  write_text(dir / "unknown.json", "{ \"trian\": {} }");
  EXPECT_EQ(train(dir / "r", {"--config", (dir / "unknown.json").string()}).code, 1);
  write_text(dir / "syntax.json", "{ nope");
  EXPECT_EQ(train(dir / "r", {"--config", (dir / "syntax.json").string()}).code, 1);

  EXPECT_EQ(invoke({"synth", "--sources", (dir / "none").string(), "--out", (dir / "d").string()}).code, 1);
  EXPECT_EQ(invoke({"synth", "--sources", fx.src.string(), "--out", (dir / "d").string(), "--beta-range", "2", "1"}).code,
            1);
}

TEST(Cli, SynthCountsDeterminismAndRanges) {
  const auto& fx = fixture();
  const fs::path dir = scratch("synth");
  const auto again = invoke({"synth", "--sources", fx.src.string(), "--out", (dir / "b").string(), "--per-image", "4",
                          "--seed", "3"});
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(read_file(fx.data / "manifest.json"), read_file(dir / "b" / "manifest.json"));

  const Json m = read_json(fx.data / "manifest.json");
  ASSERT_EQ(m["pairs"].size(), 40u);
  std::map<std::string, int> per_source;
  for (const auto& p : m["pairs"]) {
    ++per_source[p["source_id"].get<std::string>()];
    EXPECT_GE(p["A"].get<double>(), 0.5);
    EXPECT_LE(p["A"].get<double>(), 1.0);
    EXPECT_GE(p["beta"].get<double>(), 0.4);
    EXPECT_LE(p["beta"].get<double>(), 1.6);
    EXPECT_TRUE(fs::exists(fx.data / p["hazy"].get<std::string>()));
  }
  EXPECT_EQ(per_source.size(), 10u);
  for (const auto& [id, n] : per_source) EXPECT_EQ(n, 4) << id;

  const auto other = invoke({"synth", "--sources", fx.src.string(), "--out", (dir / "c").string(), "--seed", "4"});
  ASSERT_EQ(other.code, 0);
  EXPECT_NE(read_file(fx.data / "manifest.json"), read_file(dir / "c" / "manifest.json"));
}

TEST(Cli, TrainEvalDeterministicAndFingerprinted) {
  const auto& fx = fixture();
  const fs::path dir = scratch("train");
  const auto a = train(dir / "a"), b = train(dir / "b");
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  const std::string log = read_file(dir / "a" / "log.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);
  EXPECT_EQ(log, read_file(dir / "b" / "log.csv"));

  const auto e1 = invoke({"eval", "--data", fx.data.string(), "--run", (dir / "a").string(), "--out", (dir / "e1").string()});
  const auto e2 = invoke({"eval", "--data", fx.data.string(), "--run", (dir / "a").string(), "--out", (dir / "e2").string()});
  ASSERT_EQ(e1.code, 0) << e1.err;
  ASSERT_EQ(e2.code, 0) << e2.err;
  EXPECT_EQ(read_file(dir / "e1" / "report.json"), read_file(dir / "e2" / "report.json"));
  const Json report = read_json(dir / "e1" / "report.json");
  EXPECT_EQ(report["fingerprint"], read_json(dir / "a" / "run.json")["fingerprint"]);
  EXPECT_EQ(report["num_images"], 40);

  // A checkpoint of another architecture is refused rather than half-loaded.
  ASSERT_EQ(train(dir / "plain", {"--gen", "6B-SA"}).code, 0);
  const auto mismatch = invoke({"eval", "--data", fx.data.string(), "--run", (dir / "a").string(), "--checkpoint",
                             (dir / "plain" / "ckpt" / "latest.ckpt").string()});
  EXPECT_EQ(mismatch.code, 1);
  EXPECT_NE(mismatch.err.find("incompatible"), std::string::npos) << mismatch.err;
}

TEST(Cli, BaselinesOrderAsExpected) {
  const auto& fx = fixture();
  const fs::path dir = scratch("baselines");
  ASSERT_EQ(invoke({"eval", "--data", fx.data.string(), "--model", "identity", "--out", (dir / "i").string()}).code, 0);
  ASSERT_EQ(invoke({"eval", "--data", fx.data.string(), "--model", "oracle", "--out", (dir / "o").string()}).code, 0);
  EXPECT_GT(read_json(dir / "o" / "report.json")["mean_psnr"].get<double>(),
            read_json(dir / "i" / "report.json")["mean_psnr"].get<double>());
}

TEST(Cli, SingleRowAblationEqualsTrainThenEval) {
  const auto& fx = fixture();
  const fs::path dir = scratch("ablate");
  ASSERT_EQ(train(dir / "run", {"--gen", "6B-Oct", "--disc", "3L-Oct", "--loss", "SSIM"}).code, 0);
  ASSERT_EQ(invoke({"eval", "--data", fx.data.string(), "--run", (dir / "run").string(), "--out", (dir / "ev").string()})
                .code,
            0);
  const auto ab = invoke({"ablate", "--data", fx.data.string(), "--test-data", fx.data.string(), "--rows",
                       "6B-Oct/3L-Oct/SSIM", "--out", (dir / "grid").string(), "--width", "8", "--image-size", "16",
                       "--epochs", "1", "--max-steps", "3", "--batch-size", "2", "--log-every", "0"});
  ASSERT_EQ(ab.code, 0) << ab.err;
  const Json one = read_json(dir / "ev" / "report.json");
  const Json row = read_json(dir / "grid" / "report.json");
  EXPECT_EQ(row["mean_psnr"], one["mean_psnr"]);
  EXPECT_EQ(row["mean_ssim"], one["mean_ssim"]);
  EXPECT_EQ(row["fingerprint"], one["fingerprint"]);
  EXPECT_EQ(read_file(dir / "run" / "log.csv"), read_file(dir / "grid" / "6B-Oct_3L-Oct_SSIM" / "log.csv"));
}

TEST(Cli, AblationDryRunListsTheGridInOrder) {
  const auto r = invoke({"ablate", "--dry-run", "--paper-scale"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::vector<std::size_t> at;
  for (const char* count : {"28.29M", "22.40M", "21.47M", "19.36M", "19.39M"}) {
    at.push_back(r.out.find(count));
    EXPECT_NE(at.back(), std::string::npos) << count << "\n" << r.out;
  }
  EXPECT_TRUE(std::is_sorted(at.begin(), at.end())) << r.out;
  // header line plus nine rows, after the width line
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 11) << r.out;
  EXPECT_EQ(invoke({"ablate", "--dry-run", "--rows", "9B/3L/L1"}).code, 1);
  EXPECT_EQ(invoke({"ablate", "--dry-run", "--rows", "9B"}).code, 1);
}
