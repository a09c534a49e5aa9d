#pragma once

// Command-line front end. Subcommands:
//
//   scenes           procedural RGBD rooms for desk-scale experiments
//   synth            hazy/clear pairs from an RGBD directory
//   fit-depth-proxy  fit the small depth regressor used by the CPD loss
//   train            one CycleGAN run into runs/<name>/{config.json, run.json, log.csv, ckpt/}
//   eval             PSNR/SSIM of a checkpoint (or the oracle / identity baselines)
//   ablate           train + eval a list of G/D/Loss rows and print the combined table
//
// Settings resolve as: built-in defaults, then --paper-scale, then --config,
// then explicit flags. Exit codes: 0 success, 1 invalid input or
// configuration, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dehaze/config.hpp"
#include "dehaze/dataset_io.hpp"
#include "dehaze/metrics.hpp"
#include "dehaze/scenes.hpp"
#include "dehaze/trainer.hpp"

namespace dehaze::cli {

/// Flags whose effect applies only when given on the command line.
class Overrides {
 public:
  template <typename V>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& help,
                   std::function<void(RunConfig&, const V&)> apply) {
    auto value = std::make_shared<V>();
    CLI::Option* o = app->add_option(flag, *value, help);
    appliers_.push_back([o, value, apply](RunConfig& c) {
      if (o->count()) apply(c, *value);
    });
    return o;
  }

  void apply(RunConfig& c) const {
    for (const auto& f : appliers_) f(c);
  }

 private:
  std::vector<std::function<void(RunConfig&)>> appliers_;
};

struct Common {
  std::string config;
  std::string out;
  bool paper_scale = false;
  bool dry_run = false;
};

inline RunConfig resolve(const Common& c, const Overrides& ov) {
  RunConfig rc;
  rc.apply_scale(c.paper_scale);
  if (!c.config.empty()) {
    rc = load_run_config(c.config);
    if (c.paper_scale) rc.apply_scale(true);
  }
  ov.apply(rc);
  rc.synth.seed = rc.train.seed;
  return rc;
}

inline void add_seed(CLI::App* app, Overrides& ov) {
  ov.add<std::uint64_t>(app, "--seed", "random seed", [](RunConfig& c, const std::uint64_t& v) { c.train.seed = v; });
}

inline void add_common(CLI::App* app, Common& c, Overrides& ov, bool config = true) {
  add_seed(app, ov);
  if (config) app->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_flag("--paper-scale", c.paper_scale, "256x256 images and width-64 networks");
  app->add_flag("--dry-run", c.dry_run, "report what would be done and exit");
}

inline void add_depth_options(CLI::App* app, Overrides& ov) {
  ov.add<std::string>(app, "--depth-backend", "depth network for CPD: pretrained, proxy, stub",
                      [](RunConfig& c, const std::string& v) { c.depth_backend = parse_depth_backend(v); });
  ov.add<std::string>(app, "--depth-weights", "weights file for the proxy / pretrained backend",
                      [](RunConfig& c, const std::string& v) { c.depth_weights = v; });
}

inline void add_train_options(CLI::App* app, Overrides& ov, bool model) {
  if (model) {
    ov.add<std::string>(app, "--gen", "generator: 9B, 6B, 6B-SA, 6B-Oct",
                        [](RunConfig& c, const std::string& v) { c.train.gen = v; });
    ov.add<std::string>(app, "--disc", "discriminator: 3L, 3L-SA, 3L-Oct, 3L-OctN",
                        [](RunConfig& c, const std::string& v) { c.train.disc = v; });
    ov.add<std::string>(app, "--loss", "base, CPD, SSIM or CPD+SSIM",
                        [](RunConfig& c, const std::string& v) { c.train.loss = LossFlags::parse(v); });
  }
  ov.add<int>(app, "--width", "base channel width", [](RunConfig& c, const int& v) { c.train.width = v; });
  ov.add<int>(app, "--image-size", "training image side", [](RunConfig& c, const int& v) { c.train.image_size = v; });
  ov.add<int>(app, "--epochs", "total epochs", [](RunConfig& c, const int& v) { c.train.epochs = v; });
  ov.add<int>(app, "--constant-epochs", "epochs at the initial learning rate",
              [](RunConfig& c, const int& v) { c.train.constant_epochs = v; });
  ov.add<int>(app, "--decay-epochs", "epochs of linear decay to zero (0 keeps it constant)",
              [](RunConfig& c, const int& v) { c.train.decay_epochs = v; });
  ov.add<long long>(app, "--max-steps", "stop after this many steps (0 = no cap)",
                    [](RunConfig& c, const long long& v) { c.train.max_steps = v; });
  ov.add<int>(app, "--batch-size", "images per domain per step", [](RunConfig& c, const int& v) { c.train.batch_size = v; });
  ov.add<double>(app, "--lr", "initial learning rate", [](RunConfig& c, const double& v) { c.train.lr = v; });
  ov.add<int>(app, "--checkpoint-every", "epochs between checkpoints (0 = final only)",
              [](RunConfig& c, const int& v) { c.train.checkpoint_every = v; });
  ov.add<std::string>(app, "--perceptual", "perceptual backbone: stub, resnet50",
                      [](RunConfig& c, const std::string& v) { c.perceptual_backbone = v; });
  add_depth_options(app, ov);
}

// ---------------------------------------------------------------------------
// shared helpers

inline std::string count_str(long long n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > (n < 0 ? 1 : 0); i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

inline std::string row_name(const TrainConfig& t) { return t.gen + "_" + t.disc + "_" + t.loss.name(); }

/// Hazy images of every pair, and each source's clear image once.
struct Domains {
  std::vector<Image> hazy, clear;
};

inline Domains split_domains(const std::vector<HazePair>& pairs) {
  Domains d;
  std::set<std::string> seen;
  for (const auto& p : pairs) {
    d.hazy.push_back(p.hazy);
    if (seen.insert(p.source_id).second) d.clear.push_back(p.clear);
  }
  return d;
}

inline std::unique_ptr<DepthEstimator<float>> load_phi(const RunConfig& rc) {
  if (!rc.train.loss.cpd) return nullptr;
  return make_depth_estimator<float>(rc.depth_backend, rc.depth_weights);
}

inline void print_model_summary(std::ostream& os, const TrainConfig& t) {
  const ModelSummary s = summarize_model(t.gen, t.disc, t.width, t.image_size);
  os << "model " << t.gen << " / " << t.disc << " / " << t.loss.name() << " (width " << t.width << ")\n"
     << "  generator      " << count_str(s.generator.param_count()) << " params, "
     << count_str(s.generator.flops) << " FLOPs at " << t.image_size << "x" << t.image_size << "\n"
     << "  discriminator  " << count_str(s.discriminator.param_count()) << " params, "
     << count_str(s.discriminator.flops) << " FLOPs\n"
     << "  full model     " << count_str(s.param_count()) << " params (2 generators + 2 discriminators)\n";
}

/// Trains into `run_dir`, resuming from its latest checkpoint when asked.
inline void train_run(const RunConfig& rc, const Domains& data, const fs::path& run_dir, bool resume, int log_every,
                      std::ostream& os) {
  const auto phi = load_phi(rc);
  const auto extractor = make_feature_extractor<float>(rc.perceptual_backbone);
  fs::create_directories(run_dir);
  write_json(run_dir / "config.json", to_json(rc));
  TrainingRun<float> run(rc.train, data.hazy, data.clear, phi.get(), extractor.get());
  const std::string fp = config_fingerprint(rc.train.gen, rc.train.disc, rc.train.loss.name(), rc.train.seed);
  write_json(run_dir / "run.json", {{"fingerprint", fp},
                                    {"hazy_images", data.hazy.size()},
                                    {"clear_images", data.clear.size()},
                                    {"total_steps", run.total_steps()}});
  os << "training " << row_name(rc.train) << ": " << data.hazy.size() << " hazy / " << data.clear.size()
     << " clear images, " << run.total_steps() << " steps, fingerprint " << fp << "\n";
  TrainCallbacks cb;
  const long long total = run.total_steps();
  cb.on_step = [&](const LossRecord& r) {
    const long long done = r.step + 1;
    if (log_every <= 0 || (done % log_every != 0 && done != total)) return;
    char buf[64];
    std::snprintf(buf, sizeof buf, "step %lld/%lld  lr %.3g", done, total, r.lr);
    os << buf;
    for (const auto& [name, v] : r.terms) {
      std::snprintf(buf, sizeof buf, "  %s %.4f", name.c_str(), v);
      os << buf;
    }
    os << "\n" << std::flush;
  };
  run.run(run_dir, resume, cb);
}

/// Loads the hazy-to-clear generator from a training checkpoint.
inline std::unique_ptr<ImageModule<float>> load_generator(const TrainConfig& t, const fs::path& ckpt) {
  const Archive ar = read_archive(ckpt);
  if (ar.meta.value("gen", "") != t.gen || ar.meta.value("disc", "") != t.disc || ar.meta.value("width", 0) != t.width)
    throw ValidationError("checkpoint " + ckpt.string() + " holds " + ar.meta.value("gen", "?") + "/" +
                          ar.meta.value("disc", "?") + " width " + std::to_string(ar.meta.value("width", 0)) +
                          ", which is incompatible with the requested " + t.gen + "/" + t.disc + " width " +
                          std::to_string(t.width));
  Rng rng(0);
  auto g = build_generator<float>(NetworkSpec::generator(t.gen, t.width), rng);
  load_into(ar, g->tensors("g_a"), "generator weights in " + ckpt.string());
  g->set_trainable(false);
  return g;
}

inline DehazeFn generator_dehaze(const ImageModule<float>& g) {
  return [&g](const HazePair& p) {
    NoGradGuard guard;
    const auto in = to_network_range<float>({p.hazy});
    const Var<float> out = g.forward(Var<float>::constant(in[0]));
    Image img(p.hazy.shape());
    for (std::size_t i = 0; i < img.size(); ++i)
      img[i] = std::clamp((static_cast<double>(out.value()[i]) + 1.0) * 0.5, 0.0, 1.0);
    return img;
  };
}

inline MetricsReport evaluate_run(const RunConfig& rc, const fs::path& ckpt, const std::vector<HazePair>& test) {
  const auto g = load_generator(rc.train, ckpt);
  const int h = test.front().hazy.dim(1), w = test.front().hazy.dim(2);
  MetricsReport info;
  info.model = "checkpoint";
  info.gen = rc.train.gen;
  info.disc = rc.train.disc;
  info.loss = rc.train.loss.name();
  const ModelSummary s = summarize_model(rc.train.gen, rc.train.disc, rc.train.width, h);
  info.param_count = s.param_count();
  info.flop_count = count_flops(NetworkSpec::generator(rc.train.gen, rc.train.width), h, w);
  info.flop_height = h;
  info.flop_width = w;
  info.fingerprint = config_fingerprint(info.gen, info.disc, info.loss, rc.train.seed);
  return evaluate(generator_dehaze(*g), test, info);
}

inline void write_report(const fs::path& dir, const std::vector<MetricsReport>& rows, const Json& config) {
  fs::create_directories(dir);
  Json arr = Json::array();
  for (const auto& r : rows) arr.push_back(report_json(r));
  write_json(dir / "report.json", rows.size() == 1 ? arr[0] : arr);
  write_text(dir / "report.txt", report_table(rows));
  write_json(dir / "config.json", config);
}

// ---------------------------------------------------------------------------
// subcommands

struct ScenesArgs {
  int count = 48;
  int size = 64;
  int max_objects = 3;
};

inline int cmd_scenes(const Common& c, const RunConfig& rc, const ScenesArgs& a, std::ostream& os) {
  if (a.count < 1) throw ValidationError("--count must be >= 1");
  if (a.size < 16) throw ValidationError("--size must be >= 16");
  SceneOptions so;
  so.height = so.width = a.size;
  so.max_objects = a.max_objects;
  const Json cfg{{"command", "scenes"}, {"seed", rc.train.seed}, {"count", a.count}, {"size", a.size},
                 {"max_objects", a.max_objects}};
  if (c.dry_run) {
    os << "would write " << a.count << " RGBD scenes of " << a.size << "x" << a.size << " to " << c.out << "\n";
    return 0;
  }
  write_rgbd_dir(c.out, generate_scenes(a.count, rc.train.seed, so));
  write_json(fs::path(c.out) / "config.json", cfg);
  os << "wrote " << a.count << " RGBD scenes to " << c.out << "\n";
  return 0;
}

struct SynthArgs {
  std::string sources;
  bool allow_zero_depth = false;
};

inline int cmd_synth(const Common& c, RunConfig rc, const SynthArgs& a, std::ostream& os) {
  rc.synth.allow_zero_depth = a.allow_zero_depth;
  const auto sources = read_rgbd_dir(a.sources, a.allow_zero_depth);
  if (c.dry_run) {
    os << "would synthesize " << sources.size() * static_cast<std::size_t>(rc.synth.samples_per_image)
       << " pairs from " << sources.size() << " sources into " << c.out << "\n";
    return 0;
  }
  const SynthResult r = synthesize_dataset(sources, rc.synth);
  write_dataset(c.out, r, rc.synth);
  write_json(fs::path(c.out) / "config.json", to_json(rc));
  os << "wrote " << r.pairs.size() << " pairs to " << c.out << "\n";
  return 0;
}

struct FitArgs {
  std::string sources;
  ProxyFitOptions fit;
  double holdout = 0.2;
};

inline int cmd_fit_depth_proxy(const Common& c, const RunConfig& rc, FitArgs a, std::ostream& os) {
  a.fit.seed = rc.train.seed;
  if (!(a.holdout >= 0.0 && a.holdout < 1.0)) throw ValidationError("--holdout must be in [0, 1)");
  auto samples = read_rgbd_dir(a.sources);
  const auto n_hold = static_cast<std::size_t>(std::ceil(a.holdout * static_cast<double>(samples.size())));
  if (samples.size() - n_hold < 2) throw ValidationError("need at least 2 training samples after the holdout split");
  std::vector<RgbdSample> held(samples.end() - static_cast<std::ptrdiff_t>(n_hold), samples.end());
  samples.resize(samples.size() - n_hold);
  if (c.dry_run) {
    os << "would fit the depth proxy on " << samples.size() << " samples (" << held.size() << " held out) for "
       << a.fit.epochs << " epochs\n";
    return 0;
  }
  auto fit = fit_proxy<float>(samples, a.fit);
  for (std::size_t e = 0; e < fit.epoch_losses.size(); ++e) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "epoch %3zu  mse %.5f\n", e + 1, fit.epoch_losses[e]);
    os << buf;
  }
  Json report{{"command", "fit-depth-proxy"},
              {"seed", a.fit.seed},
              {"sources", a.sources},
              {"epochs", a.fit.epochs},
              {"batch_size", a.fit.batch_size},
              {"lr", a.fit.lr},
              {"train_samples", samples.size()},
              {"holdout_samples", held.size()},
              {"epoch_mse", fit.epoch_losses}};
  if (!held.empty()) {
    double mean_depth = 0;
    for (const auto& s : samples) mean_depth += pool_depth4(s.depth).mean();
    mean_depth /= static_cast<double>(samples.size());
    double baseline = 0;
    for (const auto& s : held) {
      const Plane t = pool_depth4(s.depth);
      for (std::size_t i = 0; i < t.size(); ++i) baseline += (t[i] - mean_depth) * (t[i] - mean_depth) / t.size();
    }
    baseline /= static_cast<double>(held.size());
    const double heldout = proxy_mse(*fit.model, held);
    report["holdout_mse"] = heldout;
    report["constant_baseline_mse"] = baseline;
    char buf[96];
    std::snprintf(buf, sizeof buf, "held-out mse %.5f (constant-depth baseline %.5f)\n", heldout, baseline);
    os << buf;
  }
  const fs::path out(c.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_depth_model(out, *fit.model, {{"seed", a.fit.seed}, {"epochs", a.fit.epochs}});
  write_json(out.string() + ".json", report);
  os << "wrote " << out.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  bool resume = false;
  int log_every = 10;
};

inline int cmd_train(const Common& c, const RunConfig& rc, const TrainArgs& a, std::ostream& os) {
  rc.train.validate();
  const fs::path run_dir = c.out.empty() ? fs::path("runs") / row_name(rc.train) : fs::path(c.out);
  if (c.dry_run) {
    print_model_summary(os, rc.train);
    os << "run directory " << run_dir.string() << "\n";
    return 0;
  }
  if (a.data.empty()) throw ValidationError("train needs --data <synthesized dataset>");
  train_run(rc, split_domains(read_dataset(a.data)), run_dir, a.resume, a.log_every, os);
  os << "finished; checkpoint " << (run_dir / "ckpt" / "latest.ckpt").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string data;
  std::string model = "checkpoint";
  std::string run;
  std::string checkpoint;
  double t_min = 0.05;
};

inline int cmd_eval(const Common& c, const EvalArgs& a, std::ostream& os) {
  if (a.model != "checkpoint" && a.model != "oracle" && a.model != "identity")
    throw ValidationError("--model must be checkpoint, oracle or identity");
  if (a.model == "checkpoint" && a.run.empty() && c.config.empty())
    throw ValidationError("--model checkpoint needs --run <run dir> or --config with --checkpoint");
  RunConfig rc;
  rc.apply_scale(false);
  fs::path ckpt = a.checkpoint;
  if (a.model == "checkpoint") {
    rc = load_run_config(c.config.empty() ? (fs::path(a.run) / "config.json") : fs::path(c.config));
    if (ckpt.empty()) ckpt = fs::path(a.run) / "ckpt" / "latest.ckpt";
    if (!fs::exists(ckpt)) throw ValidationError("checkpoint " + ckpt.string() + " not found");
  }
  if (c.dry_run) {
    os << "would evaluate " << a.model << (ckpt.empty() ? "" : " " + ckpt.string()) << " on " << a.data << "\n";
    return 0;
  }
  const auto test = read_dataset(a.data);
  MetricsReport r;
  if (a.model == "checkpoint") {
    r = evaluate_run(rc, ckpt, test);
  } else {
    MetricsReport info;
    info.model = info.gen = a.model;
    info.disc = info.loss = "-";
    const double t_min = a.t_min;
    r = a.model == "oracle" ? evaluate([t_min](const HazePair& p) { return oracle_dehaze(p, t_min); }, test, info)
                            : evaluate(identity_dehaze, test, info);
  }
  os << report_table({r});
  char buf[96];
  std::snprintf(buf, sizeof buf, "mean PSNR %.3f dB, mean SSIM %.4f over %zu images\n", r.mean_psnr, r.mean_ssim,
                r.per_image.size());
  os << buf;
  if (!c.out.empty()) {
    Json cfg = a.model == "checkpoint" ? to_json(rc) : Json::object();
    cfg["eval"] = {{"model", a.model}, {"data", a.data}, {"checkpoint", ckpt.string()}, {"t_min", a.t_min}};
    write_report(c.out, {r}, cfg);
  }
  return 0;
}

/// The rows of the default ablation grid.
inline std::vector<std::string> default_ablation_rows() {
  return {"9B/3L/base",       "6B-SA/3L-SA/base", "6B-Oct/3L/base",      "6B-Oct/3L/CPD",     "6B-Oct/3L/SSIM",
          "6B-Oct/3L-Oct/CPD", "6B-Oct/3L-Oct/SSIM", "6B-Oct/3L-OctN/CPD", "6B-Oct/3L-OctN/SSIM"};
}

inline TrainConfig parse_row(const std::string& row, TrainConfig base) {
  const auto a = row.find('/'), b = row.rfind('/');
  if (a == std::string::npos || a == b) throw ConfigError("ablation row '" + row + "' must look like G/D/Loss");
  base.gen = row.substr(0, a);
  base.disc = row.substr(a + 1, b - a - 1);
  base.loss = LossFlags::parse(row.substr(b + 1));
  NetworkSpec::generator(base.gen, base.width);
  NetworkSpec::discriminator(base.disc, base.width);
  return base;
}

struct AblateArgs {
  std::string data;
  std::string test_data;
  std::vector<std::string> rows;
  int log_every = 50;
};

inline int cmd_ablate(const Common& c, const RunConfig& rc, AblateArgs a, std::ostream& os) {
  if (a.rows.empty()) a.rows = default_ablation_rows();
  const fs::path out = c.out.empty() ? fs::path("runs") / "ablation" : fs::path(c.out);
  std::vector<RunConfig> configs;
  for (const auto& row : a.rows) {
    RunConfig r = rc;
    r.train = parse_row(row, rc.train);
    r.train.validate();
    configs.push_back(r);
  }
  std::vector<MetricsReport> table;
  if (c.dry_run) {
    for (const auto& r : configs) {
      MetricsReport m;
      m.gen = r.train.gen;
      m.disc = r.train.disc;
      m.loss = r.train.loss.name();
      m.param_count = summarize_model(m.gen, m.disc, r.train.width, r.train.image_size).param_count();
      table.push_back(m);
    }
    os << "width " << rc.train.width << ", parameters of the full model (2 generators + 2 discriminators)\n"
       << report_table(table);
    return 0;
  }
  if (a.data.empty() || a.test_data.empty()) throw ValidationError("ablate needs --data and --test-data");
  const Domains data = split_domains(read_dataset(a.data));
  const auto test = read_dataset(a.test_data);
  Json runs = Json::array();
  int failed = 0;
  for (const auto& r : configs) {
    const fs::path run_dir = out / row_name(r.train);
    // A failing row is reported and skipped; the rest of the grid still runs.
    try {
      train_run(r, data, run_dir, true, a.log_every, os);
      table.push_back(evaluate_run(r, run_dir / "ckpt" / "latest.ckpt", test));
      write_report(run_dir / "eval", {table.back()}, to_json(r));
      runs.push_back({{"row", row_name(r.train)}, {"dir", run_dir.string()}, {"status", "ok"}});
      os << report_table({table.back()});
    } catch (const std::exception& ex) {
      ++failed;
      runs.push_back({{"row", row_name(r.train)}, {"dir", run_dir.string()}, {"status", "failed"}, {"error", ex.what()}});
      os << "row " << row_name(r.train) << " failed: " << ex.what() << "\n";
    }
  }
  Json cfg = to_json(rc);
  cfg["ablation"] = {{"rows", a.rows}, {"data", a.data}, {"test_data", a.test_data}, {"runs", runs}};
  write_report(out, table, cfg);
  os << "\n" << report_table(table);
  if (failed) os << failed << " of " << configs.size() << " rows failed\n";
  return failed ? 2 : 0;
}

// ---------------------------------------------------------------------------

/// Parses and runs one command; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Unpaired single-image dehazing with octave CycleGANs"};
  app.require_subcommand(1);

  Common c_scenes, c_synth, c_fit, c_train, c_eval, c_ablate;
  Overrides o_scenes, o_synth, o_fit, o_train, o_ablate;

  ScenesArgs scenes;
  auto* s = app.add_subcommand("scenes", "generate procedural RGBD scenes");
  add_common(s, c_scenes, o_scenes, false);
  s->add_option("--out", c_scenes.out, "output directory")->required();
  s->add_option("--count", scenes.count, "number of scenes")->capture_default_str();
  s->add_option("--size", scenes.size, "image side in pixels")->capture_default_str();
  s->add_option("--max-objects", scenes.max_objects, "boxes per room")->capture_default_str();

  SynthArgs synth;
  auto* y = app.add_subcommand("synth", "synthesize hazy/clear pairs from RGBD sources");
  add_common(y, c_synth, o_synth);
  y->add_option("--sources", synth.sources, "RGBD source directory")->required();
  y->add_option("--out", c_synth.out, "dataset directory")->required();
  o_synth.add<int>(y, "--per-image", "pairs per source image",
                   [](RunConfig& c, const int& v) { c.synth.samples_per_image = v; });
  o_synth.add<std::vector<double>>(y, "--a-range", "atmospheric light range LO HI",
                                   [](RunConfig& c, const std::vector<double>& v) {
                                     c.synth.atmospheric_light = {v.at(0), v.at(1)};
                                   })->expected(2);
  o_synth.add<std::vector<double>>(y, "--beta-range", "scattering coefficient range LO HI",
                                   [](RunConfig& c, const std::vector<double>& v) { c.synth.beta = {v.at(0), v.at(1)}; })
      ->expected(2);
  y->add_flag("--allow-zero-depth", synth.allow_zero_depth, "accept zero-depth pixels (transmission 1)");

  FitArgs fit;
  auto* f = app.add_subcommand("fit-depth-proxy", "fit the depth regressor on RGBD sources");
  add_common(f, c_fit, o_fit, false);
  f->add_option("--sources", fit.sources, "RGBD source directory")->required();
  f->add_option("--out", c_fit.out, "weights file")->required();
  f->add_option("--epochs", fit.fit.epochs, "passes over the data")->capture_default_str();
  f->add_option("--batch-size", fit.fit.batch_size, "samples per step")->capture_default_str();
  f->add_option("--lr", fit.fit.lr, "Adam learning rate")->capture_default_str();
  f->add_option("--holdout", fit.holdout, "fraction of sources held out for validation")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train one configuration");
  add_common(t, c_train, o_train);
  t->add_option("--data", train.data, "synthesized training dataset");
  t->add_option("--out", c_train.out, "run directory (default runs/<G>_<D>_<Loss>)");
  t->add_flag("--resume", train.resume, "continue from <run>/ckpt/latest.ckpt");
  t->add_option("--log-every", train.log_every, "print losses every N steps")->capture_default_str();
  add_train_options(t, o_train, true);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "PSNR/SSIM on a synthesized test set");
  e->add_option("--config", c_eval.config, "run configuration (instead of <run>/config.json)")->check(CLI::ExistingFile);
  e->add_flag("--dry-run", c_eval.dry_run, "report what would be done and exit");
  e->add_option("--data", ev.data, "synthesized test dataset")->required();
  e->add_option("--model", ev.model, "checkpoint, oracle or identity")->capture_default_str();
  e->add_option("--run", ev.run, "training run directory");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file (default <run>/ckpt/latest.ckpt)");
  e->add_option("--t-min", ev.t_min, "transmission floor of the oracle")->capture_default_str();
  e->add_option("--out", c_eval.out, "report directory");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "train and evaluate G/D/Loss rows, then print the table");
  add_common(b, c_ablate, o_ablate);
  b->add_option("--data", ab.data, "synthesized training dataset");
  b->add_option("--test-data", ab.test_data, "synthesized test dataset");
  b->add_option("--rows", ab.rows, "rows as G/D/Loss (default: the full grid)")->delimiter(',');
  b->add_option("--out", c_ablate.out, "output directory (default runs/ablation)");
  b->add_option("--log-every", ab.log_every, "print losses every N steps")->capture_default_str();
  add_train_options(b, o_ablate, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, os, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (s->parsed()) return cmd_scenes(c_scenes, resolve(c_scenes, o_scenes), scenes, os);
    if (y->parsed()) return cmd_synth(c_synth, resolve(c_synth, o_synth), synth, os);
    if (f->parsed()) return cmd_fit_depth_proxy(c_fit, resolve(c_fit, o_fit), fit, os);
    if (t->parsed()) return cmd_train(c_train, resolve(c_train, o_train), train, os);
    if (e->parsed()) return cmd_eval(c_eval, ev, os);
    if (b->parsed()) return cmd_ablate(c_ablate, resolve(c_ablate, o_ablate), ab, os);
  } catch (const ValidationError& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace dehaze::cli
