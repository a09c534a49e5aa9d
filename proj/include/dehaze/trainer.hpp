#pragma once

// Unpaired cycle-consistent adversarial training.
//
//   g_a : hazy -> clear (G)      d_b judges clear-domain images (y vs G(x))
//   g_b : clear -> hazy (F)      d_a judges hazy-domain images  (x vs F(y))
//
// Each step: one generator update on the weighted objective, then one
// discriminator update on history-buffered fakes. Networks see images in
// [-1, 1]; the depth network sees the same images mapped back to [0, 1].

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dehaze/checkpoint.hpp"
#include "dehaze/depth_proxy.hpp"
#include "dehaze/losses.hpp"
#include "dehaze/networks.hpp"
#include "dehaze/optim.hpp"

namespace dehaze {

struct TrainConfig {
  std::string gen = "6B-Oct";
  std::string disc = "3L-OctN";
  int width = 32;
  int epochs = 200;
  int constant_epochs = 100;
  int decay_epochs = 100;
  long long max_steps = 0;  // 0: run all epochs
  int batch_size = 2;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int image_size = 64;
  double flip_prob = 0.5;
  int pool_size = 50;
  std::uint64_t seed = 0;
  LossFlags loss{true, false};
  LossWeights weights;
  DepthNormalization depth_norm = DepthNormalization::median_scale;
  int checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  bool deterministic = true;

  void validate() const {
    NetworkSpec::generator(gen, width).validate();
    NetworkSpec::discriminator(disc, width).validate();
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (image_size < 16 || image_size % 2) throw ConfigError("image_size must be even and >= 16");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (constant_epochs < 0 || decay_epochs < 0) throw ConfigError("schedule epochs must be >= 0");
    if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("flip_prob must lie in [0, 1]");
    if (pool_size < 0) throw ConfigError("pool_size must be >= 0");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    weights.validate();
  }
};

/// Constant for `constant_epochs`, then linear to zero over `decay_epochs`.
inline double learning_rate(const TrainConfig& c, int epoch) {
  if (c.decay_epochs == 0) return c.lr;
  const double past = std::max(0, epoch - c.constant_epochs);
  return c.lr * std::max(0.0, 1.0 - past / c.decay_epochs);
}

/// Flips each sample of an NCHW batch horizontally with probability `flip_prob`.
template <typename T>
Tensor<T> augment(const Tensor<T>& batch, double flip_prob, Rng& rng) {
  Tensor<T> out = batch;
  const std::size_t m = batch.size() / batch.dim(0);
  const int w = batch.dim(3);
  for (int b = 0; b < batch.dim(0); ++b) {
    if (!rng.bernoulli(flip_prob)) continue;
    for (std::size_t r = 0; r < m / w; ++r)
      for (int j = 0; j < w; ++j) out[b * m + r * w + j] = batch[b * m + r * w + (w - 1 - j)];
  }
  return out;
}

/// Per-domain sampler: its own shuffle order, flips and RNG stream.
template <typename T>
class DomainSampler {
 public:
  DomainSampler() = default;
  DomainSampler(std::vector<Tensor<T>> images, std::uint64_t seed, double flip_prob)
      : images_(std::move(images)), rng_(seed), flip_prob_(flip_prob) {
    if (images_.empty()) throw ValidationError("training domain has no images");
    order_.resize(images_.size());
    reshuffle();
  }

  Tensor<T> next_batch(int n) {
    std::vector<Tensor<T>> parts;
    for (int i = 0; i < n; ++i) {
      if (pos_ == order_.size()) reshuffle();
      history_.push_back(order_[pos_]);
      parts.push_back(images_[order_[pos_++]]);
    }
    return augment(stack_batch(parts), flip_prob_, rng_);
  }

  std::size_t size() const { return images_.size(); }
  /// Indices served so far, for audits.
  const std::vector<std::size_t>& history() const { return history_; }

  nlohmann::ordered_json state() const { return {{"rng", rng_.serialize()}, {"order", order_}, {"pos", pos_}}; }
  void restore(const nlohmann::ordered_json& j) {
    rng_.deserialize(j.at("rng").get<std::string>());
    order_ = j.at("order").get<std::vector<std::size_t>>();
    pos_ = j.at("pos").get<std::size_t>();
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
  }

  std::vector<Tensor<T>> images_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> history_;
  std::size_t pos_ = 0;
  Rng rng_;
  double flip_prob_ = 0.5;
};

/// History of generated images; half of each query is served from the past.
template <typename T>
class ImagePool {
 public:
  explicit ImagePool(int capacity = 50) : capacity_(capacity) {}

  Tensor<T> query(const Tensor<T>& batch, Rng& rng) {
    if (capacity_ == 0) return batch;
    std::vector<Tensor<T>> out;
    for (int b = 0; b < batch.dim(0); ++b) {
      Tensor<T> img = batch_item(batch, b);
      if (static_cast<int>(images_.size()) < capacity_) {
        images_.push_back(img);
        out.push_back(img);
      } else if (rng.bernoulli(0.5)) {
        const std::size_t k = rng.below(images_.size());
        out.push_back(images_[k]);
        images_[k] = img;
      } else {
        out.push_back(img);
      }
    }
    return stack_batch(out);
  }

  std::size_t size() const { return images_.size(); }
  std::vector<Tensor<T>>& images() { return images_; }

 private:
  int capacity_;
  std::vector<Tensor<T>> images_;
};

template <typename T>
struct CycleModel {
  std::unique_ptr<ImageModule<T>> g_a, g_b, d_a, d_b;
};

template <typename T>
CycleModel<T> build_cycle_model(const TrainConfig& c) {
  Rng rng(c.seed);
  const auto gs = NetworkSpec::generator(c.gen, c.width);
  const auto ds = NetworkSpec::discriminator(c.disc, c.width);
  CycleModel<T> m;
  m.g_a = build_generator<T>(gs, rng);
  m.g_b = build_generator<T>(gs, rng);
  m.d_a = build_discriminator<T>(ds, rng);
  m.d_b = build_discriminator<T>(ds, rng);
  return m;
}

/// Ordered (name, value) pairs of one step's losses.
struct LossRecord {
  long long step = 0;
  int epoch = 0;
  double lr = 0.0;
  std::vector<std::pair<std::string, double>> terms;

  double get(const std::string& name) const {
    for (const auto& [n, v] : terms)
      if (n == name) return v;
    throw ValidationError("loss record has no term '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& t : terms)
      if (t.first == name) return true;
    return false;
  }
};

/// Log columns for a flag set: enabled terms only.
inline std::vector<std::string> loss_columns(const LossFlags& f) {
  std::vector<std::string> c{"g_adv", "cyc", "idt", "perc"};
  if (f.cpd) c.push_back("cpd");
  if (f.ssim) c.push_back("ssim");
  c.push_back("g_total");
  c.push_back("d_adv");
  return c;
}

inline std::string csv_header(const LossFlags& f) {
  std::string h = "step,epoch,lr";
  for (const auto& c : loss_columns(f)) h += "," + c;
  return h;
}

inline std::string csv_row(const LossRecord& r) {
  char buf[64];
  std::string s = std::to_string(r.step) + "," + std::to_string(r.epoch);
  std::snprintf(buf, sizeof buf, ",%.9g", r.lr);
  s += buf;
  for (const auto& [n, v] : r.terms) {
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    s += buf;
  }
  return s;
}

template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, CycleModel<T> model, const DepthEstimator<T>* phi, const FeatureExtractor<T>* extractor)
      : cfg_(std::move(cfg)), model_(std::move(model)), phi_(phi), extractor_(extractor), pool_a_(cfg_.pool_size),
        pool_b_(cfg_.pool_size), pool_rng_(cfg_.seed * 4 + 3) {
    cfg_.weights.validate();
    if (cfg_.loss.cpd && !phi_) throw ConfigError("the CPD loss needs a depth estimator");
    if (!extractor_) throw ConfigError("the perceptual loss needs a feature extractor");
    const AdamOptions ao{cfg_.lr, cfg_.beta1, cfg_.beta2, 1e-8};
    opt_g_ = Adam<T>(generator_tensors(), ao);
    opt_d_ = Adam<T>(discriminator_tensors(), ao);
  }

  const TrainConfig& config() const { return cfg_; }
  CycleModel<T>& model() { return model_; }
  Adam<T>& generator_optimizer() { return opt_g_; }
  Adam<T>& discriminator_optimizer() { return opt_d_; }
  long long step_count() const { return step_; }
  void set_lr(double lr) {
    opt_g_.set_lr(lr);
    opt_d_.set_lr(lr);
  }

  std::vector<TensorRef<T>> generator_tensors() {
    auto a = model_.g_a->tensors("g_a");
    auto b = model_.g_b->tensors("g_b");
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  std::vector<TensorRef<T>> discriminator_tensors() {
    auto a = model_.d_a->tensors("d_a");
    auto b = model_.d_b->tensors("d_b");
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  /// Weighted generator objective and its named components; no parameter update.
  std::pair<Var<T>, std::vector<std::pair<std::string, double>>> generator_objective(const Var<T>& x, const Var<T>& y) {
    const auto& w = cfg_.weights;
    const Var<T> fake_y = model_.g_a->forward(x);
    const Var<T> rec_x = model_.g_b->forward(fake_y);
    const Var<T> fake_x = model_.g_b->forward(y);
    const Var<T> rec_y = model_.g_a->forward(fake_x);
    last_fake_y_ = fake_y.value();
    last_fake_x_ = fake_x.value();

    std::vector<std::pair<std::string, Var<T>>> parts;
    parts.emplace_back("g_adv", add(lsgan_generator_loss(model_.d_b->forward(fake_y)),
                                    lsgan_generator_loss(model_.d_a->forward(fake_x))));
    parts.emplace_back("cyc", cycle_consistency_loss(x, rec_x, y, rec_y));
    parts.emplace_back("idt", add(identity_loss(y, model_.g_a->forward(y)), identity_loss(x, model_.g_b->forward(x))));
    parts.emplace_back("perc", add(perceptual_loss(x, rec_x, *extractor_), perceptual_loss(y, rec_y, *extractor_)));
    if (cfg_.loss.cpd) {
      const DepthEstimator<T>* phi = phi_;
      ImageFn<T> phi01 = [phi](const Var<T>& v) { return phi->estimate(add_scalar(scale(v, T(0.5)), T(0.5))); };
      parts.emplace_back("cpd", cyclic_depth_loss(x, rec_x, y, rec_y, phi01, cfg_.depth_norm));
    }
    if (cfg_.loss.ssim) parts.emplace_back("ssim", cyclic_ssim_loss(x, rec_x, y, rec_y, T(2)));

    auto weight_of = [&](const std::string& n) {
      if (n == "g_adv") return w.adv;
      if (n == "cyc") return w.cyc;
      if (n == "idt") return w.idt;
      if (n == "perc") return w.perc;
      if (n == "cpd") return w.depth;
      return w.ssim;
    };
    Var<T> total;
    std::vector<std::pair<std::string, double>> values;
    for (const auto& [n, v] : parts) {
      const Var<T> term = scale(v, static_cast<T>(weight_of(n)));
      total = total.defined() ? add(total, term) : term;
      values.emplace_back(n, static_cast<double>(v.value().item()));
    }
    values.emplace_back("g_total", static_cast<double>(total.value().item()));
    return {total, values};
  }

  /// One generator update followed by one discriminator update.
  LossRecord step(const Tensor<T>& batch_x, const Tensor<T>& batch_y, int epoch = 0) {
    model_.d_a->power_step(1);
    model_.d_b->power_step(1);
    const Var<T> x = Var<T>::constant(batch_x), y = Var<T>::constant(batch_y);

    LossRecord rec;
    rec.step = step_;
    rec.epoch = epoch;
    rec.lr = opt_g_.lr();

    model_.d_a->set_trainable(false);
    model_.d_b->set_trainable(false);
    opt_g_.zero_grad();
    {
      auto [total, values] = generator_objective(x, y);
      check_finite(values, batch_x, batch_y);
      total.backward();
      rec.terms = std::move(values);
    }
    opt_g_.step();
    model_.d_a->set_trainable(true);
    model_.d_b->set_trainable(true);

    // Fakes come from the generators as they were before this step's update.
    opt_d_.zero_grad();
    const Var<T> pooled_y = Var<T>::constant(pool_b_.query(last_fake_y_, pool_rng_));
    const Var<T> pooled_x = Var<T>::constant(pool_a_.query(last_fake_x_, pool_rng_));
    const Var<T> d_loss = add(lsgan_discriminator_loss(model_.d_b->forward(y), model_.d_b->forward(pooled_y)),
                              lsgan_discriminator_loss(model_.d_a->forward(x), model_.d_a->forward(pooled_x)));
    const double d_value = d_loss.value().item();
    rec.terms.emplace_back("d_adv", d_value);
    check_finite(rec.terms, batch_x, batch_y);
    d_loss.backward();
    opt_d_.step();
    ++step_;
    return rec;
  }

  /// Where non-finite batches are dumped; empty disables dumping.
  void set_dump_dir(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

  // -- state -----------------------------------------------------------------

  std::vector<TensorRef<T>> state_tensors() {
    auto refs = generator_tensors();
    auto d = discriminator_tensors();
    refs.insert(refs.end(), d.begin(), d.end());
    opt_g_.collect_state("opt_g", refs);
    opt_d_.collect_state("opt_d", refs);
    for (std::size_t i = 0; i < pool_a_.size(); ++i) refs.push_back({"pool_a." + std::to_string(i), &pool_a_.images()[i], nullptr});
    for (std::size_t i = 0; i < pool_b_.size(); ++i) refs.push_back({"pool_b." + std::to_string(i), &pool_b_.images()[i], nullptr});
    return refs;
  }

  nlohmann::ordered_json state_meta() const {
    return {{"step", step_},
            {"opt_g_steps", opt_g_.steps()},
            {"opt_d_steps", opt_d_.steps()},
            {"pool_a", pool_a_.size()},
            {"pool_b", pool_b_.size()},
            {"pool_rng", pool_rng_.serialize()}};
  }

  void restore(const Archive& ar) {
    const auto& m = ar.meta.at("trainer");
    const Shape img{1, 3, cfg_.image_size, cfg_.image_size};
    pool_a_.images().assign(m.at("pool_a").get<std::size_t>(), Tensor<T>(img));
    pool_b_.images().assign(m.at("pool_b").get<std::size_t>(), Tensor<T>(img));
    load_into(ar, state_tensors(), "training checkpoint");
    step_ = m.at("step").get<long long>();
    opt_g_.set_steps(m.at("opt_g_steps").get<long long>());
    opt_d_.set_steps(m.at("opt_d_steps").get<long long>());
    pool_rng_.deserialize(m.at("pool_rng").get<std::string>());
  }

 private:
  void check_finite(const std::vector<std::pair<std::string, double>>& values, const Tensor<T>& bx, const Tensor<T>& by) {
    for (const auto& [n, v] : values) {
      if (std::isfinite(v)) continue;
      std::string where;
      if (!dump_dir_.empty()) {
        Tensor<T> a = bx, b = by;
        const auto path = dump_dir_ / ("nonfinite_step" + std::to_string(step_) + ".ckpt");
        write_archive<T>(path, {{"batch_x", &a, nullptr}, {"batch_y", &b, nullptr}},
                         {{"step", step_}, {"term", n}});
        where = "; offending batch dumped to " + path.string();
      }
      throw TrainingError("non-finite loss '" + n + "' at step " + std::to_string(step_) + where);
    }
  }

  TrainConfig cfg_;
  CycleModel<T> model_;
  const DepthEstimator<T>* phi_;
  const FeatureExtractor<T>* extractor_;
  Adam<T> opt_g_, opt_d_;
  ImagePool<T> pool_a_, pool_b_;
  Rng pool_rng_;
  long long step_ = 0;
  std::filesystem::path dump_dir_;
  Tensor<T> last_fake_y_, last_fake_x_;
};

/// Images in [0,1] as [1,3,H,W] tensors in [-1,1].
template <typename T>
std::vector<Tensor<T>> to_network_range(const std::vector<Image>& images) {
  std::vector<Tensor<T>> out;
  out.reserve(images.size());
  for (const auto& im : images) {
    Tensor<T> t({1, 3, im.dim(1), im.dim(2)});
    for (std::size_t i = 0; i < im.size(); ++i) t[i] = static_cast<T>(im[i] * 2.0 - 1.0);
    out.push_back(std::move(t));
  }
  return out;
}

struct TrainCallbacks {
  std::function<void(const LossRecord&)> on_step;
};

/// Full training run with sampling, schedule, logging and checkpoints.
/// With `run_dir` set, writes run_dir/log.csv and run_dir/ckpt/*.ckpt; an
/// existing run_dir/ckpt/latest.ckpt is resumed when `resume` is true.
template <typename T>
class TrainingRun {
 public:
  TrainingRun(TrainConfig cfg, const std::vector<Image>& hazy, const std::vector<Image>& clear,
              const DepthEstimator<T>* phi, const FeatureExtractor<T>* extractor)
      : cfg_(cfg),
        sampler_x_(to_network_range<T>(hazy), cfg.seed * 4 + 1, cfg.flip_prob),
        sampler_y_(to_network_range<T>(clear), cfg.seed * 4 + 2, cfg.flip_prob),
        trainer_(cfg, build_cycle_model<T>(cfg), phi, extractor) {
    cfg_.validate();
    for (const auto* set : {&hazy, &clear})
      for (const auto& im : *set)
        if (im.dim(1) != cfg.image_size || im.dim(2) != cfg.image_size)
          throw ValidationError("training images must be " + std::to_string(cfg.image_size) + "x" +
                                std::to_string(cfg.image_size) + ", got " + shape_str(im.shape()));
  }

  long long steps_per_epoch() const {
    const std::size_t n = std::max(sampler_x_.size(), sampler_y_.size());
    return static_cast<long long>((n + cfg_.batch_size - 1) / cfg_.batch_size);
  }

  long long total_steps() const {
    const long long all = steps_per_epoch() * cfg_.epochs;
    return cfg_.max_steps > 0 ? std::min(all, cfg_.max_steps) : all;
  }

  Trainer<T>& trainer() { return trainer_; }
  const std::vector<LossRecord>& records() const { return records_; }
  const DomainSampler<T>& sampler_x() const { return sampler_x_; }
  const DomainSampler<T>& sampler_y() const { return sampler_y_; }

  void run(const std::filesystem::path& run_dir = {}, bool resume = false, const TrainCallbacks& cb = {}) {
    namespace fs = std::filesystem;
    std::ofstream log;
    if (!run_dir.empty()) {
      fs::create_directories(run_dir / "ckpt");
      trainer_.set_dump_dir(run_dir);
      const fs::path latest = run_dir / "ckpt" / "latest.ckpt";
      if (resume && fs::exists(latest)) load(latest);
      const bool fresh = trainer_.step_count() == 0;
      if (fresh) {
        log.open(run_dir / "log.csv", std::ios::trunc);
        log << csv_header(cfg_.loss) << "\n";
      } else {
        truncate_log(run_dir / "log.csv", trainer_.step_count());
        log.open(run_dir / "log.csv", std::ios::app);
      }
    }
    const long long spe = steps_per_epoch(), total = total_steps();
    while (trainer_.step_count() < total) {
      const int epoch = static_cast<int>(trainer_.step_count() / spe);
      trainer_.set_lr(learning_rate(cfg_, epoch));
      const Tensor<T> bx = sampler_x_.next_batch(cfg_.batch_size);
      const Tensor<T> by = sampler_y_.next_batch(cfg_.batch_size);
      LossRecord rec = trainer_.step(bx, by, epoch);
      if (log.is_open()) log << csv_row(rec) << "\n" << std::flush;
      if (cb.on_step) cb.on_step(rec);
      records_.push_back(std::move(rec));
      const long long done = trainer_.step_count();
      if (!run_dir.empty()) {
        const bool epoch_end = done % spe == 0;
        const int finished = static_cast<int>(done / spe);
        if (done == total || (epoch_end && cfg_.checkpoint_every > 0 && finished % cfg_.checkpoint_every == 0)) {
          char name[32];
          std::snprintf(name, sizeof name, "step_%06lld.ckpt", done);
          save(run_dir / "ckpt" / name);
          save(run_dir / "ckpt" / "latest.ckpt");
        }
      }
    }
  }

  void save(const std::filesystem::path& path) {
    nlohmann::ordered_json meta{{"kind", "training_state"},
                                {"gen", cfg_.gen},
                                {"disc", cfg_.disc},
                                {"width", cfg_.width},
                                {"image_size", cfg_.image_size},
                                {"trainer", trainer_.state_meta()},
                                {"sampler_x", sampler_x_.state()},
                                {"sampler_y", sampler_y_.state()}};
    write_archive(path, trainer_.state_tensors(), meta);
  }

  void load(const std::filesystem::path& path) {
    const Archive ar = read_archive(path);
    if (ar.meta.value("gen", "") != cfg_.gen || ar.meta.value("disc", "") != cfg_.disc ||
        ar.meta.value("width", 0) != cfg_.width)
      throw ValidationError("checkpoint " + path.string() + " was written for a different model (" +
                            ar.meta.value("gen", "?") + "/" + ar.meta.value("disc", "?") + ")");
    trainer_.restore(ar);
    sampler_x_.restore(ar.meta.at("sampler_x"));
    sampler_y_.restore(ar.meta.at("sampler_y"));
  }

 private:
  static void truncate_log(const std::filesystem::path& p, long long steps) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    in.close();
    std::ofstream out(p, std::ios::trunc);
    for (std::size_t i = 0; i < lines.size() && static_cast<long long>(i) <= steps; ++i) out << lines[i] << "\n";
  }

  TrainConfig cfg_;
  DomainSampler<T> sampler_x_, sampler_y_;
  Trainer<T> trainer_;
  std::vector<LossRecord> records_;
};

}  // namespace dehaze
