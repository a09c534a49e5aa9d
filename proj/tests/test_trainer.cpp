#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dehaze/scenes.hpp"
#include "dehaze/trainer.hpp"
#include "test_util.hpp"

using namespace dehaze;
using namespace dehaze::testing;
namespace fs = std::filesystem;

namespace {

// 1x1 convolution wrapper used as a toy generator or patch discriminator.
template <typename T>
class PointwiseNet : public ImageModule<T> {
 public:
  PointwiseNet(int out, Rng& rng, bool identity) : conv_(Conv2dSpec{3, out, 1, 1, 0}, rng) {
    if (identity) {
      auto& w = conv_.kernel().weight.mutable_value();
      w.fill(T(0));
      for (int i = 0; i < out; ++i) w.at(i, i, 0, 0) = T(1);
    }
  }
  Var<T> forward(const Var<T>& x) const override { return conv_.forward(x); }
  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    conv_.collect(join_name(prefix, "conv"), out);
  }

 private:
  Conv2d<T> conv_;
};

template <typename T>
CycleModel<T> toy_model(bool identity, std::uint64_t seed = 1) {
  Rng rng(seed);
  CycleModel<T> m;
  m.g_a = std::make_unique<PointwiseNet<T>>(3, rng, identity);
  m.g_b = std::make_unique<PointwiseNet<T>>(3, rng, identity);
  m.d_a = std::make_unique<PointwiseNet<T>>(1, rng, false);
  m.d_b = std::make_unique<PointwiseNet<T>>(1, rng, false);
  return m;
}

TrainConfig small_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.width = 8;
  c.image_size = 16;
  c.epochs = 2;
  c.constant_epochs = 1;
  c.decay_epochs = 1;
  c.batch_size = 2;
  c.seed = seed;
  return c;
}

std::vector<Image> images(int n, std::uint64_t seed, int size = 16) {
  std::vector<Image> out;
  for (const auto& s : generate_scenes(n, seed, SceneOptions{size, size})) out.push_back(s.image);
  return out;
}

std::vector<Tensor<double>> snapshot(Module<double>& m) {
  std::vector<Tensor<double>> out;
  for (const auto& r : m.tensors()) out.push_back(*r.tensor);
  return out;
}

std::vector<Tensor<float>> snapshot(Module<float>& m) {
  std::vector<Tensor<float>> out;
  for (const auto& r : m.tensors()) out.push_back(*r.tensor);
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dehaze_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// schedule, augmentation, pool

TEST(Schedule, LinearDecayExamples) {
  TrainConfig c;
  c.epochs = 200;
  c.constant_epochs = 100;
  c.decay_epochs = 100;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0), 2e-4);
  EXPECT_DOUBLE_EQ(learning_rate(c, 100), 2e-4);
  EXPECT_DOUBLE_EQ(learning_rate(c, 150), 1e-4);
  EXPECT_NEAR(learning_rate(c, 199), 2e-6, 1e-18);
  EXPECT_EQ(learning_rate(c, 200), 0.0);
  for (int e = 1; e < 220; ++e) EXPECT_LE(learning_rate(c, e), learning_rate(c, e - 1));
  c.decay_epochs = 0;
  EXPECT_EQ(learning_rate(c, 500), 2e-4);
}

TEST(Augment, ZeroProbabilityIsIdentityAndFlipIsInvolution) {
  Rng data(1), a(2), b(3);
  const auto batch = random_tensor({4, 3, 5, 6}, data);
  EXPECT_EQ(augment(batch, 0.0, a), batch);
  const auto once = augment(batch, 1.0, a);
  EXPECT_NE(once, batch);
  EXPECT_EQ(augment(once, 1.0, b), batch);
  for (int n = 0; n < 4; ++n)
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < 5; ++r)
        for (int q = 0; q < 6; ++q) EXPECT_EQ(once.at(n, c, r, q), batch.at(n, c, r, 5 - q));
}

TEST(Augment, FlipFrequencyMatchesProbability) {
  Rng rng(4);
  Tensor<double> one({1, 1, 1, 2}, std::vector<double>{0.0, 1.0});
  for (double p : {0.5, 0.2}) {
    int flips = 0;
    for (int i = 0; i < 10000; ++i) flips += augment(one, p, rng)[0] == 1.0;
    EXPECT_NEAR(flips / 10000.0, p, 0.02);
  }
}

TEST(ImagePool, FillsThenMixesHistory) {
  Rng rng(5), data(6);
  ImagePool<double> off(0);
  const auto b = random_tensor({2, 3, 4, 4}, data);
  EXPECT_EQ(off.query(b, rng), b);
  EXPECT_EQ(off.size(), 0u);

  ImagePool<double> pool(4);
  EXPECT_EQ(pool.query(b, rng), b);
  EXPECT_EQ(pool.query(b, rng), b);
  EXPECT_EQ(pool.size(), 4u);
  int fresh = 0, total = 0;
  for (int i = 0; i < 500; ++i) {
    const auto q = random_tensor({2, 3, 4, 4}, data);
    const auto out = pool.query(q, rng);
    EXPECT_EQ(pool.size(), 4u);
    for (int k = 0; k < 2; ++k) {
      fresh += batch_item(out, k) == batch_item(q, k);
      ++total;
    }
  }
  EXPECT_NEAR(double(fresh) / total, 0.5, 0.05);
}

TEST(TrainConfig, Validation) {
  EXPECT_NO_THROW(small_config().validate());
  auto bad = [](auto edit) {
    TrainConfig c = small_config();
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.lr = 0; });
  bad([](TrainConfig& c) { c.image_size = 15; });
  bad([](TrainConfig& c) { c.image_size = 8; });
  bad([](TrainConfig& c) { c.gen = "7B"; });
  bad([](TrainConfig& c) { c.disc = "4L"; });
  bad([](TrainConfig& c) { c.weights.cyc = 0; });
  bad([](TrainConfig& c) { c.flip_prob = 1.5; });
}

// ---------------------------------------------------------------------------
// objective

TEST(Objective, IdentityGeneratorsWithOnlyCycleWeightHaveZeroGradient) {
  TrainConfig c = small_config();
  c.weights = {0, 10, 0, 0, 0, 0};
  c.loss = {true, true};
  StubDepth<double> phi;
  StubFeatureExtractor<double> ex;
  Trainer<double> t(c, toy_model<double>(true), &phi, &ex);
  Rng rng(7);
  const auto x = Var<double>::constant(random_tensor({2, 3, 16, 16}, rng));
  const auto y = Var<double>::constant(random_tensor({2, 3, 16, 16}, rng));
  auto [total, terms] = t.generator_objective(x, y);
  EXPECT_EQ(total.value().item(), 0.0);
  total.backward();
  for (const auto& r : t.generator_tensors()) {
    if (!r.param || !r.param->has_grad()) continue;
    for (double g : r.param->grad().values()) EXPECT_EQ(g, 0.0) << r.name;
  }
}

TEST(Objective, DisabledTermsReproduceBaseExactly) {
  StubDepth<double> phi;
  StubFeatureExtractor<double> ex;
  Rng rng(8);
  const auto x = Var<double>::constant(random_tensor({2, 3, 16, 16}, rng));
  const auto y = Var<double>::constant(random_tensor({2, 3, 16, 16}, rng));
  auto objective = [&](LossFlags flags, LossWeights w) {
    TrainConfig c = small_config();
    c.loss = flags;
    c.weights = w;
    Trainer<double> t(c, toy_model<double>(false, 3), &phi, &ex);
    return t.generator_objective(x, y);
  };
  const auto [base, base_terms] = objective({false, false}, {});
  // Enabled but zero-weighted extras add nothing.
  LossWeights zero_extra;
  zero_extra.depth = zero_extra.ssim = 0;
  EXPECT_EQ(objective({true, true}, zero_extra).first.value().item(), base.value().item());
  // Enabled and weighted: base terms unchanged, totals differ by the weighted extras.
  const auto [full, full_terms] = objective({true, true}, {});
  LossRecord rb{0, 0, 0, base_terms}, rf{0, 0, 0, full_terms};
  for (const char* n : {"g_adv", "cyc", "idt", "perc"}) EXPECT_EQ(rb.get(n), rf.get(n)) << n;
  const LossWeights w;
  EXPECT_NEAR(rf.get("g_total"), rb.get("g_total") + w.depth * rf.get("cpd") + w.ssim * rf.get("ssim"), 1e-12);
  EXPECT_GT(rf.get("cpd"), 0.0);
  EXPECT_GT(rf.get("ssim"), 0.0);
}

// One full step in double: every parameter moves by exactly the bias-corrected
// Adam update of its independently computed gradient.
TEST(Objective, OneStepMatchesAdamClosedForm) {
  TrainConfig c = small_config(11);
  c.pool_size = 50;
  StubDepth<double> phi;
  StubFeatureExtractor<double> ex;
  Trainer<double> stepped(c, build_cycle_model<double>(c), &phi, &ex);
  Trainer<double> oracle(c, build_cycle_model<double>(c), &phi, &ex);
  Rng rng(12);
  const auto bx = random_tensor({2, 3, 16, 16}, rng), by = random_tensor({2, 3, 16, 16}, rng);
  const auto x = Var<double>::constant(bx), y = Var<double>::constant(by);

  auto& m = oracle.model();
  m.d_a->power_step(1);
  m.d_b->power_step(1);
  m.d_a->set_trainable(false);
  m.d_b->set_trainable(false);
  auto [g_total, terms] = oracle.generator_objective(x, y);
  g_total.backward();
  m.d_a->set_trainable(true);
  m.d_b->set_trainable(true);
  const auto fake_y = Var<double>::constant(m.g_a->forward(x).value());
  const auto fake_x = Var<double>::constant(m.g_b->forward(y).value());
  const auto d_total = add(lsgan_discriminator_loss(m.d_b->forward(y), m.d_b->forward(fake_y)),
                           lsgan_discriminator_loss(m.d_a->forward(x), m.d_a->forward(fake_x)));
  d_total.backward();

  stepped.step(bx, by);

  auto expect_adam = [&](std::vector<TensorRef<double>> before, std::vector<TensorRef<double>> after) {
    ASSERT_EQ(before.size(), after.size());
    const double b1 = c.beta1, b2 = c.beta2, lr = c.lr;
    double worst = 0;
    int checked = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      if (!before[i].param) continue;
      const auto& p0 = *before[i].tensor;
      const bool has = before[i].param->has_grad();
      for (std::size_t k = 0; k < p0.size(); ++k) {
        const double g = has ? before[i].param->grad()[k] : 0.0;
        const double mk = (1 - b1) * g, vk = (1 - b2) * g * g;
        const double expected = p0[k] - lr / (1 - b1) * mk / (std::sqrt(vk) / std::sqrt(1 - b2) + 1e-8);
        worst = std::max(worst, std::abs((*after[i].tensor)[k] - expected));
        ++checked;
      }
    }
    EXPECT_GT(checked, 1000);
    EXPECT_LT(worst, 1e-10);
  };
  expect_adam(oracle.generator_tensors(), stepped.generator_tensors());
  expect_adam(oracle.discriminator_tensors(), stepped.discriminator_tensors());
}

TEST(Objective, NonFiniteLossRaisesAndDumpsBatch) {
  TrainConfig c = small_config();
  StubDepth<double> phi;
  StubFeatureExtractor<double> ex;
  Trainer<double> t(c, toy_model<double>(false), &phi, &ex);
  const auto dir = scratch("nonfinite");
  fs::create_directories(dir);
  t.set_dump_dir(dir);
  Tensor<double> bx({1, 3, 16, 16}, 0.1), by({1, 3, 16, 16}, 0.2);
  bx[5] = std::nan("");
  try {
    t.step(bx, by);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
  EXPECT_TRUE(fs::exists(dir / "nonfinite_step0.ckpt"));
  fs::remove_all(dir);
}

TEST(Objective, MissingCollaboratorsAreConfigErrors) {
  TrainConfig c = small_config();
  StubFeatureExtractor<double> ex;
  EXPECT_THROW(Trainer<double>(c, toy_model<double>(false), nullptr, &ex), ConfigError);
  c.loss = {false, true};
  EXPECT_NO_THROW(Trainer<double>(c, toy_model<double>(false), nullptr, &ex));
}

// ---------------------------------------------------------------------------
// full runs

TEST(TrainingRun, LoggedTermsFollowFlags) {
  StubDepth<float> phi;
  StubFeatureExtractor<float> ex;
  const auto hazy = images(2, 1), clear = images(2, 2);
  for (const char* loss : {"base", "CPD", "SSIM", "CPD+SSIM"}) {
    TrainConfig c = small_config();
    c.loss = LossFlags::parse(loss);
    c.max_steps = 2;
    TrainingRun<float> run(c, hazy, clear, &phi, &ex);
    const auto dir = scratch(std::string("flags_") + (c.loss.cpd ? "c" : "") + (c.loss.ssim ? "s" : ""));
    run.run(dir);
    const auto cols = loss_columns(c.loss);
    ASSERT_EQ(run.records().size(), 2u);
    for (const auto& r : run.records()) {
      ASSERT_EQ(r.terms.size(), cols.size()) << loss;
      for (std::size_t i = 0; i < cols.size(); ++i) EXPECT_EQ(r.terms[i].first, cols[i]);
      for (const auto& [n, v] : r.terms) EXPECT_TRUE(std::isfinite(v)) << n;
    }
    EXPECT_EQ(run.records()[0].has("cpd"), c.loss.cpd);
    EXPECT_EQ(run.records()[0].has("ssim"), c.loss.ssim);
    std::ifstream log(dir / "log.csv");
    std::string header;
    std::getline(log, header);
    EXPECT_EQ(header, csv_header(c.loss));
    fs::remove_all(dir);
  }
}

TEST(TrainingRun, DeterministicLogsAndFrozenAuxiliaryNetworks) {
  ProxyDepth<float> phi(3);
  phi.set_trainable(false);
  StubFeatureExtractor<float> ex;
  const auto phi_before = snapshot(phi), ex_before = snapshot(ex);
  const auto hazy = images(3, 1), clear = images(3, 2);
  TrainConfig c = small_config(5);
  c.max_steps = 4;
  const auto a = scratch("det_a"), b = scratch("det_b");
  TrainingRun<float>(c, hazy, clear, &phi, &ex).run(a);
  TrainingRun<float>(c, hazy, clear, &phi, &ex).run(b);
  EXPECT_EQ(read_file(a / "log.csv"), read_file(b / "log.csv"));
  EXPECT_EQ(snapshot(phi), phi_before);
  EXPECT_EQ(snapshot(ex), ex_before);
  for (auto* p : phi.parameters()) EXPECT_FALSE(p->has_grad());
  for (auto* p : ex.parameters()) EXPECT_FALSE(p->has_grad());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(TrainingRun, ResumeReproducesTrajectoryBitForBit) {
  StubDepth<float> phi;
  StubFeatureExtractor<float> ex;
  const auto hazy = images(3, 1), clear = images(2, 2);
  TrainConfig c = small_config(9);
  c.pool_size = 2;  // exercises pool state across the restart
  c.epochs = 3;     // 2 steps per epoch
  c.max_steps = 6;
  const auto whole = scratch("whole"), split = scratch("split");
  TrainingRun<float>(c, hazy, clear, &phi, &ex).run(whole);

  TrainConfig first = c;
  first.max_steps = 3;
  TrainingRun<float>(first, hazy, clear, &phi, &ex).run(split);
  TrainingRun<float> resumed(c, hazy, clear, &phi, &ex);
  resumed.run(split, true);
  EXPECT_EQ(resumed.records().size(), 3u);
  EXPECT_EQ(read_file(whole / "log.csv"), read_file(split / "log.csv"));
  EXPECT_EQ(read_file(whole / "ckpt" / "latest.ckpt"), read_file(split / "ckpt" / "latest.ckpt"));
  fs::remove_all(whole);
  fs::remove_all(split);
}

TEST(TrainingRun, ResumeRejectsOtherModel) {
  StubDepth<float> phi;
  StubFeatureExtractor<float> ex;
  const auto hazy = images(2, 1), clear = images(2, 2);
  TrainConfig c = small_config();
  c.max_steps = 1;
  const auto dir = scratch("mismatch");
  TrainingRun<float>(c, hazy, clear, &phi, &ex).run(dir);
  c.gen = "9B";
  c.disc = "3L";
  c.max_steps = 2;
  TrainingRun<float> other(c, hazy, clear, &phi, &ex);
  EXPECT_THROW(other.run(dir, true), ValidationError);
  fs::remove_all(dir);
}

// Reordering the hazy domain changes nothing about how the clear domain is sampled.
TEST(TrainingRun, DomainsAreSampledIndependently) {
  StubDepth<float> phi;
  StubFeatureExtractor<float> ex;
  auto hazy = images(3, 1);
  const auto clear = images(4, 2);
  TrainConfig c = small_config(13);
  c.max_steps = 3;
  TrainingRun<float> a(c, hazy, clear, &phi, &ex);
  a.run();
  std::swap(hazy[0], hazy[2]);
  hazy.push_back(images(1, 7)[0]);
  TrainingRun<float> b(c, hazy, clear, &phi, &ex);
  b.run();
  EXPECT_EQ(a.sampler_y().history(), b.sampler_y().history());
  EXPECT_EQ(a.sampler_y().history().size(), 6u);
}

TEST(TrainingRun, RejectsWrongImageSize) {
  StubDepth<float> phi;
  StubFeatureExtractor<float> ex;
  TrainConfig c = small_config();
  EXPECT_THROW(TrainingRun<float>(c, images(2, 1, 32), images(2, 2), &phi, &ex), ValidationError);
  EXPECT_THROW(TrainingRun<float>(c, {}, images(2, 2), &phi, &ex), ValidationError);
}
