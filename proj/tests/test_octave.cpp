#include <gtest/gtest.h>

#include <Eigen/SVD>

#include "dehaze/attention.hpp"
#include "dehaze/octave.hpp"
#include "test_util.hpp"

using namespace dehaze;
using namespace dehaze::testing;

namespace {

Var<double> rand_var(const Shape& s, Rng& rng) { return Var<double>::parameter(random_tensor(s, rng)); }

void randomize(OctaveConv<double>& conv, Rng& rng) {
  for (int p = 0; p < 4; ++p)
    if (conv.has_path(static_cast<OctaveConv<double>::Path>(p)))
      for (auto& v : conv.kernel(static_cast<OctaveConv<double>::Path>(p)).weight.mutable_value().values())
        v = rng.uniform(-0.5, 0.5);
  for (auto* b : {&conv.bias_high(), &conv.bias_low()})
    if (b->defined())
      for (auto& v : b->mutable_value().values()) v = rng.uniform(-0.5, 0.5);
}

const Tensor<double>& w(const OctaveConv<double>& c, OctaveConv<double>::Path p) { return c.kernel(p).weight.value(); }

}  // namespace

TEST(OctaveConv, ZeroAlphaMatchesNaiveConvolution) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int cin = 1 + trial % 4, cout = 2 + trial % 3, k = trial % 2 ? 3 : 5, stride = 1 + trial % 2;
    OctaveConv<double> conv({cin, cout, 0.0, 0.0, k, stride, k / 2}, rng);
    randomize(conv, rng);
    ASSERT_TRUE(conv.has_path(OctaveConv<double>::hh));
    ASSERT_FALSE(conv.has_path(OctaveConv<double>::ll));
    const auto x = random_tensor({2, cin, 12, 12}, rng);
    const auto y = conv.forward({Var<double>::constant(x), Var<double>()});
    EXPECT_FALSE(y.has_low());
    const auto ref = naive_conv(x, w(conv, OctaveConv<double>::hh), &conv.bias_high().value(), stride, k / 2);
    EXPECT_LT(max_abs(y.high.value(), ref), 1e-6);
  }
}

TEST(OctaveConv, FullAlphaIsConvolutionAtHalfResolution) {
  Rng rng(12);
  OctaveConv<double> conv({4, 6, 1.0, 1.0, 3, 1, 1}, rng);
  randomize(conv, rng);
  const auto xl = random_tensor({1, 4, 6, 6}, rng);
  const auto y = conv.forward({Var<double>(), Var<double>::constant(xl)});
  EXPECT_FALSE(y.has_high());
  const auto ref = naive_conv(xl, w(conv, OctaveConv<double>::ll), &conv.bias_low().value(), 1, 1);
  EXPECT_LT(max_abs(y.low.value(), ref), 1e-12);
}

TEST(OctaveConv, ShapeContract) {
  Rng rng(13);
  OctaveConv<float> conv({16, 16, 0.5, 0.5, 3, 1, 1}, rng);
  const auto y = conv.forward({Var<float>::constant(Tensor<float>({1, 8, 16, 16})),
                               Var<float>::constant(Tensor<float>({1, 8, 8, 8}))});
  EXPECT_EQ(y.high.shape(), (Shape{1, 8, 16, 16}));
  EXPECT_EQ(y.low.shape(), (Shape{1, 8, 8, 8}));
}

// Each path computed independently with the naive oracle, then summed.
TEST(OctaveConv, FourPathDecompositionOverRandomCases) {
  Rng rng(2024);
  const double alphas[] = {0.0, 0.5, 1.0};
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int cin = 2 * (1 + static_cast<int>(rng.below(4)));
    const int cout = 2 * (1 + static_cast<int>(rng.below(4)));
    const double ain = alphas[rng.below(3)], aout = alphas[rng.below(3)];
    const int k = rng.bernoulli(0.5) ? 3 : 1;
    const int stride = rng.bernoulli(0.3) ? 2 : 1;
    const int hw = 8 + 4 * static_cast<int>(rng.below(3));
    const int n = 1 + static_cast<int>(rng.below(2));
    OctConvSpec spec{cin, cout, ain, aout, k, stride, k / 2};
    OctaveConv<double> conv(spec, rng);
    randomize(conv, rng);

    Tensor<double> xh, xl;
    OctFeature<double> x;
    if (spec.high_in()) x.high = Var<double>::constant(xh = random_tensor({n, spec.high_in(), hw, hw}, rng));
    if (spec.low_in()) x.low = Var<double>::constant(xl = random_tensor({n, spec.low_in(), hw / 2, hw / 2}, rng));
    const auto y = conv.forward(x);

    using P = OctaveConv<double>::Path;
    if (spec.high_out()) {
      Tensor<double> ref;
      if (spec.high_in()) ref = naive_conv(xh, w(conv, P::hh), nullptr, stride, k / 2);
      if (spec.low_in()) {
        const auto up = naive_upsample2(naive_conv(xl, w(conv, P::lh), nullptr, stride, k / 2));
        if (ref.empty()) ref = up;
        else ref += up;
      }
      for (int b = 0; b < ref.dim(0); ++b)
        for (int c = 0; c < ref.dim(1); ++c)
          for (int i = 0; i < ref.dim(2) * ref.dim(3); ++i)
            ref[(static_cast<std::size_t>(b) * ref.dim(1) + c) * ref.dim(2) * ref.dim(3) + i] += conv.bias_high().value()[c];
      ASSERT_TRUE(y.has_high());
      EXPECT_LT(max_abs(y.high.value(), ref), 1e-6) << "trial " << trial;
    } else {
      EXPECT_FALSE(y.has_high());
    }
    if (spec.low_out()) {
      Tensor<double> ref;
      if (spec.high_in()) ref = naive_conv(naive_avg_pool2(xh), w(conv, P::hl), nullptr, stride, k / 2);
      if (spec.low_in()) {
        const auto ll = naive_conv(xl, w(conv, P::ll), nullptr, stride, k / 2);
        if (ref.empty()) ref = ll;
        else ref += ll;
      }
      for (int b = 0; b < ref.dim(0); ++b)
        for (int c = 0; c < ref.dim(1); ++c)
          for (int i = 0; i < ref.dim(2) * ref.dim(3); ++i)
            ref[(static_cast<std::size_t>(b) * ref.dim(1) + c) * ref.dim(2) * ref.dim(3) + i] += conv.bias_low().value()[c];
      ASSERT_TRUE(y.has_low());
      EXPECT_LT(max_abs(y.low.value(), ref), 1e-6) << "trial " << trial;
    } else {
      EXPECT_FALSE(y.has_low());
    }
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(OctaveConv, ParamCountEqualsVanillaConv) {
  Rng rng(3);
  for (int c : {8, 16, 64})
    for (int k : {1, 3, 4}) {
      OctaveConv<float> oct({c, 2 * c, 0.5, 0.5, k, 1, k / 2}, rng);
      Conv2d<float> plain({c, 2 * c, k, 1, k / 2}, rng);
      EXPECT_EQ(oct.describe("o", 32, 32).params, plain.describe("p", 32, 32).params);
    }
}

TEST(OctaveConv, RejectsBadInputs) {
  Rng rng(4);
  OctaveConv<double> conv({4, 4, 0.5, 0.5, 3, 1, 1}, rng);
  // Odd high branch cannot be pooled.
  EXPECT_THROW(conv.forward({Var<double>::constant(Tensor<double>({1, 2, 7, 7})),
                             Var<double>::constant(Tensor<double>({1, 2, 3, 3}))}),
               ValidationError);
  // Branch channels must follow the split.
  EXPECT_THROW(conv.forward({Var<double>::constant(Tensor<double>({1, 3, 8, 8})),
                             Var<double>::constant(Tensor<double>({1, 1, 4, 4}))}),
               ValidationError);
  EXPECT_THROW(OctaveConv<double>({1, 4, 0.5, 0.5, 3, 1, 1}, rng), ConfigError);
  EXPECT_THROW(OctaveResidualBlock<double>(OctConvSpec{4, 8, 0.5, 0.5, 3, 1, 1}, rng), ValidationError);
}

TEST(OctaveConv, GradientCheck) {
  Rng rng(5);
  OctaveConv<double> conv({4, 6, 0.5, 0.5, 3, 1, 1}, rng);
  randomize(conv, rng);
  auto xh = rand_var({2, 2, 8, 8}, rng), xl = rand_var({2, 2, 4, 4}, rng);
  auto loss = [&] {
    const auto y = conv.forward({xh, xl});
    return add(sum(square(y.high)), sum(mul(y.low, y.low)));
  };
  std::vector<Var<double>> inputs{xh, xl, conv.bias_high(), conv.bias_low()};
  for (int p = 0; p < 4; ++p) inputs.push_back(conv.kernel(static_cast<OctaveConv<double>::Path>(p)).weight);
  EXPECT_LT(gradient_check(loss, inputs), 1e-4);
}

TEST(OctaveResidualBlock, ZeroSecondConvIsIdentity) {
  Rng rng(6);
  OctaveResidualBlock<double> block(8, 0.5, rng);
  for (int p = 0; p < 4; ++p) block.conv2().kernel(static_cast<OctaveConv<double>::Path>(p)).weight.mutable_value().fill(0);
  block.conv2().bias_high().mutable_value().fill(0);
  block.conv2().bias_low().mutable_value().fill(0);
  const auto xh = random_tensor({1, 4, 8, 8}, rng), xl = random_tensor({1, 4, 4, 4}, rng);
  const auto y = block.forward({Var<double>::constant(xh), Var<double>::constant(xl)});
  EXPECT_EQ(y.high.value(), xh);
  EXPECT_EQ(y.low.value(), xl);
}

TEST(OctaveResidualBlock, GradientCheck) {
  Rng rng(7);
  OctaveResidualBlock<double> block(8, 0.5, rng);
  randomize(block.conv1(), rng);
  randomize(block.conv2(), rng);
  auto xh = rand_var({1, 4, 8, 8}, rng), xl = rand_var({1, 4, 4, 4}, rng);
  Tensor<double> probe_h = random_tensor({1, 4, 8, 8}, rng), probe_l = random_tensor({1, 4, 4, 4}, rng);
  auto loss = [&] {
    const auto y = block.forward({xh, xl});
    return add(sum(mul(y.high, Var<double>::constant(probe_h))), sum(mul(y.low, Var<double>::constant(probe_l))));
  };
  std::vector<Var<double>> inputs{xh, xl};
  for (auto* c : {&block.conv1(), &block.conv2()})
    for (int p = 0; p < 4; ++p) inputs.push_back(c->kernel(static_cast<OctaveConv<double>::Path>(p)).weight);
  EXPECT_LT(gradient_check(loss, inputs), 1e-4);
}

// ---------------------------------------------------------------------------
// self-attention

TEST(SelfAttention, ZeroGateIsIdentity) {
  Rng rng(8);
  SelfAttention<double> att(AttentionSpec{16}, rng);
  const auto x = random_tensor({1, 16, 8, 8}, rng);
  EXPECT_EQ(att.forward(Var<double>::constant(x)).value(), x);
  EXPECT_EQ(att.spec().key_channels(), 2);
  EXPECT_EQ(AttentionSpec{4}.key_channels(), 1);
}

TEST(SelfAttention, RowsAreDistributions) {
  Rng rng(9);
  SelfAttention<double> att(AttentionSpec{16}, rng);
  const auto a = att.attention_weights(Var<double>::constant(random_tensor({2, 16, 6, 6}, rng, -3, 3))).value();
  const int n = a.dim(0), hw = a.dim(1);
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < hw; ++i) {
      double s = 0;
      for (int j = 0; j < hw; ++j) {
        const double v = a[(static_cast<std::size_t>(b) * hw + i) * hw + j];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

// Literal three-projection reference: q_i = Wq x_i + bq, k_j, v_j likewise,
// beta_ij = softmax_j(q_i . k_j), y_i = x_i + gate * sum_j beta_ij v_j.
TEST(SelfAttention, MatchesReferenceImplementation) {
  Rng rng(10);
  SelfAttention<double> att(AttentionSpec{16}, rng);
  for (auto* conv : {&att.query(), &att.key(), &att.value()}) {
    for (auto& v : conv->kernel().weight.mutable_value().values()) v = rng.uniform(-0.3, 0.3);
    for (auto& v : conv->bias().mutable_value().values()) v = rng.uniform(-0.3, 0.3);
  }
  att.gate().mutable_value()[0] = 0.7;
  const auto x = random_tensor({1, 16, 8, 8}, rng);
  const auto y = att.forward(Var<double>::constant(x)).value();

  const int c = 16, ck = 2, hw = 64;
  auto project = [&](Conv2d<double>& conv, int co) {
    std::vector<std::vector<double>> out(hw, std::vector<double>(co));
    const auto& wt = conv.kernel().weight.value();
    const auto& bs = conv.bias().value();
    for (int p = 0; p < hw; ++p)
      for (int o = 0; o < co; ++o) {
        double s = bs[o];
        for (int i = 0; i < c; ++i) s += wt[static_cast<std::size_t>(o) * c + i] * x[static_cast<std::size_t>(i) * hw + p];
        out[p][o] = s;
      }
    return out;
  };
  const auto q = project(att.query(), ck), k = project(att.key(), ck), v = project(att.value(), c);
  double worst = 0;
  for (int i = 0; i < hw; ++i) {
    std::vector<double> e(hw);
    double mx = -1e300, z = 0;
    for (int j = 0; j < hw; ++j) {
      e[j] = 0;
      for (int t = 0; t < ck; ++t) e[j] += q[i][t] * k[j][t];
      mx = std::max(mx, e[j]);
    }
    for (int j = 0; j < hw; ++j) z += (e[j] = std::exp(e[j] - mx));
    for (int ch = 0; ch < c; ++ch) {
      double o = 0;
      for (int j = 0; j < hw; ++j) o += e[j] / z * v[j][ch];
      const double ref = x[static_cast<std::size_t>(ch) * hw + i] + 0.7 * o;
      worst = std::max(worst, std::abs(ref - y[static_cast<std::size_t>(ch) * hw + i]));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(SelfAttention, GradientCheck) {
  Rng rng(11);
  SelfAttention<double> att(AttentionSpec{8, 0.25}, rng);
  for (auto* conv : {&att.query(), &att.key(), &att.value()})
    for (auto& v : conv->kernel().weight.mutable_value().values()) v = rng.uniform(-0.5, 0.5);
  att.gate().mutable_value()[0] = 0.5;
  auto x = rand_var({1, 8, 4, 4}, rng);
  const auto probe = random_tensor({1, 8, 4, 4}, rng);
  auto loss = [&] { return sum(mul(att.forward(x), Var<double>::constant(probe))); };
  EXPECT_LT(gradient_check(loss, {x, att.gate(), att.query().kernel().weight, att.key().kernel().weight,
                                  att.value().kernel().weight, att.value().bias()}),
            1e-4);
}

TEST(SelfAttention, CapacityErrorInsteadOfTruncation) {
  Rng rng(12);
  AttentionSpec spec{8};
  spec.memory_budget_bytes = 1024;
  SelfAttention<float> att(spec, rng);
  EXPECT_THROW(att.forward(Var<float>::constant(Tensor<float>({1, 8, 16, 16}))), CapacityError);
}

// ---------------------------------------------------------------------------
// spectral normalization

namespace {
Eigen::MatrixXd as_matrix(const Tensor<double>& w, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = w[static_cast<std::size_t>(r) * cols + c];
  return m;
}

double largest_singular(const Tensor<double>& w, int rows, int cols) {
  return Eigen::JacobiSVD<Eigen::MatrixXd>(as_matrix(w, rows, cols)).singularValues()(0);
}

// k steps of v <- W^T u, u <- W v from u0 give v_k ~ V diag(s^(2k-1)) U^T u0,
// so the estimate ||W v_k|| / ||v_k|| has a closed form in the SVD of W.
double power_estimate_oracle(const Tensor<double>& w, int rows, int cols, const Tensor<double>& u0, int k) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(as_matrix(w, rows, cols), Eigen::ComputeThinU);
  const Eigen::VectorXd s = svd.singularValues() / svd.singularValues()(0);
  Eigen::VectorXd u(rows);
  for (int i = 0; i < rows; ++i) u(i) = u0[i];
  const Eigen::VectorXd a = svd.matrixU().transpose() * u;
  double num = 0, den = 0;
  for (int i = 0; i < s.size(); ++i) {
    num += std::pow(s(i), 4.0 * k) * a(i) * a(i);
    den += std::pow(s(i), 4.0 * k - 2.0) * a(i) * a(i);
  }
  return svd.singularValues()(0) * std::sqrt(num / den);
}
}  // namespace

TEST(SpectralNorm, EstimateMatchesClosedFormPowerIteration) {
  Rng rng(100);
  for (int trial = 0; trial < 20; ++trial) {
    const auto wt = random_tensor({32, 64}, rng);
    auto state = SpectralState<double>::init(32, 64, rng);
    const Tensor<double> u0 = state.u;
    const auto out = spectral_normalize(wt, state, 50);
    const double sigma = wt[0] / out[0];
    EXPECT_NEAR(sigma / power_estimate_oracle(wt, 32, 64, u0, 50), 1.0, 1e-9) << "matrix " << trial;
  }
}

// Power iteration approaches sigma_max from below, so the normalized norm
// never drops under 1, and it reaches 1 once the iteration has converged.
TEST(SpectralNorm, ConvergesToUnitNormAgainstSvd) {
  Rng rng(100);
  for (int trial = 0; trial < 20; ++trial) {
    const auto wt = random_tensor({32, 64}, rng);
    auto state = SpectralState<double>::init(32, 64, rng);
    auto fresh = state;
    EXPECT_GE(largest_singular(spectral_normalize(wt, fresh, 50), 32, 64), 1.0 - 1e-12);
    EXPECT_NEAR(largest_singular(spectral_normalize(wt, state, 2000), 32, 64), 1.0, 1e-6) << "matrix " << trial;
  }
}

TEST(SpectralNorm, OrthonormalRowsUnchanged) {
  Rng rng(101);
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(16, 16);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  Tensor<double> wt({8, 16});
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 16; ++c) wt.at(r, c) = q(r, c);
  auto state = SpectralState<double>::init(8, 16, rng);
  EXPECT_LT(max_abs(spectral_normalize(wt, state, 50), wt), 1e-3);
}

TEST(SpectralNorm, ScaleInvariant) {
  Rng rng(102);
  const auto wt = random_tensor({12, 20}, rng);
  Tensor<double> scaled = wt;
  for (auto& v : scaled.values()) v *= 37.5;
  auto s1 = SpectralState<double>::init(12, 20, rng);
  auto s2 = s1;
  EXPECT_LT(max_abs(spectral_normalize(wt, s1, 50), spectral_normalize(scaled, s2, 50)), 1e-6);
}

TEST(SpectralNorm, ZeroWeightIsFloored) {
  Rng rng(103);
  auto state = SpectralState<double>::init(4, 4, rng);
  const auto out = spectral_normalize(Tensor<double>({4, 4}), state, 3);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(spectral_normalize(Tensor<double>({4, 4}), state, 0), ValidationError);
}

// The power-iteration vectors are constants within a step; the gradient flows
// through w / (u^T W v).
TEST(SpectralNorm, GradientCheck) {
  Rng rng(104);
  Kernel<double> k({6, 3, 3, 3}, rng, true, 6);
  for (auto& v : k.weight.mutable_value().values()) v = rng.uniform(-1, 1);
  k.power_step(5);
  auto x = rand_var({1, 3, 6, 6}, rng);
  const auto probe = random_tensor({1, 6, 6, 6}, rng);
  auto loss = [&] { return sum(mul(conv2d(x, k.effective(), Conv2dOptions{1, 1}), Var<double>::constant(probe))); };
  EXPECT_LT(gradient_check(loss, {x, k.weight}), 1e-4);
}
