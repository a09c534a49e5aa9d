#pragma once

// Octave convolution: a feature map is carried as a (high, low) pair where the
// low-frequency branch lives at half the spatial resolution. Each layer mixes
// the branches through four kernels:
//
//   y_high = conv(x_high, W_hh) + upsample(conv(x_low, W_lh))
//   y_low  = conv(avgpool(x_high), W_hl) + conv(x_low, W_ll)
//
// Paths whose source or destination branch has zero channels are dropped.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dehaze/layers.hpp"

namespace dehaze {

template <typename T>
struct OctFeature {
  Var<T> high;
  Var<T> low;  // undefined when the layer carries no low-frequency channels

  bool has_high() const { return high.defined(); }
  bool has_low() const { return low.defined(); }
  int high_channels() const { return has_high() ? high.dim(1) : 0; }
  int low_channels() const { return has_low() ? low.dim(1) : 0; }
};

/// Low-branch channel count for a fraction alpha of `channels`.
inline int octave_low_channels(int channels, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw ValidationError("octave alpha must lie in [0, 1]");
  return static_cast<int>(std::floor(alpha * channels + 1e-9));
}

struct OctConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  double alpha_in = 0.5;
  double alpha_out = 0.5;
  int kernel_size = 3;
  int stride = 1;
  int padding = 1;
  int padding_end = -1;
  bool bias = true;
  bool spectral = false;

  int low_in() const { return octave_low_channels(in_channels, alpha_in); }
  int high_in() const { return in_channels - low_in(); }
  int low_out() const { return octave_low_channels(out_channels, alpha_out); }
  int high_out() const { return out_channels - low_out(); }

  void validate() const {
    if (in_channels <= 0 || out_channels <= 0) throw ConfigError("octave conv: channel counts must be positive");
    if (stride != 1 && stride != 2) throw ConfigError("octave conv: stride must be 1 or 2");
    auto check = [](int c, double a, const char* which) {
      if (a > 0.0 && a < 1.0) {
        const int lo = octave_low_channels(c, a);
        if (lo == 0 || lo == c)
          throw ConfigError(std::string("octave conv: alpha split of ") + which +
                            " channels leaves an empty branch");
      }
    };
    check(in_channels, alpha_in, "input");
    check(out_channels, alpha_out, "output");
  }
};

template <typename T>
class OctaveConv : public Module<T> {
 public:
  enum Path { hh, hl, lh, ll };

  OctaveConv() = default;
  OctaveConv(OctConvSpec spec, Rng& rng) : spec_(spec) {
    spec_.validate();
    const int k = spec.kernel_size;
    const int hi_in = spec.high_in(), lo_in = spec.low_in(), hi_out = spec.high_out(), lo_out = spec.low_out();
    auto make = [&](int co, int ci) { return Kernel<T>({co, ci, k, k}, rng, spec.spectral, co); };
    if (hi_in && hi_out) kernels_[hh] = make(hi_out, hi_in);
    if (hi_in && lo_out) kernels_[hl] = make(lo_out, hi_in);
    if (lo_in && hi_out) kernels_[lh] = make(hi_out, lo_in);
    if (lo_in && lo_out) kernels_[ll] = make(lo_out, lo_in);
    if (spec.bias) {
      if (hi_out) bias_high_ = Var<T>::parameter(Tensor<T>({hi_out}));
      if (lo_out) bias_low_ = Var<T>::parameter(Tensor<T>({lo_out}));
    }
  }

  bool has_path(Path p) const { return kernels_[p].weight.defined(); }
  Kernel<T>& kernel(Path p) { return kernels_[p]; }
  const Kernel<T>& kernel(Path p) const { return kernels_[p]; }
  Var<T>& bias_high() { return bias_high_; }
  Var<T>& bias_low() { return bias_low_; }
  const OctConvSpec& spec() const { return spec_; }

  OctFeature<T> forward(const OctFeature<T>& x) const {
    check_input(x);
    const Conv2dOptions opt{spec_.stride, spec_.padding, spec_.padding_end};
    OctFeature<T> y;
    if (spec_.high_out()) {
      Var<T> acc;
      if (has_path(hh)) acc = conv2d(x.high, kernels_[hh].effective(), opt);
      if (has_path(lh)) {
        Var<T> up = upsample2(conv2d(x.low, kernels_[lh].effective(), opt));
        acc = acc.defined() ? add_checked(acc, up) : up;
      }
      y.high = add_bias(acc, bias_high_);
    }
    if (spec_.low_out()) {
      Var<T> acc;
      if (has_path(hl)) acc = conv2d(avg_pool2(require_even(x.high)), kernels_[hl].effective(), opt);
      if (has_path(ll)) {
        Var<T> l = conv2d(x.low, kernels_[ll].effective(), opt);
        acc = acc.defined() ? add_checked(acc, l) : l;
      }
      y.low = add_bias(acc, bias_low_);
    }
    return y;
  }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    static constexpr const char* names[] = {"w_hh", "w_hl", "w_lh", "w_ll"};
    for (int p = 0; p < 4; ++p)
      if (kernels_[p].weight.defined()) kernels_[p].collect(join_name(prefix, names[p]), out);
    if (bias_high_.defined()) out.push_back({join_name(prefix, "b_h"), &bias_high_.mutable_value(), &bias_high_});
    if (bias_low_.defined()) out.push_back({join_name(prefix, "b_l"), &bias_low_.mutable_value(), &bias_low_});
  }

  void power_step(int n_iters) {
    for (auto& k : kernels_)
      if (k.weight.defined()) k.power_step(n_iters);
  }

  /// Output high-branch size for a high-branch input of h x w.
  std::pair<int, int> output_size(int h, int w) const {
    const int pe = spec_.padding_end < 0 ? spec_.padding : spec_.padding_end;
    return {conv_out_extent(h, spec_.kernel_size, spec_.stride, spec_.padding, pe),
            conv_out_extent(w, spec_.kernel_size, spec_.stride, spec_.padding, pe)};
  }

  /// FLOPs sum the four paths, each at the resolution its convolution runs at.
  LayerInfo describe(const std::string& name, int h, int w) const {
    auto [oh, ow] = output_size(h, w);
    const int k = spec_.kernel_size;
    const int hi_in = spec_.high_in(), lo_in = spec_.low_in(), hi_out = spec_.high_out(), lo_out = spec_.low_out();
    LayerInfo info{name, LayerKind::octave_conv, 0, 0, 0, spec_.spectral};
    for (const auto& kern : kernels_)
      if (kern.weight.defined()) {
        info.params += kern.params();
        info.state += kern.state();
      }
    if (spec_.bias) info.params += hi_out + lo_out;
    info.flops = conv_flops(k, hi_in, hi_out, oh, ow) + conv_flops(k, hi_in, lo_out, oh / 2, ow / 2) +
                 conv_flops(k, lo_in, hi_out, oh / 2, ow / 2) + conv_flops(k, lo_in, lo_out, oh / 2, ow / 2);
    return info;
  }

 private:
  void check_input(const OctFeature<T>& x) const {
    if (x.high_channels() != spec_.high_in() || x.low_channels() != spec_.low_in())
      throw ValidationError("octave conv: input branches (" + std::to_string(x.high_channels()) + " high, " +
                            std::to_string(x.low_channels()) + " low) do not match the layer split (" +
                            std::to_string(spec_.high_in()) + ", " + std::to_string(spec_.low_in()) + ")");
    if (x.has_high() && x.has_low()) {
      if (x.high.dim(2) != 2 * x.low.dim(2) || x.high.dim(3) != 2 * x.low.dim(3))
        throw ValidationError("octave conv: low branch " + shape_str(x.low.shape()) +
                              " is not half the resolution of high branch " + shape_str(x.high.shape()));
    }
  }

  static const Var<T>& require_even(const Var<T>& v) {
    if (v.dim(2) % 2 || v.dim(3) % 2)
      throw ValidationError("octave conv: odd spatial dims " + shape_str(v.shape()) +
                            " where 2x2 pooling is required");
    return v;
  }

  static Var<T> add_checked(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape())
      throw ValidationError("octave conv: path outputs disagree " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()) + "; check input size divisibility");
    return add(a, b);
  }

  static Var<T> add_bias(const Var<T>& x, const Var<T>& b) { return b.defined() ? add_channel_bias(x, b) : x; }

  OctConvSpec spec_;
  Kernel<T> kernels_[4];
  Var<T> bias_high_;
  Var<T> bias_low_;
};

template <typename T>
OctFeature<T> octave_apply(const OctFeature<T>& x, Var<T> (*fn)(const Var<T>&)) {
  OctFeature<T> y;
  if (x.has_high()) y.high = fn(x.high);
  if (x.has_low()) y.low = fn(x.low);
  return y;
}

template <typename T>
OctFeature<T> octave_add(const OctFeature<T>& a, const OctFeature<T>& b) {
  if (a.has_high() != b.has_high() || a.has_low() != b.has_low())
    throw ValidationError("octave add: branch layouts differ");
  OctFeature<T> y;
  if (a.has_high()) y.high = add(a.high, b.high);
  if (a.has_low()) y.low = add(a.low, b.low);
  return y;
}

/// x + F(x), F = octave conv -> instance norm -> ReLU -> octave conv -> instance norm,
/// applied branch-wise.
template <typename T>
class OctaveResidualBlock : public Module<T> {
 public:
  OctaveResidualBlock() = default;
  OctaveResidualBlock(int channels, double alpha, Rng& rng, bool bias = true) {
    OctConvSpec s{channels, channels, alpha, alpha, 3, 1, 1, -1, bias, false};
    conv1_ = OctaveConv<T>(s, rng);
    conv2_ = OctaveConv<T>(s, rng);
  }
  explicit OctaveResidualBlock(OctConvSpec spec, Rng& rng) {
    if (spec.alpha_in != spec.alpha_out || spec.in_channels != spec.out_channels)
      throw ValidationError("octave residual block: input and output splits must match");
    conv1_ = OctaveConv<T>(spec, rng);
    conv2_ = OctaveConv<T>(spec, rng);
  }

  OctFeature<T> forward(const OctFeature<T>& x) const {
    auto h = conv1_.forward(x);
    h = octave_apply<T>(h, [](const Var<T>& v) { return relu(instance_norm(v)); });
    h = conv2_.forward(h);
    h = octave_apply<T>(h, [](const Var<T>& v) { return instance_norm(v); });
    return octave_add(x, h);
  }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    conv1_.collect(join_name(prefix, "conv1"), out);
    conv2_.collect(join_name(prefix, "conv2"), out);
  }

  OctaveConv<T>& conv1() { return conv1_; }
  OctaveConv<T>& conv2() { return conv2_; }

  std::vector<LayerInfo> describe(const std::string& name, int h, int w) const {
    return {conv1_.describe(join_name(name, "conv1"), h, w), conv2_.describe(join_name(name, "conv2"), h, w)};
  }

 private:
  OctaveConv<T> conv1_;
  OctaveConv<T> conv2_;
};

}  // namespace dehaze
