#pragma once

// Generator and discriminator variants named as in the ablation grid:
//   generators:     9B, 6B, 6B-SA, 6B-Oct
//   discriminators: 3L, 3L-SA, 3L-Oct, 3L-OctN
//
// Generator: 7x7 stem -> two stride-2 downsampling convs -> residual blocks ->
// two transposed-conv upsamplings -> 7x7 output conv -> tanh. Octave variants
// split the bottleneck features into equal high/low halves with a 1x1 octave
// conv, run octave residual blocks, then merge back with another 1x1 octave
// conv. Stem, downsampling and upsampling layers stay plain.
//
// Discriminator (70x70-style patch critic): 4x4 stride-2 convs at widths
// w, 2w, 4w, a stride-1 4x4 conv at 8w and a 1-channel 4x4 head. The first
// layer is always plain. Octave variants replace layers 2-4 with octave convs;
// layer 4 merges back to a single full-resolution branch keeping the
// high-frequency share (8w * (1 - alpha)) of its channels.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dehaze/attention.hpp"
#include "dehaze/octave.hpp"

namespace dehaze {

enum class NetworkKind { generator, discriminator };
enum class BlockType { plain, octave, self_attention };
enum class DiscType { plain, self_attention, octave, octave_spectral };

inline const std::vector<std::string>& generator_names() {
  static const std::vector<std::string> names{"9B", "6B", "6B-SA", "6B-Oct"};
  return names;
}
inline const std::vector<std::string>& discriminator_names() {
  static const std::vector<std::string> names{"3L", "3L-SA", "3L-Oct", "3L-OctN"};
  return names;
}

inline std::string join_list(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s;
}

struct NetworkSpec {
  NetworkKind kind = NetworkKind::generator;
  int blocks = 9;
  BlockType block_type = BlockType::plain;
  int disc_layers = 3;
  DiscType disc_type = DiscType::plain;
  double alpha = 0.5;
  int width = 64;

  static NetworkSpec generator(const std::string& name, int width = 64) {
    NetworkSpec s;
    s.kind = NetworkKind::generator;
    s.width = width;
    if (name == "9B") s.blocks = 9;
    else if (name == "6B") s.blocks = 6;
    else if (name == "6B-SA") s.blocks = 6, s.block_type = BlockType::self_attention;
    else if (name == "6B-Oct") s.blocks = 6, s.block_type = BlockType::octave;
    else
      throw ConfigError("unknown generator '" + name + "'; valid names: " + join_list(generator_names()));
    s.alpha = s.block_type == BlockType::octave ? 0.5 : 0.0;
    return s;
  }

  static NetworkSpec discriminator(const std::string& name, int width = 64) {
    NetworkSpec s;
    s.kind = NetworkKind::discriminator;
    s.width = width;
    if (name == "3L") s.disc_type = DiscType::plain;
    else if (name == "3L-SA") s.disc_type = DiscType::self_attention;
    else if (name == "3L-Oct") s.disc_type = DiscType::octave;
    else if (name == "3L-OctN") s.disc_type = DiscType::octave_spectral;
    else
      throw ConfigError("unknown discriminator '" + name + "'; valid names: " + join_list(discriminator_names()));
    s.alpha = (s.disc_type == DiscType::octave || s.disc_type == DiscType::octave_spectral) ? 0.5 : 0.0;
    return s;
  }

  std::string name() const {
    if (kind == NetworkKind::generator) {
      std::string n = std::to_string(blocks) + "B";
      if (block_type == BlockType::octave) n += "-Oct";
      if (block_type == BlockType::self_attention) n += "-SA";
      return n;
    }
    switch (disc_type) {
      case DiscType::plain: return "3L";
      case DiscType::self_attention: return "3L-SA";
      case DiscType::octave: return "3L-Oct";
      case DiscType::octave_spectral: return "3L-OctN";
    }
    return "?";
  }

  bool octave() const {
    return kind == NetworkKind::generator ? block_type == BlockType::octave
                                          : (disc_type == DiscType::octave || disc_type == DiscType::octave_spectral);
  }

  void validate() const {
    if (width < 8 || width % 8) throw ConfigError("network width must be a positive multiple of 8");
    if (alpha != 0.0 && alpha != 0.5) throw ConfigError("alpha must be 0 or 0.5");
    if (octave() != (alpha == 0.5)) throw ConfigError("alpha 0.5 is used exactly by the octave variants");
    if (kind == NetworkKind::generator) {
      if (blocks != 6 && blocks != 9) throw ConfigError("generator block count must be 6 or 9");
      if (blocks == 9 && block_type != BlockType::plain)
        throw ConfigError("only the plain generator is defined with 9 blocks");
    } else if (disc_layers != 3) {
      throw ConfigError("only 3-layer discriminators are defined");
    }
  }
};

/// Static summary of a built network.
struct BuiltNetwork {
  std::string name;
  std::vector<LayerInfo> layers;
  std::int64_t trainable = 0;
  std::int64_t state = 0;
  std::int64_t flops = 0;  // per sample at the described input size

  /// Counting convention: trainable elements plus persistent spectral-norm vectors.
  std::int64_t param_count() const { return trainable + state; }
};

inline BuiltNetwork summarize(std::string name, std::vector<LayerInfo> layers) {
  BuiltNetwork b{std::move(name), std::move(layers)};
  for (const auto& l : b.layers) {
    b.trainable += l.params;
    b.state += l.state;
    b.flops += l.flops;
  }
  return b;
}

template <typename T>
class ResidualBlock : public Module<T> {
 public:
  ResidualBlock() = default;
  ResidualBlock(int channels, Rng& rng)
      : conv1_({channels, channels, 3, 1, 1}, rng), conv2_({channels, channels, 3, 1, 1}, rng) {}

  Var<T> forward(const Var<T>& x) const {
    auto h = relu(instance_norm(conv1_.forward(x)));
    h = instance_norm(conv2_.forward(h));
    return add(x, h);
  }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    conv1_.collect(join_name(prefix, "conv1"), out);
    conv2_.collect(join_name(prefix, "conv2"), out);
  }

  std::vector<LayerInfo> describe(const std::string& name, int h, int w) const {
    return {conv1_.describe(join_name(name, "conv1"), h, w), conv2_.describe(join_name(name, "conv2"), h, w)};
  }

 private:
  Conv2d<T> conv1_;
  Conv2d<T> conv2_;
};

template <typename T>
class Generator : public ImageModule<T> {
 public:
  Generator(NetworkSpec spec, Rng& rng) : spec_(spec) {
    spec.validate();
    if (spec.kind != NetworkKind::generator) throw ConfigError("generator built from a discriminator spec");
    const int w = spec.width, c = 4 * w;
    stem_ = Conv2d<T>({3, w, 7, 1, 3}, rng);
    down1_ = Conv2d<T>({w, 2 * w, 3, 2, 1}, rng);
    down2_ = Conv2d<T>({2 * w, c, 3, 2, 1}, rng);
    if (spec.block_type == BlockType::octave) {
      split_ = OctaveConv<T>({c, c, 0.0, spec.alpha, 1, 1, 0}, rng);
      for (int i = 0; i < spec.blocks; ++i) oct_blocks_.emplace_back(c, spec.alpha, rng);
      merge_ = OctaveConv<T>({c, c, spec.alpha, 0.0, 1, 1, 0}, rng);
    } else {
      for (int i = 0; i < spec.blocks; ++i) blocks_.emplace_back(c, rng);
      if (spec.block_type == BlockType::self_attention)
        for (int i = 0; i < 2; ++i) attention_.emplace_back(AttentionSpec{c}, rng);
    }
    up1_ = ConvTranspose2d<T>({c, 2 * w, 3, 2, 1, 1}, rng);
    up2_ = ConvTranspose2d<T>({2 * w, w, 3, 2, 1, 1}, rng);
    out_ = Conv2d<T>({w, 3, 7, 1, 3}, rng);
  }

  const NetworkSpec& spec() const { return spec_; }

  void check_input(const Shape& s) const {
    const int mult = spec_.octave() ? 8 : 4;
    if (s.size() != 4 || s[1] != 3 || s[2] % mult || s[3] % mult)
      throw ValidationError("generator " + spec_.name() + " expects [N,3,H,W] with H, W multiples of " +
                            std::to_string(mult) + ", got " + shape_str(s));
  }

  /// Maps images in [-1, 1] to images in [-1, 1].
  Var<T> forward(const Var<T>& x) const override {
    check_input(x.shape());
    auto h = relu(instance_norm(stem_.forward(x)));
    h = relu(instance_norm(down1_.forward(h)));
    h = relu(instance_norm(down2_.forward(h)));
    if (spec_.block_type == BlockType::octave) {
      OctFeature<T> f = split_.forward(OctFeature<T>{h, Var<T>()});
      for (const auto& b : oct_blocks_) f = b.forward(f);
      h = merge_.forward(f).high;
    } else {
      const int first_attn = spec_.blocks - static_cast<int>(attention_.size());
      for (int i = 0; i < spec_.blocks; ++i) {
        h = blocks_[i].forward(h);
        if (i >= first_attn) h = attention_[i - first_attn].forward(h);
      }
    }
    h = relu(instance_norm(up1_.forward(h)));
    h = relu(instance_norm(up2_.forward(h)));
    return tanh(out_.forward(h));
  }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    stem_.collect(join_name(prefix, "stem"), out);
    down1_.collect(join_name(prefix, "down1"), out);
    down2_.collect(join_name(prefix, "down2"), out);
    if (spec_.block_type == BlockType::octave) {
      split_.collect(join_name(prefix, "split"), out);
      for (std::size_t i = 0; i < oct_blocks_.size(); ++i)
        oct_blocks_[i].collect(join_name(prefix, "block" + std::to_string(i)), out);
      merge_.collect(join_name(prefix, "merge"), out);
    } else {
      for (std::size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].collect(join_name(prefix, "block" + std::to_string(i)), out);
      const std::size_t first = blocks_.size() - attention_.size();
      for (std::size_t i = 0; i < attention_.size(); ++i)
        attention_[i].collect(join_name(prefix, "block" + std::to_string(first + i) + ".attn"), out);
    }
    up1_.collect(join_name(prefix, "up1"), out);
    up2_.collect(join_name(prefix, "up2"), out);
    out_.collect(join_name(prefix, "out"), out);
  }

  BuiltNetwork describe(int h, int w) const {
    std::vector<LayerInfo> ls;
    ls.push_back(stem_.describe("stem", h, w));
    ls.push_back(down1_.describe("down1", h, w));
    auto [h1, w1] = down1_.output_size(h, w);
    ls.push_back(down2_.describe("down2", h1, w1));
    auto [h2, w2] = down2_.output_size(h1, w1);
    if (spec_.block_type == BlockType::octave) {
      ls.push_back(split_.describe("split", h2, w2));
      for (std::size_t i = 0; i < oct_blocks_.size(); ++i)
        for (auto& l : oct_blocks_[i].describe("block" + std::to_string(i), h2, w2)) ls.push_back(l);
      ls.push_back(merge_.describe("merge", h2, w2));
    } else {
      for (std::size_t i = 0; i < blocks_.size(); ++i)
        for (auto& l : blocks_[i].describe("block" + std::to_string(i), h2, w2)) ls.push_back(l);
      const std::size_t first = blocks_.size() - attention_.size();
      for (std::size_t i = 0; i < attention_.size(); ++i)
        ls.push_back(attention_[i].describe("block" + std::to_string(first + i) + ".attn", h2, w2));
    }
    ls.push_back(up1_.describe("up1", h2, w2));
    auto [h3, w3] = up1_.output_size(h2, w2);
    ls.push_back(up2_.describe("up2", h3, w3));
    auto [h4, w4] = up2_.output_size(h3, w3);
    ls.push_back(out_.describe("out", h4, w4));
    return summarize(spec_.name(), std::move(ls));
  }

 private:
  NetworkSpec spec_;
  Conv2d<T> stem_, down1_, down2_, out_;
  ConvTranspose2d<T> up1_, up2_;
  std::vector<ResidualBlock<T>> blocks_;
  std::vector<SelfAttention<T>> attention_;
  OctaveConv<T> split_, merge_;
  std::vector<OctaveResidualBlock<T>> oct_blocks_;
};

template <typename T>
class Discriminator : public ImageModule<T> {
 public:
  Discriminator(NetworkSpec spec, Rng& rng) : spec_(spec) {
    spec.validate();
    if (spec.kind != NetworkKind::discriminator) throw ConfigError("discriminator built from a generator spec");
    const int w = spec.width;
    const bool sn = spec.disc_type == DiscType::octave_spectral;
    first_ = Conv2d<T>({3, w, 4, 2, 1, -1, true, sn}, rng);
    if (spec.octave()) {
      const double a = spec.alpha;
      const int merged = 8 * w - octave_low_channels(8 * w, a);
      oct_[0] = OctaveConv<T>({w, 2 * w, 0.0, a, 4, 2, 1, -1, true, sn}, rng);
      oct_[1] = OctaveConv<T>({2 * w, 4 * w, a, a, 4, 2, 1, -1, true, sn}, rng);
      oct_[2] = OctaveConv<T>({4 * w, merged, a, 0.0, 4, 1, 1, 2, true, sn}, rng);
      head_ = Conv2d<T>({merged, 1, 4, 1, 1, -1, true, sn}, rng);
    } else {
      plain_[0] = Conv2d<T>({w, 2 * w, 4, 2, 1}, rng);
      plain_[1] = Conv2d<T>({2 * w, 4 * w, 4, 2, 1}, rng);
      plain_[2] = Conv2d<T>({4 * w, 8 * w, 4, 1, 1}, rng);
      head_ = Conv2d<T>({8 * w, 1, 4, 1, 1}, rng);
      if (spec.disc_type == DiscType::self_attention)
        for (int c : {2 * w, 4 * w, 8 * w}) attention_.emplace_back(AttentionSpec{c}, rng);
    }
  }

  const NetworkSpec& spec() const { return spec_; }

  void check_input(const Shape& s) const {
    const int mult = spec_.octave() ? 16 : 8;
    if (s.size() != 4 || s[1] != 3 || s[2] % mult || s[3] % mult)
      throw ValidationError("discriminator " + spec_.name() + " expects [N,3,H,W] with H, W multiples of " +
                            std::to_string(mult) + ", got " + shape_str(s));
  }

  /// Patch score map [N, 1, H', W'].
  Var<T> forward(const Var<T>& x) const override {
    check_input(x.shape());
    auto h = leaky_relu(first_.forward(x), T(0.2));
    if (spec_.octave()) {
      // Spectral norm replaces instance norm in the OctN variant.
      Var<T> (*act)(const Var<T>&) = [](const Var<T>& v) { return leaky_relu(instance_norm(v), T(0.2)); };
      if (spec_.disc_type == DiscType::octave_spectral) act = [](const Var<T>& v) { return leaky_relu(v, T(0.2)); };
      OctFeature<T> f{h, Var<T>()};
      for (const auto& layer : oct_) f = octave_apply<T>(layer.forward(f), act);
      return head_.forward(f.high);
    }
    for (int i = 0; i < 3; ++i) {
      h = leaky_relu(instance_norm(plain_[i].forward(h)), T(0.2));
      if (!attention_.empty()) h = attention_[i].forward(h);
    }
    return head_.forward(h);
  }

  /// Advances every spectral-norm state by `n_iters` power iterations.
  void power_step(int n_iters) override {
    first_.power_step(n_iters);
    head_.power_step(n_iters);
    if (spec_.octave())
      for (auto& l : oct_) l.power_step(n_iters);
  }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    first_.collect(join_name(prefix, "layer0"), out);
    if (spec_.octave()) {
      for (int i = 0; i < 3; ++i) oct_[i].collect(join_name(prefix, "layer" + std::to_string(i + 1)), out);
    } else {
      for (int i = 0; i < 3; ++i) plain_[i].collect(join_name(prefix, "layer" + std::to_string(i + 1)), out);
      for (std::size_t i = 0; i < attention_.size(); ++i)
        attention_[i].collect(join_name(prefix, "layer" + std::to_string(i + 1) + ".attn"), out);
    }
    head_.collect(join_name(prefix, "head"), out);
  }

  std::pair<int, int> output_size(int h, int w) const {
    auto s = first_.output_size(h, w);
    for (int i = 0; i < 3; ++i) s = spec_.octave() ? oct_[i].output_size(s.first, s.second)
                                                   : plain_[i].output_size(s.first, s.second);
    return head_.output_size(s.first, s.second);
  }

  BuiltNetwork describe(int h, int w) const {
    std::vector<LayerInfo> ls;
    ls.push_back(first_.describe("layer0", h, w));
    auto s = first_.output_size(h, w);
    for (int i = 0; i < 3; ++i) {
      const std::string name = "layer" + std::to_string(i + 1);
      if (spec_.octave()) {
        ls.push_back(oct_[i].describe(name, s.first, s.second));
        s = oct_[i].output_size(s.first, s.second);
      } else {
        ls.push_back(plain_[i].describe(name, s.first, s.second));
        s = plain_[i].output_size(s.first, s.second);
        if (!attention_.empty()) ls.push_back(attention_[i].describe(name + ".attn", s.first, s.second));
      }
    }
    ls.push_back(head_.describe("head", s.first, s.second));
    return summarize(spec_.name(), std::move(ls));
  }

 private:
  NetworkSpec spec_;
  Conv2d<T> first_, head_;
  Conv2d<T> plain_[3];
  OctaveConv<T> oct_[3];
  std::vector<SelfAttention<T>> attention_;
};

template <typename T>
std::unique_ptr<Generator<T>> build_generator(const NetworkSpec& spec, Rng& rng) {
  return std::make_unique<Generator<T>>(spec, rng);
}

template <typename T>
std::unique_ptr<Discriminator<T>> build_discriminator(const NetworkSpec& spec, Rng& rng) {
  return std::make_unique<Discriminator<T>>(spec, rng);
}

/// Parameter and FLOP totals of a full model (two generators + two discriminators).
struct ModelSummary {
  BuiltNetwork generator;
  BuiltNetwork discriminator;

  std::int64_t param_count() const { return 2 * generator.param_count() + 2 * discriminator.param_count(); }
};

/// Builds throwaway networks to report counts; weights are irrelevant to the result.
inline ModelSummary summarize_model(const std::string& gen, const std::string& disc, int width, int image_size) {
  Rng rng(0);
  auto g = build_generator<float>(NetworkSpec::generator(gen, width), rng);
  auto d = build_discriminator<float>(NetworkSpec::discriminator(disc, width), rng);
  return {g->describe(image_size, image_size), d->describe(image_size, image_size)};
}

}  // namespace dehaze
