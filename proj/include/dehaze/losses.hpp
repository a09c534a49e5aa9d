#pragma once

// Training objectives. Every reduction is a mean over all elements.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dehaze/layers.hpp"
#include "dehaze/ssim.hpp"

namespace dehaze {

struct LossWeights {
  double adv = 1.0;
  double cyc = 10.0;
  double idt = 5.0;
  double perc = 0.1;
  double depth = 0.5;
  double ssim = 0.5;

  void validate(bool training = true) const {
    for (double w : {adv, cyc, idt, perc, depth, ssim})
      if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and non-negative");
    if (training && !(cyc > 0.0)) throw ConfigError("w_cyc must be positive for training");
  }
};

/// Loss components beyond the base set (cycle + identity + adversarial + perceptual).
struct LossFlags {
  bool cpd = false;
  bool ssim = false;

  /// Accepts "base", "CPD", "SSIM" and "+"-joined combinations such as "CPD+SSIM".
  static LossFlags parse(const std::string& text) {
    LossFlags f;
    std::size_t start = 0;
    bool any = false;
    while (start <= text.size()) {
      const std::size_t end = text.find('+', start);
      const std::string tok = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
      if (tok == "base") {
      } else if (tok == "CPD" || tok == "CDP") {
        f.cpd = true;
      } else if (tok == "SSIM") {
        f.ssim = true;
      } else {
        throw ConfigError("unknown loss component '" + tok + "'; valid: base, CPD, SSIM (joined with '+')");
      }
      any = true;
      if (end == std::string::npos) break;
      start = end + 1;
    }
    if (!any) throw ConfigError("empty loss specification");
    return f;
  }

  std::string name() const {
    if (cpd && ssim) return "CPD+SSIM";
    if (cpd) return "CPD";
    if (ssim) return "SSIM";
    return "base";
  }
};

template <typename T>
using ImageFn = std::function<Var<T>(const Var<T>&)>;

template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "l1_loss");
  return mean(abs(sub(a, b)));
}

template <typename T>
Var<T> mse_loss(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mse_loss");
  return mean(square(sub(a, b)));
}

template <typename T>
Var<T> cycle_consistency_loss(const Var<T>& x, const Var<T>& x_rec, const Var<T>& y, const Var<T>& y_rec) {
  return add(l1_loss(x_rec, x), l1_loss(y_rec, y));
}

template <typename T>
Var<T> identity_loss(const Var<T>& x, const Var<T>& g_of_x) {
  return l1_loss(g_of_x, x);
}

/// Least-squares objectives on patch maps.
template <typename T>
Var<T> lsgan_generator_loss(const Var<T>& d_fake) {
  return mean(square(add_scalar(d_fake, T(-1))));
}

template <typename T>
Var<T> lsgan_discriminator_loss(const Var<T>& d_real, const Var<T>& d_fake) {
  return add(scale(mean(square(add_scalar(d_real, T(-1)))), T(0.5)), scale(mean(square(d_fake)), T(0.5)));
}

template <typename T>
struct AdversarialLosses {
  Var<T> generator;
  Var<T> discriminator;
};

template <typename T>
AdversarialLosses<T> adversarial_losses(const Var<T>& d_real, const Var<T>& d_fake) {
  return {lsgan_generator_loss(d_fake), lsgan_discriminator_loss(d_real, d_fake)};
}

enum class DepthNormalization { none, median_scale };

/// mean((n(phi(x)) - n(phi(x_hat)))^2), n the chosen per-sample normalization.
template <typename T>
Var<T> depth_consistency_loss(const Var<T>& x, const Var<T>& x_hat, const ImageFn<T>& phi,
                              DepthNormalization norm = DepthNormalization::none) {
  detail::require_same_shape(x, x_hat, "depth_consistency_loss");
  Var<T> a, b;
  try {
    a = phi(x);
    b = phi(x_hat);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("depth estimator failed inside depth_consistency_loss: ") + e.what());
  }
  if (norm == DepthNormalization::median_scale) {
    a = median_scale_normalize(a);
    b = median_scale_normalize(b);
  }
  return mse_loss(a, b);
}

/// Both directions from precomputed reconstructions x_rec = F(G(x)), y_rec = G(F(y)).
template <typename T>
Var<T> cyclic_depth_loss(const Var<T>& x, const Var<T>& x_rec, const Var<T>& y, const Var<T>& y_rec,
                         const ImageFn<T>& phi, DepthNormalization norm = DepthNormalization::none) {
  return add(depth_consistency_loss(x, x_rec, phi, norm), depth_consistency_loss(y, y_rec, phi, norm));
}

template <typename T>
Var<T> cyclic_depth_loss(const Var<T>& x, const Var<T>& y, const ImageFn<T>& G, const ImageFn<T>& F,
                         const ImageFn<T>& phi, DepthNormalization norm = DepthNormalization::none) {
  return cyclic_depth_loss(x, F(G(x)), y, G(F(y)), phi, norm);
}

template <typename T>
Var<T> ssim_loss(const Var<T>& x, const Var<T>& x_hat, T data_range) {
  return add_scalar(scale(ssim(x, x_hat, data_range), T(-1)), T(1));
}

template <typename T>
Var<T> cyclic_ssim_loss(const Var<T>& x, const Var<T>& x_rec, const Var<T>& y, const Var<T>& y_rec, T data_range) {
  return add(ssim_loss(x, x_rec, data_range), ssim_loss(y, y_rec, data_range));
}

template <typename T>
Var<T> cyclic_ssim_loss(const Var<T>& x, const Var<T>& y, const ImageFn<T>& G, const ImageFn<T>& F, T data_range) {
  return cyclic_ssim_loss(x, F(G(x)), y, G(F(y)), data_range);
}

// ---------------------------------------------------------------------------
// perceptual features

/// Frozen network exposing a fixed number of feature taps.
template <typename T>
class FeatureExtractor : public Module<T> {
 public:
  virtual std::vector<Var<T>> features(const Var<T>& x) const = 0;
  virtual std::string backbone() const = 0;
  virtual int taps() const = 0;
};

/// Five frozen random conv layers (3x3, ReLU); taps 2-5 halve resolution.
template <typename T>
class StubFeatureExtractor : public FeatureExtractor<T> {
 public:
  explicit StubFeatureExtractor(std::uint64_t seed = 1234, int width = 8) {
    Rng rng(seed);
    int c = 3;
    for (int i = 0; i < 5; ++i) {
      const int out = width * (1 << std::min(i, 2));
      Conv2dSpec s{c, out, 3, i == 0 ? 1 : 2, 1};
      convs_.emplace_back(s, rng);
      // He-style scale keeps activations from vanishing through the stack.
      for (auto& v : convs_.back().kernel().weight.mutable_value().values())
        v = static_cast<T>(v / kInitStd * std::sqrt(2.0 / (9.0 * c)));
      c = out;
    }
    this->set_trainable(false);
  }

  std::vector<Var<T>> features(const Var<T>& x) const override {
    std::vector<Var<T>> out;
    Var<T> h = x;
    for (const auto& conv : convs_) {
      h = relu(conv.forward(h));
      out.push_back(h);
    }
    return out;
  }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(join_name(prefix, "conv" + std::to_string(i)), out);
  }

  std::string backbone() const override { return "stub"; }
  int taps() const override { return 5; }
  const std::vector<Conv2d<T>>& layers() const { return convs_; }

 private:
  std::vector<Conv2d<T>> convs_;
};

template <typename T>
std::unique_ptr<FeatureExtractor<T>> make_feature_extractor(const std::string& backbone, std::uint64_t seed = 1234) {
  if (backbone == "stub") return std::make_unique<StubFeatureExtractor<T>>(seed);
  if (backbone == "resnet50")
    throw ConfigError("perceptual backbone 'resnet50' needs ImageNet weights that are not bundled; use 'stub'");
  throw ConfigError("unknown perceptual backbone '" + backbone + "'; valid: stub, resnet50");
}

/// Sum over taps of the per-layer mean squared feature difference.
template <typename T>
Var<T> perceptual_loss(const Var<T>& x, const Var<T>& x_hat, const FeatureExtractor<T>& extractor) {
  detail::require_same_shape(x, x_hat, "perceptual_loss");
  const auto fa = extractor.features(x);
  const auto fb = extractor.features(x_hat);
  Var<T> total = mse_loss(fa[0], fb[0]);
  for (std::size_t i = 1; i < fa.size(); ++i) total = add(total, mse_loss(fa[i], fb[i]));
  return total;
}

}  // namespace dehaze
