#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dehaze/module.hpp"
#include "dehaze/ops.hpp"

namespace dehaze {

inline constexpr double kInitStd = 0.02;
inline constexpr double kSigmaFloor = 1e-12;

// ---------------------------------------------------------------------------
// spectral normalization

/// Power-iteration vectors for one kernel viewed as a [rows, cols] matrix.
template <typename T>
struct SpectralState {
  Tensor<T> u;  // [rows]
  Tensor<T> v;  // [cols]

  static SpectralState init(int rows, int cols, Rng& rng) {
    SpectralState s{normal_tensor<T>({rows}, rng, 1.0), normal_tensor<T>({cols}, rng, 1.0)};
    normalize(s.u);
    normalize(s.v);
    return s;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(u.size() + v.size()); }

  static void normalize(Tensor<T>& x) {
    T n = 0;
    for (T e : x.values()) n += e * e;
    n = std::sqrt(n);
    const T d = std::max(n, T(1e-12));
    for (auto& e : x.values()) e /= d;
  }
};

/// Runs `n_iters` power iterations on `state` against `weight` (viewed as
/// [u.size(), rest]) and returns the estimated largest singular value.
template <typename T>
T power_iterate(const Tensor<T>& weight, SpectralState<T>& state, int n_iters) {
  const int rows = static_cast<int>(state.u.size());
  const int cols = static_cast<int>(state.v.size());
  ConstRowMap<T> w(weight.data(), rows, cols);
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  Eigen::Map<Vec> u(state.u.data(), rows), v(state.v.data(), cols);
  for (int i = 0; i < n_iters; ++i) {
    v = w.transpose() * u;
    v /= std::max(v.norm(), T(1e-12));
    u = w * v;
    u /= std::max(u.norm(), T(1e-12));
  }
  return u.dot(w * v);
}

/// Divides `weight` by its power-iteration spectral norm estimate.
/// Returns the normalized weight; `state` is advanced by `n_iters` steps.
template <typename T>
Tensor<T> spectral_normalize(const Tensor<T>& weight, SpectralState<T>& state, int n_iters) {
  if (n_iters < 1) throw ValidationError("spectral_normalize: n_iters must be >= 1");
  if (state.u.size() * state.v.size() != weight.size())
    throw ValidationError("spectral_normalize: state does not match weight " + shape_str(weight.shape()));
  T sigma = power_iterate(weight, state, n_iters);
  if (!(sigma > T(kSigmaFloor))) {
    log_warning("spectral_normalize: singular value estimate " + std::to_string(static_cast<double>(sigma)) +
                " floored at " + std::to_string(kSigmaFloor));
    sigma = T(kSigmaFloor);
  }
  Tensor<T> out = weight;
  for (auto& e : out.values()) e /= sigma;
  return out;
}

/// A weight tensor with optional spectral normalization.
template <typename T>
struct Kernel {
  Var<T> weight;
  std::optional<SpectralState<T>> spectral;

  Kernel() = default;
  Kernel(Shape shape, Rng& rng, bool use_spectral, int sn_rows) : weight(Var<T>::parameter(normal_tensor<T>(shape, rng, kInitStd))) {
    if (use_spectral) {
      const int cols = static_cast<int>(weight.value().size() / sn_rows);
      spectral = SpectralState<T>::init(sn_rows, cols, rng);
      // One iteration makes u^T W v a non-negative estimate before the first step.
      power_iterate(weight.value(), *spectral, 1);
    }
  }

  /// Weight used in the forward pass (w / sigma when spectral).
  Var<T> effective() const {
    if (!spectral) return weight;
    return divide_by_bilinear(weight, spectral->u, spectral->v, T(kSigmaFloor));
  }

  void power_step(int n_iters) {
    if (spectral) power_iterate(weight.value(), *spectral, n_iters);
  }

  void collect(const std::string& name, std::vector<TensorRef<T>>& out) {
    out.push_back({name, &weight.mutable_value(), &weight});
    if (spectral) {
      out.push_back({name + "_sn_u", &spectral->u, nullptr});
      out.push_back({name + "_sn_v", &spectral->v, nullptr});
    }
  }

  std::int64_t params() const { return static_cast<std::int64_t>(weight.value().size()); }
  std::int64_t state() const { return spectral ? spectral->size() : 0; }
};

inline std::int64_t conv_flops(int kernel, int c_in, int c_out, int out_h, int out_w) {
  return 2LL * kernel * kernel * c_in * c_out * out_h * out_w;
}

// ---------------------------------------------------------------------------
// plain convolutions

struct Conv2dSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 3;
  int stride = 1;
  int padding = 0;
  int padding_end = -1;
  bool bias = true;
  bool spectral = false;
};

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d() = default;
  Conv2d(Conv2dSpec spec, Rng& rng)
      : spec_(spec),
        kernel_({spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size}, rng, spec.spectral,
                spec.out_channels) {
    if (spec.bias) bias_ = Var<T>::parameter(Tensor<T>({spec.out_channels}));
  }

  Var<T> forward(const Var<T>& x) const {
    return conv2d(x, kernel_.effective(), bias_, {spec_.stride, spec_.padding, spec_.padding_end});
  }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    kernel_.collect(join_name(prefix, "w"), out);
    if (bias_.defined()) out.push_back({join_name(prefix, "b"), &bias_.mutable_value(), &bias_});
  }

  void power_step(int n_iters) { kernel_.power_step(n_iters); }

  std::pair<int, int> output_size(int h, int w) const {
    const int pe = spec_.padding_end < 0 ? spec_.padding : spec_.padding_end;
    return {conv_out_extent(h, spec_.kernel_size, spec_.stride, spec_.padding, pe),
            conv_out_extent(w, spec_.kernel_size, spec_.stride, spec_.padding, pe)};
  }

  LayerInfo describe(const std::string& name, int h, int w) const {
    auto [oh, ow] = output_size(h, w);
    return {name, LayerKind::conv, kernel_.params() + (spec_.bias ? spec_.out_channels : 0), kernel_.state(),
            conv_flops(spec_.kernel_size, spec_.in_channels, spec_.out_channels, oh, ow), spec_.spectral};
  }

  const Conv2dSpec& spec() const { return spec_; }
  Kernel<T>& kernel() { return kernel_; }
  Var<T>& bias() { return bias_; }

 private:
  Conv2dSpec spec_;
  Kernel<T> kernel_;
  Var<T> bias_;
};

struct ConvTranspose2dSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 3;
  int stride = 2;
  int padding = 1;
  int output_padding = 1;
  bool bias = true;
};

template <typename T>
class ConvTranspose2d : public Module<T> {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(ConvTranspose2dSpec spec, Rng& rng)
      : spec_(spec),
        weight_(Var<T>::parameter(
            normal_tensor<T>({spec.in_channels, spec.out_channels, spec.kernel_size, spec.kernel_size}, rng, kInitStd))) {
    if (spec.bias) bias_ = Var<T>::parameter(Tensor<T>({spec.out_channels}));
  }

  Var<T> forward(const Var<T>& x) const {
    return conv_transpose2d(x, weight_, bias_, {spec_.stride, spec_.padding, spec_.output_padding});
  }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    out.push_back({join_name(prefix, "w"), &weight_.mutable_value(), &weight_});
    if (bias_.defined()) out.push_back({join_name(prefix, "b"), &bias_.mutable_value(), &bias_});
  }

  std::pair<int, int> output_size(int h, int w) const {
    return {(h - 1) * spec_.stride - 2 * spec_.padding + spec_.kernel_size + spec_.output_padding,
            (w - 1) * spec_.stride - 2 * spec_.padding + spec_.kernel_size + spec_.output_padding};
  }

  /// Cost counted per input position: every input pixel scatters a k x k x C_out patch.
  LayerInfo describe(const std::string& name, int h, int w) const {
    return {name, LayerKind::conv_transpose,
            static_cast<std::int64_t>(weight_.value().size()) + (spec_.bias ? spec_.out_channels : 0), 0,
            conv_flops(spec_.kernel_size, spec_.in_channels, spec_.out_channels, h, w), false};
  }

 private:
  ConvTranspose2dSpec spec_;
  Var<T> weight_;
  Var<T> bias_;
};

}  // namespace dehaze
