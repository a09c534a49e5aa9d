#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dehaze/autograd.hpp"
#include "dehaze/rng.hpp"

namespace dehaze {

/// A named tensor owned by a module. `param` is set for trainable tensors;
/// persistent state (spectral-norm vectors) has `param == nullptr`.
template <typename T>
struct TensorRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
  Var<T>* param = nullptr;

  bool trainable() const { return param != nullptr; }
};

enum class LayerKind { conv, conv_transpose, octave_conv, attention };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::conv_transpose: return "conv_transpose";
    case LayerKind::octave_conv: return "octave_conv";
    case LayerKind::attention: return "attention";
  }
  return "?";
}

/// Static description of one weighted layer at a given input resolution.
struct LayerInfo {
  std::string name;
  LayerKind kind = LayerKind::conv;
  std::int64_t params = 0;  // trainable elements
  std::int64_t state = 0;   // persistent non-trainable elements (spectral-norm vectors)
  std::int64_t flops = 0;   // per sample, 2 x multiply-accumulates
  bool spectral = false;
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
class Module {
 public:
  virtual ~Module() = default;

  virtual void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) = 0;

  std::vector<TensorRef<T>> tensors(const std::string& prefix = "") {
    std::vector<TensorRef<T>> out;
    collect(prefix, out);
    return out;
  }

  std::vector<Var<T>*> parameters() {
    std::vector<Var<T>*> out;
    for (auto& r : tensors())
      if (r.param) out.push_back(r.param);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Frozen modules keep their values but never accumulate gradients.
  void set_trainable(bool trainable) {
    for (auto* p : parameters()) p->set_requires_grad(trainable);
  }
};

/// A module mapping one NCHW tensor to another.
template <typename T>
class ImageModule : public Module<T> {
 public:
  virtual Var<T> forward(const Var<T>& x) const = 0;
  /// Advances persistent spectral-norm state, if any.
  virtual void power_step(int) {}
};

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace dehaze
