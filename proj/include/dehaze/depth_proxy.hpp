#pragma once

// Scene-depth networks used by the depth-consistency loss. All backends take
// [N,3,H,W] images in [0,1] and return [N,1,h,w] depth maps.
//
//   stub        1 - channel mean, full resolution
//   proxy       4-layer conv regressor at quarter resolution, fitted on RGBD data
//   pretrained  proxy architecture with externally supplied weights

#include <algorithm>
#include <filesystem>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "dehaze/checkpoint.hpp"
#include "dehaze/haze_synth.hpp"
#include "dehaze/layers.hpp"
#include "dehaze/optim.hpp"

namespace dehaze {

enum class DepthBackend { pretrained, proxy, stub };

inline const char* depth_backend_list() { return "pretrained, proxy, stub"; }

inline DepthBackend parse_depth_backend(const std::string& s) {
  if (s == "pretrained") return DepthBackend::pretrained;
  if (s == "proxy") return DepthBackend::proxy;
  if (s == "stub") return DepthBackend::stub;
  throw ConfigError("unknown depth backend '" + s + "'; available backends: " + depth_backend_list());
}

inline std::string to_string(DepthBackend b) {
  switch (b) {
    case DepthBackend::pretrained: return "pretrained";
    case DepthBackend::proxy: return "proxy";
    case DepthBackend::stub: return "stub";
  }
  return "?";
}

template <typename T>
class DepthEstimator : public Module<T> {
 public:
  virtual Var<T> estimate(const Var<T>& image01) const = 0;
  virtual DepthBackend backend() const = 0;
  /// Input size divided by output size.
  virtual int downscale() const = 0;
  bool differentiable() const { return true; }
};

template <typename T>
class StubDepth : public DepthEstimator<T> {
 public:
  Var<T> estimate(const Var<T>& x) const override { return add_scalar(scale(channel_mean(x), T(-1)), T(1)); }
  DepthBackend backend() const override { return DepthBackend::stub; }
  int downscale() const override { return 1; }
  void collect(const std::string&, std::vector<TensorRef<T>>&) override {}
};

template <typename T>
class ProxyDepth : public DepthEstimator<T> {
 public:
  static constexpr int kHidden = 16;

  explicit ProxyDepth(std::uint64_t seed = 0, DepthBackend tag = DepthBackend::proxy) : tag_(tag) {
    Rng rng(seed);
    const int chans[5] = {3, kHidden, kHidden, kHidden, 1};
    for (int i = 0; i < 4; ++i) {
      convs_.emplace_back(Conv2dSpec{chans[i], chans[i + 1], 3, 1, 1}, rng);
      // Fan-in scaling so the small stack trains quickly from scratch.
      const double std = std::sqrt(2.0 / (9.0 * chans[i]));
      for (auto& v : convs_.back().kernel().weight.mutable_value().values()) v = static_cast<T>(v / kInitStd * std);
    }
  }

  Var<T> estimate(const Var<T>& x) const override {
    if (x.dim(1) != 3) throw ValidationError("depth proxy expects 3-channel images");
    if (x.dim(2) % 4 || x.dim(3) % 4)
      throw ValidationError("depth proxy needs image sizes divisible by 4, got " + shape_str(x.shape()));
    Var<T> h = avg_pool2(avg_pool2(x));
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = convs_[i].forward(h);
      if (i + 1 < convs_.size()) h = relu(h);
    }
    return h;
  }

  DepthBackend backend() const override { return tag_; }
  int downscale() const override { return 4; }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(join_name(prefix, "conv" + std::to_string(i)), out);
  }

  void set_output_bias(T b) { convs_.back().bias().mutable_value()[0] = b; }

 private:
  DepthBackend tag_;
  std::vector<Conv2d<T>> convs_;
};

/// Ground-truth depth averaged over 4x4 blocks, matching the proxy's output grid.
inline Plane pool_depth4(const Plane& d) {
  const int H = d.dim(0) / 4, W = d.dim(1) / 4;
  Plane out({H, W});
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      double s = 0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) s += d.at(4 * r + i, 4 * c + j);
      out.at(r, c) = s / 16.0;
    }
  return out;
}

struct ProxyFitOptions {
  int epochs = 30;
  int batch_size = 8;
  double lr = 2e-3;
  std::uint64_t seed = 0;
};

template <typename T>
struct ProxyFit {
  std::unique_ptr<ProxyDepth<T>> model;
  std::vector<double> epoch_losses;  // full-pass MSE after each epoch
};

namespace detail {
template <typename T>
Tensor<T> to_batch(const std::vector<const Tensor<double>*>& items) {
  std::vector<Tensor<T>> parts;
  for (const auto* t : items) {
    Shape s = t->shape();
    if (s.size() == 2) s.insert(s.begin(), 1);
    s.insert(s.begin(), 1);
    parts.push_back(t->template cast<T>().reshaped(s));
  }
  return stack_batch(parts);
}
}  // namespace detail

template <typename T>
double proxy_mse(const ProxyDepth<T>& model, const std::vector<RgbdSample>& samples) {
  NoGradGuard g;
  double total = 0;
  for (const auto& s : samples) {
    const Var<T> pred = model.estimate(Var<T>::constant(detail::to_batch<T>({&s.image})));
    const Plane target = pool_depth4(s.depth);
    double acc = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double e = pred.value()[i] - target[i];
      acc += e * e;
    }
    total += acc / target.size();
  }
  return total / samples.size();
}

/// Fits the proxy with MSE on quarter-resolution depth. The result is frozen.
template <typename T>
ProxyFit<T> fit_proxy(const std::vector<RgbdSample>& samples, const ProxyFitOptions& opt) {
  if (samples.size() < 2) throw ValidationError("fit_proxy: need at least 2 RGBD samples");
  if (opt.epochs < 1 || opt.batch_size < 1) throw ValidationError("fit_proxy: epochs and batch size must be >= 1");
  ProxyFit<T> fit;
  fit.model = std::make_unique<ProxyDepth<T>>(opt.seed);
  std::vector<Plane> targets;
  double mean_depth = 0;
  for (const auto& s : samples) {
    s.validate();
    targets.push_back(pool_depth4(s.depth));
    mean_depth += targets.back().mean();
  }
  fit.model->set_output_bias(static_cast<T>(mean_depth / samples.size()));

  Adam<T> adam(fit.model->tensors(), {opt.lr, 0.9, 0.999, 1e-8});
  Rng rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int e = 0; e < opt.epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      std::vector<const Tensor<double>*> xs, ys;
      for (std::size_t k = start; k < std::min(order.size(), start + opt.batch_size); ++k) {
        xs.push_back(&samples[order[k]].image);
        ys.push_back(&targets[order[k]]);
      }
      adam.zero_grad();
      const Var<T> pred = fit.model->estimate(Var<T>::constant(detail::to_batch<T>(xs)));
      const Var<T> loss = mean(square(sub(pred, Var<T>::constant(detail::to_batch<T>(ys)))));
      loss.backward();
      adam.step();
    }
    fit.epoch_losses.push_back(proxy_mse(*fit.model, samples));
  }
  fit.model->set_trainable(false);
  return fit;
}

template <typename T>
void save_depth_model(const std::filesystem::path& path, ProxyDepth<T>& model, const nlohmann::ordered_json& meta = {}) {
  nlohmann::ordered_json m = meta.is_object() ? meta : nlohmann::ordered_json::object();
  m["architecture"] = "proxy4";
  write_archive(path, model.tensors("phi"), m);
}

template <typename T>
std::unique_ptr<ProxyDepth<T>> load_depth_model(const std::filesystem::path& path, DepthBackend tag) {
  const Archive ar = read_archive(path);
  if (ar.meta.value("architecture", "") != "proxy4")
    throw ValidationError(path.string() + " does not hold depth network weights");
  auto model = std::make_unique<ProxyDepth<T>>(0, tag);
  load_into(ar, model->tensors("phi"), "depth weights " + path.string());
  model->set_trainable(false);
  return model;
}

/// Builds a frozen estimator. `weights` is required for proxy and pretrained.
template <typename T>
std::unique_ptr<DepthEstimator<T>> make_depth_estimator(DepthBackend backend, const std::filesystem::path& weights) {
  if (backend == DepthBackend::stub) return std::make_unique<StubDepth<T>>();
  if (weights.empty() || !std::filesystem::exists(weights)) {
    const std::string hint = backend == DepthBackend::proxy ? "run `fit-depth-proxy` first or " : "";
    throw ConfigError(to_string(backend) + " depth weights not found at '" + weights.string() + "'; " + hint +
                      "choose one of the available backends: " + depth_backend_list());
  }
  return load_depth_model<T>(weights, backend);
}

}  // namespace dehaze
