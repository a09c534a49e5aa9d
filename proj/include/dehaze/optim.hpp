#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dehaze/module.hpp"

namespace dehaze {

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr / (1-b1^t) * m / (sqrt(v) / sqrt(1-b2^t) + eps)
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<TensorRef<T>> params, AdamOptions opt) : opt_(opt) {
    for (auto& r : params)
      if (r.param) {
        params_.push_back(r);
        m_.emplace_back(r.tensor->shape());
        v_.emplace_back(r.tensor->shape());
      }
  }

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  long long steps() const { return t_; }
  const AdamOptions& options() const { return opt_; }

  void zero_grad() {
    for (auto& r : params_) r.param->zero_grad();
  }

  /// Parameters that received no gradient are treated as having a zero gradient.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const double step_size = opt_.lr / bc1;
    const double sqrt_bc2 = std::sqrt(bc2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var<T>& p = *params_[i].param;
      const bool has = p.has_grad();
      T* w = p.mutable_value().data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      const T* g = has ? p.grad().data() : nullptr;
      for (std::size_t k = 0; k < m_[i].size(); ++k) {
        const double gk = has ? static_cast<double>(g[k]) : 0.0;
        m[k] = static_cast<T>(opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk);
        v[k] = static_cast<T>(opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk);
        const double denom = std::sqrt(static_cast<double>(v[k])) / sqrt_bc2 + opt_.eps;
        w[k] = static_cast<T>(w[k] - step_size * m[k] / denom);
      }
    }
  }

  /// Moment tensors named <prefix>.m.<param> and <prefix>.v.<param>.
  void collect_state(const std::string& prefix, std::vector<TensorRef<T>>& out) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back({prefix + ".m." + params_[i].name, &m_[i], nullptr});
      out.push_back({prefix + ".v." + params_[i].name, &v_[i], nullptr});
    }
  }
  void set_steps(long long t) { t_ = t; }

 private:
  AdamOptions opt_;
  std::vector<TensorRef<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  long long t_ = 0;
};

}  // namespace dehaze
