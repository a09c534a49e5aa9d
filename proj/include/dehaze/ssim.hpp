#pragma once

#include <cmath>
#include <vector>

#include "dehaze/ops.hpp"

namespace dehaze {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
template <typename T>
std::vector<T> gaussian_taps(int size = kSsimWindow, double sigma = kSsimSigma) {
  std::vector<T> taps(size);
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    total += std::exp(-d * d / (2.0 * sigma * sigma));
  }
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    taps[i] = static_cast<T>(std::exp(-d * d / (2.0 * sigma * sigma)) / total);
  }
  return taps;
}

/// Per-window SSIM map over valid window positions, [N,C,H-10,W-10].
template <typename T>
Var<T> ssim_map(const Var<T>& x, const Var<T>& y, T data_range) {
  if (x.shape() != y.shape())
    throw ValidationError("ssim: shapes differ " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  if (x.shape().size() != 4) throw ValidationError("ssim: expected [N,C,H,W]");
  if (x.dim(2) < kSsimWindow || x.dim(3) < kSsimWindow)
    throw ValidationError("ssim: images of " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                          " are smaller than the 11x11 window");
  if (!(data_range > 0)) throw ValidationError("ssim: data range must be positive");
  const auto taps = gaussian_taps<T>();
  const T c1 = (T(0.01) * data_range) * (T(0.01) * data_range);
  const T c2 = (T(0.03) * data_range) * (T(0.03) * data_range);
  Var<T> mx = blur_valid(x, taps), my = blur_valid(y, taps);
  Var<T> mxx = mul(mx, mx), myy = mul(my, my), mxy = mul(mx, my);
  Var<T> sxx = sub(blur_valid(mul(x, x), taps), mxx);
  Var<T> syy = sub(blur_valid(mul(y, y), taps), myy);
  Var<T> sxy = sub(blur_valid(mul(x, y), taps), mxy);
  Var<T> num = mul(add_scalar(scale(mxy, T(2)), c1), add_scalar(scale(sxy, T(2)), c2));
  Var<T> den = mul(add_scalar(add(mxx, myy), c1), add_scalar(add(sxx, syy), c2));
  return div(num, den);
}

/// Mean local SSIM; `data_range` is the dynamic range L of the inputs.
template <typename T>
Var<T> ssim(const Var<T>& x, const Var<T>& y, T data_range) {
  return mean(ssim_map(x, y, data_range));
}

template <typename T>
T ssim_value(const Tensor<T>& x, const Tensor<T>& y, T data_range) {
  NoGradGuard guard;
  return ssim(Var<T>::constant(x), Var<T>::constant(y), data_range).value().item();
}

}  // namespace dehaze
