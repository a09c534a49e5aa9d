#pragma once

// Differentiable tensor operations. All image-shaped tensors are NCHW.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dehaze/autograd.hpp"

namespace dehaze {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void require_rank(const Shape& s, int r, const char* op) {
  if (static_cast<int>(s.size()) != r)
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  a.value().require_same(b.value(), op);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// convolution geometry

struct ConvGeometry {
  int channels = 0;
  int in_h = 0, in_w = 0;
  int kernel = 1;
  int stride = 1;
  int pad_top = 0, pad_left = 0;
  int out_h = 0, out_w = 0;

  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_h * out_w; }
};

/// Output extent of a convolution along one axis.
inline int conv_out_extent(int in, int kernel, int stride, int pad_begin, int pad_end) {
  const int span = in + pad_begin + pad_end - kernel;
  if (span < 0) throw ValidationError("convolution kernel larger than padded input");
  return span / stride + 1;
}

template <typename T>
void im2col(const T* src, const ConvGeometry& g, T* cols) {
  const int k = g.kernel;
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    const T* img = src + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * k + ki) * k + kj) * plane;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad_top + ki;
          T* out = row + oh * g.out_w;
          if (ih < 0 || ih >= g.in_h) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* line = img + static_cast<std::size_t>(ih) * g.in_w;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.pad_left + kj;
            out[ow] = (iw >= 0 && iw < g.in_w) ? line[iw] : T(0);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-and-adds columns into `dst` (not cleared).
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dst) {
  const int k = g.kernel;
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    T* img = dst + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = cols + static_cast<std::size_t>((c * k + ki) * k + kj) * plane;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad_top + ki;
          if (ih < 0 || ih >= g.in_h) continue;
          T* line = img + static_cast<std::size_t>(ih) * g.in_w;
          const T* in = row + oh * g.out_w;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.pad_left + kj;
            if (iw >= 0 && iw < g.in_w) line[iw] += in[ow];
          }
        }
      }
    }
  }
}

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;       // top/left
  int pad_end = -1;  // bottom/right; -1 means same as pad
};

namespace detail {

/// Zero-padded copy of one [C,H,W] sample.
template <typename T>
void pad_sample(const T* src, int c, int h, int w, int pt, int pl, int hp, int wp, T* dst) {
  std::fill(dst, dst + static_cast<std::size_t>(c) * hp * wp, T(0));
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      std::copy(src + (static_cast<std::size_t>(ch) * h + i) * w, src + (static_cast<std::size_t>(ch) * h + i + 1) * w,
                dst + (static_cast<std::size_t>(ch) * hp + i + pt) * wp + pl);
}

/// Stride-1 convolution by shifted row updates; avoids the im2col buffer,
/// which dominates when there are few output channels.
template <typename T>
Var<T> conv2d_direct(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int pad, int pad_end) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  const int hp = h + pad + pad_end, wp = wd + pad + pad_end;
  const int oh = hp - k + 1, ow = wp - k + 1;
  if (oh <= 0 || ow <= 0) throw ValidationError("convolution kernel larger than padded input");
  const std::size_t in_plane = static_cast<std::size_t>(hp) * wp, out_plane = static_cast<std::size_t>(oh) * ow;
  auto padded = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * c * in_plane);
  Tensor<T> out({n, o, oh, ow});
  const T* wv = w.value().data();
  for (int b = 0; b < n; ++b) {
    T* xp = padded->data() + static_cast<std::size_t>(b) * c * in_plane;
    pad_sample(x.value().data() + static_cast<std::size_t>(b) * c * h * wd, c, h, wd, pad, pad, hp, wp, xp);
    for (int oc = 0; oc < o; ++oc) {
      T* y = out.data() + (static_cast<std::size_t>(b) * o + oc) * out_plane;
      if (bias.defined()) std::fill(y, y + out_plane, bias.value()[oc]);
      for (int ch = 0; ch < c; ++ch)
        for (int ki = 0; ki < k; ++ki)
          for (int kj = 0; kj < k; ++kj) {
            const T wk = wv[((static_cast<std::size_t>(oc) * c + ch) * k + ki) * k + kj];
            const T* src = xp + ch * in_plane + static_cast<std::size_t>(ki) * wp + kj;
            for (int i = 0; i < oh; ++i) {
              T* yr = y + static_cast<std::size_t>(i) * ow;
              const T* sr = src + static_cast<std::size_t>(i) * wp;
              for (int j = 0; j < ow; ++j) yr[j] += wk * sr[j];
            }
          }
    }
  }
  return make_result<T>(std::move(out), {x, w, bias}, [=](Node<T>& self) {
    const T* g = self.grad.data();
    if (w.requires_grad()) {
      T* dw = w.node().ensure_grad().data();
      std::vector<T> lane(ow);  // per-column partial sums keep the inner loop vectorizable
      for (int b = 0; b < n; ++b) {
        const T* xp = padded->data() + static_cast<std::size_t>(b) * c * in_plane;
        for (int oc = 0; oc < o; ++oc) {
          const T* gy = g + (static_cast<std::size_t>(b) * o + oc) * out_plane;
          for (int ch = 0; ch < c; ++ch)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const T* src = xp + ch * in_plane + static_cast<std::size_t>(ki) * wp + kj;
                std::fill(lane.begin(), lane.end(), T(0));
                for (int i = 0; i < oh; ++i) {
                  const T* gr = gy + static_cast<std::size_t>(i) * ow;
                  const T* sr = src + static_cast<std::size_t>(i) * wp;
                  for (int j = 0; j < ow; ++j) lane[j] += gr[j] * sr[j];
                }
                T acc = 0;
                for (int j = 0; j < ow; ++j) acc += lane[j];
                dw[((static_cast<std::size_t>(oc) * c + ch) * k + ki) * k + kj] += acc;
              }
        }
      }
    }
    if (bias.defined() && bias.requires_grad()) {
      T* db = bias.node().ensure_grad().data();
      for (int b = 0; b < n; ++b)
        for (int oc = 0; oc < o; ++oc) {
          const T* gy = g + (static_cast<std::size_t>(b) * o + oc) * out_plane;
          T acc = 0;
          for (std::size_t i = 0; i < out_plane; ++i) acc += gy[i];
          db[oc] += acc;
        }
    }
    if (x.requires_grad()) {
      T* dx = x.node().ensure_grad().data();
      std::vector<T> dxp(static_cast<std::size_t>(c) * in_plane);
      const T* wv = w.value().data();
      for (int b = 0; b < n; ++b) {
        std::fill(dxp.begin(), dxp.end(), T(0));
        for (int oc = 0; oc < o; ++oc) {
          const T* gy = g + (static_cast<std::size_t>(b) * o + oc) * out_plane;
          for (int ch = 0; ch < c; ++ch)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const T wk = wv[((static_cast<std::size_t>(oc) * c + ch) * k + ki) * k + kj];
                T* dst = dxp.data() + ch * in_plane + static_cast<std::size_t>(ki) * wp + kj;
                for (int i = 0; i < oh; ++i) {
                  T* dr = dst + static_cast<std::size_t>(i) * wp;
                  const T* gr = gy + static_cast<std::size_t>(i) * ow;
                  for (int j = 0; j < ow; ++j) dr[j] += wk * gr[j];
                }
              }
        }
        T* d = dx + static_cast<std::size_t>(b) * c * h * wd;
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < h; ++i) {
            const T* s = dxp.data() + ch * in_plane + static_cast<std::size_t>(i + pad) * wp + pad;
            T* dr = d + (static_cast<std::size_t>(ch) * h + i) * wd;
            for (int j = 0; j < wd; ++j) dr[j] += s[j];
          }
      }
    }
  });
}

}  // namespace detail

/// y[n,o] = sum_c w[o,c] * x[n,c] (+ b[o]); w is [O, C, k, k].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Conv2dOptions opt = {}) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(w.shape(), 4, "conv2d weight");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != k)
    throw ValidationError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                          shape_str(x.shape()));
  const int pad_end = opt.pad_end < 0 ? opt.pad : opt.pad_end;
  ConvGeometry g{c, h, wd, k, opt.stride, opt.pad, opt.pad,
                 conv_out_extent(h, k, opt.stride, opt.pad, pad_end),
                 conv_out_extent(wd, k, opt.stride, opt.pad, pad_end)};
  const int rows = g.rows(), plane = g.cols();
  const bool has_bias = bias.defined();
  if (has_bias && static_cast<int>(bias.value().size()) != o) throw ValidationError("conv2d: bias size mismatch");
  if (opt.stride == 1 && o <= 4 && k > 1) return detail::conv2d_direct(x, w, bias, opt.pad, pad_end);

  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * rows * plane);
  Tensor<T> out({n, o, g.out_h, g.out_w});
  ConstRowMap<T> wm(w.value().data(), o, rows);
  for (int b = 0; b < n; ++b) {
    T* col = cols->data() + static_cast<std::size_t>(b) * rows * plane;
    im2col(x.value().data() + static_cast<std::size_t>(b) * c * h * wd, g, col);
    RowMap<T> om(out.data() + static_cast<std::size_t>(b) * o * plane, o, plane);
    om.noalias() = wm * ConstRowMap<T>(col, rows, plane);
    if (has_bias)
      for (int oc = 0; oc < o; ++oc) om.row(oc).array() += bias.value()[oc];
  }
  return make_result<T>(std::move(out), {x, w, bias}, [x, w, bias, cols, g, n, o](Node<T>& self) {
    const int rows = g.rows(), plane = g.cols();
    const int c = g.channels;
    const T* gout = self.grad.data();
    if (w.requires_grad()) {
      RowMap<T> dw(w.node().ensure_grad().data(), o, rows);
      for (int b = 0; b < n; ++b)
        dw.noalias() += ConstRowMap<T>(gout + static_cast<std::size_t>(b) * o * plane, o, plane) *
                        ConstRowMap<T>(cols->data() + static_cast<std::size_t>(b) * rows * plane, rows, plane)
                            .transpose();
    }
    if (bias.defined() && bias.requires_grad()) {
      T* db = bias.node().ensure_grad().data();
      for (int b = 0; b < n; ++b)
        for (int oc = 0; oc < o; ++oc) {
          const T* p = gout + (static_cast<std::size_t>(b) * o + oc) * plane;
          T s = 0;
          for (int i = 0; i < plane; ++i) s += p[i];
          db[oc] += s;
        }
    }
    if (x.requires_grad()) {
      T* dx = x.node().ensure_grad().data();
      ConstRowMap<T> wm(w.value().data(), o, rows);
      RowMat<T> dcol(rows, plane);
      for (int b = 0; b < n; ++b) {
        dcol.noalias() = wm.transpose() * ConstRowMap<T>(gout + static_cast<std::size_t>(b) * o * plane, o, plane);
        col2im(dcol.data(), g, dx + static_cast<std::size_t>(b) * c * g.in_h * g.in_w);
      }
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, Conv2dOptions opt = {}) {
  return conv2d(x, w, Var<T>(), opt);
}

struct ConvTranspose2dOptions {
  int stride = 1;
  int pad = 0;
  int output_pad = 0;
};

/// Transposed convolution (adjoint of conv2d w.r.t. its input); w is [C_in, C_out, k, k].
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, ConvTranspose2dOptions opt = {}) {
  detail::require_rank(x.shape(), 4, "conv_transpose2d input");
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (w.dim(0) != ci) throw ValidationError("conv_transpose2d: weight/input channel mismatch");
  const int co = w.dim(1), k = w.dim(2);
  const int oh = (h - 1) * opt.stride - 2 * opt.pad + k + opt.output_pad;
  const int ow = (wd - 1) * opt.stride - 2 * opt.pad + k + opt.output_pad;
  ConvGeometry g{co, oh, ow, k, opt.stride, opt.pad, opt.pad, h, wd};
  const int rows = g.rows(), plane = h * wd;
  Tensor<T> out({n, co, oh, ow});
  ConstRowMap<T> wm(w.value().data(), ci, rows);
  RowMat<T> col(rows, plane);
  for (int b = 0; b < n; ++b) {
    col.noalias() = wm.transpose() * ConstRowMap<T>(x.value().data() + static_cast<std::size_t>(b) * ci * plane, ci, plane);
    col2im(col.data(), g, out.data() + static_cast<std::size_t>(b) * co * oh * ow);
  }
  if (bias.defined()) {
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < co; ++c) {
        T* p = out.data() + (static_cast<std::size_t>(b) * co + c) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) p[i] += bias.value()[c];
      }
  }
  return make_result<T>(std::move(out), {x, w, bias}, [x, w, bias, g, n, ci, co](Node<T>& self) {
    const int rows = g.rows(), plane = g.out_h * g.out_w, oplane = g.in_h * g.in_w;
    RowMat<T> gcol(rows, plane);
    ConstRowMap<T> wm(w.value().data(), ci, rows);
    for (int b = 0; b < n; ++b) {
      im2col(self.grad.data() + static_cast<std::size_t>(b) * co * oplane, g, gcol.data());
      if (x.requires_grad()) {
        RowMap<T> dx(x.node().ensure_grad().data() + static_cast<std::size_t>(b) * ci * plane, ci, plane);
        dx.noalias() += wm * gcol;
      }
      if (w.requires_grad()) {
        RowMap<T> dw(w.node().ensure_grad().data(), ci, rows);
        dw.noalias() +=
            ConstRowMap<T>(x.value().data() + static_cast<std::size_t>(b) * ci * plane, ci, plane) * gcol.transpose();
      }
    }
    if (bias.defined() && bias.requires_grad()) {
      T* db = bias.node().ensure_grad().data();
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < co; ++c) {
          const T* p = self.grad.data() + (static_cast<std::size_t>(b) * co + c) * oplane;
          T s = 0;
          for (int i = 0; i < oplane; ++i) s += p[i];
          db[c] += s;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// resampling

/// 2x2 average pooling; spatial dims must be even.
template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "avg_pool2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2)
    throw ValidationError("avg_pool2: spatial dims must be even, got " + shape_str(x.shape()));
  const int oh = h / 2, ow = w / 2;
  Tensor<T> out({n, c, oh, ow});
  const T* src = x.value().data();
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const T* s = src + static_cast<std::size_t>(p) * h * w + (2 * i) * w + 2 * j;
        out[(static_cast<std::size_t>(p) * oh + i) * ow + j] = (s[0] + s[1] + s[w] + s[w + 1]) * T(0.25);
      }
  return make_result<T>(std::move(out), {x}, [x, n, c, h, w](Node<T>& self) {
    T* dx = x.node().ensure_grad().data();
    const int oh = h / 2, ow = w / 2;
    for (int p = 0; p < n * c; ++p)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const T g = self.grad[(static_cast<std::size_t>(p) * oh + i) * ow + j] * T(0.25);
          T* d = dx + static_cast<std::size_t>(p) * h * w + (2 * i) * w + 2 * j;
          d[0] += g;
          d[1] += g;
          d[w] += g;
          d[w + 1] += g;
        }
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "upsample2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = 2 * h, ow = 2 * w;
  Tensor<T> out({n, c, oh, ow});
  const T* src = x.value().data();
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        out[(static_cast<std::size_t>(p) * oh + i) * ow + j] = src[(static_cast<std::size_t>(p) * h + i / 2) * w + j / 2];
  return make_result<T>(std::move(out), {x}, [x, n, c, h, w](Node<T>& self) {
    T* dx = x.node().ensure_grad().data();
    const int oh = 2 * h, ow = 2 * w;
    for (int p = 0; p < n * c; ++p)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j)
          dx[(static_cast<std::size_t>(p) * h + i / 2) * w + j / 2] +=
              self.grad[(static_cast<std::size_t>(p) * oh + i) * ow + j];
  });
}

// ---------------------------------------------------------------------------
// normalization and activations

/// Per-(sample, channel) normalization over spatial positions, no affine terms.
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 4, "instance_norm");
  const int planes = x.dim(0) * x.dim(1);
  const int m = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(planes);
  for (int p = 0; p < planes; ++p) {
    const T* s = x.value().data() + static_cast<std::size_t>(p) * m;
    T mean = 0;
    for (int i = 0; i < m; ++i) mean += s[i];
    mean /= m;
    T var = 0;
    for (int i = 0; i < m; ++i) var += (s[i] - mean) * (s[i] - mean);
    var /= m;
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[p] = is;
    T* d = out.data() + static_cast<std::size_t>(p) * m;
    for (int i = 0; i < m; ++i) d[i] = (s[i] - mean) * is;
  }
  auto xhat = std::make_shared<Tensor<T>>(out);
  return make_result<T>(std::move(out), {x}, [x, xhat, inv_std, planes, m](Node<T>& self) {
    T* dx = x.node().ensure_grad().data();
    for (int p = 0; p < planes; ++p) {
      const T* g = self.grad.data() + static_cast<std::size_t>(p) * m;
      const T* xh = xhat->data() + static_cast<std::size_t>(p) * m;
      T mg = 0, mgx = 0;
      for (int i = 0; i < m; ++i) {
        mg += g[i];
        mgx += g[i] * xh[i];
      }
      mg /= m;
      mgx /= m;
      T* d = dx + static_cast<std::size_t>(p) * m;
      const T is = (*inv_std)[p];
      for (int i = 0; i < m; ++i) d[i] += is * (g[i] - mg - xh[i] * mgx);
    }
  });
}

namespace detail {

/// Elementwise map with derivative expressed in terms of input and output.
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& x, F f, D df) {
  Tensor<T> out(x.shape());
  const T* s = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(s[i]);
  auto y = std::make_shared<Tensor<T>>();
  const bool keep = grad_enabled() && x.requires_grad();
  if (keep) *y = out;
  return make_result<T>(std::move(out), {x}, [x, y, df](Node<T>& self) {
    T* dx = x.node().ensure_grad().data();
    const T* s = x.value().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i] * df(s[i], (*y)[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.2)) {
  return detail::unary(
      x, [slope](T v) { return v > 0 ? v : slope * v; }, [slope](T v, T) { return v > 0 ? T(1) : slope; });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

/// |x| with subgradient 0 at 0.
template <typename T>
Var<T> abs(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::abs(v); }, [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// binary elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.node().accumulate(self.grad);
    if (b.requires_grad()) b.node().accumulate(self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.node().accumulate(self.grad);
    if (b.requires_grad()) {
      T* d = b.node().ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) {
      T* d = a.node().ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      T* d = b.node().ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * a.value()[i];
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "div");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) {
      T* d = a.node().ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] / b.value()[i];
    }
    if (b.requires_grad()) {
      T* d = b.node().ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T bv = b.value()[i];
        d[i] -= self.grad[i] * a.value()[i] / (bv * bv);
      }
    }
  });
}

/// s * x for a single-element s.
template <typename T>
Var<T> scale_by(const Var<T>& x, const Var<T>& s) {
  if (s.value().size() != 1) throw ValidationError("scale_by: scale must hold one element");
  const T sv = s.value()[0];
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= sv;
  return make_result<T>(std::move(out), {x, s}, [x, s](Node<T>& self) {
    const T sv = s.value()[0];
    if (x.requires_grad()) {
      T* d = x.node().ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * sv;
    }
    if (s.requires_grad()) {
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x.value()[i];
      s.node().ensure_grad()[0] += acc;
    }
  });
}

/// x[n,c,:,:] + b[c].
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
  detail::require_rank(x.shape(), 4, "add_channel_bias");
  const int n = x.dim(0), c = x.dim(1), m = x.dim(2) * x.dim(3);
  if (static_cast<int>(b.value().size()) != c) throw ValidationError("add_channel_bias: bias size mismatch");
  Tensor<T> out = x.value();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      T* p = out.data() + (static_cast<std::size_t>(i) * c + ch) * m;
      for (int j = 0; j < m; ++j) p[j] += b.value()[ch];
    }
  return make_result<T>(std::move(out), {x, b}, [x, b, n, c, m](Node<T>& self) {
    if (x.requires_grad()) x.node().accumulate(self.grad);
    if (b.requires_grad()) {
      T* db = b.node().ensure_grad().data();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const T* g = self.grad.data() + (static_cast<std::size_t>(i) * c + ch) * m;
          for (int j = 0; j < m; ++j) db[ch] += g[j];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions and reshapes

template <typename T>
Var<T> sum(const Var<T>& x) {
  return make_result<T>(Tensor<T>::scalar(x.value().sum()), {x}, [x](Node<T>& self) {
    const T g = self.grad[0];
    for (auto& v : x.node().ensure_grad().values()) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const T inv = T(1) / static_cast<T>(x.value().size());
  return make_result<T>(Tensor<T>::scalar(x.value().sum() * inv), {x}, [x, inv](Node<T>& self) {
    const T g = self.grad[0] * inv;
    for (auto& v : x.node().ensure_grad().values()) v += g;
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  return make_result<T>(std::move(out), {x}, [x](Node<T>& self) {
    T* d = x.node().ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

/// Mean over channels: [N,C,H,W] -> [N,1,H,W].
template <typename T>
Var<T> channel_mean(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "channel_mean");
  const int n = x.dim(0), c = x.dim(1), m = x.dim(2) * x.dim(3);
  Tensor<T> out({n, 1, x.dim(2), x.dim(3)});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const T* s = x.value().data() + (static_cast<std::size_t>(b) * c + ch) * m;
      for (int i = 0; i < m; ++i) out[static_cast<std::size_t>(b) * m + i] += s[i] / T(c);
    }
  return make_result<T>(std::move(out), {x}, [x, n, c, m](Node<T>& self) {
    T* d = x.node().ensure_grad().data();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < m; ++i)
          d[(static_cast<std::size_t>(b) * c + ch) * m + i] += self.grad[static_cast<std::size_t>(b) * m + i] / T(c);
  });
}

// ---------------------------------------------------------------------------
// batched matrix products and softmax

/// Batched product of [B,M,K] and [B,K,P] (after optional per-operand transposes).
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  detail::require_rank(a.shape(), 3, "bmm lhs");
  detail::require_rank(b.shape(), 3, "bmm rhs");
  const int batch = a.dim(0);
  const int ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const int m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const int k2 = trans_b ? bc : br, p = trans_b ? br : bc;
  if (b.dim(0) != batch || k != k2)
    throw ValidationError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out({batch, m, p});
  for (int i = 0; i < batch; ++i) {
    ConstRowMap<T> am(a.value().data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
    ConstRowMap<T> bm(b.value().data() + static_cast<std::size_t>(i) * br * bc, br, bc);
    RowMap<T> om(out.data() + static_cast<std::size_t>(i) * m * p, m, p);
    if (trans_a && trans_b) om.noalias() = am.transpose() * bm.transpose();
    else if (trans_a) om.noalias() = am.transpose() * bm;
    else if (trans_b) om.noalias() = am * bm.transpose();
    else om.noalias() = am * bm;
  }
  return make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    for (int i = 0; i < batch; ++i) {
      ConstRowMap<T> g(self.grad.data() + static_cast<std::size_t>(i) * m * p, m, p);
      ConstRowMap<T> am(a.value().data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
      ConstRowMap<T> bm(b.value().data() + static_cast<std::size_t>(i) * br * bc, br, bc);
      // C = A' B' with A' = op(a), B' = op(b): dA' = G B'^T, dB' = A'^T G
      if (a.requires_grad()) {
        RowMap<T> da(a.node().ensure_grad().data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
        RowMat<T> bprime = trans_b ? RowMat<T>(bm.transpose()) : RowMat<T>(bm);
        if (trans_a) da.noalias() += (g * bprime.transpose()).transpose();
        else da.noalias() += g * bprime.transpose();
      }
      if (b.requires_grad()) {
        RowMap<T> db(b.node().ensure_grad().data() + static_cast<std::size_t>(i) * br * bc, br, bc);
        RowMat<T> aprime = trans_a ? RowMat<T>(am.transpose()) : RowMat<T>(am);
        if (trans_b) db.noalias() += (aprime.transpose() * g).transpose();
        else db.noalias() += aprime.transpose() * g;
      }
    }
  });
}

/// Softmax over the last dimension.
template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const int len = x.dim(-1);
  const std::size_t rows = x.value().size() / len;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = x.value().data() + r * len;
    T* d = out.data() + r * len;
    const T mx = *std::max_element(s, s + len);
    T z = 0;
    for (int i = 0; i < len; ++i) z += (d[i] = std::exp(s[i] - mx));
    for (int i = 0; i < len; ++i) d[i] /= z;
  }
  auto y = std::make_shared<Tensor<T>>(out);
  return make_result<T>(std::move(out), {x}, [x, y, len, rows](Node<T>& self) {
    T* dx = x.node().ensure_grad().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * len;
      const T* yy = y->data() + r * len;
      T dot = 0;
      for (int i = 0; i < len; ++i) dot += g[i] * yy[i];
      for (int i = 0; i < len; ++i) dx[r * len + i] += yy[i] * (g[i] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// separable fixed filters

/// Valid-mode 1D correlation along height (axis 2) or width (axis 3) of an NCHW tensor.
template <typename T>
Var<T> filter1d_valid(const Var<T>& x, const std::vector<T>& taps, int axis) {
  detail::require_rank(x.shape(), 4, "filter1d_valid");
  if (axis != 2 && axis != 3) throw ValidationError("filter1d_valid: axis must be 2 or 3");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int len = static_cast<int>(taps.size());
  const int oh = axis == 2 ? h - len + 1 : h;
  const int ow = axis == 3 ? w - len + 1 : w;
  if (oh <= 0 || ow <= 0)
    throw ValidationError("filter1d_valid: input " + shape_str(x.shape()) + " smaller than window " +
                          std::to_string(len));
  const int step = axis == 2 ? w : 1;
  Tensor<T> out({n, c, oh, ow});
  const T* src = x.value().data();
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const T* s = src + static_cast<std::size_t>(p) * h * w + i * w + j;
        T acc = 0;
        for (int t = 0; t < len; ++t) acc += taps[t] * s[t * step];
        out[(static_cast<std::size_t>(p) * oh + i) * ow + j] = acc;
      }
  return make_result<T>(std::move(out), {x}, [x, taps, n, c, h, w, oh, ow, step, len](Node<T>& self) {
    T* dx = x.node().ensure_grad().data();
    for (int p = 0; p < n * c; ++p)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const T g = self.grad[(static_cast<std::size_t>(p) * oh + i) * ow + j];
          T* d = dx + static_cast<std::size_t>(p) * h * w + i * w + j;
          for (int t = 0; t < len; ++t) d[t * step] += taps[t] * g;
        }
  });
}

/// Separable valid-mode blur with the same taps along both axes.
template <typename T>
Var<T> blur_valid(const Var<T>& x, const std::vector<T>& taps) {
  return filter1d_valid(filter1d_valid(x, taps, 3), taps, 2);
}

// ---------------------------------------------------------------------------
// specialised ops

/// Per-sample robust standardisation: (x - median) / (mean|x - median| + eps).
template <typename T>
Var<T> median_scale_normalize(const Var<T>& x, T eps = T(1e-6)) {
  const int n = x.dim(0);
  const std::size_t m = x.value().size() / n;
  Tensor<T> out(x.shape());
  struct Stats {
    std::size_t lo, hi;  // indices of the middle element(s)
    T median, scale;
  };
  auto stats = std::make_shared<std::vector<Stats>>(n);
  std::vector<std::size_t> idx(m);
  for (int b = 0; b < n; ++b) {
    const T* s = x.value().data() + b * m;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [s](std::size_t i, std::size_t j) { return s[i] < s[j] || (s[i] == s[j] && i < j); });
    const std::size_t lo = idx[(m - 1) / 2], hi = idx[m / 2];
    const T med = (s[lo] + s[hi]) / T(2);
    T mad = 0;
    for (std::size_t i = 0; i < m; ++i) mad += std::abs(s[i] - med);
    const T sc = mad / static_cast<T>(m) + eps;
    (*stats)[b] = {lo, hi, med, sc};
    for (std::size_t i = 0; i < m; ++i) out[b * m + i] = (s[i] - med) / sc;
  }
  return make_result<T>(std::move(out), {x}, [x, stats, n, m](Node<T>& self) {
    T* dx = x.node().ensure_grad().data();
    std::vector<T> dd(m);
    for (int b = 0; b < n; ++b) {
      const auto& st = (*stats)[b];
      const T* s = x.value().data() + b * m;
      const T* g = self.grad.data() + b * m;
      T dscale = 0;
      for (std::size_t i = 0; i < m; ++i) dscale -= g[i] * (s[i] - st.median) / (st.scale * st.scale);
      T dmed = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const T d = s[i] - st.median;
        const T sign = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
        dd[i] = g[i] / st.scale + dscale * sign / static_cast<T>(m);
        dmed -= dd[i];
      }
      for (std::size_t i = 0; i < m; ++i) dx[b * m + i] += dd[i];
      dx[b * m + st.lo] += dmed / T(2);
      dx[b * m + st.hi] += dmed / T(2);
    }
  });
}

/// w / sigma with sigma = u^T W v, W being w viewed as [rows, size/rows].
/// u and v are treated as constants.
template <typename T>
Var<T> divide_by_bilinear(const Var<T>& w, const Tensor<T>& u, const Tensor<T>& v, T sigma_floor) {
  const int rows = static_cast<int>(u.size());
  const int cols = static_cast<int>(v.size());
  if (static_cast<std::size_t>(rows) * cols != w.value().size())
    throw ValidationError("spectral state does not match weight " + shape_str(w.shape()));
  ConstRowMap<T> wm(w.value().data(), rows, cols);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> uu(u.data(), rows), vv(v.data(), cols);
  const T raw = uu.dot(wm * vv);
  const bool floored = !(raw > sigma_floor);
  const T sigma = floored ? sigma_floor : raw;
  Tensor<T> out = w.value();
  for (auto& e : out.values()) e /= sigma;
  return make_result<T>(std::move(out), {w}, [w, u, v, sigma, floored, rows, cols](Node<T>& self) {
    T* dw = w.node().ensure_grad().data();
    const T* g = self.grad.data();
    T gw = 0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gw += g[i] * w.value()[i];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * cols + c;
        dw[i] += g[i] / sigma - (floored ? T(0) : gw / (sigma * sigma) * u[r] * v[c]);
      }
  });
}

// ---------------------------------------------------------------------------
// non-differentiable helpers on plain tensors

/// Concatenates equally shaped [1,C,H,W] (or [N,...]) tensors along the batch axis.
template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ValidationError("stack_batch: empty list");
  Shape s = items[0].shape();
  int total = 0;
  for (const auto& t : items) {
    if (t.rank() != 4 || t.dim(1) != s[1] || t.dim(2) != s[2] || t.dim(3) != s[3])
      throw ValidationError("stack_batch: inconsistent shapes");
    total += t.dim(0);
  }
  s[0] = total;
  std::vector<T> data;
  data.reserve(shape_size(s));
  for (const auto& t : items) data.insert(data.end(), t.values().begin(), t.values().end());
  return Tensor<T>(s, std::move(data));
}

/// Sample `b` of an NCHW tensor as a [1,C,H,W] tensor.
template <typename T>
Tensor<T> batch_item(const Tensor<T>& x, int b) {
  const std::size_t m = x.size() / x.dim(0);
  std::vector<T> data(x.data() + b * m, x.data() + (b + 1) * m);
  return Tensor<T>({1, x.dim(1), x.dim(2), x.dim(3)}, std::move(data));
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const int w = x.dim(-1);
  const std::size_t rows = x.size() / w;
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < w; ++j) out[r * w + j] = x[r * w + (w - 1 - j)];
  return out;
}

}  // namespace dehaze
