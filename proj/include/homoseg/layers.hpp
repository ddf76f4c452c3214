#pragma once

// Convolution, pooling, dense layers and the parameter registry shared by
// every learned component.

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "homoseg/autodiff.hpp"
#include "homoseg/rng.hpp"

namespace homoseg {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Named trainable tensors, in registration order.
template <class T>
class ParamSet {
 public:
  void add(std::string name, ad::Var<T> v) { items_.emplace_back(std::move(name), std::move(v)); }
  void append(const ParamSet& other) {
    items_.insert(items_.end(), other.items_.begin(), other.items_.end());
  }

  std::size_t size() const { return items_.size(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  const std::pair<std::string, ad::Var<T>>& operator[](std::size_t i) const { return items_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : items_) n += v.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : items_) v.zero_grad();
  }

  // Switches requires_grad on every parameter (used to freeze modules).
  void set_trainable(bool on) {
    for (auto& [_, v] : items_) v.node()->requires_grad = on;
  }

 private:
  std::vector<std::pair<std::string, ad::Var<T>>> items_;
};

namespace ops {

namespace detail {

template <class T>
void im2col(const T* img, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
  const int HW = Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * HW;
        const T* plane = img + static_cast<std::size_t>(c) * H * W;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill_n(dst, Wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* img) {
  const int HW = Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * HW;
        T* plane = img + static_cast<std::size_t>(c) * H * W;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + oy * Wo;
          T* dst = plane + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// x: (N, Cin, H, W), weight: (Cout, Cin, k, k), bias: (1, Cout, 1, 1).
template <class T>
ad::Var<T> conv2d(const ad::Var<T>& x, const ad::Var<T>& weight, const ad::Var<T>& bias, int stride,
                  int pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw ShapeError("conv2d: input " + xs.str() + " vs weight " + ws.str());
  }
  const int k = ws.h;
  const int Cout = ws.n;
  const int Ho = (xs.h + 2 * pad - k) / stride + 1;
  const int Wo = (xs.w + 2 * pad - k) / stride + 1;
  const int rows = xs.c * k * k;
  const int HW = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> out(Shape{xs.n, Cout, Ho, Wo});
  AlignedVector<T> col(direct ? 0 : static_cast<std::size_t>(rows) * HW);
  Eigen::Map<const RowMat<T>> Wm(weight.value().data(), Cout, rows);
  for (int n = 0; n < xs.n; ++n) {
    const T* src = x.value().plane(n, 0);
    if (!direct) detail::im2col(src, xs.c, xs.h, xs.w, k, stride, pad, Ho, Wo, col.data());
    Eigen::Map<const RowMat<T>> C(direct ? src : col.data(), rows, HW);
    Eigen::Map<RowMat<T>> O(out.plane(n, 0), Cout, HW);
    O.noalias() = Wm * C;
    for (int c = 0; c < Cout; ++c) O.row(c).array() += bias.value()[c];
  }

  return ad::make_result<T>(std::move(out), {x, weight, bias}, [=](ad::Node<T>& self) {
    auto* px = ad::detail::grad_target(self, 0);
    auto* pw = ad::detail::grad_target(self, 1);
    auto* pb = ad::detail::grad_target(self, 2);
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    AlignedVector<T> col(direct ? 0 : static_cast<std::size_t>(rows) * HW);
    AlignedVector<T> dcol(px && !direct ? static_cast<std::size_t>(rows) * HW : 0);
    Eigen::Map<const RowMat<T>> Wm(wv.data(), Cout, rows);
    for (int n = 0; n < xs.n; ++n) {
      Eigen::Map<const RowMat<T>> G(self.grad.plane(n, 0), Cout, HW);
      if (pb) {
        auto& gb = pb->grad_buffer();
        for (int c = 0; c < Cout; ++c) gb[c] += G.row(c).sum();
      }
      const T* src = xv.plane(n, 0);
      if (pw) {
        if (!direct) detail::im2col(src, xs.c, xs.h, xs.w, k, stride, pad, Ho, Wo, col.data());
        Eigen::Map<const RowMat<T>> C(direct ? src : col.data(), rows, HW);
        Eigen::Map<RowMat<T>> GW(pw->grad_buffer().data(), Cout, rows);
        GW.noalias() += G * C.transpose();
      }
      if (px) {
        T* gx = px->grad_buffer().plane(n, 0);
        if (direct) {
          Eigen::Map<RowMat<T>> GX(gx, rows, HW);
          GX.noalias() += Wm.transpose() * G;
        } else {
          Eigen::Map<RowMat<T>> DC(dcol.data(), rows, HW);
          DC.noalias() = Wm.transpose() * G;
          detail::col2im(dcol.data(), xs.c, xs.h, xs.w, k, stride, pad, Ho, Wo, gx);
        }
      }
    }
  });
}

// 2x2 average pooling; H and W must be even.
template <class T>
ad::Var<T> avgpool2(const ad::Var<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 || s.w % 2) throw ShapeError("avgpool2 needs even spatial size, got " + s.str());
  Tensor<T> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  const auto& xv = x.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h / 2; ++y)
        for (int xx = 0; xx < s.w / 2; ++xx)
          out(n, c, y, xx) = T(0.25) * (xv(n, c, 2 * y, 2 * xx) + xv(n, c, 2 * y, 2 * xx + 1) +
                                        xv(n, c, 2 * y + 1, 2 * xx) + xv(n, c, 2 * y + 1, 2 * xx + 1));
  return ad::make_result<T>(std::move(out), {x}, [](ad::Node<T>& self) {
    auto* p = ad::detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const Shape s = self.grad.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx) {
            const T v = T(0.25) * self.grad(n, c, y, xx);
            g(n, c, 2 * y, 2 * xx) += v;
            g(n, c, 2 * y, 2 * xx + 1) += v;
            g(n, c, 2 * y + 1, 2 * xx) += v;
            g(n, c, 2 * y + 1, 2 * xx + 1) += v;
          }
  });
}

// Nearest-neighbour 2x upsampling.
template <class T>
ad::Var<T> upsample2(const ad::Var<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, s.h * 2, s.w * 2});
  const auto& xv = x.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < 2 * s.h; ++y)
        for (int xx = 0; xx < 2 * s.w; ++xx) out(n, c, y, xx) = xv(n, c, y / 2, xx / 2);
  return ad::make_result<T>(std::move(out), {x}, [](ad::Node<T>& self) {
    auto* p = ad::detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const Shape s = self.grad.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx) g(n, c, y / 2, xx / 2) += self.grad(n, c, y, xx);
  });
}

// x: (N, Cin, ...) flattened per sample, weight: (Cout, Cin, 1, 1), bias: (1, Cout, 1, 1).
template <class T>
ad::Var<T> linear(const ad::Var<T>& x, const ad::Var<T>& weight, const ad::Var<T>& bias) {
  const Shape xs = x.shape();
  const int in = static_cast<int>(xs.sample());
  const int outc = weight.shape().n;
  if (weight.shape().c != in) {
    throw ShapeError("linear: input " + xs.str() + " vs weight " + weight.shape().str());
  }
  Tensor<T> out(Shape{xs.n, outc, 1, 1});
  Eigen::Map<const RowMat<T>> X(x.value().data(), xs.n, in);
  Eigen::Map<const RowMat<T>> W(weight.value().data(), outc, in);
  Eigen::Map<RowMat<T>> O(out.data(), xs.n, outc);
  O.noalias() = X * W.transpose();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < outc; ++c) O(n, c) += bias.value()[c];
  return ad::make_result<T>(std::move(out), {x, weight, bias}, [=](ad::Node<T>& self) {
    Eigen::Map<const RowMat<T>> G(self.grad.data(), xs.n, outc);
    if (auto* p = ad::detail::grad_target(self, 0)) {
      Eigen::Map<const RowMat<T>> W(self.parents[1]->value.data(), outc, in);
      Eigen::Map<RowMat<T>> GX(p->grad_buffer().data(), xs.n, in);
      GX.noalias() += G * W;
    }
    if (auto* p = ad::detail::grad_target(self, 1)) {
      Eigen::Map<const RowMat<T>> X(self.parents[0]->value.data(), xs.n, in);
      Eigen::Map<RowMat<T>> GW(p->grad_buffer().data(), outc, in);
      GW.noalias() += G.transpose() * X;
    }
    if (auto* p = ad::detail::grad_target(self, 2)) {
      auto& gb = p->grad_buffer();
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < outc; ++c) gb[c] += G(n, c);
    }
  });
}

// Per-pixel softmax across the channel axis.
template <class T>
ad::Var<T> softmax_channels(const ad::Var<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(s);
  const auto P = s.plane();
  const auto& xv = x.value();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < P; ++i) {
      T mx = xv.plane(n, 0)[i];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, xv.plane(n, c)[i]);
      T z = 0;
      for (int c = 0; c < s.c; ++c) {
        const T e = std::exp(xv.plane(n, c)[i] - mx);
        out.plane(n, c)[i] = e;
        z += e;
      }
      for (int c = 0; c < s.c; ++c) out.plane(n, c)[i] /= z;
    }
  return ad::make_result<T>(std::move(out), {x}, [](ad::Node<T>& self) {
    auto* p = ad::detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const Shape s = self.grad.shape();
    const auto P = s.plane();
    for (int n = 0; n < s.n; ++n)
      for (std::size_t i = 0; i < P; ++i) {
        T dot = 0;
        for (int c = 0; c < s.c; ++c) dot += self.grad.plane(n, c)[i] * self.value.plane(n, c)[i];
        for (int c = 0; c < s.c; ++c) {
          const T y = self.value.plane(n, c)[i];
          g.plane(n, c)[i] += y * (self.grad.plane(n, c)[i] - dot);
        }
      }
  });
}

}  // namespace ops

// Kaiming-uniform weights, zero bias.
template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  // Without a bias the layer maps a zero image to zero.
  Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, bool bias = true, double gain = 1.0)
      : stride_(stride), pad_(pad), has_bias_(bias) {
    Tensor<T> w(Shape{out, in, kernel, kernel});
    const double bound = gain * std::sqrt(6.0 / (in * kernel * kernel));
    for (auto& v : w.span()) v = static_cast<T>(rng.uniform(-bound, bound));
    weight_ = ad::parameter(std::move(w));
    bias_ = bias ? ad::parameter(Tensor<T>(Shape{1, out, 1, 1})) : ad::constant(Tensor<T>(Shape{1, out, 1, 1}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ops::conv2d(x, weight_, bias_, stride_, pad_); }

  // Direct access for structured initialisation.
  Tensor<T>& weight_value() { return weight_.node()->value; }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    ps.add(prefix + ".weight", weight_);
    if (has_bias_) ps.add(prefix + ".bias", bias_);
  }

 private:
  ad::Var<T> weight_;
  ad::Var<T> bias_;
  int stride_ = 1;
  int pad_ = 0;
  bool has_bias_ = true;
};

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng, double gain = 1.0) {
    Tensor<T> w(Shape{out, in, 1, 1});
    const double bound = gain * std::sqrt(3.0 / in);
    for (auto& v : w.span()) v = static_cast<T>(rng.uniform(-bound, bound));
    weight_ = ad::parameter(std::move(w));
    bias_ = ad::parameter(Tensor<T>(Shape{1, out, 1, 1}));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ops::linear(x, weight_, bias_); }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    ps.add(prefix + ".weight", weight_);
    ps.add(prefix + ".bias", bias_);
  }

  const ad::Var<T>& weight() const { return weight_; }
  const ad::Var<T>& bias() const { return bias_; }

 private:
  ad::Var<T> weight_;
  ad::Var<T> bias_;
};

}  // namespace homoseg
