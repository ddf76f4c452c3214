#pragma once

// The transformation group G: axis-aligned scaling about the image centre
// followed by translation, u' = diag(exp(lsx), exp(lsy)) u + t.
//
// Group law (g2 after g1): log-scales add, t = S2 t1 + t2.
// This group is non-abelian: scaling does not commute with translation.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "homoseg/autodiff.hpp"
#include "homoseg/layers.hpp"

namespace homoseg {

struct TransformParam {
  double lsx = 0.0;
  double lsy = 0.0;
  double tx = 0.0;
  double ty = 0.0;

  friend bool operator==(const TransformParam&, const TransformParam&) = default;

  std::array<double, 4> as_array() const { return {lsx, lsy, tx, ty}; }
  static TransformParam from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }

  double max_abs_diff(const TransformParam& o) const {
    return std::max({std::abs(lsx - o.lsx), std::abs(lsy - o.lsy), std::abs(tx - o.tx), std::abs(ty - o.ty)});
  }
};

inline TransformParam identity() { return {}; }

inline TransformParam translation(double tx, double ty) { return {0.0, 0.0, tx, ty}; }

// Result acts as "g1, then g2".
inline TransformParam compose(const TransformParam& g2, const TransformParam& g1) {
  return {g2.lsx + g1.lsx, g2.lsy + g1.lsy, std::exp(g2.lsx) * g1.tx + g2.tx,
          std::exp(g2.lsy) * g1.ty + g2.ty};
}

inline TransformParam inverse(const TransformParam& g) {
  return {-g.lsx, -g.lsy, -std::exp(-g.lsx) * g.tx, -std::exp(-g.lsy) * g.ty};
}

inline bool in_range(const TransformParam& g, double log_scale_limit) {
  return std::abs(g.lsx) <= log_scale_limit && std::abs(g.lsy) <= log_scale_limit;
}

inline TransformParam clamp_log_scales(TransformParam g, double limit) {
  g.lsx = std::clamp(g.lsx, -limit, limit);
  g.lsy = std::clamp(g.lsy, -limit, limit);
  return g;
}

// The same motion written in coordinates whose origin sits at (px, py)
// (given relative to the image centre): T⁻¹ ∘ g ∘ T with T a translation by
// (px, py). Conjugation is an automorphism of G, so it commutes with
// compose and inverse. About an object's own centroid, a deformation in
// place carries no translation, and t is the object's displacement.
inline TransformParam recentre(const TransformParam& g, double px, double py) {
  return {g.lsx, g.lsy, g.tx + std::expm1(g.lsx) * px, g.ty + std::expm1(g.lsy) * py};
}

struct CheckedCompose {
  TransformParam value;
  bool out_of_range = false;
};

// Composition with the out-of-range flag raised once |log-scale| > 2 * l_max.
inline CheckedCompose compose_checked(const TransformParam& g2, const TransformParam& g1, double l_max) {
  const auto g = compose(g2, g1);
  return {g, !in_range(g, 2.0 * l_max)};
}

// Pixel-index coordinates of the scaling centre.
inline double grid_center(int extent) { return 0.5 * (extent - 1); }

// Dense displacement field (S u + t) - u, shape (1, 2, H, W): channel 0 = x.
template <class T = double>
Tensor<T> to_field(const TransformParam& g, int height, int width) {
  if (height <= 0 || width <= 0) throw ShapeError("to_field: grid must be positive");
  Tensor<T> f(Shape{1, 2, height, width});
  const double cx = grid_center(width);
  const double cy = grid_center(height);
  const double sx = std::exp(g.lsx);
  const double sy = std::exp(g.lsy);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double ux = x - cx;
      const double uy = y - cy;
      f(0, 0, y, x) = static_cast<T>(sx * ux + g.tx - ux);
      f(0, 1, y, x) = static_cast<T>(sy * uy + g.ty - uy);
    }
  return f;
}

// Batch of transform parameters as a (N, 4, 1, 1) tensor.
template <class T>
Tensor<T> pack_params(std::span<const TransformParam> gs) {
  Tensor<T> out(Shape{static_cast<int>(gs.size()), 4, 1, 1});
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const auto a = gs[i].as_array();
    for (int k = 0; k < 4; ++k) out[i * 4 + k] = static_cast<T>(a[k]);
  }
  return out;
}

template <class T>
TransformParam unpack_param(const Tensor<T>& g, int n) {
  return {static_cast<double>(g[n * 4 + 0]), static_cast<double>(g[n * 4 + 1]),
          static_cast<double>(g[n * 4 + 2]), static_cast<double>(g[n * 4 + 3])};
}

namespace ops {

// Batched group law on (N, 4, 1, 1) parameter tensors.
template <class T>
ad::Var<T> compose(const ad::Var<T>& g2, const ad::Var<T>& g1) {
  require_same_shape(g2.shape(), g1.shape(), "compose");
  const int N = g2.shape().n;
  Tensor<T> out(g2.shape());
  const auto& a = g2.value();
  const auto& b = g1.value();
  for (int n = 0; n < N; ++n) {
    const T* p2 = a.data() + 4 * n;
    const T* p1 = b.data() + 4 * n;
    T* o = out.data() + 4 * n;
    o[0] = p2[0] + p1[0];
    o[1] = p2[1] + p1[1];
    o[2] = std::exp(p2[0]) * p1[2] + p2[2];
    o[3] = std::exp(p2[1]) * p1[3] + p2[3];
  }
  return ad::make_result<T>(std::move(out), {g2, g1}, [N](ad::Node<T>& self) {
    const auto& a = self.parents[0]->value;
    const auto& b = self.parents[1]->value;
    auto* q2 = ad::detail::grad_target(self, 0);
    auto* q1 = ad::detail::grad_target(self, 1);
    for (int n = 0; n < N; ++n) {
      const T* p2 = a.data() + 4 * n;
      const T* p1 = b.data() + 4 * n;
      const T* go = self.grad.data() + 4 * n;
      const T e0 = std::exp(p2[0]);
      const T e1 = std::exp(p2[1]);
      if (q2) {
        T* g = q2->grad_buffer().data() + 4 * n;
        g[0] += go[0] + go[2] * e0 * p1[2];
        g[1] += go[1] + go[3] * e1 * p1[3];
        g[2] += go[2];
        g[3] += go[3];
      }
      if (q1) {
        T* g = q1->grad_buffer().data() + 4 * n;
        g[0] += go[0];
        g[1] += go[1];
        g[2] += go[2] * e0;
        g[3] += go[3] * e1;
      }
    }
  });
}

template <class T>
ad::Var<T> inverse(const ad::Var<T>& g) {
  const int N = g.shape().n;
  Tensor<T> out(g.shape());
  for (int n = 0; n < N; ++n) {
    const T* p = g.value().data() + 4 * n;
    T* o = out.data() + 4 * n;
    o[0] = -p[0];
    o[1] = -p[1];
    o[2] = -std::exp(-p[0]) * p[2];
    o[3] = -std::exp(-p[1]) * p[3];
  }
  return ad::make_result<T>(std::move(out), {g}, [N](ad::Node<T>& self) {
    auto* q = ad::detail::grad_target(self, 0);
    if (!q) return;
    const auto& pv = self.parents[0]->value;
    for (int n = 0; n < N; ++n) {
      const T* p = pv.data() + 4 * n;
      const T* go = self.grad.data() + 4 * n;
      T* gg = q->grad_buffer().data() + 4 * n;
      const T e0 = std::exp(-p[0]);
      const T e1 = std::exp(-p[1]);
      gg[0] += -go[0] + go[2] * e0 * p[2];
      gg[1] += -go[1] + go[3] * e1 * p[3];
      gg[2] += -go[2] * e0;
      gg[3] += -go[3] * e1;
    }
  });
}

// Applies per-sample transforms to images by inverse coordinate mapping with
// bilinear interpolation and zero padding: out(u) = img(S^-1 (u - t)).
// img: (N, C, H, W), g: (N, 4, 1, 1).
template <class T>
ad::Var<T> warp(const ad::Var<T>& img, const ad::Var<T>& g) {
  const Shape s = img.shape();
  if (g.shape().n != s.n || g.shape().sample() != 4) {
    throw ShapeError("warp: image " + s.str() + " vs params " + g.shape().str());
  }
  const int H = s.h;
  const int W = s.w;
  const T cx = static_cast<T>(grid_center(W));
  const T cy = static_cast<T>(grid_center(H));
  Tensor<T> out(s);

  // Shared per-sample sampling geometry.
  auto sample_point = [cx, cy](const T* p, int x, int y, T& srcx, T& srcy) {
    srcx = std::exp(-p[0]) * (static_cast<T>(x) - cx - p[2]) + cx;
    srcy = std::exp(-p[1]) * (static_cast<T>(y) - cy - p[3]) + cy;
  };

  const auto& iv = img.value();
  for (int n = 0; n < s.n; ++n) {
    const T* p = g.value().data() + 4 * n;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        T sx, sy;
        sample_point(p, x, y, sx, sy);
        const T fx0 = std::floor(sx);
        const T fy0 = std::floor(sy);
        const int x0 = static_cast<int>(fx0);
        const int y0 = static_cast<int>(fy0);
        const T ax = sx - fx0;
        const T ay = sy - fy0;
        const bool vx0 = x0 >= 0 && x0 < W;
        const bool vx1 = x0 + 1 >= 0 && x0 + 1 < W;
        const bool vy0 = y0 >= 0 && y0 < H;
        const bool vy1 = y0 + 1 >= 0 && y0 + 1 < H;
        if (!((vx0 || vx1) && (vy0 || vy1))) continue;
        const T w00 = (1 - ax) * (1 - ay);
        const T w10 = ax * (1 - ay);
        const T w01 = (1 - ax) * ay;
        const T w11 = ax * ay;
        for (int c = 0; c < s.c; ++c) {
          const T* ip = iv.plane(n, c);
          T v = 0;
          if (vy0 && vx0 && w00 != T(0)) v += w00 * ip[y0 * W + x0];
          if (vy0 && vx1 && w10 != T(0)) v += w10 * ip[y0 * W + x0 + 1];
          if (vy1 && vx0 && w01 != T(0)) v += w01 * ip[(y0 + 1) * W + x0];
          if (vy1 && vx1 && w11 != T(0)) v += w11 * ip[(y0 + 1) * W + x0 + 1];
          out(n, c, y, x) = v;
        }
      }
  }

  return ad::make_result<T>(std::move(out), {img, g}, [=](ad::Node<T>& self) {
    auto* pi = ad::detail::grad_target(self, 0);
    auto* pg = ad::detail::grad_target(self, 1);
    const auto& iv = self.parents[0]->value;
    const auto& gv = self.parents[1]->value;
    for (int n = 0; n < s.n; ++n) {
      const T* p = gv.data() + 4 * n;
      const T e0 = std::exp(-p[0]);
      const T e1 = std::exp(-p[1]);
      T d_lsx = 0, d_lsy = 0, d_tx = 0, d_ty = 0;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          T sx, sy;
          sample_point(p, x, y, sx, sy);
          const T fx0 = std::floor(sx);
          const T fy0 = std::floor(sy);
          const int x0 = static_cast<int>(fx0);
          const int y0 = static_cast<int>(fy0);
          const T ax = sx - fx0;
          const T ay = sy - fy0;
          const bool vx0 = x0 >= 0 && x0 < W;
          const bool vx1 = x0 + 1 >= 0 && x0 + 1 < W;
          const bool vy0 = y0 >= 0 && y0 < H;
          const bool vy1 = y0 + 1 >= 0 && y0 + 1 < H;
          if (!((vx0 || vx1) && (vy0 || vy1))) continue;
          T dsx = 0, dsy = 0;
          for (int c = 0; c < s.c; ++c) {
            const T go = self.grad(n, c, y, x);
            if (go == T(0)) continue;
            const T* ip = iv.plane(n, c);
            const T v00 = (vy0 && vx0) ? ip[y0 * W + x0] : T(0);
            const T v10 = (vy0 && vx1) ? ip[y0 * W + x0 + 1] : T(0);
            const T v01 = (vy1 && vx0) ? ip[(y0 + 1) * W + x0] : T(0);
            const T v11 = (vy1 && vx1) ? ip[(y0 + 1) * W + x0 + 1] : T(0);
            if (pg) {
              dsx += go * ((1 - ay) * (v10 - v00) + ay * (v11 - v01));
              dsy += go * ((1 - ax) * (v01 - v00) + ax * (v11 - v10));
            }
            if (pi) {
              T* gi = pi->grad_buffer().plane(n, c);
              if (vy0 && vx0) gi[y0 * W + x0] += go * (1 - ax) * (1 - ay);
              if (vy0 && vx1) gi[y0 * W + x0 + 1] += go * ax * (1 - ay);
              if (vy1 && vx0) gi[(y0 + 1) * W + x0] += go * (1 - ax) * ay;
              if (vy1 && vx1) gi[(y0 + 1) * W + x0 + 1] += go * ax * ay;
            }
          }
          if (pg) {
            // src = e^{-ls} (u - t) + c
            d_lsx += dsx * -(sx - cx);
            d_lsy += dsy * -(sy - cy);
            d_tx += dsx * -e0;
            d_ty += dsy * -e1;
          }
        }
      if (pg) {
        T* gg = pg->grad_buffer().data() + 4 * n;
        gg[0] += d_lsx;
        gg[1] += d_lsy;
        gg[2] += d_tx;
        gg[3] += d_ty;
      }
    }
  });
}

}  // namespace ops

// Plain-value warp of a (1, C, H, W) or (N, C, H, W) image.
template <class T>
Tensor<T> warp(const Tensor<T>& img, const TransformParam& g) {
  std::vector<TransformParam> gs(img.shape().n, g);
  return ops::warp(ad::constant(img), ad::constant(pack_params<T>(gs))).value();
}

// Per-object transformation encoder.
//
// A small shared bias-free conv stack (so masked-out pixels carry no
// feature mass) detects features in the frames at t and t+1 and in the
// masked object image at t. Each feature channel of a full frame is
// summarised by its spatial mass, centroid and per-axis spread, which gives
// one motion estimate per channel (log spread ratio, centroid shift). The
// object selects among these: a channel's attention logit is the sharpness
// times the log of the fraction of the channel's mass inside the object,
// plus the log of the channel's mass in the next frame (so empty channels
// are ignored). Because only mass fractions enter, a slot holding part of an
// object still receives that object's whole motion. Log-scales and
// translation go through learned affine heads with smooth bounds.
template <class T>
class PhiEncoder {
 public:
  struct Options {
    int features = 8;
    double log_scale_limit = 1.0;
    double translation_limit = 32.0;
    // Start from centre-tap colour-opponent detectors (relu(c_a - c_b) for
    // ordered channel pairs, then intensity) passed through an identity second
    // layer. Flat-coloured objects then occupy mostly disjoint channels from
    // the first step, so each object's motion is measurable on its own.
    bool opponent_init = true;
  };

  PhiEncoder() = default;
  PhiEncoder(int height, int width, Options opt, Rng& rng)
      : opt_(opt),
        height_(height),
        width_(width),
        conv1_(3, opt.features, 3, 1, 1, rng, false),
        conv2_(opt.features, opt.features, 3, 1, 1, rng, false) {
    if (opt.opponent_init) init_opponent();
    coord_x_ = Tensor<T>(Shape{1, 1, height, width});
    coord_y_ = Tensor<T>(Shape{1, 1, height, width});
    const double cx = grid_center(width);
    const double cy = grid_center(height);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        coord_x_(0, 0, y, x) = static_cast<T>(x - cx);
        coord_y_(0, 0, y, x) = static_cast<T>(y - cy);
      }
    // sharpness, scale gains (x, y), scale offsets (x, y), translation offsets (x, y)
    head_ = ad::parameter(Tensor<T>(Shape{1, 7, 1, 1}, std::vector<T>{T(4), T(1), T(1), T(0), T(0), T(0), T(0)}));
  }

  struct Moments {
    ad::Var<T> mass;  // (N, F, 1, 1)
    ad::Var<T> cx, cy, vx, vy;
  };

  ad::Var<T> features(const ad::Var<T>& img) const {
    if (img.shape().h != height_ || img.shape().w != width_ || img.shape().c != 3) {
      throw ShapeError("phi encoder: unexpected input " + img.shape().str());
    }
    return ad::relu(conv2_(ad::relu(conv1_(img))));
  }

  Moments moments(const ad::Var<T>& f) const {
    constexpr T eps = T(1e-4);
    auto mass = ad::add_scalar(ad::sum_hw(f), eps);
    auto mx = ad::sum_hw(ad::mul_map(f, coord_x_)) / mass;
    auto my = ad::sum_hw(ad::mul_map(f, coord_y_)) / mass;
    auto sxx = ad::sum_hw(ad::mul_map(ad::mul_map(f, coord_x_), coord_x_)) / mass;
    auto syy = ad::sum_hw(ad::mul_map(ad::mul_map(f, coord_y_), coord_y_)) / mass;
    auto vx = ad::add_scalar(ad::relu(sxx - ad::square(mx)), T(1e-2));
    auto vy = ad::add_scalar(ad::relu(syy - ad::square(my)), T(1e-2));
    return {mass, mx, my, vx, vy};
  }

  // Returns (N, 4, 1, 1) parameters [lsx, lsy, tx, ty] for the masked object
  // image obj, given the full frames at t and t+1.
  ad::Var<T> encode(const ad::Var<T>& obj, const ad::Var<T>& frame, const ad::Var<T>& next) const {
    return encode(obj, moments(features(frame)), moments(features(next)));
  }

  // Same, with the frame moments precomputed (shared across slots).
  ad::Var<T> encode(const ad::Var<T>& obj, const Moments& cur, const Moments& nm) const {
    constexpr T eps = T(1e-4);
    auto mass = ad::add_scalar(ad::sum_hw(features(obj)), eps);
    auto presence = mass / cur.mass;
    const int N = cur.mass.shape().n;
    const int F = opt_.features;
    const Shape vs{N, F, 1, 1};

    auto hp = [&](int i) { return ad::broadcast_batch(ad::reshape(ad::slice_channels(head_, i, 1), Shape{1, 1, 1, 1}), N); };
    auto tile = [&](const ad::Var<T>& v) {  // (N,1,1,1) -> (N,F,1,1)
      return ad::reshape(ad::broadcast_hw(v, 1, F), vs);
    };

    // attention over feature channels
    auto logits = ad::reshape(ad::log(presence) * tile(hp(0)) + ad::log(nm.mass), vs);
    auto att = ops::softmax_channels(logits);
    auto wsum = [&](const ad::Var<T>& v) { return ad::sum_channels(att * v); };  // -> (N,1,1,1)

    const T L = static_cast<T>(opt_.log_scale_limit);
    auto rx = wsum(ad::scale(ad::log(nm.vx / cur.vx), T(0.5)));
    auto ry = wsum(ad::scale(ad::log(nm.vy / cur.vy), T(0.5)));
    auto lsx = ad::scale(ad::tanh(ad::scale(rx * hp(1) + hp(3), T(1) / L)), L);
    auto lsy = ad::scale(ad::tanh(ad::scale(ry * hp(2) + hp(4), T(1) / L)), L);

    auto tx_raw = wsum(nm.cx - cur.cx * tile(ad::exp(lsx))) + hp(5);
    auto ty_raw = wsum(nm.cy - cur.cy * tile(ad::exp(lsy))) + hp(6);
    const T TL = static_cast<T>(opt_.translation_limit);
    auto tx = ad::scale(ad::tanh(ad::scale(tx_raw, T(1) / TL)), TL);
    auto ty = ad::scale(ad::tanh(ad::scale(ty_raw, T(1) / TL)), TL);
    return ad::concat_channels<T>({lsx, lsy, tx, ty});
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    conv1_.collect(ps, prefix + ".conv1");
    conv2_.collect(ps, prefix + ".conv2");
    ps.add(prefix + ".head", head_);
  }

  const Options& options() const { return opt_; }

 private:
  void init_opponent() {
    static constexpr int pairs[6][2] = {{0, 1}, {0, 2}, {1, 0}, {1, 2}, {2, 0}, {2, 1}};
    auto& w1 = conv1_.weight_value();  // (F, 3, 3, 3)
    auto& w2 = conv2_.weight_value();  // (F, F, 3, 3)
    w1.fill(T(0));
    w2.fill(T(0));
    const int F = opt_.features;
    for (int f = 0; f < F; ++f) {
      if (f < 6) {
        w1(f, pairs[f][0], 1, 1) += T(1);
        w1(f, pairs[f][1], 1, 1) -= T(1);
      } else {
        for (int c = 0; c < 3; ++c) w1(f, c, 1, 1) += T(1) / T(3);
      }
      w2(f, f, 1, 1) += T(1);
    }
  }

  Options opt_;
  int height_ = 0;
  int width_ = 0;
  Conv2d<T> conv1_;
  Conv2d<T> conv2_;
  ad::Var<T> head_;
  Tensor<T> coord_x_;
  Tensor<T> coord_y_;
};

}  // namespace homoseg
