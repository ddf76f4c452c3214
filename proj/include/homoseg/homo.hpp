#pragma once

// Homomorphism G -> (R^k, +), the scalar projection (R^k, +) -> (R, +), and
// their algebraic losses.

#include <stdexcept>
#include <string>
#include <vector>

#include "homoseg/autodiff.hpp"
#include "homoseg/layers.hpp"
#include "homoseg/transform.hpp"

namespace homoseg {

// Small MLP from the 4 transform parameters to a k-dim latent. A linear skip
// path sits beside the tanh hidden layer. Translations are rescaled by
// `translation_scale` on input so all four inputs are O(1).
template <class T>
class Rho {
 public:
  struct Options {
    int latent_dim = 8;
    int hidden = 32;
    double translation_scale = 4.0;
  };

  Rho() = default;
  Rho(Options opt, Rng& rng)
      : opt_(opt), l1_(4, opt.hidden, rng), l2_(opt.hidden, opt.latent_dim, rng), skip_(4, opt.latent_dim, rng) {
    Tensor<T> s(Shape{1, 4, 1, 1}, T(1));
    s[2] = s[3] = static_cast<T>(1.0 / opt.translation_scale);
    input_scale_ = s;
  }

  // g: (N, 4, 1, 1) -> h: (N, k, 1, 1)
  ad::Var<T> operator()(const ad::Var<T>& g) const {
    if (g.shape().sample() != 4) throw ShapeError("rho expects (N,4,1,1), got " + g.shape().str());
    const int N = g.shape().n;
    auto u = g * ad::broadcast_batch(ad::constant(input_scale_), N);
    return l2_(ad::tanh(l1_(u))) + skip_(u);
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    l1_.collect(ps, prefix + ".l1");
    l2_.collect(ps, prefix + ".l2");
    skip_.collect(ps, prefix + ".skip");
  }

  int latent_dim() const { return opt_.latent_dim; }

 private:
  Options opt_;
  Linear<T> l1_;
  Linear<T> l2_;
  Linear<T> skip_;
  Tensor<T> input_scale_;
};

// Two-layer nonlinear projection to a scalar. No linear skip: a linear P
// satisfies the additive constraint for free.
template <class T>
class ProjScalar {
 public:
  struct Options {
    int latent_dim = 8;
    int hidden = 16;
  };

  ProjScalar() = default;
  ProjScalar(Options opt, Rng& rng) : opt_(opt), l1_(opt.latent_dim, opt.hidden, rng), l2_(opt.hidden, 1, rng) {}

  // h: (N, k, 1, 1) -> s: (N, 1, 1, 1)
  ad::Var<T> operator()(const ad::Var<T>& h) const { return l2_(ad::tanh(l1_(h))); }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    l1_.collect(ps, prefix + ".l1");
    l2_.collect(ps, prefix + ".l2");
  }

 private:
  Options opt_;
  Linear<T> l1_;
  Linear<T> l2_;
};

// mean over pairs of || rho(g1 o g2) - (rho(g1) + rho(g2)) ||^2
template <class T>
ad::Var<T> loss_homo(const Rho<T>& rho, const ad::Var<T>& g1, const ad::Var<T>& g2) {
  auto lhs = rho(ops::compose(g1, g2));
  auto rhs = rho(g1) + rho(g2);
  return ad::scale(ad::sum(ad::square(lhs - rhs)), T(1) / static_cast<T>(g1.shape().n));
}

// sum_d relu(margin - std_d)^2 over a batch (N, k, 1, 1); population std.
template <class T>
ad::Var<T> loss_var(const ad::Var<T>& h, double margin) {
  const int N = h.shape().n;
  if (N < 2) throw std::invalid_argument("loss_var needs a batch of at least 2, got " + std::to_string(N));
  auto centred = h - ad::broadcast_batch(ad::mean_batch(h), N);
  auto sd = ad::sqrt(ad::mean_batch(ad::square(centred)));
  auto gap = ad::relu(ad::add_scalar(-sd, static_cast<T>(margin)));
  return ad::sum(ad::square(gap));
}

// g_{2|1} = g1^{-1} o g2
inline TransformParam rel_param(const TransformParam& g1, const TransformParam& g2) {
  return compose(inverse(g1), g2);
}

inline CheckedCompose rel_param_checked(const TransformParam& g1, const TransformParam& g2, double l_max) {
  return compose_checked(inverse(g1), g2, l_max);
}

template <class T>
ad::Var<T> rel_param(const ad::Var<T>& g1, const ad::Var<T>& g2) {
  return ops::compose(ops::inverse(g1), g2);
}

// mean over pairs of (P(h1 + h2) - (P(h1) + P(h2)))^2
template <class T>
ad::Var<T> loss_homo_scalar(const ProjScalar<T>& proj, const ad::Var<T>& h1, const ad::Var<T>& h2) {
  auto d = proj(h1 + h2) - (proj(h1) + proj(h2));
  return ad::scale(ad::sum(ad::square(d)), T(1) / static_cast<T>(h1.shape().n));
}

template <class T>
ad::Var<T> loss_var_scalar(const ad::Var<T>& s, double margin) {
  if (s.shape().sample() != 1) throw ShapeError("loss_var_scalar expects (N,1,1,1), got " + s.shape().str());
  return loss_var(s, margin);
}

}  // namespace homoseg
