#pragma once

// Tape-free reverse-mode automatic differentiation over Tensor<T>.
//
// Every operation produces a Var whose node keeps shared pointers to its
// inputs plus a closure that pushes the node's gradient back into them.
// Graphs are built per forward pass and released with the root Var. Nodes
// that do not depend on any trainable leaf are created detached, so
// inference builds no graph at all.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "homoseg/tensor.hpp"

namespace homoseg::ad {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size() || !(grad.shape() == value.shape())) {
      grad = Tensor<T>(value.shape());
    }
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && grad.size() > 0; }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(T(0));
  }

  T item() const { return node_->value.item(); }

  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Seeds d(self)/d(self) = 1 and propagates through the graph.
  void backward() const {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_buffer().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <class T>
Var<T> parameter(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

// Builds a result node; drops the graph when no input needs gradients.
template <class T, class Fn>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, Fn&& fn) {
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (!any) return Var<T>(std::move(value), false);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->parents.reserve(inputs.size());
  for (auto& v : inputs) node->parents.push_back(v.node());
  node->backward_fn = std::forward<Fn>(fn);
  return Var<T>(std::move(node));
}

namespace detail {

template <class T>
inline Node<T>* grad_target(Node<T>& self, std::size_t i) {
  Node<T>* p = self.parents[i].get();
  return p->requires_grad ? p : nullptr;
}

template <class T, class F, class D>
Var<T> unary(const Var<T>& a, F f, D dfdx) {
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(std::move(out), {a}, [dfdx](Node<T>& self) {
    Node<T>* p = grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const auto& x = p->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(x[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* p = detail::grad_target(self, k)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* p = detail::grad_target(self, 0)) {
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (auto* p = detail::grad_target(self, 1)) {
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* p = detail::grad_target(self, 0)) {
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (auto* p = detail::grad_target(self, 1)) {
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "div");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& bv = self.parents[1]->value;
    if (auto* p = detail::grad_target(self, 0)) {
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
    }
    if (auto* p = detail::grad_target(self, 1)) {
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / bv[i];
    }
  });
}

template <class T>
Var<T> operator-(const Var<T>& a) {
  return detail::unary(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// sqrt with a zero subgradient at 0, so sqrt(0) stays exactly 0.
template <class T>
Var<T> sqrt(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.01)) {
  return detail::unary(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

// ---------------------------------------------------------------------------
// Broadcasting products

// x: (N, C, H, W) times m: (N, 1, H, W), broadcast over channels.
template <class T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& m) {
  const Shape s = x.shape();
  const Shape ms = m.shape();
  if (ms.n != s.n || ms.c != 1 || ms.h != s.h || ms.w != s.w) {
    throw ShapeError("mul_channels: " + s.str() + " vs " + ms.str());
  }
  Tensor<T> out(s);
  const auto P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* xp = x.value().plane(n, c);
      const T* mp = m.value().plane(n, 0);
      T* op = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) op[i] = xp[i] * mp[i];
    }
  return make_result<T>(std::move(out), {x, m}, [](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& mv = self.parents[1]->value;
    const Shape s = xv.shape();
    const auto P = s.plane();
    Node<T>* px = detail::grad_target(self, 0);
    Node<T>* pm = detail::grad_target(self, 1);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* go = self.grad.plane(n, c);
        if (px) {
          T* gx = px->grad_buffer().plane(n, c);
          const T* mp = mv.plane(n, 0);
          for (std::size_t i = 0; i < P; ++i) gx[i] += go[i] * mp[i];
        }
        if (pm) {
          T* gm = pm->grad_buffer().plane(n, 0);
          const T* xp = xv.plane(n, c);
          for (std::size_t i = 0; i < P; ++i) gm[i] += go[i] * xp[i];
        }
      }
  });
}

// x: (N, C, H, W) times a constant map (1, 1, H, W) broadcast over N and C.
template <class T>
Var<T> mul_map(const Var<T>& x, const Tensor<T>& map) {
  const Shape s = x.shape();
  if (map.shape().h != s.h || map.shape().w != s.w || map.size() != s.plane()) {
    throw ShapeError("mul_map: " + s.str() + " vs " + map.shape().str());
  }
  Tensor<T> out(s);
  const auto P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* xp = x.value().plane(n, c);
      T* op = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) op[i] = xp[i] * map[i];
    }
  return make_result<T>(std::move(out), {x}, [map](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const Shape s = g.shape();
    const auto P = s.plane();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        T* gp = g.plane(n, c);
        const T* go = self.grad.plane(n, c);
        for (std::size_t i = 0; i < P; ++i) gp[i] += go[i] * map[i];
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (auto v : a.value().span()) acc += v;
  return make_result<T>(Tensor<T>::scalar(acc), {a}, [](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const T go = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// (N, C, H, W) -> (N, C, 1, 1)
template <class T>
Var<T> sum_hw(const Var<T>& a) {
  const Shape s = a.shape();
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const auto P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* ap = a.value().plane(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < P; ++i) acc += ap[i];
      out(n, c, 0, 0) = acc;
    }
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const Shape s = g.shape();
    const auto P = s.plane();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T go = self.grad(n, c, 0, 0);
        T* gp = g.plane(n, c);
        for (std::size_t i = 0; i < P; ++i) gp[i] += go;
      }
  });
}

// (N, C, H, W) -> (N, 1, H, W)
template <class T>
Var<T> sum_channels(const Var<T>& a) {
  const Shape s = a.shape();
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  const auto P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* ap = a.value().plane(n, c);
      T* op = out.plane(n, 0);
      for (std::size_t i = 0; i < P; ++i) op[i] += ap[i];
    }
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const Shape s = g.shape();
    const auto P = s.plane();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* go = self.grad.plane(n, 0);
        T* gp = g.plane(n, c);
        for (std::size_t i = 0; i < P; ++i) gp[i] += go[i];
      }
  });
}

// (N, C, H, W) -> (1, C, H, W): mean over the batch axis.
template <class T>
Var<T> mean_batch(const Var<T>& a) {
  const Shape s = a.shape();
  const auto per = s.sample();
  Tensor<T> out(Shape{1, s.c, s.h, s.w});
  const T inv = T(1) / static_cast<T>(s.n);
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < per; ++i) out[i] += a.value()[n * per + i];
  for (std::size_t i = 0; i < per; ++i) out[i] *= inv;
  return make_result<T>(std::move(out), {a}, [inv](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const Shape s = g.shape();
    const auto per = s.sample();
    for (int n = 0; n < s.n; ++n)
      for (std::size_t i = 0; i < per; ++i) g[n * per + i] += self.grad[i] * inv;
  });
}

// (1, C, H, W) -> (n, C, H, W)
template <class T>
Var<T> broadcast_batch(const Var<T>& a, int n) {
  const Shape s = a.shape();
  if (s.n != 1) throw ShapeError("broadcast_batch expects n == 1, got " + s.str());
  const auto per = s.sample();
  Tensor<T> out(Shape{n, s.c, s.h, s.w});
  for (int k = 0; k < n; ++k) std::copy_n(a.value().data(), per, out.data() + k * per);
  return make_result<T>(std::move(out), {a}, [n](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const auto per = g.size();
    for (int k = 0; k < n; ++k)
      for (std::size_t i = 0; i < per; ++i) g[i] += self.grad[k * per + i];
  });
}

// (N, C, 1, 1) -> (N, C, h, w)
template <class T>
Var<T> broadcast_hw(const Var<T>& a, int h, int w) {
  const Shape s = a.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("broadcast_hw expects h == w == 1, got " + s.str());
  Tensor<T> out(Shape{s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) std::fill_n(out.plane(n, c), out.shape().plane(), a.value()(n, c, 0, 0));
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const Shape s = self.grad.shape();
    const auto P = s.plane();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* go = self.grad.plane(n, c);
        T acc = 0;
        for (std::size_t i = 0; i < P; ++i) acc += go[i];
        g(n, c, 0, 0) += acc;
      }
  });
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(s);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels of nothing");
  Shape s = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("concat_channels: " + s.str() + " vs " + ps.str());
    }
    total += ps.c;
  }
  s.c = total;
  Tensor<T> out(s);
  const auto P = s.plane();
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const auto& p : parts) {
      const int pc = p.shape().c;
      std::copy_n(p.value().plane(n, 0), P * pc, out.plane(n, c0));
      c0 += pc;
    }
  }
  return make_result<T>(std::move(out), parts, [](Node<T>& self) {
    const Shape s = self.grad.shape();
    const auto P = s.plane();
    int c0 = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const int pc = self.parents[k]->value.shape().c;
      if (auto* p = detail::grad_target(self, k)) {
        auto& g = p->grad_buffer();
        for (int n = 0; n < s.n; ++n) {
          const T* go = self.grad.plane(n, c0);
          T* gp = g.plane(n, 0);
          for (std::size_t i = 0; i < P * pc; ++i) gp[i] += go[i];
        }
      }
      c0 += pc;
    }
  });
}

template <class T>
Var<T> slice_channels(const Var<T>& a, int first, int count) {
  const Shape s = a.shape();
  if (first < 0 || count <= 0 || first + count > s.c) {
    throw ShapeError("slice_channels out of range on " + s.str());
  }
  Shape os = s;
  os.c = count;
  Tensor<T> out(os);
  const auto P = s.plane();
  for (int n = 0; n < s.n; ++n) std::copy_n(a.value().plane(n, first), P * count, out.plane(n, 0));
  return make_result<T>(std::move(out), {a}, [first, count](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    const Shape s = g.shape();
    const auto P = s.plane();
    for (int n = 0; n < s.n; ++n) {
      const T* go = self.grad.plane(n, 0);
      T* gp = g.plane(n, first);
      for (std::size_t i = 0; i < P * count; ++i) gp[i] += go[i];
    }
  });
}

template <class T>
Var<T> concat_batch(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch of nothing");
  Shape s = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("concat_batch: " + s.str() + " vs " + ps.str());
    }
    total += ps.n;
  }
  s.n = total;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return make_result<T>(std::move(out), parts, [](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const auto sz = self.parents[k]->value.size();
      if (auto* p = detail::grad_target(self, k)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < sz; ++i) g[i] += self.grad[off + i];
      }
      off += sz;
    }
  });
}

// Rows of a along the batch axis, in the order given (repeats allowed).
template <class T>
Var<T> gather_batch(const Var<T>& a, std::vector<int> rows) {
  Shape s = a.shape();
  const auto per = s.sample();
  for (int r : rows) {
    if (r < 0 || r >= s.n) throw ShapeError("gather_batch row out of range");
  }
  s.n = static_cast<int>(rows.size());
  Tensor<T> out(s);
  for (std::size_t k = 0; k < rows.size(); ++k)
    std::copy_n(a.value().data() + rows[k] * per, per, out.data() + k * per);
  return make_result<T>(std::move(out), {a}, [rows = std::move(rows), per](Node<T>& self) {
    Node<T>* p = detail::grad_target(self, 0);
    if (!p) return;
    auto& g = p->grad_buffer();
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t i = 0; i < per; ++i) g[rows[k] * per + i] += self.grad[k * per + i];
  });
}

}  // namespace homoseg::ad
