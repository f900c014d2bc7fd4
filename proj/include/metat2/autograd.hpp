#pragma once

// Minimal reverse-mode automatic differentiation over NCHW tensors.
//
// A Var is a handle to a node of a dynamically recorded graph. Ops record a
// backward closure only when grad mode is on and at least one input requires
// a gradient, so inference code pays nothing for the tape.

#include <Eigen/Core>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace metat2 {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const { return static_cast<std::size_t>(n) * c * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t per_sample() const { return static_cast<std::size_t>(c) * h * w; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  return "[" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + "]";
}

// Storage is aligned so that vectorised kernels split every buffer the same
// way; with unaligned heads the rounding of a reduction depends on where the
// allocator happened to place it.
template <class S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

template <class S>
struct Tensor {
  Shape shape;
  Buffer<S> data;

  Tensor() = default;
  explicit Tensor(Shape s, S fill = S(0)) : shape(s), data(s.numel(), fill) {}
  template <class Alloc>
  Tensor(Shape s, const std::vector<S, Alloc>& values) : shape(s), data(values.begin(), values.end()) {
    if (data.size() != shape.numel()) throw std::invalid_argument("Tensor: data size does not match shape");
  }
  Tensor(Shape s, std::initializer_list<S> values) : Tensor(s, std::vector<S>(values)) {}

  std::size_t numel() const { return data.size(); }
  S& operator[](std::size_t i) { return data[i]; }
  const S& operator[](std::size_t i) const { return data[i]; }
};

namespace ag {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class S>
struct Node {
  Shape shape;
  Buffer<S> value;
  Buffer<S> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Whether each parent required a gradient when this node was recorded.
  std::vector<char> parent_wants;
  std::function<void(Node&)> backward;

  bool wants(std::size_t i) const { return parent_wants[i] != 0; }

  S* grad_data() {
    if (grad.empty()) grad.assign(value.size(), S(0));
    return grad.data();
  }
};

template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<S> t) { return leaf(std::move(t), false); }

  static Var leaf(Tensor<S> t, bool requires_grad) {
    auto node = std::make_shared<Node<S>>();
    node->shape = t.shape;
    node->value = std::move(t.data);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  std::span<const S> value() const { return node_->value; }
  std::span<S> mutable_value() { return node_->value; }
  std::span<const S> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  S item() const {
    if (numel() != 1) throw std::logic_error("Var::item on non-scalar");
    return node_->value[0];
  }

  Tensor<S> tensor() const { return Tensor<S>(node_->shape, node_->value); }

  // Same values, cut from the graph.
  Var detach() const { return constant(tensor()); }

  Node<S>* node() const { return node_.get(); }
  const std::shared_ptr<Node<S>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <class S>
Var<S> make_result(Shape shape, std::initializer_list<Var<S>> inputs) {
  auto node = std::make_shared<Node<S>>();
  node->shape = shape;
  node->value.assign(shape.numel(), S(0));
  node->is_leaf = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      for (const auto& in : inputs) {
        node->parents.push_back(in.ptr());
        node->parent_wants.push_back(in.defined() && in.requires_grad());
      }
    }
  }
  return Var<S>(std::move(node));
}

inline void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

template <class S>
Buffer<S>& scratch(int slot) {
  thread_local Buffer<S> buffers[4];
  return buffers[slot];
}

}  // namespace detail

// Accumulates d(loss)/d(leaf) into every leaf that requires grad. `loss` must
// be a scalar. Interior gradients and closures are released as they are
// consumed, so a graph can be backpropagated once.
template <class S>
void backward(const Var<S>& loss) {
  if (loss.numel() != 1) throw std::logic_error("backward: loss must be a scalar");
  if (!loss.requires_grad()) return;

  // `order` owns its nodes: clearing a node's parents below must not free
  // nodes that are still waiting for their gradient.
  using NodePtr = std::shared_ptr<Node<S>>;
  std::vector<NodePtr> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.ptr(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const std::size_t i = next++;
      NodePtr parent = node->parents[i];
      if (node->wants(i) && !visited.count(parent.get())) {
        visited.insert(parent.get());
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  loss.node()->grad_data()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* node = it->get();
    if (node->is_leaf) continue;
    if (node->backward && !node->grad.empty()) node->backward(*node);
    node->backward = nullptr;
    node->parents.clear();
    node->parent_wants.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <class S>
Var<S> axpby(S a, const Var<S>& x, S b, const Var<S>& y) {
  detail::require(x.shape() == y.shape(), "axpby: shape mismatch");
  auto out = detail::make_result<S>(x.shape(), {x, y});
  const auto xv = x.value();
  const auto yv = y.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a * xv[i] + b * yv[i];
  if (out.requires_grad()) {
    out.node()->backward = [a, b](Node<S>& self) {
      const S* g = self.grad.data();
      if (self.wants(0)) {
        S* gx = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += a * g[i];
      }
      if (self.wants(1)) {
        S* gy = self.parents[1]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gy[i] += b * g[i];
      }
    };
  }
  return out;
}

template <class S>
Var<S> add(const Var<S>& x, const Var<S>& y) {
  return axpby(S(1), x, S(1), y);
}

template <class S>
Var<S> sub(const Var<S>& x, const Var<S>& y) {
  return axpby(S(1), x, S(-1), y);
}

template <class S>
Var<S> scale(const Var<S>& x, S a) {
  auto out = detail::make_result<S>(x.shape(), {x});
  const auto xv = x.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a * xv[i];
  if (out.requires_grad()) {
    out.node()->backward = [a](Node<S>& self) {
      S* gx = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += a * self.grad[i];
    };
  }
  return out;
}

template <class S>
Var<S> mul(const Var<S>& x, const Var<S>& y) {
  detail::require(x.shape() == y.shape(), "mul: shape mismatch");
  auto out = detail::make_result<S>(x.shape(), {x, y});
  const auto xv = x.value();
  const auto yv = y.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * yv[i];
  if (out.requires_grad()) {
    out.node()->backward = [](Node<S>& self) {
      const auto& xv = self.parents[0]->value;
      const auto& yv = self.parents[1]->value;
      if (self.wants(0)) {
        S* gx = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * yv[i];
      }
      if (self.wants(1)) {
        S* gy = self.parents[1]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gy[i] += self.grad[i] * xv[i];
      }
    };
  }
  return out;
}

// Per-sample scalar multipliers: out[n, ...] = coef[n] * x[n, ...].
template <class S>
Var<S> scale_per_sample(const Var<S>& x, std::vector<S> coef) {
  detail::require(coef.size() == static_cast<std::size_t>(x.shape().n), "scale_per_sample: size mismatch");
  auto out = detail::make_result<S>(x.shape(), {x});
  const std::size_t per = x.shape().per_sample();
  const auto xv = x.value();
  auto ov = out.mutable_value();
  for (std::size_t n = 0; n < coef.size(); ++n)
    for (std::size_t i = 0; i < per; ++i) ov[n * per + i] = coef[n] * xv[n * per + i];
  if (out.requires_grad()) {
    out.node()->backward = [coef = std::move(coef), per](Node<S>& self) {
      S* gx = self.parents[0]->grad_data();
      for (std::size_t n = 0; n < coef.size(); ++n)
        for (std::size_t i = 0; i < per; ++i) gx[n * per + i] += coef[n] * self.grad[n * per + i];
    };
  }
  return out;
}

template <class S, class F, class DF>
Var<S> unary(const Var<S>& x, F f, DF df) {
  auto out = detail::make_result<S>(x.shape(), {x});
  const auto xv = x.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(xv[i]);
  if (out.requires_grad()) {
    out.node()->backward = [df](Node<S>& self) {
      const auto& xv = self.parents[0]->value;
      S* gx = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.value[i]);
    };
  }
  return out;
}

template <class S>
Var<S> relu(const Var<S>& x) {
  return unary(
      x, [](S v) { return v > S(0) ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Var<S> sigmoid(const Var<S>& x) {
  return unary(
      x, [](S v) { return S(1) / (S(1) + std::exp(-v)); }, [](S, S y) { return y * (S(1) - y); });
}

template <class S>
Var<S> silu(const Var<S>& x) {
  return unary(
      x, [](S v) { return v / (S(1) + std::exp(-v)); },
      [](S v, S) {
        const S s = S(1) / (S(1) + std::exp(-v));
        return s * (S(1) + v * (S(1) - s));
      });
}

// Gradient passes only where the input lies strictly inside (lo, hi).
template <class S>
Var<S> clamp(const Var<S>& x, S lo, S hi) {
  return unary(
      x, [lo, hi](S v) { return std::clamp(v, lo, hi); },
      [lo, hi](S v, S) { return (v > lo && v < hi) ? S(1) : S(0); });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class S>
Var<S> mean(const Var<S>& x) {
  auto out = detail::make_result<S>(Shape{}, {x});
  S acc = 0;
  for (S v : x.value()) acc += v;
  const S inv = S(1) / static_cast<S>(x.numel());
  out.mutable_value()[0] = acc * inv;
  if (out.requires_grad()) {
    out.node()->backward = [inv](Node<S>& self) {
      S* gx = self.parents[0]->grad_data();
      const S g = self.grad[0] * inv;
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) gx[i] += g;
    };
  }
  return out;
}

// Mean of squared differences over all elements.
template <class S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
  detail::require(a.shape() == b.shape(), "mse: shape mismatch");
  auto out = detail::make_result<S>(Shape{}, {a, b});
  const auto av = a.value();
  const auto bv = b.value();
  S acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const S d = av[i] - bv[i];
    acc += d * d;
  }
  const S inv = S(1) / static_cast<S>(av.size());
  out.mutable_value()[0] = acc * inv;
  if (out.requires_grad()) {
    out.node()->backward = [inv](Node<S>& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      const S g = S(2) * inv * self.grad[0];
      if (self.wants(0)) {
        S* ga = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (av[i] - bv[i]);
      }
      if (self.wants(1)) {
        S* gb = self.parents[1]->grad_data();
        for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
      }
    };
  }
  return out;
}

// Soft Dice loss averaged over the batch:
//   mean_n [ 1 - (2 sum(p g) + eps) / (sum p + sum g + eps) ].
// `gt` is treated as a constant.
template <class S>
Var<S> soft_dice_loss(const Var<S>& pred, const Tensor<S>& gt, S eps) {
  detail::require(pred.shape() == gt.shape, "soft_dice_loss: shape mismatch");
  const int batch = pred.shape().n;
  const std::size_t per = pred.shape().per_sample();
  std::vector<S> num(batch), den(batch);
  const auto pv = pred.value();
  S acc = 0;
  for (int n = 0; n < batch; ++n) {
    S inter = 0, sp = 0, sg = 0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      inter += pv[i] * gt.data[i];
      sp += pv[i];
      sg += gt.data[i];
    }
    num[n] = S(2) * inter + eps;
    den[n] = sp + sg + eps;
    acc += S(1) - num[n] / den[n];
  }
  auto out = detail::make_result<S>(Shape{}, {pred});
  out.mutable_value()[0] = acc / static_cast<S>(batch);
  if (out.requires_grad()) {
    out.node()->backward = [gt, num = std::move(num), den = std::move(den), per, batch](Node<S>& self) {
      S* gp = self.parents[0]->grad_data();
      const S g = self.grad[0] / static_cast<S>(batch);
      for (int n = 0; n < batch; ++n) {
        const S inv_den2 = S(1) / (den[n] * den[n]);
        for (std::size_t i = n * per; i < (n + 1) * per; ++i)
          gp[i] -= g * (S(2) * gt.data[i] * den[n] - num[n]) * inv_den2;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops

template <class S>
Var<S> concat_channels(const Var<S>& a, const Var<S>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  detail::require(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w, "concat_channels: shape mismatch");
  Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
  auto out = detail::make_result<S>(so, {a, b});
  const std::size_t pa = sa.per_sample(), pb = sb.per_sample(), po = so.per_sample();
  auto ov = out.mutable_value();
  const auto av = a.value();
  const auto bv = b.value();
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(av.begin() + n * pa, pa, ov.begin() + n * po);
    std::copy_n(bv.begin() + n * pb, pb, ov.begin() + n * po + pa);
  }
  if (out.requires_grad()) {
    out.node()->backward = [pa, pb, po, batch = sa.n](Node<S>& self) {
      if (self.wants(0)) {
        S* ga = self.parents[0]->grad_data();
        for (int n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < pa; ++i) ga[n * pa + i] += self.grad[n * po + i];
      }
      if (self.wants(1)) {
        S* gb = self.parents[1]->grad_data();
        for (int n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < pb; ++i) gb[n * pb + i] += self.grad[n * po + pa + i];
      }
    };
  }
  return out;
}

template <class S>
Var<S> avg_pool2(const Var<S>& x) {
  const Shape s = x.shape();
  detail::require(s.h % 2 == 0 && s.w % 2 == 0, "avg_pool2: spatial dims must be even");
  Shape so{s.n, s.c, s.h / 2, s.w / 2};
  auto out = detail::make_result<S>(so, {x});
  const auto xv = x.value();
  auto ov = out.mutable_value();
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const S* in = xv.data() + p * s.plane();
    S* o = ov.data() + p * so.plane();
    for (int y = 0; y < so.h; ++y)
      for (int xx = 0; xx < so.w; ++xx) {
        const S* r0 = in + (2 * y) * s.w + 2 * xx;
        const S* r1 = r0 + s.w;
        o[y * so.w + xx] = S(0.25) * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  }
  if (out.requires_grad()) {
    out.node()->backward = [s, so, planes](Node<S>& self) {
      S* gx = self.parents[0]->grad_data();
      for (std::size_t p = 0; p < planes; ++p) {
        S* gi = gx + p * s.plane();
        const S* go = self.grad.data() + p * so.plane();
        for (int y = 0; y < so.h; ++y)
          for (int xx = 0; xx < so.w; ++xx) {
            const S g = S(0.25) * go[y * so.w + xx];
            S* r0 = gi + (2 * y) * s.w + 2 * xx;
            S* r1 = r0 + s.w;
            r0[0] += g;
            r0[1] += g;
            r1[0] += g;
            r1[1] += g;
          }
      }
    };
  }
  return out;
}

namespace detail {

// Source taps for 2x bilinear upsampling with half-pixel centers.
struct Taps {
  std::vector<int> i0, i1;
  std::vector<double> w1;
};

inline Taps upsample_taps(int in_len) {
  const int out_len = 2 * in_len;
  Taps t;
  t.i0.resize(out_len);
  t.i1.resize(out_len);
  t.w1.resize(out_len);
  for (int o = 0; o < out_len; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_len - 1));
    const int lo = static_cast<int>(std::floor(src));
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, in_len - 1);
    t.w1[o] = src - lo;
  }
  return t;
}

}  // namespace detail

template <class S>
Var<S> upsample2_bilinear(const Var<S>& x) {
  const Shape s = x.shape();
  Shape so{s.n, s.c, 2 * s.h, 2 * s.w};
  auto out = detail::make_result<S>(so, {x});
  const auto ty = detail::upsample_taps(s.h);
  const auto tx = detail::upsample_taps(s.w);
  const auto xv = x.value();
  auto ov = out.mutable_value();
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const S* in = xv.data() + p * s.plane();
    S* o = ov.data() + p * so.plane();
    for (int y = 0; y < so.h; ++y) {
      const S wy = static_cast<S>(ty.w1[y]);
      const S* r0 = in + ty.i0[y] * s.w;
      const S* r1 = in + ty.i1[y] * s.w;
      for (int xx = 0; xx < so.w; ++xx) {
        const S wx = static_cast<S>(tx.w1[xx]);
        const S top = (S(1) - wx) * r0[tx.i0[xx]] + wx * r0[tx.i1[xx]];
        const S bot = (S(1) - wx) * r1[tx.i0[xx]] + wx * r1[tx.i1[xx]];
        o[y * so.w + xx] = (S(1) - wy) * top + wy * bot;
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [s, so, planes, ty, tx](Node<S>& self) {
      S* gx = self.parents[0]->grad_data();
      for (std::size_t p = 0; p < planes; ++p) {
        S* gi = gx + p * s.plane();
        const S* go = self.grad.data() + p * so.plane();
        for (int y = 0; y < so.h; ++y) {
          const S wy = static_cast<S>(ty.w1[y]);
          S* r0 = gi + ty.i0[y] * s.w;
          S* r1 = gi + ty.i1[y] * s.w;
          for (int xx = 0; xx < so.w; ++xx) {
            const S wx = static_cast<S>(tx.w1[xx]);
            const S g = go[y * so.w + xx];
            r0[tx.i0[xx]] += (S(1) - wy) * (S(1) - wx) * g;
            r0[tx.i1[xx]] += (S(1) - wy) * wx * g;
            r1[tx.i0[xx]] += wy * (S(1) - wx) * g;
            r1[tx.i1[xx]] += wy * wx * g;
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense layers

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapRowMat = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMapRowMat = Eigen::Map<const RowMat<S>>;

// x: [N, Din] (stored in n and c), weight: [Dout, Din] (n, c), bias: [Dout].
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  const int batch = x.shape().n;
  const int din = x.shape().c;
  const int dout = weight.shape().n;
  detail::require(x.shape().per_sample() == static_cast<std::size_t>(din), "linear: input must be [N, Din]");
  detail::require(weight.shape().c == din, "linear: weight shape mismatch");
  detail::require(bias.numel() == static_cast<std::size_t>(dout), "linear: bias shape mismatch");
  auto out = detail::make_result<S>(Shape{batch, dout, 1, 1}, {x, weight, bias});
  ConstMapRowMat<S> X(x.value().data(), batch, din);
  ConstMapRowMat<S> W(weight.value().data(), dout, din);
  MapRowMat<S> Y(out.mutable_value().data(), batch, dout);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.value().data(), dout);
  if (out.requires_grad()) {
    out.node()->backward = [batch, din, dout](Node<S>& self) {
      ConstMapRowMat<S> G(self.grad.data(), batch, dout);
      auto& xn = self.parents[0];
      auto& wn = self.parents[1];
      auto& bn = self.parents[2];
      if (self.wants(0)) {
        MapRowMat<S> GX(xn->grad_data(), batch, din);
        ConstMapRowMat<S> W(wn->value.data(), dout, din);
        GX.noalias() += G * W;
      }
      if (self.wants(1)) {
        MapRowMat<S> GW(wn->grad_data(), dout, din);
        ConstMapRowMat<S> X(xn->value.data(), batch, din);
        GW.noalias() += G.transpose() * X;
      }
      if (self.wants(2)) {
        Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> GB(bn->grad_data(), dout);
        GB += G.colwise().sum();
      }
    };
  }
  return out;
}

// out[n, c, :, :] = x[n, c, :, :] + e[n, c].
template <class S>
Var<S> add_channel_bias(const Var<S>& x, const Var<S>& e) {
  const Shape s = x.shape();
  detail::require(e.shape().n == s.n && e.shape().per_sample() == static_cast<std::size_t>(s.c),
                  "add_channel_bias: bias must be [N, C]");
  auto out = detail::make_result<S>(s, {x, e});
  const auto xv = x.value();
  const auto ev = e.value();
  auto ov = out.mutable_value();
  const std::size_t plane = s.plane();
  for (std::size_t p = 0; p < static_cast<std::size_t>(s.n) * s.c; ++p)
    for (std::size_t i = 0; i < plane; ++i) ov[p * plane + i] = xv[p * plane + i] + ev[p];
  if (out.requires_grad()) {
    out.node()->backward = [s, plane](Node<S>& self) {
      const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
      if (self.wants(0)) {
        S* gx = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
      }
      if (self.wants(1)) {
        S* ge = self.parents[1]->grad_data();
        for (std::size_t p = 0; p < planes; ++p) {
          S acc = 0;
          for (std::size_t i = 0; i < plane; ++i) acc += self.grad[p * plane + i];
          ge[p] += acc;
        }
      }
    };
  }
  return out;
}

// Group normalisation: each sample's channels are split into `groups`
// contiguous groups, each normalised to zero mean and unit variance, then
// scaled and shifted per channel. gamma and beta are [1, C, 1, 1].
template <class S>
Var<S> group_norm(const Var<S>& x, int groups, const Var<S>& gamma, const Var<S>& beta, double eps = 1e-5) {
  const Shape s = x.shape();
  detail::require(groups > 0 && s.c % groups == 0, "group_norm: groups must divide the channel count");
  detail::require(gamma.numel() == static_cast<std::size_t>(s.c) && beta.numel() == static_cast<std::size_t>(s.c),
                  "group_norm: gamma and beta must be [1, C, 1, 1]");
  auto out = detail::make_result<S>(s, {x, gamma, beta});
  const std::size_t plane = s.plane(), cg = static_cast<std::size_t>(s.c / groups), len = cg * plane;
  const std::size_t n_groups = static_cast<std::size_t>(s.n) * groups;
  Buffer<S> xhat(x.numel());
  std::vector<S> inv(n_groups);
  const auto xv = x.value();
  const auto gv = gamma.value();
  const auto bv = beta.value();
  auto ov = out.mutable_value();
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::size_t off = g * len;
    double mean = 0;
    for (std::size_t i = 0; i < len; ++i) mean += xv[off + i];
    mean /= static_cast<double>(len);
    double var = 0;
    for (std::size_t i = 0; i < len; ++i) var += (xv[off + i] - mean) * (xv[off + i] - mean);
    var /= static_cast<double>(len);
    inv[g] = static_cast<S>(1.0 / std::sqrt(var + eps));
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t c = (g % groups) * cg + i / plane;
      xhat[off + i] = static_cast<S>((xv[off + i] - mean) * inv[g]);
      ov[off + i] = xhat[off + i] * gv[c] + bv[c];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [s, groups, plane, cg, len, n_groups, xhat = std::move(xhat),
                            inv = std::move(inv)](Node<S>& self) {
      const S* gam = self.parents[1]->value.data();
      const S* dy = self.grad.data();
      if (self.wants(1) || self.wants(2)) {
        S* gg = self.wants(1) ? self.parents[1]->grad_data() : nullptr;
        S* gb = self.wants(2) ? self.parents[2]->grad_data() : nullptr;
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
            S a = 0, b = 0;
            for (std::size_t i = 0; i < plane; ++i) {
              a += dy[off + i] * xhat[off + i];
              b += dy[off + i];
            }
            if (gg) gg[c] += a;
            if (gb) gb[c] += b;
          }
      }
      if (self.wants(0)) {
        S* gx = self.parents[0]->grad_data();
        for (std::size_t g = 0; g < n_groups; ++g) {
          const std::size_t off = g * len;
          double m1 = 0, m2 = 0;
          for (std::size_t i = 0; i < len; ++i) {
            const double d = dy[off + i] * gam[(g % groups) * cg + i / plane];
            m1 += d;
            m2 += d * xhat[off + i];
          }
          m1 /= static_cast<double>(len);
          m2 /= static_cast<double>(len);
          for (std::size_t i = 0; i < len; ++i) {
            const double d = dy[off + i] * gam[(g % groups) * cg + i / plane];
            gx[off + i] += static_cast<S>(inv[g] * (d - m1 - xhat[off + i] * m2));
          }
        }
      }
    };
  }
  return out;
}

namespace detail {

// col: [C*k*k, H*W], zero padding k/2, stride 1.
template <class S>
void im2col(const S* in, int c, int h, int w, int k, S* col) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const S* plane = in + ch * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        S* row = col + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * hw;
        const int dx = kx - pad;
        const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int iy = y + ky - pad;
          S* dst = row + static_cast<std::size_t>(y) * w;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + w, S(0));
            continue;
          }
          const S* src = plane + static_cast<std::size_t>(iy) * w;
          std::fill(dst, dst + x_lo, S(0));
          for (int x = x_lo; x < x_hi; ++x) dst[x] = src[x + dx];
          std::fill(dst + x_hi, dst + w, S(0));
        }
      }
    }
  }
}

template <class S>
void col2im_add(const S* col, int c, int h, int w, int k, S* out) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    S* plane = out + ch * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const S* row = col + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * hw;
        const int dx = kx - pad;
        const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const S* src = row + static_cast<std::size_t>(y) * w;
          S* dst = plane + static_cast<std::size_t>(iy) * w;
          for (int x = x_lo; x < x_hi; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

}  // namespace detail

// Same-padded, stride-1 2D convolution with an odd square kernel.
// weight: [Cout, Cin, k, k], bias: [Cout].
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  detail::require(ws.c == s.c, "conv2d: input channel mismatch");
  detail::require(ws.h == ws.w && ws.h % 2 == 1, "conv2d: kernel must be odd and square");
  detail::require(bias.numel() == static_cast<std::size_t>(ws.n), "conv2d: bias shape mismatch");
  const int k = ws.h;
  const int cout = ws.n;
  const int kdim = s.c * k * k;
  const int hw = static_cast<int>(s.plane());
  Shape so{s.n, cout, s.h, s.w};
  auto out = detail::make_result<S>(so, {x, weight, bias});

  ConstMapRowMat<S> W(weight.value().data(), cout, kdim);
  const Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> B(bias.value().data(), cout);
  auto& col = detail::scratch<S>(0);
  if (k > 1) col.resize(static_cast<std::size_t>(kdim) * hw);
  for (int n = 0; n < s.n; ++n) {
    const S* in = x.value().data() + n * s.per_sample();
    MapRowMat<S> Y(out.mutable_value().data() + n * so.per_sample(), cout, hw);
    if (k == 1) {
      Y.noalias() = W * ConstMapRowMat<S>(in, kdim, hw);
    } else {
      detail::im2col(in, s.c, s.h, s.w, k, col.data());
      Y.noalias() = W * ConstMapRowMat<S>(col.data(), kdim, hw);
    }
    Y.colwise() += B;
  }

  if (out.requires_grad()) {
    out.node()->backward = [s, so, k, cout, kdim, hw](Node<S>& self) {
      auto& xn = self.parents[0];
      auto& wn = self.parents[1];
      auto& bn = self.parents[2];
      ConstMapRowMat<S> W(wn->value.data(), cout, kdim);
      auto& col = detail::scratch<S>(0);
      auto& dcol = detail::scratch<S>(1);
      if (k > 1) col.resize(static_cast<std::size_t>(kdim) * hw);
      for (int n = 0; n < s.n; ++n) {
        ConstMapRowMat<S> G(self.grad.data() + n * so.per_sample(), cout, hw);
        const S* in = xn->value.data() + n * s.per_sample();
        if (self.wants(2)) {
          Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> GB(bn->grad_data(), cout);
          GB += G.rowwise().sum();
        }
        if (self.wants(1)) {
          MapRowMat<S> GW(wn->grad_data(), cout, kdim);
          if (k == 1) {
            GW.noalias() += G * ConstMapRowMat<S>(in, kdim, hw).transpose();
          } else {
            detail::im2col(in, s.c, s.h, s.w, k, col.data());
            GW.noalias() += G * ConstMapRowMat<S>(col.data(), kdim, hw).transpose();
          }
        }
        if (self.wants(0)) {
          S* gx = xn->grad_data() + n * s.per_sample();
          if (k == 1) {
            MapRowMat<S>(gx, kdim, hw).noalias() += W.transpose() * G;
          } else {
            dcol.resize(static_cast<std::size_t>(kdim) * hw);
            MapRowMat<S>(dcol.data(), kdim, hw).noalias() = W.transpose() * G;
            detail::col2im_add(dcol.data(), s.c, s.h, s.w, k, gx);
          }
        }
      }
    };
  }
  return out;
}

}  // namespace ag
}  // namespace metat2
