#pragma once

#include "metat2/autograd.hpp"
#include "metat2/errors.hpp"
#include "metat2/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace metat2::nn {

using ag::Var;

// Ordered collection of named trainable tensors.
template <class S>
class ParamSet {
 public:
  Var<S> add(std::string name, Tensor<S> init) {
    auto v = Var<S>::leaf(std::move(init), true);
    names_.push_back(std::move(name));
    vars_.push_back(v);
    return v;
  }

  std::size_t size() const { return vars_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Var<S>& operator[](std::size_t i) { return vars_[i]; }
  const Var<S>& operator[](std::size_t i) const { return vars_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t count() const {
    std::size_t total = 0;
    for (const auto& v : vars_) total += v.numel();
    return total;
  }

  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& v : vars_) v.set_requires_grad(on);
  }

  bool all_finite() const {
    for (const auto& v : vars_)
      for (S x : v.value())
        if (!std::isfinite(x)) return false;
    return true;
  }

  // Flattened copy of all values, in declaration order.
  std::vector<S> flat() const {
    std::vector<S> out;
    out.reserve(count());
    for (const auto& v : vars_) out.insert(out.end(), v.value().begin(), v.value().end());
    return out;
  }

  std::vector<S> flat_grad() const {
    std::vector<S> out;
    out.reserve(count());
    for (const auto& v : vars_) {
      if (v.has_grad())
        out.insert(out.end(), v.grad().begin(), v.grad().end());
      else
        out.insert(out.end(), v.numel(), S(0));
    }
    return out;
  }

  // Copies values from another set with identical layout, converting scalar type.
  template <class U>
  void assign_from(const ParamSet<U>& other) {
    if (other.size() != size()) throw std::invalid_argument("ParamSet::assign_from: layout mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      auto dst = vars_[i].mutable_value();
      const auto src = other[i].value();
      if (dst.size() != src.size() || other.name(i) != names_[i])
        throw std::invalid_argument("ParamSet::assign_from: layout mismatch at " + names_[i]);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<S>(src[j]);
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<S>> vars_;
};

template <class S>
Tensor<S> he_normal(Shape shape, int fan_in, Rng& rng) {
  Tensor<S> t(shape);
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : t.data) v = static_cast<S>(std * rng.normal());
  return t;
}

template <class S>
struct Conv {
  Var<S> weight;
  Var<S> bias;

  static Conv make(ParamSet<S>& ps, const std::string& name, int cin, int cout, int k, Rng& rng,
                   bool zero_init = false) {
    Conv c;
    Shape ws{cout, cin, k, k};
    c.weight = ps.add(name + ".w", zero_init ? Tensor<S>(ws) : he_normal<S>(ws, cin * k * k, rng));
    c.bias = ps.add(name + ".b", Tensor<S>(Shape{1, cout, 1, 1}));
    return c;
  }

  Var<S> operator()(const Var<S>& x) const { return ag::conv2d(x, weight, bias); }
};

template <class S>
struct Linear {
  Var<S> weight;
  Var<S> bias;

  static Linear make(ParamSet<S>& ps, const std::string& name, int din, int dout, Rng& rng) {
    Linear l;
    l.weight = ps.add(name + ".w", he_normal<S>(Shape{dout, din, 1, 1}, din, rng));
    l.bias = ps.add(name + ".b", Tensor<S>(Shape{1, dout, 1, 1}));
    return l;
  }

  Var<S> operator()(const Var<S>& x) const { return ag::linear(x, weight, bias); }
};

// Group normalisation with a per-channel affine; up to eight groups.
template <class S>
struct GroupNorm {
  Var<S> gamma;
  Var<S> beta;
  int groups = 1;

  static GroupNorm make(ParamSet<S>& ps, const std::string& name, int channels) {
    GroupNorm g;
    g.groups = groups_for(channels);
    g.gamma = ps.add(name + ".g", Tensor<S>(Shape{1, channels, 1, 1}, S(1)));
    g.beta = ps.add(name + ".b", Tensor<S>(Shape{1, channels, 1, 1}));
    return g;
  }

  static int groups_for(int channels) {
    for (int g = 8; g > 1; --g)
      if (channels % g == 0) return g;
    return 1;
  }

  Var<S> operator()(const Var<S>& x) const { return ag::group_norm(x, groups, gamma, beta); }
};

// Sinusoidal embedding of integer timesteps, [N, dim].
template <class S>
Tensor<S> timestep_embedding(const std::vector<int>& t, int dim) {
  Tensor<S> out(Shape{static_cast<int>(t.size()), dim, 1, 1});
  const int half = dim / 2;
  for (std::size_t n = 0; n < t.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / std::max(half, 1));
      const double arg = t[n] * freq;
      out.data[n * dim + i] = static_cast<S>(std::sin(arg));
      out.data[n * dim + half + i] = static_cast<S>(std::cos(arg));
    }
  }
  return out;
}

enum class Activation { kRelu, kSilu };

struct UNetConfig {
  int in_channels = 2;
  int out_channels = 1;
  int base_channels = 16;
  int depth = 3;           // number of resolution levels
  int time_embed_dim = 0;  // 0 disables timestep conditioning
  Activation activation = Activation::kRelu;
  bool zero_init_head = false;
};

// Encoder/decoder UNet: two conv-norm-activation layers per level, 2x
// average pooling down, bilinear upsampling with skip concatenation up, 1x1
// head. With a time embedding, a per-level projection is added after the
// first normalisation of every block.
template <class S>
class UNet {
 public:
  UNet() = default;

  UNet(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.depth < 1) throw std::invalid_argument("UNet: depth must be >= 1");
    if (cfg.base_channels < 1) throw std::invalid_argument("UNet: base_channels must be >= 1");
    if (cfg.time_embed_dim < 0 || cfg.time_embed_dim % 2 != 0)
      throw std::invalid_argument("UNet: time_embed_dim must be even and >= 0");
    const bool timed = cfg.time_embed_dim > 0;
    if (timed) time_mlp_ = Linear<S>::make(params_, "time.mlp", cfg.time_embed_dim, cfg.time_embed_dim, rng);
    int cin = cfg.in_channels;
    for (int l = 0; l < cfg.depth; ++l) {
      const int ch = channels(l);
      const std::string p = "enc" + std::to_string(l);
      Block b;
      b.conv1 = Conv<S>::make(params_, p + ".conv1", cin, ch, 3, rng);
      b.norm1 = GroupNorm<S>::make(params_, p + ".norm1", ch);
      if (timed) b.time_proj = Linear<S>::make(params_, p + ".time", cfg.time_embed_dim, ch, rng);
      b.conv2 = Conv<S>::make(params_, p + ".conv2", ch, ch, 3, rng);
      b.norm2 = GroupNorm<S>::make(params_, p + ".norm2", ch);
      enc_.push_back(b);
      cin = ch;
    }
    for (int l = cfg.depth - 2; l >= 0; --l) {
      const int ch = channels(l);
      const std::string p = "dec" + std::to_string(l);
      Block b;
      b.conv1 = Conv<S>::make(params_, p + ".conv1", channels(l + 1) + ch, ch, 3, rng);
      b.norm1 = GroupNorm<S>::make(params_, p + ".norm1", ch);
      if (timed) b.time_proj = Linear<S>::make(params_, p + ".time", cfg.time_embed_dim, ch, rng);
      b.conv2 = Conv<S>::make(params_, p + ".conv2", ch, ch, 3, rng);
      b.norm2 = GroupNorm<S>::make(params_, p + ".norm2", ch);
      dec_.push_back(b);
    }
    head_ = Conv<S>::make(params_, "head", channels(0), cfg.out_channels, 1, rng, cfg.zero_init_head);
  }

  // Copies are deep: the new network owns its own weight tensors.
  UNet(const UNet& other) : UNet(other.cfg_, scratch_rng()) { params_.assign_from(other.params_); }
  UNet& operator=(const UNet& other) {
    if (this != &other) *this = UNet(other);
    return *this;
  }
  UNet(UNet&&) noexcept = default;
  UNet& operator=(UNet&&) noexcept = default;

  // Converting copy, e.g. float weights into a double network.
  template <class U>
  static UNet convert_from(const UNet<U>& other) {
    UNet out(other.config(), scratch_rng());
    out.params_.assign_from(other.params());
    return out;
  }

  const UNetConfig& config() const { return cfg_; }
  ParamSet<S>& params() { return params_; }
  const ParamSet<S>& params() const { return params_; }

  int channels(int level) const { return cfg_.base_channels << level; }

  // Input spatial dims must be divisible by 2^(depth-1).
  Var<S> forward(const Var<S>& x, const std::vector<int>* timesteps = nullptr) const {
    const int factor = 1 << (cfg_.depth - 1);
    if (x.shape().h % factor != 0 || x.shape().w % factor != 0)
      throw std::invalid_argument("UNet: spatial size must be divisible by " + std::to_string(factor));
    if (x.shape().c != cfg_.in_channels) throw std::invalid_argument("UNet: input channel mismatch");
    Var<S> temb;
    if (cfg_.time_embed_dim > 0) {
      if (timesteps == nullptr || timesteps->size() != static_cast<std::size_t>(x.shape().n))
        throw std::invalid_argument("UNet: one timestep per batch element is required");
      temb = ag::silu(time_mlp_(Var<S>::constant(timestep_embedding<S>(*timesteps, cfg_.time_embed_dim))));
    }
    std::vector<Var<S>> skips;
    Var<S> h = x;
    for (int l = 0; l < cfg_.depth; ++l) {
      if (l > 0) h = ag::avg_pool2(h);
      h = block(enc_[l], h, temb);
      skips.push_back(h);
    }
    for (int i = 0; i < cfg_.depth - 1; ++i) {
      const int l = cfg_.depth - 2 - i;
      h = ag::concat_channels(ag::upsample2_bilinear(h), skips[l]);
      h = block(dec_[i], h, temb);
    }
    return head_(h);
  }

 private:
  struct Block {
    Conv<S> conv1, conv2;
    GroupNorm<S> norm1, norm2;
    Linear<S> time_proj;
  };

  static Rng& scratch_rng() {
    thread_local Rng rng(0);
    return rng;
  }

  Var<S> act(const Var<S>& v) const {
    return cfg_.activation == Activation::kRelu ? ag::relu(v) : ag::silu(v);
  }

  Var<S> block(const Block& b, const Var<S>& in, const Var<S>& temb) const {
    Var<S> h = b.norm1(b.conv1(in));
    if (temb.defined()) h = ag::add_channel_bias(h, b.time_proj(temb));
    h = act(h);
    return act(b.norm2(b.conv2(h)));
  }

  UNetConfig cfg_;
  ParamSet<S> params_;
  Linear<S> time_mlp_;
  std::vector<Block> enc_;
  std::vector<Block> dec_;
  Conv<S> head_;
};

// Adam with bias correction.
template <class S>
class Adam {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(const ParamSet<S>& params, Hyper h = {}) : hyper_(h) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params[i].numel(), S(0));
      v_.emplace_back(params[i].numel(), S(0));
    }
  }

  // Applies one update from the gradients currently stored on `params`.
  // Throws NumericError, leaving weights and moments untouched, when a
  // gradient or an updated weight is not finite.
  void step(ParamSet<S>& params, double lr) {
    if (params.size() != m_.size()) throw std::logic_error("Adam: parameter layout changed");
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].has_grad())
        for (S g : params[i].grad())
          if (!std::isfinite(g)) throw NumericError("non-finite gradient in '" + params.name(i) + "'");
    const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(steps_ + 1));
    const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(steps_ + 1));
    const S b1 = static_cast<S>(hyper_.beta1), b2 = static_cast<S>(hyper_.beta2);
    const S step_size = static_cast<S>(lr / c1);
    const S inv_sqrt_c2 = static_cast<S>(1.0 / std::sqrt(c2));
    const S eps = static_cast<S>(hyper_.eps);
    std::vector<std::vector<S>> next_w(params.size()), next_m(params.size()), next_v(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.has_grad()) continue;
      const auto w = p.value();
      const auto g = p.grad();
      auto& m = next_m[i] = m_[i];
      auto& v = next_v[i] = v_[i];
      auto& nw = next_w[i];
      nw.assign(w.begin(), w.end());
      for (std::size_t j = 0; j < nw.size(); ++j) {
        m[j] = b1 * m[j] + (S(1) - b1) * g[j];
        v[j] = b2 * v[j] + (S(1) - b2) * g[j] * g[j];
        nw[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_c2 + eps);
        if (!std::isfinite(nw[j])) throw NumericError("update of '" + params.name(i) + "' is not finite");
      }
    }
    ++steps_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      std::copy(next_w[i].begin(), next_w[i].end(), params[i].mutable_value().begin());
      m_[i] = std::move(next_m[i]);
      v_[i] = std::move(next_v[i]);
    }
  }

  long long steps() const { return steps_; }
  void set_steps(long long s) { steps_ = s; }
  std::vector<std::vector<S>>& first_moment() { return m_; }
  std::vector<std::vector<S>>& second_moment() { return v_; }
  const std::vector<std::vector<S>>& first_moment() const { return m_; }
  const std::vector<std::vector<S>>& second_moment() const { return v_; }

  bool operator==(const Adam& o) const { return steps_ == o.steps_ && m_ == o.m_ && v_ == o.v_; }

 private:
  Hyper hyper_;
  long long steps_ = 0;
  std::vector<std::vector<S>> m_;
  std::vector<std::vector<S>> v_;
};

}  // namespace metat2::nn
