#pragma once

// Conditional denoising-diffusion translator: source image -> synthetic
// target image. The denoiser is an epsilon-predicting UNet whose input is the
// noisy target concatenated with the source along channels.

#include "metat2/autograd.hpp"
#include "metat2/batch.hpp"
#include "metat2/config_keys.hpp"
#include "metat2/dataset.hpp"
#include "metat2/errors.hpp"
#include "metat2/nn.hpp"
#include "metat2/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace metat2 {

struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  int steps() const { return static_cast<int>(beta.size()); }
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

// Cosine schedule: alpha_bar(t) = f(t+1)/f(0) with
// f(u) = cos^2(((u/T + s)/(1 + s)) * pi/2), betas clipped to (0, 0.999] and
// alpha_bar recomputed as the cumulative product of the clipped alphas.
inline NoiseSchedule build_cosine_schedule(int steps) {
  if (steps < 1) throw ConfigError("diffusion step count must be >= 1");
  auto f = [steps](double u) {
    const double c = std::cos((u / steps + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
    return c * c;
  };
  NoiseSchedule s;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double b = std::min(1.0 - f(t + 1) / f(t), kMaxBeta);
    s.beta[t] = std::max(b, 1e-12);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

// x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps.
template <class S>
Tensor<S> forward_diffuse(const Tensor<S>& x0, int t, const Tensor<S>& eps, const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.steps())
    throw std::out_of_range("forward_diffuse: timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(sched.steps()) + ")");
  if (!(x0.shape == eps.shape)) throw std::invalid_argument("forward_diffuse: shape mismatch");
  const S a = static_cast<S>(std::sqrt(sched.alpha_bar[t]));
  const S b = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar[t]));
  Tensor<S> out(x0.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
  return out;
}

// `count` timesteps evenly spaced over [0, T-1], rounded, largest first.
// A single step uses T-1.
inline std::vector<int> timestep_subsequence(int total, int count) {
  if (count < 1 || count > total)
    throw ConfigError("sampler step count " + std::to_string(count) + " outside [1, " + std::to_string(total) + "]");
  std::vector<int> ts(count);
  for (int k = 0; k < count; ++k) {
    const double pos = count == 1 ? total - 1 : static_cast<double>(k) * (total - 1) / (count - 1);
    ts[count - 1 - k] = static_cast<int>(std::lround(pos));
  }
  return ts;
}

struct TranslatorConfig {
  int steps = 1000;  // T
  int infer_steps = 50;
  int meta_steps = 8;  // S
  std::string schedule_kind = "cosine";
  std::uint64_t seed = 0;
  int base_channels = 32;
  int depth = 3;
  int time_embed_dim = 64;
  // Backpropagate through the final reverse step only.
  bool meta_surrogate = false;

  void validate() const {
    if (schedule_kind != "cosine") throw ConfigError("unsupported schedule_kind '" + schedule_kind + "'");
    if (!(1 <= meta_steps && meta_steps <= infer_steps && infer_steps <= steps))
      throw ConfigError("translator steps must satisfy 1 <= meta_steps <= infer_steps <= T");
    if (base_channels < 1 || depth < 1 || time_embed_dim < 2 || time_embed_dim % 2)
      throw ConfigError("invalid translator architecture");
  }
};

inline void to_json(nlohmann::json& j, const TranslatorConfig& c) {
  j = {{"T", c.steps},
       {"infer_steps", c.infer_steps},
       {"meta_steps", c.meta_steps},
       {"schedule_kind", c.schedule_kind},
       {"seed", c.seed},
       {"base_channels", c.base_channels},
       {"depth", c.depth},
       {"time_embed_dim", c.time_embed_dim},
       {"meta_surrogate", c.meta_surrogate}};
}

inline void from_json(const nlohmann::json& j, TranslatorConfig& c) {
  require_known_keys(j, {"T", "infer_steps", "meta_steps", "schedule_kind", "seed", "base_channels", "depth",
                         "time_embed_dim", "meta_surrogate"},
                     "translator config");
  c.steps = j.value("T", c.steps);
  c.infer_steps = j.value("infer_steps", c.infer_steps);
  c.meta_steps = j.value("meta_steps", c.meta_steps);
  c.schedule_kind = j.value("schedule_kind", c.schedule_kind);
  c.seed = j.value("seed", c.seed);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depth = j.value("depth", c.depth);
  c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
  c.meta_surrogate = j.value("meta_surrogate", c.meta_surrogate);
}

// The translator f_T(.; theta): noise schedule plus denoiser weights.
template <class S>
class Translator {
 public:
  Translator() = default;

  explicit Translator(const TranslatorConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    sched_ = build_cosine_schedule(cfg.steps);
    Rng rng(mix_seed(cfg.seed, "translator.init"));
    net_ = nn::UNet<S>(unet_config(cfg), rng);
  }

  template <class U>
  static Translator convert_from(const Translator<U>& other) {
    Translator out;
    out.cfg_ = other.config();
    out.sched_ = other.schedule();
    out.net_ = nn::UNet<S>::convert_from(other.net());
    return out;
  }

  static nn::UNetConfig unet_config(const TranslatorConfig& cfg) {
    nn::UNetConfig u;
    u.in_channels = 2;
    u.out_channels = 1;
    u.base_channels = cfg.base_channels;
    u.depth = cfg.depth;
    u.time_embed_dim = cfg.time_embed_dim;
    u.activation = nn::Activation::kSilu;
    u.zero_init_head = true;
    return u;
  }

  const TranslatorConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const nn::UNet<S>& net() const { return net_; }
  nn::ParamSet<S>& params() { return net_.params(); }
  const nn::ParamSet<S>& params() const { return net_.params(); }

  // Predicted noise for noisy targets `x_t` conditioned on sources `cond`.
  ag::Var<S> predict_noise(const ag::Var<S>& x_t, const ag::Var<S>& cond, const std::vector<int>& t) const {
    return net_.forward(ag::concat_channels(x_t, cond), &t);
  }

 private:
  TranslatorConfig cfg_;
  NoiseSchedule sched_;
  nn::UNet<S> net_;
};

using Batch = std::vector<const Sample*>;

// One Adam update of the noise-prediction objective
//   mean || eps - eps_theta(x_t, t, m_s) ||^2,  t ~ U[0, T), eps ~ N(0, I).
// Throws NumericError (before updating) when the loss is not finite.
template <class S>
double translator_train_step(Translator<S>& tr, nn::Adam<S>& opt, const Batch& batch, Rng& rng, double lr) {
  if (batch.empty()) throw DataError("translator_train_step: empty batch");
  std::vector<const Image*> src, tgt;
  for (const auto* s : batch) {
    if (!s->target) throw DataError("sample '" + s->id + "' has no target modality for translator training");
    src.push_back(&s->source);
    tgt.push_back(&*s->target);
  }
  const auto x0 = stack<S>(tgt);
  const auto eps = standard_normal<S>(x0.shape, rng);
  std::vector<int> t(batch.size());
  Tensor<S> x_t(x0.shape);
  const std::size_t per = x0.shape.per_sample();
  for (std::size_t n = 0; n < batch.size(); ++n) {
    t[n] = rng.uniform_int(0, tr.schedule().steps() - 1);
    const double ab = tr.schedule().alpha_bar[t[n]];
    const S a = static_cast<S>(std::sqrt(ab)), b = static_cast<S>(std::sqrt(1.0 - ab));
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) x_t.data[i] = a * x0.data[i] + b * eps.data[i];
  }
  tr.params().zero_grad();
  auto pred = tr.predict_noise(ag::Var<S>::constant(std::move(x_t)), ag::Var<S>::constant(stack<S>(src)), t);
  auto loss = ag::mse(pred, ag::Var<S>::constant(eps));
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) throw NumericError("translator loss is not finite");
  ag::backward(loss);
  opt.step(tr.params(), lr);
  tr.params().zero_grad();
  return value;
}

// Ancestral sampling over an evenly spaced timestep subsequence. Each image
// draws its noise from its own seed, so results do not depend on batching.
// Outputs are clipped to [-1, 1].
template <class S>
std::vector<Image> sample_translate_batch(const Translator<S>& tr, const std::vector<const Image*>& sources,
                                          int infer_steps, const std::vector<std::uint64_t>& seeds) {
  if (sources.size() != seeds.size()) throw std::invalid_argument("sample_translate: one seed per image");
  if (sources.empty()) return {};
  ag::NoGradGuard no_grad;
  const auto& sched = tr.schedule();
  const auto ts = timestep_subsequence(sched.steps(), infer_steps);
  const auto cond_t = stack<S>(sources);
  const Shape shape = cond_t.shape;
  const std::size_t per = shape.per_sample();
  auto cond = ag::Var<S>::constant(cond_t);

  std::vector<Rng> rngs;
  for (auto seed : seeds) rngs.emplace_back(seed);
  Tensor<S> x(shape);
  for (int n = 0; n < shape.n; ++n)
    for (std::size_t i = 0; i < per; ++i) x.data[n * per + i] = static_cast<S>(rngs[n].normal());

  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const double ab = sched.alpha_bar[t];
    const std::vector<int> tvec(shape.n, t);
    const auto eps = tr.predict_noise(ag::Var<S>::constant(x), cond, tvec).tensor();
    const bool last = k + 1 == ts.size();
    const double ab_prev = last ? 1.0 : sched.alpha_bar[ts[k + 1]];
    const double beta_t = 1.0 - ab / ab_prev;
    const double c_x0 = std::sqrt(ab_prev) * beta_t / (1.0 - ab);
    const double c_xt = std::sqrt(ab / ab_prev) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(std::max(beta_t * (1.0 - ab_prev) / (1.0 - ab), 0.0));
    for (int n = 0; n < shape.n; ++n) {
      for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
        double x0 = (x.data[i] - std::sqrt(1.0 - ab) * eps.data[i]) / std::sqrt(ab);
        x0 = std::clamp(x0, -1.0, 1.0);
        if (last) {
          x.data[i] = static_cast<S>(x0);
        } else {
          x.data[i] = static_cast<S>(c_x0 * x0 + c_xt * x.data[i] + sigma * rngs[n].normal());
        }
      }
    }
  }
  std::vector<Image> out;
  for (int n = 0; n < shape.n; ++n) {
    Image img = unstack<S>(x.data, shape, n);
    for (auto& v : img.data) v = std::clamp(v, -1.0f, 1.0f);
    out.push_back(std::move(img));
  }
  return out;
}

template <class S>
Image sample_translate(const Translator<S>& tr, const Image& source, int infer_steps, std::uint64_t seed) {
  return sample_translate_batch(tr, {&source}, infer_steps, {seed}).front();
}

// Deterministic (noise-free) reverse chain of `steps` updates starting from
// `x_start`, recording every step on the tape so the result is
// differentiable with respect to the translator weights. Each step forms a
// clipped x0 estimate and moves along the implied noise direction; the
// output is the clipped x0 estimate of the final step.
template <class S>
ag::Var<S> differentiable_translate(const Translator<S>& tr, const ag::Var<S>& sources, int steps,
                                    const Tensor<S>& x_start) {
  const auto& sched = tr.schedule();
  if (steps < 1 || steps > sched.steps())
    throw ConfigError("meta sampler steps " + std::to_string(steps) + " outside [1, T]");
  if (!(x_start.shape == sources.shape())) throw std::invalid_argument("differentiable_translate: shape mismatch");
  const auto ts = timestep_subsequence(sched.steps(), steps);
  auto x = ag::Var<S>::constant(x_start);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const bool last = k + 1 == ts.size();
    std::optional<ag::NoGradGuard> frozen;
    if (tr.config().meta_surrogate && !last) frozen.emplace();
    const int t = ts[k];
    const double ab = sched.alpha_bar[t];
    const std::vector<int> tvec(sources.shape().n, t);
    auto eps = tr.predict_noise(x, sources, tvec);
    auto x0 = ag::clamp(ag::axpby(static_cast<S>(1.0 / std::sqrt(ab)), x,
                                  static_cast<S>(-std::sqrt(1.0 - ab) / std::sqrt(ab)), eps),
                        S(-1), S(1));
    if (last) return x0;
    const double ab_prev = sched.alpha_bar[ts[k + 1]];
    auto direction = ag::axpby(static_cast<S>(1.0 / std::sqrt(1.0 - ab)), x,
                               static_cast<S>(-std::sqrt(ab) / std::sqrt(1.0 - ab)), x0);
    x = ag::axpby(static_cast<S>(std::sqrt(ab_prev)), x0, static_cast<S>(std::sqrt(1.0 - ab_prev)), direction);
  }
  return x;
}

}  // namespace metat2
