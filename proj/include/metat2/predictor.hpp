#pragma once

// Segmentation predictor f_P(.; omega): a UNet over the (source, synthetic
// target) channel pair with a sigmoid head, trained with soft Dice loss.

#include "metat2/autograd.hpp"
#include "metat2/batch.hpp"
#include "metat2/config_keys.hpp"
#include "metat2/errors.hpp"
#include "metat2/grid.hpp"
#include "metat2/nn.hpp"
#include "metat2/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace metat2 {

struct PredictorConfig {
  int base_channels = 16;
  int depth = 3;
  // 2: (source, synthetic target). 1: source only, the strict single-channel
  // variant of the source-only baseline.
  int in_channels = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (in_channels != 1 && in_channels != 2) throw ConfigError("predictor in_channels must be 1 or 2");
    if (base_channels < 1 || depth < 1) throw ConfigError("invalid predictor architecture");
  }
};

inline void to_json(nlohmann::json& j, const PredictorConfig& c) {
  j = {{"base_channels", c.base_channels}, {"depth", c.depth}, {"in_channels", c.in_channels}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PredictorConfig& c) {
  require_known_keys(j, {"base_channels", "depth", "in_channels", "seed"}, "predictor config");
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depth = j.value("depth", c.depth);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.seed = j.value("seed", c.seed);
}

struct DiceConfig {
  double smooth_eps = 1.0;
  double threshold = 0.5;

  void validate() const {
    if (!(smooth_eps > 0)) throw ConfigError("dice smooth_eps must be > 0");
    if (!(threshold > 0 && threshold < 1)) throw ConfigError("binarize threshold must lie in (0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const DiceConfig& c) {
  j = {{"smooth_eps", c.smooth_eps}, {"threshold", c.threshold}};
}

inline void from_json(const nlohmann::json& j, DiceConfig& c) {
  require_known_keys(j, {"smooth_eps", "threshold"}, "dice config");
  c.smooth_eps = j.value("smooth_eps", c.smooth_eps);
  c.threshold = j.value("threshold", c.threshold);
}

using ProbabilityMap = Grid<float>;

template <class S>
class Predictor {
 public:
  Predictor() = default;

  explicit Predictor(const PredictorConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, "predictor.init"));
    net_ = nn::UNet<S>(unet_config(cfg), rng);
  }

  template <class U>
  static Predictor convert_from(const Predictor<U>& other) {
    Predictor out;
    out.cfg_ = other.config();
    out.net_ = nn::UNet<S>::convert_from(other.net());
    return out;
  }

  static nn::UNetConfig unet_config(const PredictorConfig& cfg) {
    nn::UNetConfig u;
    u.in_channels = cfg.in_channels;
    u.out_channels = 1;
    u.base_channels = cfg.base_channels;
    u.depth = cfg.depth;
    u.activation = nn::Activation::kRelu;
    return u;
  }

  const PredictorConfig& config() const { return cfg_; }
  const nn::UNet<S>& net() const { return net_; }
  nn::ParamSet<S>& params() { return net_.params(); }
  const nn::ParamSet<S>& params() const { return net_.params(); }

  // Per-pixel lesion probabilities, [N, 1, H, W].
  ag::Var<S> forward(const ag::Var<S>& source, const ag::Var<S>& synthetic) const {
    if (!(source.shape() == synthetic.shape()))
      throw std::invalid_argument("predictor: source and synthetic target differ in shape");
    const auto input = cfg_.in_channels == 2 ? ag::concat_channels(source, synthetic) : source;
    return ag::sigmoid(net_.forward(input));
  }

 private:
  PredictorConfig cfg_;
  nn::UNet<S> net_;
};

// Disables gradient recording into a parameter set for the guard's lifetime.
template <class S>
class FrozenParams {
 public:
  explicit FrozenParams(nn::ParamSet<S>& params) : params_(params) { params_.set_requires_grad(false); }
  ~FrozenParams() { params_.set_requires_grad(true); }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  nn::ParamSet<S>& params_;
};

template <class S>
ProbabilityMap predictor_forward(const Predictor<S>& p, const Image& source, const Image& synthetic) {
  if (!source.same_shape(synthetic)) throw std::invalid_argument("predictor_forward: shape mismatch");
  ag::NoGradGuard no_grad;
  auto out = p.forward(ag::Var<S>::constant(stack_one<S>(source)), ag::Var<S>::constant(stack_one<S>(synthetic)));
  return unstack<S>(out.value(), out.shape(), 0);
}

// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps).
inline double dice_loss(const ProbabilityMap& pred, const Mask& gt, const DiceConfig& cfg = {}) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("dice_loss: shape mismatch");
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt.data[i] > 1) throw std::invalid_argument("dice_loss: ground truth is not binary");
    inter += static_cast<double>(pred.data[i]) * gt.data[i];
    sp += pred.data[i];
    sg += gt.data[i];
  }
  return 1.0 - (2.0 * inter + cfg.smooth_eps) / (sp + sg + cfg.smooth_eps);
}

// pixel = 1 iff probability > threshold.
inline Mask binarize(const ProbabilityMap& pred, double threshold = 0.5) {
  Mask out(pred.rows, pred.cols);
  for (std::size_t i = 0; i < pred.size(); ++i) out.data[i] = pred.data[i] > threshold ? 1 : 0;
  return out;
}

struct PredictorExample {
  const Image* source = nullptr;
  const Image* synthetic = nullptr;
  const Mask* mask = nullptr;
};

// Mean Dice loss of the batch as a graph node.
template <class S>
ag::Var<S> predictor_loss(const Predictor<S>& p, const std::vector<PredictorExample>& batch, const DiceConfig& dice) {
  if (batch.empty()) throw DataError("predictor batch is empty");
  std::vector<const Image*> src, syn;
  std::vector<const Mask*> gt;
  for (const auto& ex : batch) {
    src.push_back(ex.source);
    syn.push_back(ex.synthetic);
    gt.push_back(ex.mask);
  }
  auto prob = p.forward(ag::Var<S>::constant(stack<S>(src)), ag::Var<S>::constant(stack<S>(syn)));
  return ag::soft_dice_loss(prob, stack<S>(gt), static_cast<S>(dice.smooth_eps));
}

// One Adam update of omega on L_P = mean Dice loss. Returns L_P.
template <class S>
double predictor_train_step(Predictor<S>& p, nn::Adam<S>& opt, const std::vector<PredictorExample>& batch,
                            double lr, const DiceConfig& dice) {
  p.params().zero_grad();
  auto loss = predictor_loss(p, batch, dice);
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) throw NumericError("predictor loss is not finite");
  ag::backward(loss);
  opt.step(p.params(), lr);
  p.params().zero_grad();
  return value;
}

}  // namespace metat2
