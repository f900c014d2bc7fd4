#pragma once

// Bi-level training of translator (theta) and predictor (omega).
//
// Inner step (theta, omega frozen):
//   L_T = alpha * MSE(f_T(m_s), m_t) + (1 - alpha) * Q,
//   Q   = Dice(f_P(m_s, f_T(m_s)), G)
// with f_T the differentiable deterministic sampler.
// Outer step (theta frozen):
//   L_P = Dice(f_P(m_s, m_hat_t), G),  m_hat_t from the stochastic sampler.
//
// The alternation is first order: theta*(omega) enters the outer step as a
// constant.

#include "metat2/autograd.hpp"
#include "metat2/batch.hpp"
#include "metat2/checkpoint.hpp"
#include "metat2/config_keys.hpp"
#include "metat2/dataset.hpp"
#include "metat2/diffusion.hpp"
#include "metat2/errors.hpp"
#include "metat2/nn.hpp"
#include "metat2/predictor.hpp"
#include "metat2/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace metat2 {

struct MetaConfig {
  double alpha = 0.75;
  double lr = 1e-4;
  int epochs_translator_pretrain = 60;
  int epochs_predictor_pretrain = 180;
  int epochs_meta = 10;
  int n_inner = 1;
  int batch_size = 4;
  std::uint64_t seed = 0;
  double split_fraction = 0.5;

  void validate() const {
    if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must lie in [0, 1]");
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (epochs_translator_pretrain < 0 || epochs_predictor_pretrain < 0 || epochs_meta < 0 || n_inner < 0)
      throw ConfigError("epoch and step counts must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(split_fraction > 0 && split_fraction < 1)) throw ConfigError("split_fraction must lie in (0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const MetaConfig& c) {
  j = {{"alpha", c.alpha},
       {"lr", c.lr},
       {"epochs_translator_pretrain", c.epochs_translator_pretrain},
       {"epochs_predictor_pretrain", c.epochs_predictor_pretrain},
       {"epochs_meta", c.epochs_meta},
       {"n_inner", c.n_inner},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"split_fraction", c.split_fraction}};
}

inline void from_json(const nlohmann::json& j, MetaConfig& c) {
  require_known_keys(j, {"alpha", "lr", "epochs_translator_pretrain", "epochs_predictor_pretrain", "epochs_meta",
                         "n_inner", "batch_size", "seed", "split_fraction"},
                     "meta config");
  c.alpha = j.value("alpha", c.alpha);
  c.lr = j.value("lr", c.lr);
  c.epochs_translator_pretrain = j.value("epochs_translator_pretrain", c.epochs_translator_pretrain);
  c.epochs_predictor_pretrain = j.value("epochs_predictor_pretrain", c.epochs_predictor_pretrain);
  c.epochs_meta = j.value("epochs_meta", c.epochs_meta);
  c.n_inner = j.value("n_inner", c.n_inner);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.split_fraction = j.value("split_fraction", c.split_fraction);
}

enum class Phase : int { kTranslatorPretrain = 0, kPredictorPretrain = 1, kInner = 2, kOuter = 3 };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kTranslatorPretrain: return "pretrain_translator";
    case Phase::kPredictorPretrain: return "pretrain_predictor";
    case Phase::kInner: return "inner";
    case Phase::kOuter: return "outer";
  }
  return "unknown";
}

inline constexpr double kNoValue = std::numeric_limits<double>::quiet_NaN();

struct LossRecord {
  long long step = 0;
  Phase phase = Phase::kInner;
  double l_t = kNoValue;
  double l_mse = kNoValue;
  double q = kNoValue;
  double l_p = kNoValue;

  // NaN placeholders compare equal to each other.
  bool operator==(const LossRecord& o) const {
    auto same = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
    return step == o.step && phase == o.phase && same(l_t, o.l_t) && same(l_mse, o.l_mse) && same(q, o.q) &&
           same(l_p, o.l_p);
  }
};

template <class S>
struct TrainState {
  Translator<S> translator;
  Predictor<S> predictor;
  nn::Adam<S> opt_translator;
  nn::Adam<S> opt_predictor;
  int translator_epochs = 0;
  int predictor_epochs = 0;
  int meta_epochs = 0;
  std::vector<LossRecord> history;
  Rng rng;

  TrainState(const TranslatorConfig& tc, const PredictorConfig& pc, std::uint64_t seed)
      : translator(tc),
        predictor(pc),
        opt_translator(translator.params()),
        opt_predictor(predictor.params()),
        rng(mix_seed(seed, "train.state")) {}

  void record(LossRecord r) {
    r.step = static_cast<long long>(history.size());
    history.push_back(r);
  }
};

// ---------------------------------------------------------------------------

// Q = mean Dice loss of the frozen predictor on the translator's
// differentiable output for `batch` (uses source and mask only). The
// returned node carries gradient to theta only.
template <class S>
ag::Var<S> compute_quality_score(const Translator<S>& tr, Predictor<S>& pred, const Batch& batch,
                                 const Tensor<S>& x_start, const DiceConfig& dice, int meta_steps) {
  std::vector<const Image*> src;
  std::vector<const Mask*> gt;
  for (const auto* s : batch) {
    src.push_back(&s->source);
    gt.push_back(&s->mask);
  }
  auto sources = ag::Var<S>::constant(stack<S>(src));
  auto synthetic = differentiable_translate(tr, sources, meta_steps, x_start);
  FrozenParams<S> frozen(pred.params());
  auto prob = pred.forward(sources, synthetic);
  return ag::soft_dice_loss(prob, stack<S>(gt), static_cast<S>(dice.smooth_eps));
}

template <class S>
struct InnerGraph {
  ag::Var<S> l_t;
  ag::Var<S> l_mse;
  ag::Var<S> q;
};

// Builds L_T, L_MSE and Q over one shared generation of the meta sampler.
// Predictor weights are recorded as constants.
template <class S>
InnerGraph<S> inner_losses(const Translator<S>& tr, Predictor<S>& pred, const Batch& batch,
                           const Tensor<S>& x_start, double alpha, const DiceConfig& dice) {
  std::vector<const Image*> src, tgt;
  std::vector<const Mask*> gt;
  for (const auto* s : batch) {
    if (!s->target) throw DataError("sample '" + s->id + "' has no target modality for the inner step");
    src.push_back(&s->source);
    tgt.push_back(&*s->target);
    gt.push_back(&s->mask);
  }
  auto sources = ag::Var<S>::constant(stack<S>(src));
  auto synthetic = differentiable_translate(tr, sources, tr.config().meta_steps, x_start);
  InnerGraph<S> g;
  g.l_mse = ag::mse(synthetic, ag::Var<S>::constant(stack<S>(tgt)));
  {
    FrozenParams<S> frozen(pred.params());
    g.q = ag::soft_dice_loss(pred.forward(sources, synthetic), stack<S>(gt), static_cast<S>(dice.smooth_eps));
  }
  g.l_t = ag::axpby(static_cast<S>(alpha), g.l_mse, static_cast<S>(1.0 - alpha), g.q);
  return g;
}

// Same generation, MSE term only.
template <class S>
ag::Var<S> translation_mse(const Translator<S>& tr, const Batch& batch, const Tensor<S>& x_start) {
  std::vector<const Image*> src, tgt;
  for (const auto* s : batch) {
    if (!s->target) throw DataError("sample '" + s->id + "' has no target modality");
    src.push_back(&s->source);
    tgt.push_back(&*s->target);
  }
  auto synthetic =
      differentiable_translate(tr, ag::Var<S>::constant(stack<S>(src)), tr.config().meta_steps, x_start);
  return ag::mse(synthetic, ag::Var<S>::constant(stack<S>(tgt)));
}

template <class S>
Tensor<S> meta_start_noise(const Batch& batch, Rng& rng) {
  const auto& first = batch.front()->source;
  return standard_normal<S>(Shape{static_cast<int>(batch.size()), 1, first.rows, first.cols}, rng);
}

struct InnerResult {
  double l_t = 0;
  double l_mse = 0;
  double q = 0;
};

// One update of theta on L_T. omega and its optimizer state are untouched.
template <class S>
InnerResult inner_step(TrainState<S>& st, const Batch& batch, const MetaConfig& cfg, const DiceConfig& dice) {
  if (batch.empty()) throw DataError("inner_step: empty batch");
  const auto x_start = meta_start_noise<S>(batch, st.rng);
  st.translator.params().zero_grad();
  auto g = inner_losses(st.translator, st.predictor, batch, x_start, cfg.alpha, dice);
  InnerResult r{static_cast<double>(g.l_t.item()), static_cast<double>(g.l_mse.item()),
                static_cast<double>(g.q.item())};
  if (!std::isfinite(r.l_t)) throw NumericError("translator meta loss is not finite");
  ag::backward(g.l_t);
  st.opt_translator.step(st.translator.params(), cfg.lr);
  st.translator.params().zero_grad();
  st.record({0, Phase::kInner, r.l_t, r.l_mse, r.q, kNoValue});
  return r;
}

template <class S>
std::vector<Image> synthesize_batch(const Translator<S>& tr, const Batch& batch, Rng& rng) {
  std::vector<const Image*> src;
  std::vector<std::uint64_t> seeds;
  for (const auto* s : batch) {
    src.push_back(&s->source);
    seeds.push_back(rng.next_u64());
  }
  return sample_translate_batch(tr, src, tr.config().infer_steps, seeds);
}

// One update of omega on L_P with fresh stochastic translations from the
// current theta. theta and its optimizer state are untouched.
template <class S>
double outer_step(TrainState<S>& st, const Batch& batch, const MetaConfig& cfg, const DiceConfig& dice) {
  if (batch.empty()) throw DataError("outer_step: empty batch");
  const auto synthetic = synthesize_batch(st.translator, batch, st.rng);
  std::vector<PredictorExample> examples;
  for (std::size_t i = 0; i < batch.size(); ++i)
    examples.push_back({&batch[i]->source, &synthetic[i], &batch[i]->mask});
  const double l_p = predictor_train_step(st.predictor, st.opt_predictor, examples, cfg.lr, dice);
  st.record({0, Phase::kOuter, kNoValue, kNoValue, kNoValue, l_p});
  return l_p;
}

// Shuffled index batches covering [0, n).
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  return out;
}

inline Batch gather(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Batch b;
  for (auto i : idx) b.push_back(&ds[i]);
  return b;
}

template <class S>
using EpochCallback = std::function<void(const TrainState<S>&)>;

// Runs meta epochs until `cfg.epochs_meta` have completed. Each epoch walks
// D_P in shuffled batches; before every outer step, `n_inner` inner steps
// take consecutive batches from a per-epoch shuffle of D_T (wrapping).
template <class S>
void meta_train(const Dataset& d_t, const Dataset& d_p, TrainState<S>& st, const MetaConfig& cfg,
                const DiceConfig& dice, const EpochCallback<S>& on_epoch = {}) {
  cfg.validate();
  if (st.meta_epochs >= cfg.epochs_meta) return;
  if (d_t.empty() || d_p.empty()) throw DataError("meta_train: D_T and D_P must be non-empty");
  while (st.meta_epochs < cfg.epochs_meta) {
    const auto outer_batches = make_batches(d_p.size(), cfg.batch_size, st.rng);
    auto inner_batches = make_batches(d_t.size(), cfg.batch_size, st.rng);
    std::size_t next_inner = 0;
    for (const auto& ob : outer_batches) {
      for (int k = 0; k < cfg.n_inner; ++k) {
        if (next_inner == inner_batches.size()) {
          inner_batches = make_batches(d_t.size(), cfg.batch_size, st.rng);
          next_inner = 0;
        }
        inner_step(st, gather(d_t, inner_batches[next_inner++]), cfg, dice);
      }
      outer_step(st, gather(d_p, ob), cfg, dice);
    }
    ++st.meta_epochs;
    if (on_epoch) on_epoch(st);
  }
}

// Produces the second predictor channel for a sample.
using SynthesisFn = std::function<Image(const Sample&)>;

template <class S>
SynthesisFn translator_synthesis(const Translator<S>& tr, std::uint64_t seed) {
  return [&tr, seed](const Sample& s) {
    return sample_translate(tr, s.source, tr.config().infer_steps, mix_seed(seed, "pretrain:" + s.id));
  };
}

// Trains omega for epochs [st.predictor_epochs, epochs) on `ds` with fixed
// second channels `synthetic` (one per sample).
template <class S>
void train_predictor_epochs(const Dataset& ds, const std::vector<Image>& synthetic, TrainState<S>& st, int epochs,
                            const MetaConfig& cfg, const DiceConfig& dice, const EpochCallback<S>& on_epoch = {}) {
  while (st.predictor_epochs < epochs) {
    for (const auto& idx : make_batches(ds.size(), cfg.batch_size, st.rng)) {
      std::vector<PredictorExample> ex;
      for (auto i : idx) ex.push_back({&ds[i].source, &synthetic[i], &ds[i].mask});
      const double l_p = predictor_train_step(st.predictor, st.opt_predictor, ex, cfg.lr, dice);
      st.record({0, Phase::kPredictorPretrain, kNoValue, kNoValue, kNoValue, l_p});
    }
    ++st.predictor_epochs;
    if (on_epoch) on_epoch(st);
  }
}

template <class S>
void train_translator_epochs(const Dataset& ds, TrainState<S>& st, int epochs, const MetaConfig& cfg,
                             const EpochCallback<S>& on_epoch = {}) {
  while (st.translator_epochs < epochs) {
    for (const auto& idx : make_batches(ds.size(), cfg.batch_size, st.rng)) {
      const double loss = translator_train_step(st.translator, st.opt_translator, gather(ds, idx), st.rng, cfg.lr);
      st.record({0, Phase::kTranslatorPretrain, kNoValue, kNoValue, kNoValue, kNoValue});
      st.history.back().l_mse = loss;
    }
    ++st.translator_epochs;
    if (on_epoch) on_epoch(st);
  }
}

// Pretrains theta on D_T (noise-prediction objective), then omega on D_P
// with second channels produced by `synth` (default: the pretrained
// translator's sampler, seeded per sample id).
template <class S>
void pretrain(const Dataset& d_t, const Dataset& d_p, TrainState<S>& st, const MetaConfig& cfg,
              const DiceConfig& dice, SynthesisFn synth = {}, const EpochCallback<S>& on_epoch = {}) {
  cfg.validate();
  if (cfg.epochs_translator_pretrain > 0 && d_t.empty()) throw DataError("pretrain: D_T is empty");
  if (cfg.epochs_predictor_pretrain > 0 && d_p.empty()) throw DataError("pretrain: D_P is empty");
  train_translator_epochs(d_t, st, cfg.epochs_translator_pretrain, cfg, on_epoch);
  if (st.predictor_epochs >= cfg.epochs_predictor_pretrain) return;
  if (!synth) synth = translator_synthesis(st.translator, cfg.seed);
  std::vector<Image> synthetic;
  synthetic.reserve(d_p.size());
  for (const auto& s : d_p) synthetic.push_back(synth(s));
  train_predictor_epochs(d_p, synthetic, st, cfg.epochs_predictor_pretrain, cfg, dice, on_epoch);
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string history_csv(const std::vector<LossRecord>& history) {
  std::ostringstream os;
  os.precision(9);
  os << "step,phase,L_T,L_MSE,Q,L_P\n";
  auto cell = [&](double v) {
    if (!std::isnan(v)) os << v;
  };
  for (const auto& r : history) {
    os << r.step << ',' << phase_name(r.phase) << ',';
    cell(r.l_t);
    os << ',';
    cell(r.l_mse);
    os << ',';
    cell(r.q);
    os << ',';
    cell(r.l_p);
    os << '\n';
  }
  return os.str();
}

template <class S>
ckpt::Container serialize_state(const TrainState<S>& st) {
  ckpt::Container c;
  c.meta["kind"] = "train_state";
  c.meta["translator"] = st.translator.config();
  c.meta["predictor"] = st.predictor.config();
  c.meta["translator_epochs"] = st.translator_epochs;
  c.meta["predictor_epochs"] = st.predictor_epochs;
  c.meta["meta_epochs"] = st.meta_epochs;
  c.meta["rng"] = st.rng.serialize();
  ckpt::put_params(c, "theta.", st.translator.params());
  ckpt::put_params(c, "omega.", st.predictor.params());
  ckpt::put_adam(c, "opt_theta.", st.opt_translator);
  ckpt::put_adam(c, "opt_omega.", st.opt_predictor);
  std::vector<std::int64_t> steps, phases;
  std::vector<double> lt, lmse, q, lp;
  for (const auto& r : st.history) {
    steps.push_back(r.step);
    phases.push_back(static_cast<std::int64_t>(r.phase));
    lt.push_back(r.l_t);
    lmse.push_back(r.l_mse);
    q.push_back(r.q);
    lp.push_back(r.l_p);
  }
  c.put_i64("history.step", std::move(steps));
  c.put_i64("history.phase", std::move(phases));
  c.put_f64("history.L_T", std::move(lt));
  c.put_f64("history.L_MSE", std::move(lmse));
  c.put_f64("history.Q", std::move(q));
  c.put_f64("history.L_P", std::move(lp));
  return c;
}

template <class S>
TrainState<S> deserialize_state(const ckpt::Container& c) {
  if (c.meta.value("kind", "") != "train_state") throw DataError("checkpoint does not hold a training state");
  TrainState<S> st(c.meta.at("translator").get<TranslatorConfig>(), c.meta.at("predictor").get<PredictorConfig>(), 0);
  st.translator_epochs = c.meta.at("translator_epochs").get<int>();
  st.predictor_epochs = c.meta.at("predictor_epochs").get<int>();
  st.meta_epochs = c.meta.at("meta_epochs").get<int>();
  st.rng.deserialize(c.meta.at("rng").get<std::string>());
  ckpt::get_params(c, "theta.", st.translator.params());
  ckpt::get_params(c, "omega.", st.predictor.params());
  ckpt::get_adam(c, "opt_theta.", st.opt_translator);
  ckpt::get_adam(c, "opt_omega.", st.opt_predictor);
  const auto& steps = c.at("history.step").i64;
  const auto& phases = c.at("history.phase").i64;
  const auto& lt = c.at("history.L_T").f64;
  const auto& lmse = c.at("history.L_MSE").f64;
  const auto& q = c.at("history.Q").f64;
  const auto& lp = c.at("history.L_P").f64;
  for (std::size_t i = 0; i < steps.size(); ++i)
    st.history.push_back({steps[i], static_cast<Phase>(phases[i]), lt[i], lmse[i], q[i], lp[i]});
  return st;
}

}  // namespace metat2
