#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <numeric>

using namespace metat2;
using namespace metat2::testing;

namespace {

double cosine_f(double u, int T) {
  const double c = std::cos((u / T + 0.008) / 1.008 * M_PI / 2.0);
  return c * c;
}

Tensor<double> gaussian(Shape s, std::mt19937_64& gen) {
  std::normal_distribution<double> d;
  Tensor<double> t(s);
  for (auto& v : t.data) v = d(gen);
  return t;
}

Batch as_batch(const Dataset& ds) {
  Batch b;
  for (const auto& s : ds) b.push_back(&s);
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule

class CosineSchedule : public ::testing::TestWithParam<int> {};

TEST_P(CosineSchedule, MonotoneBoundedAndCumulative) {
  const int T = GetParam();
  const auto s = build_cosine_schedule(T);
  ASSERT_EQ(s.steps(), T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    EXPECT_GT(s.beta[t], 0.0);
    EXPECT_LE(s.beta[t], 0.999);
    prod *= 1.0 - s.beta[t];
    EXPECT_NEAR(s.alpha_bar[t], prod, 1e-6);
    if (t > 0) EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
  }
  EXPECT_GT(s.alpha_bar[0], 0.99);
}

TEST_P(CosineSchedule, MatchesClosedFormWhereUnclipped) {
  const int T = GetParam();
  const auto s = build_cosine_schedule(T);
  for (int t = 0; t < T; ++t) {
    const double beta = 1.0 - cosine_f(t + 1, T) / cosine_f(t, T);
    if (beta >= 0.999) break;
    EXPECT_NEAR(s.alpha_bar[t], cosine_f(t + 1, T) / cosine_f(0, T), 1e-9) << "t=" << t;
  }
}

INSTANTIATE_TEST_SUITE_P(Lengths, CosineSchedule, ::testing::Values(100, 250, 500, 1000, 4000));

TEST(CosineScheduleFixed, ThousandStepsEndsNearPureNoise) {
  const auto s = build_cosine_schedule(1000);
  EXPECT_LT(s.alpha_bar.back(), 0.01);
}

TEST(CosineScheduleFixed, ShortScheduleFirstStepIsCoarse) {
  // With very few steps the first beta is large; the recorded value follows
  // the formula rather than any lower bound on alpha_bar[0].
  const auto s = build_cosine_schedule(10);
  EXPECT_NEAR(s.alpha_bar[0], cosine_f(1, 10) / cosine_f(0, 10), 1e-12);
  EXPECT_LT(s.alpha_bar[0], 0.99);
}

TEST(CosineScheduleFixed, RejectsEmpty) { EXPECT_THROW(build_cosine_schedule(0), ConfigError); }

// ---------------------------------------------------------------------------
// Forward process

TEST(ForwardDiffuse, EndpointsAndReconstruction) {
  const auto s = build_cosine_schedule(1000);
  std::mt19937_64 gen(1);
  const auto x0 = gaussian({2, 1, 8, 8}, gen), eps = gaussian({2, 1, 8, 8}, gen);
  const auto early = forward_diffuse(x0, 0, eps, s);
  const auto late = forward_diffuse(x0, 999, eps, s);
  double d_early = 0, d_late = 0;
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    d_early = std::max(d_early, std::abs(early.data[i] - x0.data[i]));
    d_late = std::max(d_late, std::abs(late.data[i] - eps.data[i]));
  }
  EXPECT_LT(d_early, 0.1);
  EXPECT_LT(d_late, 0.1);

  for (int t : {0, 10, 500, 999}) {
    const auto xt = forward_diffuse(x0, t, eps, s);
    const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
    for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR((xt.data[i] - b * eps.data[i]) / a, x0.data[i], 1e-5);
  }
}

TEST(ForwardDiffuse, MonteCarloVariance) {
  const auto s = build_cosine_schedule(1000);
  std::mt19937_64 gen(2);
  const Tensor<double> x0({1, 1, 1, 1}, 0.7);
  for (int t : {50, 400, 900}) {
    const int n = 100000;
    double sum = 0, sq = 0;
    Tensor<double> eps({1, 1, 1, 1});
    std::normal_distribution<double> d;
    for (int i = 0; i < n; ++i) {
      eps.data[0] = d(gen);
      const double v = forward_diffuse(x0, t, eps, s).data[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    EXPECT_NEAR(var, 1.0 - s.alpha_bar[t], 0.05 * (1.0 - s.alpha_bar[t])) << "t=" << t;
    EXPECT_NEAR(mean, std::sqrt(s.alpha_bar[t]) * 0.7, 0.01) << "t=" << t;
  }
}

TEST(ForwardDiffuse, RejectsBadTimestep) {
  const auto s = build_cosine_schedule(100);
  const Tensor<double> x({1, 1, 2, 2});
  EXPECT_THROW(forward_diffuse(x, -1, x, s), std::out_of_range);
  EXPECT_THROW(forward_diffuse(x, 100, x, s), std::out_of_range);
}

TEST(TimestepSubsequence, EvenlySpacedDescending) {
  EXPECT_EQ(timestep_subsequence(1000, 1), (std::vector<int>{999}));
  EXPECT_EQ(timestep_subsequence(100, 2), (std::vector<int>{99, 0}));
  EXPECT_EQ(timestep_subsequence(10, 4), (std::vector<int>{9, 6, 3, 0}));
  auto all = timestep_subsequence(7, 7);
  std::vector<int> expect(7);
  std::iota(expect.rbegin(), expect.rend(), 0);
  EXPECT_EQ(all, expect);
  for (int k : {3, 8, 50}) {
    const auto ts = timestep_subsequence(1000, k);
    ASSERT_EQ(ts.size(), static_cast<std::size_t>(k));
    EXPECT_EQ(ts.front(), 999);
    EXPECT_EQ(ts.back(), 0);
    for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
  }
  EXPECT_THROW(timestep_subsequence(10, 0), ConfigError);
  EXPECT_THROW(timestep_subsequence(10, 11), ConfigError);
}

// ---------------------------------------------------------------------------
// Training

TEST(TranslatorTraining, UntrainedLossIsUnitNoiseVariance) {
  const auto ds = generate_synthetic_dataset(small_spec(4, 16, 3));
  Translator<float> tr(tiny_translator(3));
  nn::Adam<float> opt(tr.params());
  Rng rng(3);
  // Zero-initialised head predicts 0, so the loss is the mean squared noise.
  double total = 0;
  for (int i = 0; i < 10; ++i) total += translator_train_step(tr, opt, as_batch(ds), rng, 0.0);
  EXPECT_NEAR(total / 10, 1.0, 0.3);
}

TEST(TranslatorTraining, ZeroLearningRateLeavesWeightsUnchanged) {
  const auto ds = generate_synthetic_dataset(small_spec(2, 16, 4));
  Translator<float> tr(tiny_translator(4));
  nn::Adam<float> opt(tr.params());
  Rng rng(4);
  const auto before = tr.params().flat();
  for (int i = 0; i < 3; ++i) translator_train_step(tr, opt, as_batch(ds), rng, 0.0);
  const auto after = tr.params().flat();
  ASSERT_EQ(before.size(), after.size());
  EXPECT_EQ(0, std::memcmp(before.data(), after.data(), before.size() * sizeof(float)));
}

TEST(TranslatorTraining, OverfitsOnePair) {
  const auto ds = generate_synthetic_dataset(small_spec(1, 16, 5));
  auto cfg = tiny_translator(5);
  cfg.base_channels = 8;
  Translator<float> tr(cfg);
  nn::Adam<float> opt(tr.params());
  Rng rng(5);
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) losses.push_back(translator_train_step(tr, opt, as_batch(ds), rng, 3e-3));
  const double head = std::accumulate(losses.begin(), losses.begin() + 20, 0.0) / 20;
  const double tail = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20;
  EXPECT_LE(tail, 0.5 * head) << "first 20 mean " << head << ", last 20 mean " << tail;
}

TEST(TranslatorTraining, MissingTargetIsDataError) {
  auto ds = generate_synthetic_dataset(small_spec(2, 16, 6));
  ds[1].target.reset();
  Translator<float> tr(tiny_translator());
  nn::Adam<float> opt(tr.params());
  Rng rng(6);
  try {
    translator_train_step(tr, opt, as_batch(ds), rng, 1e-3);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(ds[1].id), std::string::npos);
  }
}

TEST(TranslatorConfigTest, ValidatesStepCounts) {
  auto c = tiny_translator();
  c.meta_steps = 0;
  EXPECT_THROW(Translator<float>{c}, ConfigError);
  c = tiny_translator();
  c.infer_steps = 101;
  EXPECT_THROW(Translator<float>{c}, ConfigError);
  c = tiny_translator();
  c.meta_steps = 5;  // > infer_steps
  EXPECT_THROW(Translator<float>{c}, ConfigError);
}

// ---------------------------------------------------------------------------
// Sampling

class Sampling : public ::testing::Test {
 protected:
  void SetUp() override {
    ds = generate_synthetic_dataset(small_spec(3, 16, 7));
    tr = Translator<float>(tiny_translator(7));
    perturb_params(tr.params(), 7, 0.05);
  }
  Dataset ds;
  Translator<float> tr{tiny_translator(7)};
};

TEST_F(Sampling, DeterministicShapedAndBounded) {
  const auto a = sample_translate(tr, ds[0].source, 4, 11);
  const auto b = sample_translate(tr, ds[0].source, 4, 11);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.rows, 16);
  EXPECT_EQ(a.cols, 16);
  for (float v : a.data) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_NE(a, sample_translate(tr, ds[0].source, 4, 12));
}

TEST_F(Sampling, IndependentOfBatching) {
  const auto batch = sample_translate_batch(tr, {&ds[0].source, &ds[1].source, &ds[2].source}, 3, {1, 2, 3});
  ASSERT_EQ(batch.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    const auto single = sample_translate(tr, ds[i].source, 3, static_cast<std::uint64_t>(i + 1));
    for (std::size_t k = 0; k < single.size(); ++k) EXPECT_NEAR(batch[i].data[k], single.data[k], 1e-5);
  }
}

TEST_F(Sampling, StepCountChangesOutput) {
  EXPECT_NE(sample_translate(tr, ds[0].source, 1, 5), sample_translate(tr, ds[0].source, 4, 5));
}

TEST_F(Sampling, SingleStepIsClippedPosteriorMean) {
  const auto td = Translator<double>::convert_from(tr);
  std::mt19937_64 gen(9);
  const auto start = gaussian({1, 1, 16, 16}, gen);
  const auto src = stack_one<double>(ds[0].source);
  const auto out = differentiable_translate(td, ag::Var<double>::constant(src), 1, start);
  const int t = td.schedule().steps() - 1;
  const double ab = td.schedule().alpha_bar[t];
  const auto eps = td.predict_noise(ag::Var<double>::constant(start), ag::Var<double>::constant(src), {t});
  for (std::size_t i = 0; i < start.numel(); ++i) {
    const double x0 = std::clamp((start.data[i] - std::sqrt(1 - ab) * eps.value()[i]) / std::sqrt(ab), -1.0, 1.0);
    EXPECT_NEAR(out.value()[i], x0, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Differentiable sampler

TEST(DifferentiableTranslate, GradientMatchesFiniteDifferences) {
  const auto ds = generate_synthetic_dataset(small_spec(2, 8, 8));
  auto cfg = tiny_translator(8);
  cfg.steps = 20;  // keeps x0 estimates inside the clip range at the first step
  Translator<double> tr(cfg);
  perturb_params(tr.params(), 8, 0.1);
  std::mt19937_64 gen(8);
  const auto start = gaussian({2, 1, 8, 8}, gen);
  const auto src = ag::Var<double>::constant(stack<double>(std::vector<const Image*>{&ds[0].source, &ds[1].source}));
  const auto weights = ag::Var<double>::constant(gaussian({2, 1, 8, 8}, gen));
  const auto r = check_param_gradients(
      tr.params(), [&] { return ag::mean(ag::mul(differentiable_translate(tr, src, 2, start), weights)); }, 40, 8);
  EXPECT_GT(r.max_abs_grad, 0.0);
  EXPECT_LT(r.max_rel_error, 1e-3) << "over " << r.probes << " probes";
}

TEST(DifferentiableTranslate, RejectsStepCount) {
  Translator<double> tr(tiny_translator());
  const Tensor<double> x({1, 1, 8, 8});
  EXPECT_THROW(differentiable_translate(tr, ag::Var<double>::constant(x), 0, x), ConfigError);
  EXPECT_THROW(differentiable_translate(tr, ag::Var<double>::constant(x), 101, x), ConfigError);
}

TEST(DifferentiableTranslate, SurrogateKeepsForwardValue) {
  auto cfg = tiny_translator(9);
  Translator<double> full(cfg);
  perturb_params(full.params(), 9, 0.05);
  cfg.meta_surrogate = true;
  Translator<double> sur(cfg);
  sur.params().assign_from(full.params());
  std::mt19937_64 gen(9);
  const auto start = gaussian({1, 1, 8, 8}, gen);
  const auto src = ag::Var<double>::constant(gaussian({1, 1, 8, 8}, gen));
  const auto a = differentiable_translate(full, src, 2, start);
  const auto b = differentiable_translate(sur, src, 2, start);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_DOUBLE_EQ(a.value()[i], b.value()[i]);
}
