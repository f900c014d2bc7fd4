#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace metat2;
using namespace metat2::testing;
using V = ag::Var<double>;
using T = Tensor<double>;

namespace {

T random_tensor(Shape s, std::mt19937_64& gen, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  T t(s);
  for (auto& v : t.data) v = d(gen);
  return t;
}

// Compares backprop gradients of every leaf against central differences of
// `build` (which must rebuild the graph from the leaves' current values).
void check_gradients(std::vector<V>& leaves, const std::function<V()>& build, double tol = 1e-6,
                     double h = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  auto loss = build();
  ag::backward(loss);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto values = leaves[li].mutable_value();
    const std::vector<double> grad(leaves[li].grad().begin(), leaves[li].grad().end());
    ASSERT_EQ(grad.size(), values.size()) << "leaf " << li << " got no gradient";
    for (std::size_t i = 0; i < values.size(); ++i) {
      ag::NoGradGuard ng;
      const double numeric = central_difference([&] { return build().item(); }, values[i], h);
      EXPECT_LT(relative_error(grad[i], numeric, 1e-4), tol) << "leaf " << li << " index " << i;
    }
  }
}

// Weighted sum so every output element gets a distinct upstream gradient.
V weighted_sum(const V& x, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  auto w = V::constant(random_tensor(x.shape(), gen));
  return ag::mean(ag::mul(x, w));
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  std::mt19937_64 gen(1);
  std::vector<V> leaves{V::leaf(random_tensor({2, 2, 3, 3}, gen), true),
                        V::leaf(random_tensor({2, 2, 3, 3}, gen), true)};
  check_gradients(leaves, [&] {
    auto a = leaves[0], b = leaves[1];
    auto y = ag::axpby(0.7, ag::silu(a), -1.3, ag::sigmoid(b));
    y = ag::add(y, ag::mul(a, b));
    y = ag::sub(y, ag::scale(ag::relu(b), 0.5));
    return weighted_sum(y, 3);
  });
}

TEST(Autograd, ClampPassesGradientOnlyInside) {
  auto x = V::leaf(T({1, 1, 1, 4}, {-2.0, -0.5, 0.5, 2.0}), true);
  auto y = ag::mean(ag::clamp(x, -1.0, 1.0));
  ag::backward(y);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 0.25, 0.25, 0}));
}

TEST(Autograd, MseAndScalePerSample) {
  std::mt19937_64 gen(2);
  std::vector<V> leaves{V::leaf(random_tensor({3, 1, 4, 4}, gen), true),
                        V::leaf(random_tensor({3, 1, 4, 4}, gen), true)};
  const std::vector<double> k{0.5, -2.0, 1.5};
  check_gradients(leaves, [&] { return ag::mse(ag::scale_per_sample(leaves[0], k), leaves[1]); });
}

TEST(Autograd, StructuralOps) {
  std::mt19937_64 gen(3);
  std::vector<V> leaves{V::leaf(random_tensor({2, 2, 4, 6}, gen), true),
                        V::leaf(random_tensor({2, 1, 4, 6}, gen), true)};
  check_gradients(leaves, [&] {
    auto cat = ag::concat_channels(leaves[0], leaves[1]);
    auto down = ag::avg_pool2(cat);
    auto up = ag::upsample2_bilinear(down);
    return ag::add(weighted_sum(up, 4), weighted_sum(cat, 5));
  });
}

TEST(Autograd, UpsampleMatchesHalfPixelBilinear) {
  // 1-D row [0, 4] upsampled: outputs at source coordinates -0.25, 0.25,
  // 0.75, 1.25 clamped at the border -> 0, 1, 3, 4.
  auto x = V::constant(T({1, 1, 1, 2}, {0.0, 4.0}));
  auto y = ag::upsample2_bilinear(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  for (int r = 0; r < 2; ++r) {
    EXPECT_DOUBLE_EQ(y.value()[r * 4 + 0], 0.0);
    EXPECT_DOUBLE_EQ(y.value()[r * 4 + 1], 1.0);
    EXPECT_DOUBLE_EQ(y.value()[r * 4 + 2], 3.0);
    EXPECT_DOUBLE_EQ(y.value()[r * 4 + 3], 4.0);
  }
}

TEST(Autograd, ConvLinearAndChannelBias) {
  std::mt19937_64 gen(4);
  std::vector<V> leaves{V::leaf(random_tensor({2, 3, 5, 4}, gen), true),
                        V::leaf(random_tensor({2, 3, 3, 3}, gen), true),
                        V::leaf(random_tensor({1, 1, 1, 2}, gen), true),
                        V::leaf(random_tensor({2, 6, 1, 1}, gen), true),
                        V::leaf(random_tensor({2, 6, 1, 1}, gen), true),
                        V::leaf(random_tensor({1, 1, 1, 2}, gen), true),
                        V::leaf(random_tensor({2, 2, 1, 1}, gen), true),
                        V::leaf(random_tensor({1, 1, 1, 2}, gen), true)};
  check_gradients(leaves, [&] {
    auto y = ag::conv2d(leaves[0], leaves[1], leaves[2]);
    auto e = ag::linear(leaves[3], leaves[4], leaves[5]);  // [2, 2]
    y = ag::add_channel_bias(y, e);
    y = ag::conv2d(y, leaves[6], leaves[7]);  // 1x1
    return weighted_sum(y, 6);
  });
}

TEST(Autograd, ConvMatchesDirectSum) {
  std::mt19937_64 gen(8);
  const auto x = random_tensor({1, 2, 4, 5}, gen), w = random_tensor({3, 2, 3, 3}, gen), b = random_tensor({1, 1, 1, 3}, gen);
  const auto y = ag::conv2d(V::constant(x), V::constant(w), V::constant(b));
  for (int o = 0; o < 3; ++o)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 5; ++c) {
        double acc = b.data[o];
        for (int i = 0; i < 2; ++i)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int rr = r + ky - 1, cc = c + kx - 1;
              if (rr < 0 || cc < 0 || rr >= 4 || cc >= 5) continue;
              acc += w.data[((o * 2 + i) * 3 + ky) * 3 + kx] * x.data[(i * 4 + rr) * 5 + cc];
            }
        EXPECT_NEAR(y.value()[(o * 4 + r) * 5 + c], acc, 1e-12);
      }
}

TEST(Autograd, GroupNormNormalisesEachGroup) {
  std::mt19937_64 gen(12);
  const auto x = V::constant(random_tensor({2, 6, 3, 4}, gen, -3, 5));
  const auto y = ag::group_norm(x, 3, V::constant(T({1, 6, 1, 1}, 1.0)), V::constant(T({1, 6, 1, 1})), 0.0);
  const auto v = y.value();
  for (int g = 0; g < 6; ++g) {  // two samples x three groups of 2 channels x 12 pixels
    double mean = 0, sq = 0;
    for (int i = 0; i < 24; ++i) {
      mean += v[g * 24 + i];
      sq += v[g * 24 + i] * v[g * 24 + i];
    }
    EXPECT_NEAR(mean / 24, 0.0, 1e-12);
    EXPECT_NEAR(sq / 24, 1.0, 1e-12);
  }
  // Invariant to a per-group affine change of the input.
  auto shifted = x.tensor();
  for (std::size_t i = 0; i < 24; ++i) shifted.data[i] = 4.0 * shifted.data[i] - 2.0;
  const auto y2 = ag::group_norm(V::constant(shifted), 3, V::constant(T({1, 6, 1, 1}, 1.0)),
                                 V::constant(T({1, 6, 1, 1})), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(y2.value()[i], v[i], 1e-12);
  const auto ones = V::constant(T({1, 6, 1, 1}, 1.0));
  EXPECT_THROW(ag::group_norm(x, 4, ones, ones), std::invalid_argument);
}

TEST(Autograd, GroupNormGradients) {
  std::mt19937_64 gen(13);
  for (int groups : {1, 2, 4}) {
    std::vector<V> leaves{V::leaf(random_tensor({2, 4, 3, 3}, gen, -2, 2), true),
                          V::leaf(random_tensor({1, 4, 1, 1}, gen, 0.5, 1.5), true),
                          V::leaf(random_tensor({1, 4, 1, 1}, gen), true)};
    check_gradients(leaves, [&] { return weighted_sum(ag::group_norm(leaves[0], groups, leaves[1], leaves[2]), 14); });
  }
}

TEST(Autograd, SoftDiceLossValueAndGradient) {
  // 2x2, p = 0.5 everywhere, one foreground pixel, eps = 1 -> 0.5.
  auto p = V::leaf(T({1, 1, 2, 2}, 0.5), true);
  T g({1, 1, 2, 2}, {1, 0, 0, 0});
  EXPECT_DOUBLE_EQ(ag::soft_dice_loss(p, g, 1.0).item(), 0.5);

  std::mt19937_64 gen(5);
  std::vector<V> leaves{V::leaf(random_tensor({3, 1, 8, 8}, gen, 0.05, 0.95), true)};
  T gt({3, 1, 8, 8});
  std::bernoulli_distribution bit(0.3);
  for (auto& v : gt.data) v = bit(gen);
  check_gradients(leaves, [&] { return ag::soft_dice_loss(leaves[0], gt, 1.0); });
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  auto x = V::leaf(T({1, 1, 2, 2}, 1.0), true);
  ag::NoGradGuard ng;
  auto y = ag::mean(ag::mul(x, x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, FrozenEdgesStayFrozenAfterUnfreeze) {
  auto a = V::leaf(T({1, 1, 1, 3}, 1.0), true);
  auto b = V::leaf(T({1, 1, 1, 3}, 2.0), true);
  b.set_requires_grad(false);
  auto y = ag::mean(ag::mul(a, b));
  b.set_requires_grad(true);
  ag::backward(y);
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(b.has_grad());
}

TEST(Autograd, SharedSubgraphAccumulates) {
  auto x = V::leaf(T({1, 1, 1, 1}, 3.0), true);
  auto y = ag::mul(x, x);
  auto z = ag::add(y, y);  // 2 x^2 -> 4x = 12
  ag::backward(ag::mean(z));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autograd, DeepChainDoesNotOverflowStack) {
  auto x = V::leaf(T({1, 1, 1, 1}, 1.0), true);
  auto y = x;
  for (int i = 0; i < 20000; ++i) y = ag::scale(y, 1.0);
  ag::backward(ag::mean(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Autograd, ShapeMismatchThrows) {
  auto a = V::constant(T({1, 1, 2, 2})), b = V::constant(T({1, 1, 2, 3}));
  EXPECT_THROW(ag::add(a, b), std::invalid_argument);
  EXPECT_THROW(ag::backward(a), std::logic_error);
}
