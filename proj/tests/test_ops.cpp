#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "tripath/attention.hpp"
#include "tripath/nn.hpp"

using namespace tripath;
using tripath::testing::grad_check;
using tripath::testing::random_tensor;
using tripath::testing::weighted_sum;

namespace {

void expect_grads_match(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs) {
  const auto stats = grad_check(f, std::move(inputs), 1e-4);
  EXPECT_EQ(stats.passed, stats.checked) << "max rel error " << stats.max_rel_error;
}

}  // namespace

TEST(Ops, BroadcastArithmeticGradients) {
  std::mt19937_64 rng(1);
  auto a = random_tensor<double>({2, 3, 4, 4}, rng, -1, 1, true);
  auto b = random_tensor<double>({1, 3, 1, 1}, rng, -1, 1, true);
  auto c = random_tensor<double>({2, 1, 4, 4}, rng, -1, 1, true);
  expect_grads_match([&] { return weighted_sum(mul(add(a, b), sub(c, b))); }, {a, b, c});
}

TEST(Ops, BroadcastIndexMatchesManualExpansion) {
  auto a = Tensor<double>::from({2, 1, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<double>::from({1, 2, 1}, {10, 20});
  auto s = add(a, b);
  ASSERT_EQ(s.shape(), (Shape{2, 2, 3}));
  const std::vector<double> expect{11, 12, 13, 21, 22, 23, 14, 15, 16, 24, 25, 26};
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_EQ(s.data()[i], expect[i]);
}

TEST(Ops, UnaryGradients) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({3, 5}, rng, -3, 3, true);
  expect_grads_match([&] { return weighted_sum(gelu(x)); }, {x});
  expect_grads_match([&] { return weighted_sum(sigmoid(x)); }, {x});
  expect_grads_match([&] { return weighted_sum(scale(x, 2.5)); }, {x});
}

TEST(Ops, GeluReferenceValues) {
  auto x = Tensor<double>::from({3}, {-1.0, 0.0, 2.0});
  auto y = gelu(x);
  EXPECT_NEAR(y.data()[0], -0.15865525393145707, 1e-15);
  EXPECT_EQ(y.data()[1], 0.0);
  EXPECT_NEAR(y.data()[2], 1.9544997361036416, 1e-15);
}

TEST(Ops, PermuteReshapeConcatSliceGradients) {
  std::mt19937_64 rng(3);
  auto a = random_tensor<double>({2, 3, 4}, rng, -1, 1, true);
  auto b = random_tensor<double>({2, 2, 4}, rng, -1, 1, true);
  expect_grads_match([&] { return weighted_sum(permute(a, {2, 0, 1})); }, {a});
  expect_grads_match([&] { return weighted_sum(slice(concat<double>({a, b}, 1), 1, 2, 3)); }, {a, b});
  expect_grads_match([&] { return weighted_sum(reshape(a, {6, 4})); }, {a});
}

TEST(Ops, PermuteMovesElements) {
  auto a = Tensor<double>::from({2, 3}, {0, 1, 2, 3, 4, 5});
  auto t = permute(a, {1, 0});
  const std::vector<double> expect{0, 3, 1, 4, 2, 5};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(t.data()[i], expect[i]);
}

TEST(Ops, MatmulAllTransposeCombinations) {
  std::mt19937_64 rng(4);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      auto a = random_tensor<double>(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng, -1, 1, true);
      auto b = random_tensor<double>(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng, -1, 1, true);
      auto c = matmul(a, b, ta, tb);
      ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
      // c[0,1,2] by hand
      double ref = 0;
      for (int k = 0; k < 4; ++k) {
        const double av = ta ? a.data()[k * 3 + 1] : a.data()[1 * 4 + k];
        const double bv = tb ? b.data()[2 * 4 + k] : b.data()[k * 5 + 2];
        ref += av * bv;
      }
      EXPECT_NEAR(c.data()[1 * 5 + 2], ref, 1e-14);
      expect_grads_match([&] { return weighted_sum(matmul(a, b, ta, tb)); }, {a, b});
    }
}

TEST(Ops, LinearGradients) {
  std::mt19937_64 rng(5);
  auto x = random_tensor<double>({2, 3, 6}, rng, -1, 1, true);
  auto w = random_tensor<double>({4, 6}, rng, -1, 1, true);
  auto b = random_tensor<double>({4}, rng, -1, 1, true);
  expect_grads_match([&] { return weighted_sum(linear(x, w, b)); }, {x, w, b});
}

TEST(Ops, SoftmaxRowsAreDistributionsAndDifferentiate) {
  std::mt19937_64 rng(6);
  auto x = random_tensor<double>({4, 7}, rng, -5, 5, true);
  auto y = softmax(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int c = 0; c < 7; ++c) {
      EXPECT_GT(y.data()[r * 7 + c], 0.0);
      s += y.data()[r * 7 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  expect_grads_match([&] { return weighted_sum(softmax(x)); }, {x});
}

TEST(Ops, LayerNormGradients) {
  std::mt19937_64 rng(7);
  auto x = random_tensor<double>({3, 8}, rng, -2, 2, true);
  auto g = random_tensor<double>({8}, rng, 0.5, 1.5, true);
  auto b = random_tensor<double>({8}, rng, -1, 1, true);
  expect_grads_match([&] { return weighted_sum(layer_norm(x, g, b)); }, {x, g, b});
}

TEST(Ops, BatchNormTrainAndEvalGradients) {
  std::mt19937_64 rng(8);
  auto x = random_tensor<double>({2, 3, 3, 3}, rng, -2, 2, true);
  BatchNorm2d<double> bn(3);
  for (auto& v : bn.gamma.data()) v = 0.7;
  expect_grads_match([&] { return weighted_sum(bn(x, Mode::Train)); }, {x, bn.gamma, bn.beta});
  for (auto& v : bn.running_var.data()) v = 1.7;
  expect_grads_match([&] { return weighted_sum(bn(x, Mode::Eval)); }, {x, bn.gamma, bn.beta});
}

TEST(Ops, BatchNormTrainingNormalizesAndTracksStatistics) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<double>({4, 2, 3, 3}, rng, 1, 3);
  BatchNorm2d<double> bn(2);
  auto y = bn(x, Mode::Train);
  for (int c = 0; c < 2; ++c) {
    double m = 0, m2 = 0, xm = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 9; ++i) {
        const double v = y.data()[(n * 2 + c) * 9 + i];
        m += v;
        m2 += v * v;
        xm += x.data()[(n * 2 + c) * 9 + i];
      }
    EXPECT_NEAR(m / 36, 0.0, 1e-12);
    EXPECT_NEAR(m2 / 36, 1.0, 1e-3);
    EXPECT_NEAR(bn.running_mean.data()[c], 0.1 * xm / 36, 1e-12);
  }
}

TEST(Ops, ConvolutionMatchesDirectSum) {
  std::mt19937_64 rng(10);
  auto x = random_tensor<double>({2, 3, 5, 4}, rng);
  auto w = random_tensor<double>({2, 3, 3, 3}, rng);
  auto b = random_tensor<double>({2}, rng);
  auto y = conv2d(x, w, b);
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 2; ++o)
      for (int yy = 0; yy < 5; ++yy)
        for (int xx = 0; xx < 4; ++xx) {
          double acc = b.data()[o];
          for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 3; ++i)
              for (int j = 0; j < 3; ++j) {
                const int sy = yy + i - 1, sx = xx + j - 1;
                if (sy < 0 || sy >= 5 || sx < 0 || sx >= 4) continue;
                acc += w.data()[((o * 3 + c) * 3 + i) * 3 + j] * x.data()[((n * 3 + c) * 5 + sy) * 4 + sx];
              }
          EXPECT_NEAR(y.data()[((n * 2 + o) * 5 + yy) * 4 + xx], acc, 1e-13);
        }
}

TEST(Ops, ConvolutionGradients) {
  std::mt19937_64 rng(11);
  auto x = random_tensor<double>({2, 3, 5, 5}, rng, -1, 1, true);
  auto w = random_tensor<double>({4, 3, 5, 5}, rng, -1, 1, true);
  auto b = random_tensor<double>({4}, rng, -1, 1, true);
  expect_grads_match([&] { return weighted_sum(conv2d(x, w, b)); }, {x, w, b});
  auto dw = random_tensor<double>({3, 1, 3, 3}, rng, -1, 1, true);
  auto db = random_tensor<double>({3}, rng, -1, 1, true);
  expect_grads_match([&] { return weighted_sum(conv2d(x, dw, db, 3)); }, {x, dw, db});
}

TEST(Ops, EvenKernelIsRejected) {
  Rng rng(1);
  EXPECT_THROW(Conv2d<double>(2, 2, 4, rng), ShapeError);
}

TEST(Ops, BilinearUpsampleGradientsAndConstants) {
  std::mt19937_64 rng(12);
  auto x = random_tensor<double>({1, 2, 3, 4}, rng, -1, 1, true);
  expect_grads_match([&] { return weighted_sum(upsample_bilinear(x, 6, 8)); }, {x});
  auto c = Tensor<double>({1, 1, 2, 2}, 3.25);
  auto up = upsample_bilinear(c, 4, 4);
  for (double v : up.data()) EXPECT_EQ(v, 3.25);
}

TEST(Ops, PoolAndTokenRoundTrip) {
  std::mt19937_64 rng(13);
  auto x = random_tensor<double>({2, 3, 2, 4}, rng, -1, 1, true);
  expect_grads_match([&] { return weighted_sum(global_avg_pool(x)); }, {x});
  auto back = tokens_to_grid(grid_to_tokens(x), 2, 4);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back.data()[i], x.data()[i]);
}

TEST(Ops, NoGradGuardSkipsHistory) {
  auto a = Tensor<double>({2}, 1.0, true);
  NoGradGuard guard;
  auto b = scale(a, 2.0);
  EXPECT_FALSE(b.requires_grad());
}

TEST(Ops, GradientsAccumulateAcrossSharedUses) {
  auto a = Tensor<double>::from({1}, {3.0}, true);
  auto y = mul(a, a);  // d/da = 2a
  sum(add(y, a)).backward();
  EXPECT_EQ(a.grad()[0], 7.0);
}
