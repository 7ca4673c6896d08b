#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "tripath/cnn_path.hpp"
#include "tripath/third_path.hpp"

using namespace tripath;
using tripath::testing::bitwise_equal;
using tripath::testing::grad_check;
using tripath::testing::random_tensor;
using tripath::testing::weighted_sum;

namespace {

FeatureBundle<double> random_bundle(Shape s, std::mt19937_64& rng, bool rg = false) {
  return {random_tensor<double>(s, rng, -1, 1, rg), random_tensor<double>(s, rng, -1, 1, rg),
          random_tensor<double>(s, rng, -1, 1, rg), random_tensor<double>(s, rng, -1, 1, rg)};
}

ThirdPathConfig small_third() { return {8, 8, 2, 1, 6}; }

}  // namespace

// ---- CNN path

TEST(CnnPath, IdenticalDatesGiveZeroDifferenceSlice) {
  CnnPath<double> path({8, 0, 6}, 1);
  std::mt19937_64 rng(1);
  auto s = random_tensor<double>({2, 8, 4, 4}, rng);
  Tensor<double> v = path.fused_input(s, s, Mode::Eval);
  ASSERT_EQ(v.shape(), (Shape{2, 16, 4, 4}));
  Tensor<double> diff = slice(v, 1, 0, 8);
  EXPECT_TRUE(bitwise_equal(diff, Tensor<double>(diff.shape(), 0.0)));
  // the FT1 half still sees the features
  Tensor<double> u = slice(v, 1, 8, 8);
  EXPECT_FALSE(bitwise_equal(u, Tensor<double>(u.shape(), 0.0)));
}

TEST(CnnPath, DifferenceSliceIsS1MinusS2) {
  CnnPath<double> path({8, 4, 6}, 2);
  std::mt19937_64 rng(2);
  auto s1 = random_tensor<double>({1, 8, 3, 3}, rng), s2 = random_tensor<double>({1, 8, 3, 3}, rng);
  Tensor<double> v = path.fused_input(s1, s2, Mode::Eval);
  ASSERT_EQ(v.shape(), (Shape{1, 12, 3, 3}));
  auto d = slice(v, 1, 0, 8);
  for (std::size_t i = 0; i < d.numel(); ++i) EXPECT_EQ(d.data()[i], s1.data()[i] - s2.data()[i]);
}

TEST(CnnPath, OutputShape) {
  CnnPath<double> path({8, 0, 6}, 3);
  std::mt19937_64 rng(3);
  auto s1 = random_tensor<double>({2, 8, 4, 5}, rng), s2 = random_tensor<double>({2, 8, 4, 5}, rng);
  EXPECT_EQ(path(s1, s2, Mode::Train).shape(), (Shape{2, 6, 4, 5}));
}

TEST(CnnPath, RejectsMismatchedInputs) {
  CnnPath<double> path({8, 0, 6}, 4);
  EXPECT_THROW(path(Tensor<double>({1, 8, 4, 4}), Tensor<double>({1, 8, 4, 3}), Mode::Eval), ShapeMismatch);
  EXPECT_THROW(path(Tensor<double>({1, 4, 4, 4}), Tensor<double>({1, 4, 4, 4}), Mode::Eval), ShapeMismatch);
}

TEST(CnnPath, Gradient) {
  CnnPath<double> path({4, 0, 3}, 5);
  std::mt19937_64 rng(5);
  auto s1 = random_tensor<double>({2, 4, 3, 3}, rng, -1, 1, true), s2 = random_tensor<double>({2, 4, 3, 3}, rng, -1, 1, true);
  ParamList<double> params;
  path.collect("cnn", params);
  for (Mode mode : {Mode::Eval, Mode::Train}) {
    auto f = [&] { return weighted_sum(path(s1, s2, mode)); };
    std::vector<Tensor<double>> inputs{s1, s2};
    for (auto& p : params) {
      if (p.role != Role::Trainable) continue;
      // conv3 feeds BN; with batch statistics its bias cancels
      if (mode == Mode::Train && p.name.ends_with("conv3.bias")) {
        auto inv = tripath::testing::invariance_check(f, p.tensor);
        EXPECT_LT(inv.max_abs_grad, 1e-12) << p.name;
        EXPECT_LT(inv.readout_change, 1e-12) << p.name;
      } else {
        inputs.push_back(p.tensor);
      }
    }
    auto stats = grad_check(f, inputs, 1e-3, 1e-6, 32);
    EXPECT_GE(stats.pass_fraction(), 0.99) << stats.max_rel_error;
  }
}

// ---- attention core

TEST(Attention, SingleKeyReturnsValue) {
  std::mt19937_64 rng(6);
  auto q = random_tensor<double>({2, 5, 8}, rng), k = random_tensor<double>({2, 1, 8}, rng);
  auto v = random_tensor<double>({2, 1, 8}, rng);
  Tensor<double> probs;
  auto out = scaled_dot_product_attention(q, k, v, 2, &probs);
  for (double p : probs.data()) EXPECT_EQ(p, 1.0);
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 5; ++i)
      for (int c = 0; c < 8; ++c) EXPECT_EQ(out.data()[(b * 5 + i) * 8 + c], v.data()[b * 8 + c]);
}

TEST(Attention, SingleKeyMultiHeadIsProjectedValue) {
  std::mt19937_64 rng(7);
  Rng init(7);
  MultiHeadAttention<double> mha(8, 2, init);
  auto q = random_tensor<double>({1, 4, 8}, rng), k = random_tensor<double>({1, 1, 8}, rng);
  auto v = random_tensor<double>({1, 1, 8}, rng);
  auto out = mha(q, k, v);
  auto vp = mha.wv(v);
  auto want = mha.wo(concat<double>({vp, vp, vp, vp}, 1));
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 8; ++c) EXPECT_EQ(out.data()[i * 8 + c], want.data()[i * 8 + c]);
}

TEST(Attention, ProbabilitiesAreRowStochastic) {
  std::mt19937_64 rng(8);
  auto q = random_tensor<double>({1, 6, 8}, rng, -3, 3), k = random_tensor<double>({1, 7, 8}, rng, -3, 3);
  auto v = random_tensor<double>({1, 7, 8}, rng);
  Tensor<double> probs;
  scaled_dot_product_attention(q, k, v, 4, &probs);
  ASSERT_EQ(probs.shape(), (Shape{4, 6, 7}));
  for (int r = 0; r < 24; ++r) {
    double s = 0;
    for (int j = 0; j < 7; ++j) s += probs.data()[r * 7 + j];
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Attention, MatchesDirectFormula) {
  std::mt19937_64 rng(9);
  auto q = random_tensor<double>({1, 3, 4}, rng), k = random_tensor<double>({1, 5, 4}, rng);
  auto v = random_tensor<double>({1, 5, 4}, rng);
  auto out = scaled_dot_product_attention(q, k, v, 1);
  for (int i = 0; i < 3; ++i) {
    std::vector<double> w(5);
    double s = 0;
    for (int j = 0; j < 5; ++j) {
      double dot = 0;
      for (int c = 0; c < 4; ++c) dot += q.data()[i * 4 + c] * k.data()[j * 4 + c];
      w[j] = std::exp(dot / 2.0);
      s += w[j];
    }
    for (int c = 0; c < 4; ++c) {
      double want = 0;
      for (int j = 0; j < 5; ++j) want += w[j] / s * v.data()[j * 4 + c];
      EXPECT_NEAR(out.data()[i * 4 + c], want, 1e-14);
    }
  }
}

TEST(Attention, Gradient) {
  std::mt19937_64 rng(10);
  auto q = random_tensor<double>({2, 8, 8}, rng, -1, 1, true), k = random_tensor<double>({2, 8, 8}, rng, -1, 1, true);
  auto v = random_tensor<double>({2, 8, 8}, rng, -1, 1, true);
  auto stats = grad_check([&] { return weighted_sum(scaled_dot_product_attention(q, k, v, 2)); }, {q, k, v}, 1e-3, 1e-6, 128);
  EXPECT_GE(stats.pass_fraction(), 0.99) << stats.max_rel_error;
}

TEST(Attention, PositionTable) {
  auto pe = sincos_position_2d<double>(2, 3, 8);
  ASSERT_EQ(pe.shape(), (Shape{1, 6, 8}));
  // token (0, 0): sin 0 = 0, cos 0 = 1
  const std::vector<double> first{0, 0, 1, 1, 0, 0, 1, 1};
  for (int c = 0; c < 8; ++c) EXPECT_EQ(pe.data()[c], first[c]);
  // token (1, 2), lowest frequency channel
  EXPECT_DOUBLE_EQ(pe.data()[5 * 8 + 0], std::sin(1.0));
  EXPECT_DOUBLE_EQ(pe.data()[5 * 8 + 4], std::sin(2.0));
  EXPECT_THROW(sincos_position_2d<double>(2, 2, 6), InvalidArg);
}

// ---- third path

TEST(ThirdPath, TapSumsPairShallowToQueryDeepToValue) {
  std::mt19937_64 rng(11);
  auto b1 = random_bundle({1, 8, 2, 3}, rng), b2 = random_bundle({1, 8, 2, 3}, rng);
  auto t = sum_taps(b1, b2);
  EXPECT_TRUE(bitwise_equal(t.q, grid_to_tokens(add(b1.C2, b2.C2))));
  EXPECT_TRUE(bitwise_equal(t.k, grid_to_tokens(add(b1.C3, b2.C3))));
  EXPECT_TRUE(bitwise_equal(t.v, grid_to_tokens(add(b1.C4, b2.C4))));
  EXPECT_EQ(t.q.shape(), (Shape{1, 6, 8}));
}

TEST(ThirdPath, OutputShapeAndResize) {
  ThirdPath<double> tp(small_third(), 12);
  std::mt19937_64 rng(12);
  auto b1 = random_bundle({2, 8, 2, 4}, rng), b2 = random_bundle({2, 8, 2, 4}, rng);
  EXPECT_EQ(tp(b1, b2, 2, 4).shape(), (Shape{2, 6, 2, 4}));
  EXPECT_EQ(tp(b1, b2, 4, 8).shape(), (Shape{2, 6, 4, 8}));
}

TEST(ThirdPath, RejectsMismatchedTaps) {
  ThirdPath<double> tp(small_third(), 13);
  std::mt19937_64 rng(13);
  auto b1 = random_bundle({1, 8, 2, 2}, rng), b2 = random_bundle({1, 8, 2, 2}, rng);
  b2.C3 = Tensor<double>({1, 8, 2, 3});
  EXPECT_THROW(tp(b1, b2, 2, 2), ShapeMismatch);
}

TEST(ThirdPath, AttentionWeightsExposed) {
  auto cfg = small_third();
  cfg.blocks = 2;
  ThirdPath<double> tp(cfg, 14);
  std::mt19937_64 rng(14);
  auto b1 = random_bundle({1, 8, 2, 2}, rng), b2 = random_bundle({1, 8, 2, 2}, rng);
  std::vector<Tensor<double>> probs;
  auto h = tp.attend_tokens(tp.form_qkv(b1, b2), &probs);
  EXPECT_EQ(h.shape(), (Shape{1, 4, 8}));
  ASSERT_EQ(probs.size(), 2u);
  EXPECT_EQ(probs[0].shape(), (Shape{2, 4, 4}));
}

TEST(ThirdPath, Gradient) {
  ThirdPath<double> tp(small_third(), 15);
  std::mt19937_64 rng(15);
  auto b1 = random_bundle({1, 8, 2, 4}, rng, true), b2 = random_bundle({1, 8, 2, 4}, rng, true);
  auto f = [&] { return weighted_sum(tp(b1, b2, 2, 4)); };
  std::vector<Tensor<double>> inputs{b1.C2, b1.C3, b1.C4, b2.C2, b2.C3, b2.C4};
  ParamList<double> params;
  tp.collect("third", params);
  for (auto& p : params) {
    // a key bias adds the same q.b to every score of a query row
    if (p.name.ends_with("in_k.bias") || p.name.ends_with("attn.k.bias")) {
      auto inv = tripath::testing::invariance_check(f, p.tensor);
      EXPECT_LT(inv.max_abs_grad, 1e-12) << p.name;
      EXPECT_LT(inv.readout_change, 1e-12) << p.name;
    } else {
      inputs.push_back(p.tensor);
    }
  }
  auto stats = grad_check(f, inputs, 1e-3, 1e-6, 24);
  EXPECT_GE(stats.pass_fraction(), 0.99) << stats.max_rel_error;
}

TEST(ThirdPath, ConfigValidation) {
  EXPECT_THROW(ThirdPath<double>({8, 6, 4, 1, 6}, 0), InvalidArg);
  EXPECT_THROW(ThirdPath<double>({8, 8, 3, 1, 6}, 0), InvalidArg);
  EXPECT_THROW(ThirdPath<double>({8, 8, 2, 0, 6}, 0), InvalidArg);
}
