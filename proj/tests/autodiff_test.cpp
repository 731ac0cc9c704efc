#include <gtest/gtest.h>

#include "openkd/autodiff.hpp"
#include "test_util.hpp"

using namespace openkd;
using openkd::testing::gradient_check;
using openkd::testing::random_tensor;

namespace {
std::mt19937_64 rng_for(int seed) { return std::mt19937_64(static_cast<std::uint64_t>(seed)); }
}  // namespace

TEST(Autodiff, ElementwiseGradients) {
  auto rng = rng_for(1);
  auto a = ad::leaf(random_tensor({3, 4}, rng));
  auto b = ad::constant(random_tensor({3, 4}, rng));
  EXPECT_LT(gradient_check(a, [&] { return ad::sum(ad::mul(ad::relu(ad::add(a, b)), ad::sub(a, b))); }), 1e-5);
}

TEST(Autodiff, MatmulAndTranspose) {
  auto rng = rng_for(2);
  auto a = ad::leaf(random_tensor({3, 4}, rng));
  auto b = ad::leaf(random_tensor({4, 2}, rng));
  auto loss = [&] { return ad::sum(ad::mul(ad::matmul(a, b), ad::transpose(ad::matmul(ad::transpose(b), ad::transpose(a))))); };
  EXPECT_LT(gradient_check(a, loss), 1e-5);
  EXPECT_LT(gradient_check(b, loss), 1e-5);
}

TEST(Autodiff, SoftmaxFamily) {
  auto rng = rng_for(3);
  auto a = ad::leaf(random_tensor({3, 3}, rng));
  auto w = ad::constant(random_tensor({3, 3}, rng));
  EXPECT_LT(gradient_check(a, [&] { return ad::mean_diagonal(ad::log_softmax_rows(a)); }), 1e-5);
  EXPECT_LT(gradient_check(a, [&] { return ad::sum(ad::mul(ad::softmax_rows(a), w)); }), 1e-5);
}

TEST(Autodiff, CosineMatrix) {
  auto rng = rng_for(4);
  auto a = ad::leaf(random_tensor({3, 5}, rng));
  auto b = ad::leaf(random_tensor({3, 5}, rng));
  auto w = ad::constant(random_tensor({3, 3}, rng));
  auto loss = [&] { return ad::sum(ad::mul(ad::cosine_matrix(a, b), w)); };
  EXPECT_LT(gradient_check(a, loss), 1e-5);
  EXPECT_LT(gradient_check(b, loss), 1e-5);
  EXPECT_THROW(ad::cosine_matrix(ad::constant(Tensor({1, 5}, 0.0)), b), NumericError);
}

TEST(Autodiff, LayerNorm) {
  auto rng = rng_for(5);
  auto a = ad::leaf(random_tensor({4, 6}, rng));
  auto g = ad::leaf(random_tensor({6}, rng));
  auto bias = ad::leaf(random_tensor({6}, rng));
  auto w = ad::constant(random_tensor({4, 6}, rng));
  auto loss = [&] { return ad::sum(ad::mul(ad::layer_norm_rows(a, g, bias), w)); };
  EXPECT_LT(gradient_check(a, loss), 1e-4);
  EXPECT_LT(gradient_check(g, loss), 1e-5);
  EXPECT_LT(gradient_check(bias, loss), 1e-5);
}

TEST(Autodiff, Convolutions) {
  auto rng = rng_for(6);
  auto x = ad::leaf(random_tensor({5, 5, 3}, rng));
  auto k = ad::leaf(random_tensor({3, 3, 3, 2}, rng));
  auto b = ad::leaf(random_tensor({2}, rng));
  auto w = ad::constant(random_tensor({5, 5, 2}, rng));
  auto loss = [&] { return ad::sum(ad::mul(ad::conv2d(x, k, b), w)); };
  EXPECT_LT(gradient_check(x, loss), 1e-5);
  EXPECT_LT(gradient_check(k, loss), 1e-5);
  EXPECT_LT(gradient_check(b, loss), 1e-5);

  auto t = ad::leaf(random_tensor({3, 3, 1}, rng));
  auto tk = ad::leaf(random_tensor({4, 4, 1, 1}, rng));
  auto tw = ad::constant(random_tensor({6, 6, 1}, rng));
  auto tloss = [&] { return ad::sum(ad::mul(ad::conv_transpose2d(t, tk, ad::Var(), 2, 1), tw)); };
  EXPECT_EQ(ad::conv_transpose2d(t, tk, ad::Var(), 2, 1).shape(), (Shape{6, 6, 1}));
  EXPECT_LT(gradient_check(t, tloss), 1e-5);
  EXPECT_LT(gradient_check(tk, tloss), 1e-5);
}

TEST(Autodiff, ConvMatchesDirectLoop) {
  auto rng = rng_for(7);
  Tensor x = random_tensor({4, 4, 2}, rng), k = random_tensor({3, 3, 2, 1}, rng);
  Tensor y = ad::conv2d(ad::constant(x), ad::constant(k), ad::Var()).value();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj)
          for (int c = 0; c < 2; ++c) {
            const int yi = i + di, xj = j + dj;
            if (yi < 0 || xj < 0 || yi >= 4 || xj >= 4) continue;
            s += x.at(yi, xj, c) * k[((static_cast<std::size_t>(di + 1) * 3 + (dj + 1)) * 2 + c)];
          }
      EXPECT_NEAR(y.at(i, j, 0), s, 1e-12);
    }
}

TEST(Autodiff, DetachBlocksGradient) {
  auto a = ad::leaf(Tensor::vector({1, 2}));
  auto out = ad::sum(ad::mul(ad::detach(a), a));
  ad::backward(out);
  EXPECT_EQ(a.grad(), Tensor::vector({1, 2}));
}

TEST(Autodiff, SharedSubgraphAccumulates) {
  auto a = ad::leaf(Tensor::vector({3}));
  auto b = ad::add(a, a);
  ad::backward(ad::sum(ad::mul(b, b)));
  EXPECT_DOUBLE_EQ(a.grad()[0], 24.0);
}
