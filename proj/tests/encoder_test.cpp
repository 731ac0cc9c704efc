#include <gtest/gtest.h>

#include "openkd/encoder.hpp"
#include "test_util.hpp"

using namespace openkd;
using namespace openkd::encoder;
using openkd::testing::random_tensor;

namespace {

Tensor eye(int n) {
  Tensor t({n, n}, 0.0);
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

RawTokens raw(Tensor t) { return {ad::constant(std::move(t)), 4.0}; }

Image gradient_image(int side, float shift) {
  Image img(side, side, 3);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = std::fmod(shift + 0.01f * float(x + 2 * y + 5 * c), 1.0f);
  return img;
}

}  // namespace

TEST(Projection, IdentityWeightsPassThrough) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 3, 4}, rng);
  auto f = project_image_tokens(raw(x), {eye(4), eye(4)});
  EXPECT_EQ(f.grid.value(), x);
  EXPECT_EQ(f.stride, 4.0);
}

TEST(Projection, HandMultiply) {
  Tensor wv({2, 2}, std::vector<double>{1, 0, 0, 2});
  auto f = project_image_tokens(raw(Tensor({1, 1, 2}, std::vector<double>{1, 2})), {wv, eye(2)});
  EXPECT_EQ(f.grid.value(), Tensor({1, 1, 2}, std::vector<double>{1, 4}));
}

TEST(Projection, ChainedEqualsFusedMatrix) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({4, 4, 6}, rng), wv = random_tensor({6, 5}, rng), wo = random_tensor({5, 3}, rng);
  auto chained = project_image_tokens(raw(x), {wv, wo}).grid.value();
  Tensor fused = ad::matmul(ad::constant(wv), ad::constant(wo)).value();
  auto single = project_image_tokens(raw(x), {fused, eye(3)}).grid.value();
  EXPECT_LT(max_abs_diff(chained, single), 1e-6);
}

TEST(Projection, Linear) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({3, 3, 4}, rng), y = random_tensor({3, 3, 4}, rng);
  ProjectionWeights w{random_tensor({4, 5}, rng), random_tensor({5, 2}, rng)};
  const double a = 1.7, b = -0.4;
  auto lhs = project_image_tokens(raw(x * a + y * b), w).grid.value();
  auto rhs = project_image_tokens(raw(x), w).grid.value() * a + project_image_tokens(raw(y), w).grid.value() * b;
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-6 * std::max(1.0, l2_norm(lhs.values())));
}

TEST(Projection, ShapeMismatch) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(project_image_tokens(raw(random_tensor({2, 2, 3}, rng)), {eye(4), eye(4)}), DimensionError);
  EXPECT_THROW(project_image_tokens(raw(random_tensor({2, 2, 4}, rng)), {eye(4), eye(3)}), DimensionError);
}

TEST(Adapters, ZeroInitIsExactIdentity) {
  std::mt19937_64 rng(5);
  nn::ParameterStore store;
  BottleneckAdapter av(store, "av", 6, 3, rng);
  TransformerAdapter at(store, "at", 6, 8, rng);
  FeatureMap x{ad::constant(random_tensor({4, 4, 6}, rng)), 4.0};
  TextFeature t{ad::constant(random_tensor({5, 6}, rng)), 4};
  EXPECT_EQ(adapt_visual(x, av).grid.value(), x.grid.value());
  EXPECT_EQ(adapt_text(t, at).tokens.value(), t.tokens.value());
}

TEST(Adapters, ConstantAdapterAddsConstant) {
  std::mt19937_64 rng(6);
  FeatureMap x{ad::constant(random_tensor({2, 2, 3}, rng)), 1.0};
  auto plus = [](const ad::Var& g) { return ad::constant(Tensor(g.shape(), 0.25)); };
  auto y = adapt_visual(x, plus).grid.value();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_DOUBLE_EQ(y[i], x.grid.value()[i] + 0.25);
}

TEST(Adapters, IdentityJacobianAtInit) {
  std::mt19937_64 rng(7);
  nn::ParameterStore store;
  BottleneckAdapter av(store, "av", 3, 2, rng);
  Tensor probe = random_tensor({2, 2, 3}, rng);
  for (std::size_t j = 0; j < probe.size(); ++j) {
    Tensor up = probe, down = probe;
    up[j] += 1e-6;
    down[j] -= 1e-6;
    auto fu = adapt_visual({ad::constant(up), 1.0}, av).grid.value();
    auto fd = adapt_visual({ad::constant(down), 1.0}, av).grid.value();
    for (std::size_t i = 0; i < probe.size(); ++i) EXPECT_NEAR((fu[i] - fd[i]) / 2e-6, i == j ? 1.0 : 0.0, 1e-6);
  }
}

TEST(Adapters, RejectNonFiniteOrMisshapen) {
  FeatureMap x{ad::constant(Tensor({2, 2, 1}, 1.0)), 1.0};
  auto nan = [](const ad::Var& g) { return ad::constant(Tensor(g.shape(), std::nan(""))); };
  EXPECT_THROW(adapt_visual(x, nan), NumericError);
  auto wrong = [](const ad::Var&) { return ad::constant(Tensor({3}, 0.0)); };
  EXPECT_THROW(adapt_visual(x, wrong), DimensionError);
}

TEST(PoolText, SelectsEotRow) {
  Tensor t({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(pool_text({ad::constant(t), 2}).value(), Tensor::vector({5, 6}));
  EXPECT_EQ(pool_text({ad::constant(Tensor({1, 2}, 7.0)), 0}).value(), Tensor::vector({7, 7}));
  EXPECT_THROW(pool_text({ad::constant(t), 3}), DimensionError);
}

TEST(PoolText, AdaptThenPoolFixture) {
  std::mt19937_64 rng(8);
  nn::ParameterStore store;
  ToyEncoder enc(store, {});
  TransformerAdapter at(store, "at", enc.feature_dim(), 16, rng);
  auto t = enc.encode_text("the nose of a cat in the photo");
  const double pooled = pool_text(adapt_text(t, at)).value().sum();
  EXPECT_NEAR(pooled, pool_text(t).value().sum(), 1e-12);
  EXPECT_NEAR(pooled, -0.41274602614527051, 1e-9);
}

TEST(ToyEncoder, ShapesAndDeterminism) {
  nn::ParameterStore s1, s2;
  ToyEncoder a(s1, {}), b(s2, {});
  Image img = gradient_image(64, 0.1f);
  auto fa = project_image_tokens(a.encode_image(img), a.projection());
  auto fb = project_image_tokens(b.encode_image(img), b.projection());
  EXPECT_EQ(fa.grid.shape(), (Shape{16, 16, 48}));
  EXPECT_EQ(fa.stride, 4.0);
  EXPECT_EQ(fa.grid.value(), fb.grid.value());
  EXPECT_THROW(a.encode_image(gradient_image(32, 0.0f)), DimensionError);
}

TEST(ToyEncoder, TextFeatures) {
  nn::ParameterStore store;
  ToyEncoder enc(store, {});
  auto t = enc.encode_text("the left eye of a cat");
  EXPECT_EQ(t.length(), 8);
  EXPECT_EQ(t.eot_index, 7);
  EXPECT_EQ(enc.encode_text("the left eye of a cat").tokens.value(), t.tokens.value());
  EXPECT_NE(enc.encode_text("the right eye of a cat").tokens.value(), t.tokens.value());
  EXPECT_FALSE(store.get("text_encoder.proj").trainable);
}

TEST(ToyEncoder, OnlyLastStagesTrainable) {
  nn::ParameterStore store;
  ToyEncoder enc(store, {});
  for (const auto& p : store.all()) {
    if (p.trainable) { EXPECT_EQ(p.group, nn::kEncoderStageGroup) << p.name; }
  }
  EXPECT_TRUE(store.contains("encoder.stage2.weight"));
  EXPECT_TRUE(store.contains("encoder.stage3.weight"));
}

TEST(Plugins, Discovery) {
  nn::ParameterStore store;
  auto enc = make_encoder("toy", {{"seed", 3}}, store);
  EXPECT_EQ(enc->name(), "toy");
  EXPECT_THROW(make_encoder("nope", {}, store), ConfigurationError);
}
