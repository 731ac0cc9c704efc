#include <gtest/gtest.h>

#include "openkd/detector.hpp"
#include "test_util.hpp"

using namespace openkd;
using namespace openkd::detector;
using openkd::testing::random_tensor;

namespace {

prototype::Prototype proto(Tensor v) { return {ad::constant(std::move(v)), Modality::visual, 0}; }
encoder::FeatureMap fmap(Tensor t) { return {ad::constant(std::move(t)), 4.0}; }
Heatmap hm(Tensor t) { return {ad::constant(std::move(t)), 1}; }

}  // namespace

TEST(Correlate, IdentityZeroAndHandFixture) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 3, 4}, rng);
  EXPECT_EQ(correlate(proto(Tensor({4}, 1.0)), fmap(x)).grid.value(), x);
  EXPECT_EQ(correlate(proto(Tensor({4}, 0.0)), fmap(x)).grid.value(), Tensor({3, 3, 4}, 0.0));
  Tensor small({2, 2, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  EXPECT_EQ(correlate(proto(Tensor::vector({10, -1})), fmap(small)).grid.value(),
            Tensor({2, 2, 2}, std::vector<double>{10, -2, 30, -4, 50, -6, 70, -8}));
  EXPECT_THROW(correlate(proto(Tensor({3}, 1.0)), fmap(small)), DimensionError);
}

TEST(Correlate, LinearInPrototype) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({4, 4, 5}, rng), p1 = random_tensor({5}, rng), p2 = random_tensor({5}, rng);
  const double a = 0.3, b = -2.1;
  auto lhs = correlate(proto(p1 * a + p2 * b), fmap(x)).grid.value();
  auto rhs = correlate(proto(p1), fmap(x)).grid.value() * a + correlate(proto(p2), fmap(x)).grid.value() * b;
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-6);
}

TEST(Decode, SharedParametersAndShapes) {
  std::mt19937_64 rng(3);
  nn::ParameterStore store;
  Decoder dec(store, "dec", 6, 3, rng);
  const auto before = store.checksum();
  Tensor x = random_tensor({5, 5, 6}, rng);
  auto h1 = decode({ad::constant(x), 0}, dec);
  auto h2 = decode({ad::constant(x * 2.0), 7}, dec);
  EXPECT_EQ(h1.grid.shape(), (Shape{5, 5}));
  EXPECT_EQ(h1.upsample, 1);
  EXPECT_EQ(store.checksum(), before);
  EXPECT_EQ(store.all().size(), 4u);
  EXPECT_THROW(decode({ad::constant(Tensor({5, 5, 4}, 0.0)), 0}, dec), ConfigurationError);
}

TEST(Decode, BiasFreeZeroInZeroOut) {
  std::mt19937_64 rng(4);
  nn::ParameterStore store;
  Decoder dec(store, "dec", 4, 2, rng, false);
  EXPECT_EQ(decode({ad::constant(Tensor({3, 3, 4}, 0.0)), 0}, dec).grid.value(), Tensor({3, 3}, 0.0));
}

TEST(Decode, SeededFixture) {
  std::mt19937_64 rng(5);
  nn::ParameterStore store;
  Decoder dec(store, "dec", 4, 2, rng);
  Tensor x({3, 3, 4});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(double(i));
  EXPECT_NEAR(decode({ad::constant(x), 0}, dec).grid.value().sum(), -0.55323880237217782, 1e-9);
}

TEST(Upsample, BilinearFallback) {
  auto up = upsample_bilinear(hm(Tensor({12, 12}, 0.37)));
  EXPECT_EQ(up.grid.shape(), (Shape{24, 24}));
  EXPECT_EQ(up.upsample, 2);
  for (double v : up.grid.value().values()) EXPECT_NEAR(v, 0.37, 1e-15);
  EXPECT_THROW(upsample_bilinear(up), ArgumentError);
}

TEST(Upsample, LearnedStartsNearBilinear) {
  nn::ParameterStore store;
  Upsampler up(store, "up");
  auto out = up(hm(Tensor({6, 6}, 1.0)));
  EXPECT_EQ(out.grid.shape(), (Shape{12, 12}));
  for (int i = 1; i < 11; ++i)
    for (int j = 1; j < 11; ++j) EXPECT_NEAR(out.grid.value().at(i, j), 1.0, 1e-12);
  Tensor ramp({4, 4});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) ramp.at(i, j) = i + 0.5 * j;
  auto learned = up(hm(ramp)).grid.value();
  auto bilinear = upsample_bilinear(hm(ramp)).grid.value();
  for (int i = 1; i < 7; ++i)
    for (int j = 1; j < 7; ++j) EXPECT_NEAR(learned.at(i, j), bilinear.at(i, j), 1e-12);
}

TEST(Fuse, MeanPassthroughAndErrors) {
  HeatmapGroup v{Modality::visual, {hm(Tensor({2, 2}, 0.2))}};
  HeatmapGroup t{Modality::textual, {hm(Tensor({2, 2}, 0.6))}};
  EXPECT_NEAR(fuse(v, t).maps[0].grid.value()[0], 0.4, 1e-15);
  EXPECT_EQ(fuse(v, std::nullopt).maps[0].grid.value(), v.maps[0].grid.value());
  EXPECT_EQ(fuse(std::nullopt, t).maps[0].grid.value(), t.maps[0].grid.value());
  EXPECT_EQ(fuse(v, v).maps[0].grid.value(), v.maps[0].grid.value());
  EXPECT_THROW(fuse(std::nullopt, std::nullopt), ArgumentError);
  HeatmapGroup odd{Modality::textual, {hm(Tensor({3, 3}, 0.0))}};
  EXPECT_THROW(fuse(v, odd), DimensionError);
}

TEST(Fuse, RandomPairMatchesMean) {
  std::mt19937_64 rng(6);
  Tensor a = random_tensor({8, 8}, rng), b = random_tensor({8, 8}, rng);
  auto f = fuse(HeatmapGroup{Modality::visual, {hm(a)}}, HeatmapGroup{Modality::textual, {hm(b)}}).maps[0].grid.value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(f[i], (a[i] + b[i]) / 2, 1e-7);
}

TEST(GroundTruth, PeakSymmetryAndClosedForm) {
  GaussianSpec spec;
  auto h = gt_heatmap({13.0, 21.0}, spec, 16, 16, 2.0);
  EXPECT_EQ(*std::max_element(h.values().begin(), h.values().end()), 1.0);
  EXPECT_EQ(h.at(10, 6), 1.0);
  auto c = gt_heatmap({16.0, 16.0}, spec, 16, 16, 2.0);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) EXPECT_EQ(c.at(i, j), c.at(j, i));
  auto one = gt_heatmap({5.0, 3.0}, {1.0}, 8, 8, 2.0);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      const double r2 = std::pow(j - 2, 2) + std::pow(i - 1, 2);
      EXPECT_NEAR(one.at(i, j), std::exp(-r2 / 2.0), 1e-6);
    }
  EXPECT_THROW(gt_heatmap({40.0, 1.0}, spec, 16, 16, 2.0), DomainError);
  EXPECT_THROW(gt_heatmap({1.0, 1.0}, {0.0}, 16, 16, 2.0), DomainError);
}

TEST(Coords, ArgmaxAndTieBreak) {
  Tensor h({4, 4}, 0.0);
  h.at(2, 3) = 5.0;
  auto p = heatmap_to_coords(h, 8.0);
  EXPECT_EQ(p.x, 28.0);
  EXPECT_EQ(p.y, 20.0);
  auto flat = heatmap_to_coords(Tensor({4, 4}, 1.0), 8.0);
  EXPECT_EQ(flat.x, 4.0);
  EXPECT_EQ(flat.y, 4.0);
}

TEST(Coords, RoundTripWithinOneCell) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<> u(0.0, 63.99);
  for (int t = 0; t < 200; ++t) {
    Point p{u(rng), u(rng)};
    auto q = heatmap_to_coords(gt_heatmap(p, {}, 32, 32, 2.0), 2.0);
    EXPECT_LE(std::hypot(p.x - q.x, p.y - q.y), std::sqrt(2.0) * 2.0);
  }
}
