#include <gtest/gtest.h>

#include "openkd/prototype.hpp"
#include "test_util.hpp"

using namespace openkd;
using namespace openkd::prototype;
using openkd::testing::random_tensor;

namespace {

encoder::FeatureMap map_of(Tensor t, double stride = 4.0) { return {ad::constant(std::move(t)), stride}; }

Tensor brute_force_vkr(const Tensor& grid, double stride, Point p, double sigma) {
  const int l = grid.dim(0), d = grid.dim(2);
  Tensor out({d}, 0.0);
  double z = 0;
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) z += std::exp(-(std::pow(j + 0.5 - p.x / stride, 2) + std::pow(i + 0.5 - p.y / stride, 2)) / (2 * sigma * sigma));
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) {
      const double w = std::exp(-(std::pow(j + 0.5 - p.x / stride, 2) + std::pow(i + 0.5 - p.y / stride, 2)) / (2 * sigma * sigma)) / z;
      for (int c = 0; c < d; ++c) out[c] += w * grid.at(i, j, c);
    }
  return out;
}

Prototype proto(Tensor v, Modality m, int id) { return {ad::constant(std::move(v)), m, id}; }

}  // namespace

TEST(Vkr, WeightsSumToOne) {
  for (double sigma : {0.1, 0.5, 1.0, 3.0}) {
    auto w = gaussian_cell_weights(5, 4.0, {7.3, 11.9}, sigma);
    EXPECT_NEAR(w.sum(), 1.0, 1e-12);
  }
}

TEST(Vkr, MatchesBruteForceOnThreeByThree) {
  std::mt19937_64 rng(1);
  Tensor g = random_tensor({3, 3, 4}, rng);
  for (Point p : {Point{6, 6}, Point{1.2, 10.7}, Point{11.9, 0.3}}) {
    auto v = extract_vkr(map_of(g), p, 1.0).vector.value();
    EXPECT_LT(max_abs_diff(v, brute_force_vkr(g, 4.0, p, 1.0)), 1e-6);
  }
}

TEST(Vkr, SmallSigmaSelectsNearestCell) {
  std::mt19937_64 rng(2);
  Tensor g = random_tensor({4, 4, 3}, rng);
  auto v = extract_vkr(map_of(g), {9.0, 5.0}, 1e-3).vector.value();
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(v[c], g.at(1, 2, c), 1e-12);
}

TEST(Vkr, ConstantGridIsInvariant) {
  Tensor g({4, 4, 2}, 0.7);
  for (double sigma : {0.3, 2.0})
    for (Point p : {Point{0, 0}, Point{15.9, 3}}) {
      auto v = extract_vkr(map_of(g), p, sigma).vector.value();
      EXPECT_NEAR(v[0], 0.7, 1e-12);
      EXPECT_NEAR(v[1], 0.7, 1e-12);
    }
}

TEST(Vkr, StaysInConvexHull) {
  std::mt19937_64 rng(3);
  Tensor g = random_tensor({5, 5, 3}, rng);
  for (int t = 0; t < 50; ++t) {
    Point p{std::uniform_real_distribution<>(0, 19.99)(rng), std::uniform_real_distribution<>(0, 19.99)(rng)};
    auto v = extract_vkr(map_of(g), p, 0.8).vector.value();
    for (int c = 0; c < 3; ++c) {
      double lo = 1e9, hi = -1e9;
      for (int i = 0; i < 25; ++i) {
        lo = std::min(lo, g[static_cast<std::size_t>(i) * 3 + c]);
        hi = std::max(hi, g[static_cast<std::size_t>(i) * 3 + c]);
      }
      EXPECT_GE(v[c], lo - 1e-12);
      EXPECT_LE(v[c], hi + 1e-12);
    }
  }
}

TEST(Vkr, Errors) {
  Tensor g({3, 3, 1}, 1.0);
  EXPECT_THROW(extract_vkr(map_of(g), {12.0, 1.0}, 1.0), DomainError);
  EXPECT_THROW(extract_vkr(map_of(g), {-0.1, 1.0}, 1.0), DomainError);
  EXPECT_THROW(extract_vkr(map_of(g), {1.0, 1.0}, 0.0), DomainError);
}

TEST(Prototypes, MeanOfVkrs) {
  std::mt19937_64 rng(4);
  std::vector<VKR> vs;
  Tensor expect({5}, 0.0);
  for (int k = 0; k < 3; ++k) {
    Tensor t = random_tensor({5}, rng);
    expect += t * (1.0 / 3.0);
    vs.push_back({ad::constant(t), k, 0});
  }
  EXPECT_LT(max_abs_diff(build_vkp(vs, 2).vector.value(), expect), 1e-7);
  std::reverse(vs.begin(), vs.end());
  EXPECT_LT(max_abs_diff(build_vkp(vs, 2).vector.value(), expect), 1e-12);
  EXPECT_EQ(build_vkp({vs[0]}, 2).vector.value(), vs[0].vector.value());
  Tensor v = Tensor::vector({1, -2});
  EXPECT_EQ(build_vkp({{ad::constant(v), 0, 0}, {ad::constant(v * -1.0), 1, 0}}, 0).vector.value(), Tensor({2}, 0.0));
  EXPECT_THROW(build_vkp({}, 0), ArgumentError);
}

TEST(Prototypes, TextualMean) {
  auto a = ad::constant(Tensor::vector({1, 3})), b = ad::constant(Tensor::vector({3, 5}));
  EXPECT_EQ(build_tkp({a}, 1).vector.value(), a.value());
  EXPECT_EQ(build_tkp({a, a}, 1).vector.value(), a.value());
  EXPECT_EQ(build_tkp({a, b}, 1).vector.value(), Tensor::vector({2, 4}));
  EXPECT_EQ(build_tkp({a}, 1).modality, Modality::textual);
  EXPECT_THROW(build_tkp({a, ad::constant(Tensor::vector({1}))}, 0), DimensionError);
}

TEST(Assemble, ModalitiesAndOrdering) {
  std::vector<Prototype> vis, txt;
  for (int id : {3, 0, 5, 1}) {
    vis.push_back(proto(Tensor({2}, 1.0), Modality::visual, id));
    txt.push_back(proto(Tensor({2}, 1.0), Modality::textual, id));
  }
  auto both = assemble(vis, txt);
  EXPECT_EQ(both.keypoint_count(), 4);
  EXPECT_EQ(both.modality_count(), 2);
  EXPECT_EQ(both.ordering, (std::vector<int>{3, 0, 5, 1}));
  auto v_only = assemble(vis, {});
  EXPECT_TRUE(v_only.has_visual());
  EXPECT_FALSE(v_only.has_textual());
  auto t_only = assemble({}, txt);
  EXPECT_EQ(t_only.modality_count(), 1);
  EXPECT_THROW(assemble({}, {}), ArgumentError);
  std::swap(txt[0], txt[1]);
  EXPECT_THROW(assemble(vis, txt), OrderingError);
}
