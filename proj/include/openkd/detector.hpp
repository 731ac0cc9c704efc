#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "openkd/autodiff.hpp"
#include "openkd/encoder.hpp"
#include "openkd/errors.hpp"
#include "openkd/nn.hpp"
#include "openkd/prototype.hpp"

namespace openkd::detector {

using prototype::Modality;
using prototype::Point;

struct AttentiveMap {
  ad::Var grid;
  int keypoint_id = 0;
};

// Single-channel score map; `upsample` is the factor relative to the
// feature grid.
struct Heatmap {
  ad::Var grid;
  int upsample = 1;

  int rows() const { return grid.shape()[0]; }
  int cols() const { return grid.shape()[1]; }
};

struct HeatmapGroup {
  Modality modality = Modality::visual;
  std::vector<Heatmap> maps;
};

struct GaussianSpec {
  double sigma_gt = 2.0;  // heatmap cells
};

// grid[i, j, c] = xq[i, j, c] * proto[c]
inline AttentiveMap correlate(const prototype::Prototype& proto, const encoder::FeatureMap& xq) {
  return {ad::mul_row_vector(xq.grid, proto.vector), proto.keypoint_id};
}

// Class-agnostic decoder: conv3x3 d -> hidden, ReLU, conv3x3 hidden -> 1.
// One instance serves every keypoint of either modality.
class Decoder {
 public:
  Decoder() = default;
  Decoder(nn::ParameterStore& store, const std::string& name, int dim, int hidden, std::mt19937_64& rng,
          bool with_bias = true, int kernel = 3)
      : dim_(dim) {
    first_ = nn::Conv2d(store, name + ".conv1", dim, hidden, kernel, nn::kDecoderGroup, rng, 1.0, with_bias);
    second_ = nn::Conv2d(store, name + ".conv2", hidden, 1, kernel, nn::kDecoderGroup, rng, 1.0, with_bias);
  }

  int channels() const noexcept { return dim_; }

  ad::Var operator()(const ad::Var& a) const { return second_(ad::relu(first_(a))); }

 private:
  int dim_ = 0;
  nn::Conv2d first_, second_;
};

inline Heatmap decode(const AttentiveMap& a, const Decoder& decoder) {
  const auto& s = a.grid.shape();
  if (s.size() != 3 || s[2] != decoder.channels()) {
    throw ConfigurationError("decoder configured for " + std::to_string(decoder.channels()) +
                             " channels, attentive map is " + shape_str(s));
  }
  return {ad::reshape(decoder(a.grid), {s[0], s[1]}), 1};
}

// Row-interpolation matrix for 2x bilinear resampling with pixel-centre
// alignment and edge clamping; rows sum to one.
inline Tensor bilinear_matrix(int n) {
  Tensor r({2 * n, n}, 0.0);
  for (int i = 0; i < 2 * n; ++i) {
    const double src = std::clamp((i + 0.5) / 2.0 - 0.5, 0.0, n - 1.0);
    const int lo = static_cast<int>(src);
    const int hi = std::min(lo + 1, n - 1);
    const double t = src - lo;
    r.at(i, lo) += 1.0 - t;
    r.at(i, hi) += t;
  }
  return r;
}

// Deterministic non-learned 2x upsampling.
inline Heatmap upsample_bilinear(const Heatmap& h) {
  if (h.upsample != 1) throw ArgumentError("upsampling expects a feature-resolution heatmap");
  const Tensor rr = bilinear_matrix(h.rows());
  const Tensor rc = bilinear_matrix(h.cols());
  auto out = ad::matmul(ad::matmul(ad::constant(rr), h.grid), ad::transpose(ad::constant(rc)));
  return {out, 2};
}

// Learned 2x upsampler: one 4x4 stride-2 transposed convolution initialised
// to bilinear interpolation.
class Upsampler {
 public:
  Upsampler() = default;
  Upsampler(nn::ParameterStore& store, const std::string& name) {
    Tensor k({4, 4, 1, 1});
    const double w1[4] = {0.25, 0.75, 0.75, 0.25};
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) k[static_cast<std::size_t>(i) * 4 + j] = w1[i] * w1[j];
    kernel_ = store.add(name + ".kernel", std::move(k), nn::kDecoderGroup);
    bias_ = store.add(name + ".bias", Tensor({1}, 0.0), nn::kDecoderGroup);
  }

  Heatmap operator()(const Heatmap& h) const {
    if (h.upsample != 1) throw ArgumentError("upsampling expects a feature-resolution heatmap");
    auto x = ad::reshape(h.grid, {h.rows(), h.cols(), 1});
    auto y = ad::conv_transpose2d(x, kernel_, bias_, 2, 1);
    return {ad::reshape(y, {2 * h.rows(), 2 * h.cols()}), 2};
  }

 private:
  ad::Var kernel_, bias_;
};

// Both groups present: elementwise (H^v + H^t) / 2. One present: passthrough.
inline HeatmapGroup fuse(const std::optional<HeatmapGroup>& hv, const std::optional<HeatmapGroup>& ht) {
  if (!hv && !ht) throw ArgumentError("fuse needs at least one heatmap group");
  if (!hv) return *ht;
  if (!ht) return *hv;
  if (hv->maps.size() != ht->maps.size()) throw DimensionError("heatmap groups differ in size");
  HeatmapGroup out{Modality::visual, {}};
  for (std::size_t i = 0; i < hv->maps.size(); ++i) {
    const auto& a = hv->maps[i];
    const auto& b = ht->maps[i];
    if (a.grid.shape() != b.grid.shape()) throw DimensionError("heatmap shapes differ");
    out.maps.push_back({ad::scale(ad::add(a.grid, b.grid), 0.5), a.upsample});
  }
  return out;
}

// Unnormalised Gaussian on a rows x cols grid whose cells are `cell_stride`
// pixels wide, centred on the cell containing p so the peak is exactly 1:
// exp(-r^2 / 2 sigma^2), r in cells.
inline Tensor gt_heatmap(Point p, const GaussianSpec& spec, int rows, int cols, double cell_stride) {
  if (!(spec.sigma_gt > 0)) throw DomainError("sigma_gt must be positive");
  if (!(p.x >= 0 && p.y >= 0 && p.x < cols * cell_stride && p.y < rows * cell_stride))
    throw DomainError("ground-truth keypoint lies outside the image");
  const double cx = std::floor(p.x / cell_stride) + 0.5, cy = std::floor(p.y / cell_stride) + 0.5;
  Tensor h({rows, cols});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const double dx = j + 0.5 - cx, dy = i + 0.5 - cy;
      h.at(i, j) = std::exp(-(dx * dx + dy * dy) / (2.0 * spec.sigma_gt * spec.sigma_gt));
    }
  return h;
}

// Argmax cell centre in pixels; ties go to the smallest row-major index.
inline Point heatmap_to_coords(const Tensor& h, double cell_stride) {
  if (h.rank() != 2 || h.empty()) throw ArgumentError("heatmap_to_coords needs a non-empty 2-D map");
  std::size_t best = 0;
  for (std::size_t i = 1; i < h.size(); ++i)
    if (h[i] > h[best]) best = i;
  const int cols = h.dim(1);
  const int r = static_cast<int>(best) / cols, c = static_cast<int>(best) % cols;
  return {(c + 0.5) * cell_stride, (r + 0.5) * cell_stride};
}

}  // namespace openkd::detector
