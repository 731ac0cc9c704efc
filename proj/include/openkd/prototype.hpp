#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "openkd/autodiff.hpp"
#include "openkd/encoder.hpp"
#include "openkd/errors.hpp"

namespace openkd::prototype {

enum class Modality { visual, textual };

inline const char* to_string(Modality m) { return m == Modality::visual ? "visual" : "textual"; }

struct Point {
  double x = 0, y = 0;
};

// Gaussian-pooled support feature at one keypoint.
struct VKR {
  ad::Var vector;
  int support_index = 0;
  int keypoint_index = 0;
};

struct Prototype {
  ad::Var vector;
  Modality modality = Modality::visual;
  int keypoint_id = 0;
};

struct PrototypeSet {
  std::vector<Prototype> visual;
  std::vector<Prototype> textual;
  std::vector<int> ordering;

  bool has_visual() const noexcept { return !visual.empty(); }
  bool has_textual() const noexcept { return !textual.empty(); }
  int modality_count() const noexcept { return int(has_visual()) + int(has_textual()); }
  int keypoint_count() const noexcept { return static_cast<int>(ordering.size()); }
};

// Normalized Gaussian weights over an l x l grid. The keypoint is mapped to
// continuous cell coordinates (pixel / stride); cell (i, j) has its centre at
// (j + 0.5, i + 0.5). As sigma -> 0 all mass collapses onto the nearest cell.
inline Tensor gaussian_cell_weights(int side, double stride, Point p, double sigma) {
  if (!(sigma > 0)) throw DomainError("Gaussian spread must be positive");
  const double cx = p.x / stride, cy = p.y / stride;
  Tensor w({side, side});
  double max_log = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) {
      const double dx = j + 0.5 - cx, dy = i + 0.5 - cy;
      w.at(i, j) = -(dx * dx + dy * dy) / (2.0 * sigma * sigma);
      max_log = std::max(max_log, w.at(i, j));
    }
  double total = 0.0;
  for (double& v : w.values()) total += (v = std::exp(v - max_log));
  for (double& v : w.values()) v /= total;
  return w;
}

inline void require_inside(const encoder::FeatureMap& x, Point p) {
  const double extent = x.side() * x.stride;
  if (!(p.x >= 0 && p.y >= 0 && p.x < extent && p.y < extent)) {
    throw DomainError("keypoint (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                      ") lies outside the " + std::to_string(extent) + " px image");
  }
}

inline VKR extract_vkr(const encoder::FeatureMap& x, Point p, double sigma, int support_index = 0,
                       int keypoint_index = 0) {
  require_inside(x, p);
  const Tensor w = gaussian_cell_weights(x.side(), x.stride, p, sigma);
  return {ad::weighted_cell_sum(x.grid, w), support_index, keypoint_index};
}

namespace detail {
inline ad::Var mean_of(const std::vector<ad::Var>& vs, const char* what) {
  if (vs.empty()) throw ArgumentError(std::string(what) + ": empty input list");
  for (const auto& v : vs)
    if (v.value().size() != vs[0].value().size())
      throw DimensionError(std::string(what) + ": unequal vector dimensions");
  return ad::average(vs);
}
}  // namespace detail

inline Prototype build_vkp(const std::vector<VKR>& vkrs, int keypoint_id) {
  std::vector<ad::Var> vs;
  for (const auto& v : vkrs) vs.push_back(v.vector);
  return {detail::mean_of(vs, "build_vkp"), Modality::visual, keypoint_id};
}

inline Prototype build_tkp(const std::vector<ad::Var>& pooled_texts, int keypoint_id) {
  return {detail::mean_of(pooled_texts, "build_tkp"), Modality::textual, keypoint_id};
}

inline PrototypeSet assemble(std::vector<Prototype> visual, std::vector<Prototype> textual) {
  if (visual.empty() && textual.empty()) throw ArgumentError("prototype set needs at least one modality");
  auto ids = [](const std::vector<Prototype>& ps) {
    std::vector<int> out;
    for (const auto& p : ps) out.push_back(p.keypoint_id);
    return out;
  };
  for (const auto& p : visual)
    if (p.modality != Modality::visual) throw ArgumentError("textual prototype in the visual list");
  for (const auto& p : textual)
    if (p.modality != Modality::textual) throw ArgumentError("visual prototype in the textual list");
  PrototypeSet set;
  set.ordering = visual.empty() ? ids(textual) : ids(visual);
  if (!visual.empty() && !textual.empty() && ids(textual) != set.ordering)
    throw OrderingError("visual and textual prototypes disagree on keypoint ordering");
  set.visual = std::move(visual);
  set.textual = std::move(textual);
  return set;
}

}  // namespace openkd::prototype
