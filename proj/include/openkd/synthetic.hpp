#pragma once

// Procedural desk-scale benchmark: top-down quadrupeds rendered as coloured
// limbs on a noisy background, one coloured marker per keypoint. Species
// differ in body colour, pattern and proportions; marker colours are shared.

#include <array>
#include <cmath>
#include <filesystem>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "openkd/corpus.hpp"
#include "openkd/image.hpp"

namespace openkd::synthetic {

struct SpeciesStyle {
  std::string name;
  std::array<float, 3> body;
  std::array<float, 3> stripe;  // equal to body when unpatterned
  double scale = 1.0;           // body extent relative to the default
  double leg_spread = 0.0;      // added to |x - 0.5| of the paws
};

inline std::vector<SpeciesStyle> default_species() {
  return {
      {"fox", {0.72f, 0.42f, 0.25f}, {0.72f, 0.42f, 0.25f}, 1.00, 0.00},
      {"wolf", {0.48f, 0.48f, 0.52f}, {0.38f, 0.38f, 0.42f}, 1.05, 0.02},
      {"deer", {0.58f, 0.46f, 0.30f}, {0.58f, 0.46f, 0.30f}, 1.08, -0.04},
      {"lynx", {0.70f, 0.62f, 0.45f}, {0.55f, 0.45f, 0.30f}, 0.94, 0.03},
      {"otter", {0.36f, 0.27f, 0.22f}, {0.36f, 0.27f, 0.22f}, 0.90, -0.02},
      {"zebra", {0.85f, 0.85f, 0.82f}, {0.22f, 0.22f, 0.22f}, 1.06, 0.01},
  };
}

inline corpus::KeypointSchema default_schema() {
  corpus::KeypointSchema s;
  s.names = {"nose",          "neck",          "left front paw",  "right front paw",
             "left back paw", "right back paw", "left front knee", "right front knee"};
  s.base_ids = {0, 1, 2, 3, 4, 5};
  s.novel_ids = {6, 7};
  s.symmetry_pairs = {{2, 3}, {4, 5}, {6, 7}};
  return s;
}

inline const std::array<std::array<float, 3>, 8>& marker_colours() {
  static const std::array<std::array<float, 3>, 8> c{{{1.0f, 0.0f, 0.0f},
                                                      {0.0f, 1.0f, 0.0f},
                                                      {0.0f, 0.0f, 1.0f},
                                                      {1.0f, 1.0f, 0.0f},
                                                      {1.0f, 0.0f, 1.0f},
                                                      {0.0f, 1.0f, 1.0f},
                                                      {1.0f, 0.5f, 0.0f},
                                                      {0.5f, 0.0f, 1.0f}}};
  return c;
}

struct SynthConfig {
  int size = 64;
  int per_species = 40;
  double occlusion = 0.05;  // per-keypoint probability of a hidden marker
  double max_rotation_deg = 8.0;
  std::uint64_t seed = 7;
  std::vector<SpeciesStyle> species = default_species();
};

namespace detail {

struct Canvas {
  Image img;
  Mask mask;
};

inline void disk(Canvas& cv, double cx, double cy, double r, const std::array<float, 3>& col, bool fg) {
  const int x0 = static_cast<int>(std::floor(cx - r)), x1 = static_cast<int>(std::ceil(cx + r));
  const int y0 = static_cast<int>(std::floor(cy - r)), y1 = static_cast<int>(std::ceil(cy + r));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      if (!cv.mask.contains(x, y)) continue;
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy > r * r) continue;
      for (int c = 0; c < 3; ++c) cv.img.at(x, y, c) = col[c];
      if (fg) cv.mask.at(x, y) = 1;
    }
}

// Thick segment; `stripe` alternates with `body` every `period` pixels along it.
inline void limb(Canvas& cv, double ax, double ay, double bx, double by, double width,
                 const std::array<float, 3>& body, const std::array<float, 3>& stripe, double period = 3.0) {
  const double len = std::hypot(bx - ax, by - ay);
  const int n = std::max(2, static_cast<int>(len * 2));
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const bool alt = static_cast<int>(t * len / period) % 2 == 1;
    disk(cv, ax + t * (bx - ax), ay + t * (by - ay), width / 2, alt ? stripe : body, true);
  }
}

}  // namespace detail

struct Rendered {
  Image image;
  Mask mask;
  corpus::Instance instance;
};

inline Rendered render(const SpeciesStyle& sp, const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double n = cfg.size;
  const double extent = n * 0.72 * sp.scale * (1.0 + 0.05 * u(rng));
  const double theta = cfg.max_rotation_deg * std::numbers::pi / 180.0 * u(rng);
  const double cx = n / 2 + 2.0 * u(rng), cy = n / 2 + 2.0 * u(rng);
  auto place = [&](double nx, double ny) {
    const double x = (nx - 0.5) * extent, y = (ny - 0.5) * extent;
    return std::array<double, 2>{cx + x * std::cos(theta) - y * std::sin(theta),
                                 cy + x * std::sin(theta) + y * std::cos(theta)};
  };
  const double spread = sp.leg_spread + 0.02 * u(rng);
  const std::array<std::array<double, 2>, 6> base_norm{{{0.5, 0.06},
                                                         {0.5, 0.28},
                                                         {0.08 - spread, 0.40},
                                                         {0.92 + spread, 0.40},
                                                         {0.12 - spread, 0.96},
                                                         {0.88 + spread, 0.96}}};
  std::array<std::array<double, 2>, 8> kp;
  for (int i = 0; i < 6; ++i) kp[i] = place(base_norm[i][0], base_norm[i][1]);
  for (int side = 0; side < 2; ++side)
    kp[6 + side] = {(kp[1][0] + kp[2 + side][0]) / 2, (kp[1][1] + kp[2 + side][1]) / 2};
  const auto hip = place(0.5, 0.72);

  detail::Canvas cv{Image(cfg.size, cfg.size, 3), Mask(cfg.size, cfg.size)};
  std::uniform_real_distribution<float> bg(0.35f, 0.6f), noise(-0.06f, 0.06f);
  const std::array<float, 3> tint{bg(rng), bg(rng), bg(rng)};
  for (int y = 0; y < cfg.size; ++y)
    for (int x = 0; x < cfg.size; ++x)
      for (int c = 0; c < 3; ++c) cv.img.at(x, y, c) = tint[c] + noise(rng);

  const double w = extent;
  detail::limb(cv, kp[1][0], kp[1][1], hip[0], hip[1], 0.18 * w, sp.body, sp.stripe);
  detail::limb(cv, kp[0][0], kp[0][1], kp[1][0], kp[1][1], 0.10 * w, sp.body, sp.stripe);
  for (int side = 0; side < 2; ++side) {
    detail::limb(cv, kp[1][0], kp[1][1], kp[6 + side][0], kp[6 + side][1], 0.07 * w, sp.body, sp.stripe);
    detail::limb(cv, kp[6 + side][0], kp[6 + side][1], kp[2 + side][0], kp[2 + side][1], 0.07 * w, sp.body, sp.stripe);
    detail::limb(cv, hip[0], hip[1], kp[4 + side][0], kp[4 + side][1], 0.07 * w, sp.body, sp.stripe);
  }

  Rendered r;
  r.instance.species = sp.name;
  std::bernoulli_distribution hidden(cfg.occlusion);
  double minx = n, miny = n, maxx = 0, maxy = 0;
  for (int i = 0; i < 8; ++i) {
    const bool inside = kp[i][0] >= 0 && kp[i][1] >= 0 && kp[i][0] < n && kp[i][1] < n;
    const bool vis = inside && !hidden(rng);
    if (vis) detail::disk(cv, kp[i][0], kp[i][1], 1.6, marker_colours()[i], true);
    r.instance.keypoints.push_back({kp[i][0], kp[i][1], vis});
    if (inside) {
      minx = std::min(minx, kp[i][0]);
      miny = std::min(miny, kp[i][1]);
      maxx = std::max(maxx, kp[i][0]);
      maxy = std::max(maxy, kp[i][1]);
    }
  }
  r.instance.bbox = {minx, miny, std::max(1.0, maxx - minx), std::max(1.0, maxy - miny)};
  r.image = std::move(cv.img);
  r.mask = std::move(cv.mask);
  return r;
}

// In-memory dataset; image and mask references are "<species>/<index>.ppm"
// and "<species>/<index>.pgm".
inline corpus::Dataset generate(const SynthConfig& cfg) {
  auto store = std::make_shared<corpus::ImageStore>();
  std::vector<corpus::Instance> instances;
  std::mt19937_64 rng(cfg.seed);
  for (const auto& sp : cfg.species)
    for (int i = 0; i < cfg.per_species; ++i) {
      auto r = render(sp, cfg, rng);
      const std::string stem = sp.name + "/" + std::to_string(i);
      r.instance.image_ref = stem + ".ppm";
      r.instance.mask_ref = stem + ".pgm";
      store->put(r.instance.image_ref, std::move(r.image));
      store->put_mask(*r.instance.mask_ref, std::move(r.mask));
      instances.push_back(std::move(r.instance));
    }
  return corpus::Dataset(default_schema(), std::move(instances), store);
}

// Writes manifest.json plus every raster under `dir`.
inline void write(const corpus::Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& in : ds.instances()) {
    std::filesystem::create_directories((dir / in.image_ref).parent_path());
    pnm::write(dir / in.image_ref, *ds.store().image(in.image_ref));
    if (in.mask_ref) pnm::write_mask(dir / *in.mask_ref, *ds.store().mask(*in.mask_ref));
  }
  corpus::save_dataset(dir / "manifest.json", ds);
}

}  // namespace openkd::synthetic
