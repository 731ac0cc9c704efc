#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "openkd/errors.hpp"
#include "openkd/tensor.hpp"

namespace openkd {

// Interleaved float raster, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool empty() const noexcept { return pixels.empty(); }
};

// Binary raster; nonzero = foreground.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int x, int y) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
};

namespace pnm {

namespace detail {
inline void skip_ws_and_comments(std::istream& in) {
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline std::string read_token(std::istream& in) {
  skip_ws_and_comments(in);
  std::string tok;
  in >> tok;
  return tok;
}
}  // namespace detail

// Reads binary PPM (P6) or PGM (P5) with maxval <= 255.
inline Image read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open image " + path.string());
  const std::string magic = detail::read_token(in);
  int channels = 0;
  if (magic == "P6") channels = 3;
  else if (magic == "P5") channels = 1;
  else throw IngestionError("unsupported image format in " + path.string() + " (" + magic + ")");
  const int w = std::stoi(detail::read_token(in));
  const int h = std::stoi(detail::read_token(in));
  const int maxval = std::stoi(detail::read_token(in));
  in.get();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw IngestionError("bad image header in " + path.string());
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IngestionError("truncated image " + path.string());
  Image img(w, h, channels);
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / static_cast<float>(maxval);
  return img;
}

inline void write(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ArgumentError("PNM needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline Mask read_mask(const std::filesystem::path& path) {
  const Image img = read(path);
  Mask m(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) m.at(x, y) = img.at(x, y, 0) >= 0.5f ? 1 : 0;
  return m;
}

inline void write_mask(const std::filesystem::path& path, const Mask& mask) {
  Image img(mask.width, mask.height, 1);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) img.pixels[i] = mask.bits[i] ? 1.0f : 0.0f;
  write(path, img);
}

// Portable float map (PF/Pf), little-endian, rows stored bottom-to-top.
inline void write_pfm(const std::filesystem::path& path, const Tensor& grid) {
  if (grid.rank() != 2) throw DimensionError("PFM export needs a 2-D grid");
  const int h = grid.dim(0), w = grid.dim(1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "Pf\n" << w << " " << h << "\n-1.0\n";
  for (int y = h - 1; y >= 0; --y)
    for (int x = 0; x < w; ++x) {
      const float v = static_cast<float>(grid.at(y, x));
      out.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
}

inline Tensor read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  const std::string magic = detail::read_token(in);
  if (magic != "Pf") throw IngestionError("not a single-channel PFM: " + path.string());
  const int w = std::stoi(detail::read_token(in));
  const int h = std::stoi(detail::read_token(in));
  const double scale = std::stod(detail::read_token(in));
  in.get();
  if (scale >= 0) throw IngestionError("big-endian PFM is not supported");
  Tensor t({h, w});
  for (int y = h - 1; y >= 0; --y)
    for (int x = 0; x < w; ++x) {
      float v = 0.0f;
      in.read(reinterpret_cast<char*>(&v), sizeof(float));
      t.at(y, x) = v;
    }
  if (!in) throw IngestionError("truncated PFM " + path.string());
  return t;
}

}  // namespace pnm

// Bilinear resize with pixel-center alignment.
inline Image resize_bilinear(const Image& src, int width, int height) {
  if (src.width == width && src.height == height) return src;
  Image dst(width, height, src.channels);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = (1 - tx) * src.at(x0, y0, c) + tx * src.at(x1, y0, c);
        const double bot = (1 - tx) * src.at(x0, y1, c) + tx * src.at(x1, y1, c);
        dst.at(x, y, c) = static_cast<float>((1 - ty) * top + ty * bot);
      }
    }
  }
  return dst;
}

}  // namespace openkd
