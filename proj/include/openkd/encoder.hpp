#pragma once

// Visual/text encoders, the token projection that keeps the spatial image
// tokens, and the residual adapters for both modalities.

#include <nlohmann/json.hpp>

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include "openkd/autodiff.hpp"
#include "openkd/errors.hpp"
#include "openkd/image.hpp"
#include "openkd/nn.hpp"
#include "openkd/tensor.hpp"

namespace openkd::encoder {

inline constexpr const char* kTextEncoderGroup = "text_encoder";

// l x l x d grid; stride is the number of input pixels per cell.
struct FeatureMap {
  ad::Var grid;
  double stride = 1.0;

  int side() const { return grid.shape()[0]; }
  int dim() const { return grid.shape()[2]; }
};

// m x d token sequence with the position of the end-of-sequence token.
struct TextFeature {
  ad::Var tokens;
  int eot_index = 0;

  int length() const { return tokens.shape()[0]; }
};

struct ProjectionWeights {
  Tensor w_v;  // d_raw x d_mid
  Tensor w_o;  // d_mid x d
};

// l x l x d_raw raw image tokens before projection.
struct RawTokens {
  ad::Var grid;
  double stride = 1.0;
};

// grid = X W_v W_o, applied per token.
inline FeatureMap project_image_tokens(const RawTokens& raw, const ProjectionWeights& w) {
  const auto& s = raw.grid.shape();
  if (s.size() != 3) throw DimensionError("raw tokens must be an l x l x d grid, got " + shape_str(s));
  if (s[0] < 1 || s[0] != s[1]) throw DimensionError("raw token grid must be square");
  if (w.w_v.rank() != 2 || w.w_o.rank() != 2 || w.w_v.dim(0) != s[2] || w.w_v.dim(1) != w.w_o.dim(0)) {
    throw DimensionError("projection weights " + shape_str(w.w_v.shape()) + " x " +
                         shape_str(w.w_o.shape()) + " do not compose with token width " +
                         std::to_string(s[2]));
  }
  const int l = s[0];
  auto x = ad::reshape(raw.grid, {l * l, s[2]});
  auto y = ad::matmul(ad::matmul(x, ad::constant(w.w_v)), ad::constant(w.w_o));
  return {ad::reshape(y, {l, l, w.w_o.dim(1)}), raw.stride};
}

namespace detail {
inline ad::Var residual(const ad::Var& input, const ad::Var& delta) {
  if (delta.shape() != input.shape()) {
    throw DimensionError("adapter output " + shape_str(delta.shape()) + " differs from input " +
                         shape_str(input.shape()));
  }
  if (!delta.value().all_finite()) throw NumericError("adapter produced non-finite values");
  return ad::add(input, delta);
}
}  // namespace detail

// x + A(x). Any callable mapping a grid Var to an equally-shaped Var works.
template <class Adapter>
FeatureMap adapt_visual(const FeatureMap& x, const Adapter& adapter) {
  return {detail::residual(x.grid, adapter(x.grid)), x.stride};
}

template <class Adapter>
TextFeature adapt_text(const TextFeature& t, const Adapter& adapter) {
  return {detail::residual(t.tokens, adapter(t.tokens)), t.eot_index};
}

// Sequence -> vector reduction: the end-of-sequence token.
inline ad::Var pool_text(const TextFeature& t) {
  if (t.eot_index < 0 || t.eot_index >= t.length()) throw DimensionError("eot_index out of range");
  return ad::select_row(t.tokens, t.eot_index);
}

// ResNet-style bottleneck over the grid: 1x1 reduce, 3x3, 1x1 expand. The
// expanding layer starts at zero so x + A(x) is the identity at init.
class BottleneckAdapter {
 public:
  BottleneckAdapter() = default;
  BottleneckAdapter(nn::ParameterStore& store, const std::string& name, int dim, int width,
                    std::mt19937_64& rng) {
    reduce_ = nn::Conv2d(store, name + ".reduce", dim, width, 1, nn::kAdapterGroup, rng);
    mid_ = nn::Conv2d(store, name + ".mid", width, width, 3, nn::kAdapterGroup, rng);
    expand_ = nn::Conv2d(store, name + ".expand", width, dim, 1, nn::kAdapterGroup, rng, 0.0);
  }

  ad::Var operator()(const ad::Var& grid) const {
    return expand_(ad::relu(mid_(ad::relu(reduce_(grid)))));
  }

 private:
  nn::Conv2d reduce_, mid_, expand_;
};

// Single-head pre-norm transformer block returning only its residual
// branches, i.e. block(t) - t. Output projections start at zero.
class TransformerAdapter {
 public:
  TransformerAdapter() = default;
  TransformerAdapter(nn::ParameterStore& store, const std::string& name, int dim, int ffn_width,
                     std::mt19937_64& rng)
      : dim_(dim) {
    ln1_g_ = store.add(name + ".ln1.gain", Tensor({dim}, 1.0), nn::kAdapterGroup);
    ln1_b_ = store.add(name + ".ln1.bias", Tensor({dim}, 0.0), nn::kAdapterGroup);
    q_ = nn::Linear(store, name + ".q", dim, dim, nn::kAdapterGroup, rng);
    k_ = nn::Linear(store, name + ".k", dim, dim, nn::kAdapterGroup, rng);
    v_ = nn::Linear(store, name + ".v", dim, dim, nn::kAdapterGroup, rng);
    o_ = nn::Linear(store, name + ".o", dim, dim, nn::kAdapterGroup, rng, 0.0);
    ln2_g_ = store.add(name + ".ln2.gain", Tensor({dim}, 1.0), nn::kAdapterGroup);
    ln2_b_ = store.add(name + ".ln2.bias", Tensor({dim}, 0.0), nn::kAdapterGroup);
    ff1_ = nn::Linear(store, name + ".ff1", dim, ffn_width, nn::kAdapterGroup, rng);
    ff2_ = nn::Linear(store, name + ".ff2", ffn_width, dim, nn::kAdapterGroup, rng, 0.0);
  }

  ad::Var operator()(const ad::Var& tokens) const {
    auto h = ad::layer_norm_rows(tokens, ln1_g_, ln1_b_);
    auto scores = ad::scale(ad::matmul(q_(h), ad::transpose(k_(h))), 1.0 / std::sqrt(double(dim_)));
    auto attn = o_(ad::matmul(ad::softmax_rows(scores), v_(h)));
    auto mid = ad::add(tokens, attn);
    auto ffn = ff2_(ad::relu(ff1_(ad::layer_norm_rows(mid, ln2_g_, ln2_b_))));
    return ad::add(attn, ffn);
  }

 private:
  int dim_ = 0;
  ad::Var ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  nn::Linear q_, k_, v_, o_, ff1_, ff2_;
};

// ---------------------------------------------------------------- plugins

class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual std::string name() const = 0;
  // Square input side, in pixels, that encode_image expects.
  virtual int input_size() const = 0;
  virtual int feature_dim() const = 0;
  virtual RawTokens encode_image(const Image& image) const = 0;
  virtual const ProjectionWeights& projection() const = 0;
  virtual TextFeature encode_text(const std::string& text) const = 0;
};

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

struct ToyEncoderOptions {
  int input_size = 64;
  int patch = 4;
  int raw_dim = 64;
  int mid_dim = 64;
  int dim = 48;
  std::uint64_t seed = 0;
};

// Deterministic stand-in for a pretrained vision-language encoder: fixed
// random linear maps over raster patches, two residual stages that may be
// finetuned, and hashed word embeddings for text.
class ToyEncoder final : public Encoder {
 public:
  ToyEncoder(nn::ParameterStore& store, ToyEncoderOptions opts) : opts_(opts) {
    if (opts_.input_size % opts_.patch != 0) throw ConfigurationError("input size must be a multiple of the patch size");
    std::mt19937_64 rng(opts_.seed * 0x9E3779B97F4A7C15ull + 17);
    const int pdim = opts_.patch * opts_.patch * 3;
    stem_w_ = nn::random_normal({pdim, opts_.raw_dim}, 2.0 / std::sqrt(double(pdim)), rng);
    stem_b_ = nn::random_normal({opts_.raw_dim}, 0.2, rng);
    stage2_ = nn::Linear(store, "encoder.stage2", opts_.raw_dim, opts_.raw_dim, nn::kEncoderStageGroup, rng, 0.5);
    stage3_ = nn::Linear(store, "encoder.stage3", opts_.raw_dim, opts_.raw_dim, nn::kEncoderStageGroup, rng, 0.5);
    projection_.w_v = nn::random_normal({opts_.raw_dim, opts_.mid_dim}, 1.0 / std::sqrt(double(opts_.raw_dim)), rng);
    projection_.w_o = nn::random_normal({opts_.mid_dim, opts_.dim}, 1.0 / std::sqrt(double(opts_.mid_dim)), rng);
    text_proj_ = store.add("text_encoder.proj",
                           nn::random_normal({opts_.dim, opts_.dim}, 1.0 / std::sqrt(double(opts_.dim)), rng),
                           kTextEncoderGroup, false);
  }

  std::string name() const override { return "toy"; }
  int input_size() const override { return opts_.input_size; }
  int feature_dim() const override { return opts_.dim; }
  const ProjectionWeights& projection() const override { return projection_; }
  const ToyEncoderOptions& options() const noexcept { return opts_; }

  RawTokens encode_image(const Image& image) const override {
    if (image.width != opts_.input_size || image.height != opts_.input_size || image.channels != 3) {
      throw DimensionError("toy encoder expects a " + std::to_string(opts_.input_size) + "x" +
                           std::to_string(opts_.input_size) + " RGB image");
    }
    const Tensor& stem = stem_features(image);
    auto h = ad::constant(stem);
    h = ad::add(h, ad::relu(stage2_(h)));
    h = ad::add(h, ad::relu(stage3_(h)));
    return {h, static_cast<double>(opts_.patch)};
  }

  TextFeature encode_text(const std::string& text) const override {
    const auto words = tokenize(text);
    const int d = opts_.dim;
    const int m = static_cast<int>(words.size()) + 2;
    Tensor raw({m, d}, 0.0);
    auto put = [&](int row, const Tensor& v) { std::copy_n(v.data(), d, raw.data() + static_cast<std::size_t>(row) * d); };
    put(0, word_vector("<sot>"));
    Tensor mean({d}, 0.0);
    for (std::size_t i = 0; i < words.size(); ++i) {
      const Tensor v = word_vector(words[i]);
      put(static_cast<int>(i) + 1, v);
      mean += v;
    }
    if (!words.empty()) mean *= 1.0 / static_cast<double>(words.size());
    mean += word_vector("<eot>") * 0.1;
    put(m - 1, mean);
    ad::RowMatrix proj = ad::ConstMatMap(raw.data(), m, d) * ad::ConstMatMap(text_proj_.value().data(), d, d);
    Tensor tokens({m, d});
    std::copy_n(proj.data(), static_cast<std::size_t>(m) * d, tokens.data());
    return {ad::constant(std::move(tokens)), m - 1};
  }

 private:
  Tensor word_vector(const std::string& word) const {
    std::mt19937_64 rng(fnv1a(word) ^ (opts_.seed * 0xD1B54A32D192ED03ull));
    Tensor v = nn::random_normal({opts_.dim}, 1.0, rng);
    v *= 1.0 / l2_norm(v.values());
    return v;
  }

  const Tensor& stem_features(const Image& image) const {
    std::uint64_t key = 1469598103934665603ull;
    {
      const auto* bytes = reinterpret_cast<const unsigned char*>(image.pixels.data());
      for (std::size_t i = 0; i < image.pixels.size() * sizeof(float); ++i) {
        key ^= bytes[i];
        key *= 1099511628211ull;
      }
    }
    std::lock_guard lock(cache_mu_);
    auto it = stem_cache_.find(key);
    if (it != stem_cache_.end()) return it->second;
    const int p = opts_.patch, l = opts_.input_size / p, pdim = p * p * 3;
    ad::RowMatrix patches(l * l, pdim);
    for (int gy = 0; gy < l; ++gy)
      for (int gx = 0; gx < l; ++gx)
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x)
            for (int c = 0; c < 3; ++c)
              patches(gy * l + gx, (y * p + x) * 3 + c) = image.at(gx * p + x, gy * p + y, c) - 0.5;
    ad::RowMatrix f = patches * ad::ConstMatMap(stem_w_.data(), pdim, opts_.raw_dim);
    Tensor out({l, l, opts_.raw_dim});
    for (int r = 0; r < l * l; ++r)
      for (int c = 0; c < opts_.raw_dim; ++c)
        out[static_cast<std::size_t>(r) * opts_.raw_dim + c] = std::max(0.0, f(r, c) + stem_b_[c]);
    return stem_cache_.emplace(key, std::move(out)).first->second;
  }

  ToyEncoderOptions opts_;
  Tensor stem_w_, stem_b_;
  nn::Linear stage2_, stage3_;
  ProjectionWeights projection_;
  ad::Var text_proj_;
  mutable std::mutex cache_mu_;
  mutable std::map<std::uint64_t, Tensor> stem_cache_;
};

// Adapter for features exported offline by a pretrained vision-language
// model. Layout of the feature directory:
//   projection.json   {"w_v": [[..]], "w_o": [[..]], "stride": s, "input_size": n}
//   images.jsonl      {"key": "<hex pixel digest>", "shape": [l, l, d_raw], "data": [..]}
//   texts.jsonl       {"text": "...", "tokens": [[..], ..], "eot_index": k}
class PrecomputedEncoder final : public Encoder {
 public:
  explicit PrecomputedEncoder(const std::filesystem::path& dir) {
    std::ifstream pj(dir / "projection.json");
    if (!pj) throw ConfigurationError("missing projection.json in " + dir.string());
    const auto j = nlohmann::json::parse(pj);
    projection_.w_v = matrix_from_json(j.at("w_v"));
    projection_.w_o = matrix_from_json(j.at("w_o"));
    stride_ = j.value("stride", 32.0);
    input_size_ = j.value("input_size", 384);
    read_lines(dir / "images.jsonl", [this](const nlohmann::json& r) {
      images_[r.at("key").get<std::string>()] =
          Tensor(r.at("shape").get<Shape>(), r.at("data").get<std::vector<double>>());
    });
    read_lines(dir / "texts.jsonl", [this](const nlohmann::json& r) {
      Tensor t = matrix_from_json(r.at("tokens"));
      texts_[r.at("text").get<std::string>()] = {std::move(t), r.at("eot_index").get<int>()};
    });
  }

  static std::string image_key(const Image& image) {
    std::uint64_t h = 1469598103934665603ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(image.pixels.data());
    for (std::size_t i = 0; i < image.pixels.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  std::string name() const override { return "clip-features"; }
  int input_size() const override { return input_size_; }
  int feature_dim() const override { return projection_.w_o.dim(1); }
  const ProjectionWeights& projection() const override { return projection_; }

  RawTokens encode_image(const Image& image) const override {
    auto it = images_.find(image_key(image));
    if (it == images_.end()) throw ConfigurationError("no exported features for image " + image_key(image));
    return {ad::constant(it->second), stride_};
  }

  TextFeature encode_text(const std::string& text) const override {
    auto it = texts_.find(text);
    if (it == texts_.end()) throw ConfigurationError("no exported features for text '" + text + "'");
    return {ad::constant(it->second.first), it->second.second};
  }

 private:
  static Tensor matrix_from_json(const nlohmann::json& rows) {
    const int n = static_cast<int>(rows.size());
    const int m = n ? static_cast<int>(rows.at(0).size()) : 0;
    Tensor t({n, m});
    for (int i = 0; i < n; ++i) {
      if (static_cast<int>(rows.at(i).size()) != m) throw DimensionError("ragged matrix in feature file");
      for (int j = 0; j < m; ++j) t.at(i, j) = rows.at(i).at(j).get<double>();
    }
    return t;
  }

  template <class Fn>
  static void read_lines(const std::filesystem::path& p, Fn fn) {
    std::ifstream in(p);
    if (!in) return;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) fn(nlohmann::json::parse(line));
  }

  ProjectionWeights projection_;
  double stride_ = 32.0;
  int input_size_ = 384;
  std::map<std::string, Tensor> images_;
  std::map<std::string, std::pair<Tensor, int>> texts_;
};

// Plugin discovery by name. Options come from the "encoder" block of the run
// configuration.
inline std::unique_ptr<Encoder> make_encoder(const std::string& name, const nlohmann::json& opts,
                                             nn::ParameterStore& store) {
  if (name == "toy") {
    ToyEncoderOptions o;
    o.input_size = opts.value("input_size", o.input_size);
    o.patch = opts.value("patch", o.patch);
    o.raw_dim = opts.value("raw_dim", o.raw_dim);
    o.mid_dim = opts.value("mid_dim", o.mid_dim);
    o.dim = opts.value("dim", o.dim);
    o.seed = opts.value("seed", o.seed);
    return std::make_unique<ToyEncoder>(store, o);
  }
  if (name == "clip-features") {
    return std::make_unique<PrecomputedEncoder>(opts.value("features_dir", std::string(".")));
  }
  throw ConfigurationError("unknown encoder plugin: " + name);
}

}  // namespace openkd::encoder
