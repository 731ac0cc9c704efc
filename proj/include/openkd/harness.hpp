#pragma once

// Model assembly, training loop, evaluation modes, PCK metric, checkpoints
// and run configuration.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "openkd/autodiff.hpp"
#include "openkd/auxgen.hpp"
#include "openkd/corpus.hpp"
#include "openkd/detector.hpp"
#include "openkd/diverseprompt.hpp"
#include "openkd/encoder.hpp"
#include "openkd/errors.hpp"
#include "openkd/llm_gateway.hpp"
#include "openkd/nn.hpp"
#include "openkd/objective.hpp"
#include "openkd/prototype.hpp"

namespace openkd::harness {

using prototype::Point;
using json = nlohmann::json;

class UnknownConfigKey : public ConfigurationError {
 public:
  explicit UnknownConfigKey(std::string key)
      : ConfigurationError("unknown config key '" + key + "'"), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// ---------------------------------------------------------------- PCK

struct PCKConfig {
  double rho = 0.1;

  void validate() const {
    if (!(rho > 0)) throw ConfigurationError("pck.rho must be positive");
  }
};

inline bool pck_correct(Point pred, Point gt, const corpus::BBox& bbox, const PCKConfig& cfg = {}) {
  if (!(bbox.w > 0 && bbox.h > 0)) throw ArgumentError("bbox must have positive width and height");
  return std::hypot(pred.x - gt.x, pred.y - gt.y) <= cfg.rho * std::max(bbox.w, bbox.h);
}

// ---------------------------------------------------------------- config

struct ModalityFlags {
  bool use_visual = true;
  bool use_aux_kp = true;
  bool use_text = true;
  bool use_aux_text = true;
};

struct ModelConfig {
  std::string encoder = "toy";
  json encoder_options = json::object();
  int adapter_width = 16;
  int text_ffn_width = 64;
  int decoder_hidden = 32;
  double vkr_sigma = 1.0;
  bool learned_upsampler = true;
  std::uint64_t init_seed = 0;
};

struct TrainConfig {
  long episodes = 40000;
  int shots = 1;
  int max_keypoints = 8;
  int batch_pairs = 1;
  long bootstrap_steps = 10000;
  long log_every = 100;
  long checkpoint_every = 0;
  double sigma_gt = 2.0;
  bool cot = true;
  bool fixed_episode = false;
};

struct OptimConfig {
  double lr_adapter = 1e-4;
  double lr_decoder = 1e-4;
  double lr_encoder = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
};

struct EvalConfig {
  long episodes = 1000;
  int shots = 1;
  std::string mode = "zero_shot";
  std::string split = "novel";
  double rho = 0.1;
};

struct LLMConfig {
  std::string mode = "mock";
  std::string cache;
  std::string transcripts;
  std::string model = "gpt-3.5-turbo";
  double temperature = 1.0;
};

struct DataConfig {
  std::string manifest;
  std::vector<std::string> train_species;
  std::vector<std::string> val_species;
  std::vector<std::string> test_species;
  std::string paths;
  std::string templates;
  std::string synonyms;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  OptimConfig optim;
  EvalConfig eval;
  objective::LossConfig loss;
  auxgen::FTCConfig ftc;
  ModalityFlags flags;
  LLMConfig llm;
  DataConfig data;
  std::uint64_t seed = 0;

  void validate() const;
};

namespace detail {

inline void check_keys(const json& j, const std::string& prefix, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigurationError("config section '" + prefix + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw UnknownConfigKey(prefix.empty() ? it.key() : prefix + "." + it.key());
  }
}

template <class T>
void read(const json& j, const char* key, T& dst, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigurationError("config key '" + prefix + "." + key + "' has the wrong type");
  }
}

}  // namespace detail

inline json to_json(const ModelConfig& m) {
  return {{"encoder", m.encoder},
          {"encoder_options", m.encoder_options},
          {"adapter_width", m.adapter_width},
          {"text_ffn_width", m.text_ffn_width},
          {"decoder_hidden", m.decoder_hidden},
          {"vkr_sigma", m.vkr_sigma},
          {"learned_upsampler", m.learned_upsampler},
          {"init_seed", m.init_seed}};
}

inline json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"train",
           {{"episodes", c.train.episodes},
            {"shots", c.train.shots},
            {"max_keypoints", c.train.max_keypoints},
            {"batch_pairs", c.train.batch_pairs},
            {"bootstrap_steps", c.train.bootstrap_steps},
            {"log_every", c.train.log_every},
            {"checkpoint_every", c.train.checkpoint_every},
            {"sigma_gt", c.train.sigma_gt},
            {"cot", c.train.cot},
            {"fixed_episode", c.train.fixed_episode}}},
          {"optim",
           {{"lr_adapter", c.optim.lr_adapter},
            {"lr_decoder", c.optim.lr_decoder},
            {"lr_encoder", c.optim.lr_encoder},
            {"beta1", c.optim.beta1},
            {"beta2", c.optim.beta2}}},
          {"eval",
           {{"episodes", c.eval.episodes},
            {"shots", c.eval.shots},
            {"mode", c.eval.mode},
            {"split", c.eval.split},
            {"rho", c.eval.rho}}},
          {"loss",
           {{"lambda1", c.loss.lambda1},
            {"lambda2", c.loss.lambda2},
            {"lambda3", c.loss.lambda3},
            {"tau", c.loss.tau},
            {"use_vv", c.loss.use_vv},
            {"vt_pairing", c.loss.vt_pairing}}},
          {"ftc", {{"R", c.ftc.R}, {"eta", c.ftc.eta}, {"alpha", c.ftc.alpha}}},
          {"flags",
           {{"use_visual", c.flags.use_visual},
            {"use_aux_kp", c.flags.use_aux_kp},
            {"use_text", c.flags.use_text},
            {"use_aux_text", c.flags.use_aux_text}}},
          {"llm",
           {{"mode", c.llm.mode},
            {"cache", c.llm.cache},
            {"transcripts", c.llm.transcripts},
            {"model", c.llm.model},
            {"temperature", c.llm.temperature}}},
          {"data",
           {{"manifest", c.data.manifest},
            {"train_species", c.data.train_species},
            {"val_species", c.data.val_species},
            {"test_species", c.data.test_species},
            {"paths", c.data.paths},
            {"templates", c.data.templates},
            {"synonyms", c.data.synonyms}}},
          {"seed", c.seed}};
}

// Overlays `j` onto `base`. Every key is checked; an unknown key raises
// UnknownConfigKey naming its dotted path.
inline RunConfig config_from_json(const json& j, RunConfig c = {}) {
  using detail::read;
  detail::check_keys(j, "", {"model", "train", "optim", "eval", "loss", "ftc", "flags", "llm", "data", "seed"});
  read(j, "seed", c.seed, "");
  if (j.contains("model")) {
    const auto& s = j["model"];
    detail::check_keys(s, "model", {"encoder", "encoder_options", "adapter_width", "text_ffn_width", "decoder_hidden",
                                    "vkr_sigma", "learned_upsampler", "init_seed"});
    read(s, "encoder", c.model.encoder, "model");
    if (s.contains("encoder_options")) c.model.encoder_options = s["encoder_options"];
    read(s, "adapter_width", c.model.adapter_width, "model");
    read(s, "text_ffn_width", c.model.text_ffn_width, "model");
    read(s, "decoder_hidden", c.model.decoder_hidden, "model");
    read(s, "vkr_sigma", c.model.vkr_sigma, "model");
    read(s, "learned_upsampler", c.model.learned_upsampler, "model");
    read(s, "init_seed", c.model.init_seed, "model");
  }
  if (j.contains("train")) {
    const auto& s = j["train"];
    detail::check_keys(s, "train", {"episodes", "shots", "max_keypoints", "batch_pairs", "bootstrap_steps", "log_every",
                                    "checkpoint_every", "sigma_gt", "cot", "fixed_episode"});
    read(s, "episodes", c.train.episodes, "train");
    read(s, "shots", c.train.shots, "train");
    read(s, "max_keypoints", c.train.max_keypoints, "train");
    read(s, "batch_pairs", c.train.batch_pairs, "train");
    read(s, "bootstrap_steps", c.train.bootstrap_steps, "train");
    read(s, "log_every", c.train.log_every, "train");
    read(s, "checkpoint_every", c.train.checkpoint_every, "train");
    read(s, "sigma_gt", c.train.sigma_gt, "train");
    read(s, "cot", c.train.cot, "train");
    read(s, "fixed_episode", c.train.fixed_episode, "train");
  }
  if (j.contains("optim")) {
    const auto& s = j["optim"];
    detail::check_keys(s, "optim", {"lr_adapter", "lr_decoder", "lr_encoder", "beta1", "beta2"});
    read(s, "lr_adapter", c.optim.lr_adapter, "optim");
    read(s, "lr_decoder", c.optim.lr_decoder, "optim");
    read(s, "lr_encoder", c.optim.lr_encoder, "optim");
    read(s, "beta1", c.optim.beta1, "optim");
    read(s, "beta2", c.optim.beta2, "optim");
  }
  if (j.contains("eval")) {
    const auto& s = j["eval"];
    detail::check_keys(s, "eval", {"episodes", "shots", "mode", "split", "rho"});
    read(s, "episodes", c.eval.episodes, "eval");
    read(s, "shots", c.eval.shots, "eval");
    read(s, "mode", c.eval.mode, "eval");
    read(s, "split", c.eval.split, "eval");
    read(s, "rho", c.eval.rho, "eval");
  }
  if (j.contains("loss")) {
    const auto& s = j["loss"];
    detail::check_keys(s, "loss", {"lambda1", "lambda2", "lambda3", "tau", "use_vv", "vt_pairing"});
    read(s, "lambda1", c.loss.lambda1, "loss");
    read(s, "lambda2", c.loss.lambda2, "loss");
    read(s, "lambda3", c.loss.lambda3, "loss");
    read(s, "tau", c.loss.tau, "loss");
    read(s, "use_vv", c.loss.use_vv, "loss");
    read(s, "vt_pairing", c.loss.vt_pairing, "loss");
  }
  if (j.contains("ftc")) {
    const auto& s = j["ftc"];
    detail::check_keys(s, "ftc", {"R", "eta", "alpha"});
    read(s, "R", c.ftc.R, "ftc");
    read(s, "eta", c.ftc.eta, "ftc");
    read(s, "alpha", c.ftc.alpha, "ftc");
  }
  if (j.contains("flags")) {
    const auto& s = j["flags"];
    detail::check_keys(s, "flags", {"use_visual", "use_aux_kp", "use_text", "use_aux_text"});
    read(s, "use_visual", c.flags.use_visual, "flags");
    read(s, "use_aux_kp", c.flags.use_aux_kp, "flags");
    read(s, "use_text", c.flags.use_text, "flags");
    read(s, "use_aux_text", c.flags.use_aux_text, "flags");
  }
  if (j.contains("llm")) {
    const auto& s = j["llm"];
    detail::check_keys(s, "llm", {"mode", "cache", "transcripts", "model", "temperature"});
    read(s, "mode", c.llm.mode, "llm");
    read(s, "cache", c.llm.cache, "llm");
    read(s, "transcripts", c.llm.transcripts, "llm");
    read(s, "model", c.llm.model, "llm");
    read(s, "temperature", c.llm.temperature, "llm");
  }
  if (j.contains("data")) {
    const auto& s = j["data"];
    detail::check_keys(s, "data", {"manifest", "train_species", "val_species", "test_species", "paths", "templates",
                                   "synonyms"});
    read(s, "manifest", c.data.manifest, "data");
    read(s, "train_species", c.data.train_species, "data");
    read(s, "val_species", c.data.val_species, "data");
    read(s, "test_species", c.data.test_species, "data");
    read(s, "paths", c.data.paths, "data");
    read(s, "templates", c.data.templates, "data");
    read(s, "synonyms", c.data.synonyms, "data");
  }
  c.validate();
  return c;
}

inline void RunConfig::validate() const {
  loss.validate();
  ftc.validate();
  PCKConfig{eval.rho}.validate();
  llm::parse_mode(llm.mode);
  if (train.episodes < 0) throw ConfigurationError("train.episodes must be non-negative");
  if (train.shots < 1) throw ConfigurationError("train.shots must be at least 1");
  if (train.batch_pairs < 1) throw ConfigurationError("train.batch_pairs must be at least 1");
  if (!(train.sigma_gt > 0)) throw ConfigurationError("train.sigma_gt must be positive");
  if (eval.shots < 0) throw ConfigurationError("eval.shots must be non-negative");
  if (eval.split != "base" && eval.split != "novel" && eval.split != "all")
    throw ConfigurationError("eval.split must be base, novel or all");
  if (eval.mode != "zero_shot" && eval.mode != "k_shot" && eval.mode != "k_shot_with_text")
    throw ConfigurationError("eval.mode must be zero_shot, k_shot or k_shot_with_text");
  if (!flags.use_visual && !flags.use_text && !flags.use_aux_kp && !flags.use_aux_text)
    throw ConfigurationError("at least one modality flag must be set");
  if (model.encoder != "toy" && model.encoder != "clip-features")
    throw ConfigurationError("unknown encoder plugin: " + model.encoder);
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigurationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j, std::move(base));
}

// Digest of the architecture-defining part of the configuration.
// Architecture only: the init seed does not change parameter shapes.
inline std::string config_digest(const ModelConfig& m) {
  auto j = to_json(m);
  j.erase("init_seed");
  return llm::sha256_hex(j.dump());
}

// ---------------------------------------------------------------- model

enum class EvalMode { zero_shot, k_shot, k_shot_with_text };

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "zero_shot") return EvalMode::zero_shot;
  if (s == "k_shot") return EvalMode::k_shot;
  if (s == "k_shot_with_text") return EvalMode::k_shot_with_text;
  throw ConfigurationError("unknown evaluation mode '" + s + "'");
}

// One prompted keypoint: support locations (one per support image, source
// pixels) and/or a text prompt.
struct PromptKeypoint {
  int keypoint_id = -1;
  std::vector<std::optional<Point>> support_points;
  std::optional<std::string> text;
};

struct PromptOutput {
  std::optional<detector::Heatmap> visual;
  std::optional<detector::Heatmap> textual;
  std::optional<ad::Var> vkp;
  std::optional<ad::Var> tkp;
};

struct PreparedImage {
  std::shared_ptr<const Image> image;
  double sx = 1.0, sy = 1.0;  // source pixels -> model frame

  Point to_model(Point p) const { return {p.x * sx, p.y * sy}; }
  Point to_source(Point p) const { return {p.x / sx, p.y / sy}; }
};

class OpenKDModel {
 public:
  explicit OpenKDModel(const ModelConfig& cfg) : cfg_(cfg) {
    enc_ = encoder::make_encoder(cfg.encoder, cfg.encoder_options, store_);
    std::mt19937_64 rng(cfg.init_seed * 0x9E3779B97F4A7C15ull + 101);
    const int d = enc_->feature_dim();
    visual_adapter_ = encoder::BottleneckAdapter(store_, "adapter.visual", d, cfg.adapter_width, rng);
    text_adapter_ = encoder::TransformerAdapter(store_, "adapter.text", d, cfg.text_ffn_width, rng);
    decoder_ = detector::Decoder(store_, "decoder", d, cfg.decoder_hidden, rng);
    if (cfg.learned_upsampler) upsampler_ = detector::Upsampler(store_, "upsampler");
  }

  OpenKDModel(const OpenKDModel&) = delete;
  OpenKDModel& operator=(const OpenKDModel&) = delete;

  nn::ParameterStore& store() noexcept { return store_; }
  const nn::ParameterStore& store() const noexcept { return store_; }
  const ModelConfig& config() const noexcept { return cfg_; }
  const encoder::Encoder& encoder() const noexcept { return *enc_; }
  std::string digest() const { return config_digest(cfg_); }

  PreparedImage prepare(const corpus::ImageStore& images, const std::string& ref) const {
    auto img = images.image(ref);
    const int n = enc_->input_size();
    PreparedImage p;
    if (img->width == n && img->height == n) {
      p.image = std::move(img);
      return p;
    }
    p.sx = static_cast<double>(n) / img->width;
    p.sy = static_cast<double>(n) / img->height;
    p.image = std::make_shared<const Image>(resize_bilinear(*img, n, n));
    return p;
  }

  encoder::FeatureMap visual_features(const Image& img, bool adapted = true) const {
    auto fm = encoder::project_image_tokens(enc_->encode_image(img), enc_->projection());
    return adapted ? encoder::adapt_visual(fm, visual_adapter_) : fm;
  }

  ad::Var text_vector(const std::string& text, bool adapted = true) const {
    const encoder::TextFeature raw = frozen_text(text);
    return encoder::pool_text(adapted ? encoder::adapt_text(raw, text_adapter_) : raw);
  }

  // Pixels per heatmap cell after upsampling.
  static double cell_stride(const encoder::FeatureMap& fm) { return fm.stride / 2.0; }

  detector::Heatmap heatmap(const prototype::Prototype& proto, const encoder::FeatureMap& query) const {
    auto h = detector::decode(detector::correlate(proto, query), decoder_);
    return cfg_.learned_upsampler ? upsampler_(h) : detector::upsample_bilinear(h);
  }

  // Visual and/or textual heatmaps for every prompt keypoint on one query.
  std::vector<PromptOutput> forward(const std::vector<encoder::FeatureMap>& supports, const encoder::FeatureMap& query,
                                    const std::vector<PreparedImage>& support_frames,
                                    const std::vector<PromptKeypoint>& prompts, bool visual, bool textual) const {
    std::vector<PromptOutput> out;
    for (const auto& pk : prompts) {
      PromptOutput o;
      if (visual) {
        std::vector<prototype::VKR> vkrs;
        for (std::size_t s = 0; s < pk.support_points.size() && s < supports.size(); ++s)
          if (pk.support_points[s])
            vkrs.push_back(prototype::extract_vkr(supports[s], support_frames[s].to_model(*pk.support_points[s]),
                                                  cfg_.vkr_sigma, static_cast<int>(s), pk.keypoint_id));
        if (!vkrs.empty()) {
          auto proto = prototype::build_vkp(vkrs, pk.keypoint_id);
          o.vkp = proto.vector;
          o.visual = heatmap(proto, query);
        }
      }
      if (textual && pk.text) {
        auto proto = prototype::build_tkp({text_vector(*pk.text)}, pk.keypoint_id);
        o.tkp = proto.vector;
        o.textual = heatmap(proto, query);
      }
      out.push_back(std::move(o));
    }
    return out;
  }

  // Predicted source-pixel location for each episode keypoint.
  std::vector<Point> predict(const corpus::Episode& ep, const corpus::ImageStore& images, EvalMode mode) const {
    const bool visual = mode != EvalMode::zero_shot;
    const bool textual = mode != EvalMode::k_shot;
    if (visual && ep.supports.empty()) throw EvaluationError("visual prompting needs at least one support");
    const auto qf = prepare(images, ep.query.image_ref);
    const auto query = visual_features(*qf.image);
    std::vector<PreparedImage> frames;
    std::vector<encoder::FeatureMap> supports;
    if (visual)
      for (const auto& s : ep.supports) {
        frames.push_back(prepare(images, s.image_ref));
        supports.push_back(visual_features(*frames.back().image));
      }
    std::vector<PromptKeypoint> prompts;
    for (std::size_t i = 0; i < ep.keypoint_ids.size(); ++i) {
      PromptKeypoint pk;
      pk.keypoint_id = ep.keypoint_ids[i];
      for (const auto& s : ep.supports) {
        const auto& k = s.keypoints[pk.keypoint_id];
        pk.support_points.push_back(k.visible ? std::optional<Point>(Point{k.x, k.y}) : std::nullopt);
      }
      pk.text = ep.texts.at(i);
      prompts.push_back(std::move(pk));
    }
    return locate(query, qf, supports, frames, prompts, visual, textual);
  }

  // Zero-shot detection for free-form prompts on one query image.
  std::vector<Point> detect_texts(const corpus::ImageStore& images, const std::string& query_ref,
                                  const std::vector<std::string>& texts) const {
    const auto qf = prepare(images, query_ref);
    const auto query = visual_features(*qf.image);
    std::vector<PromptKeypoint> prompts;
    for (const auto& t : texts) prompts.push_back({-1, {}, t});
    return locate(query, qf, {}, {}, prompts, false, true);
  }

  // Fused per-keypoint heatmaps at the upsampled resolution.
  std::vector<Tensor> heatmaps(const corpus::Episode& ep, const corpus::ImageStore& images, EvalMode mode) const {
    const bool visual = mode != EvalMode::zero_shot;
    const bool textual = mode != EvalMode::k_shot;
    const auto qf = prepare(images, ep.query.image_ref);
    const auto query = visual_features(*qf.image);
    std::vector<PreparedImage> frames;
    std::vector<encoder::FeatureMap> supports;
    if (visual)
      for (const auto& s : ep.supports) {
        frames.push_back(prepare(images, s.image_ref));
        supports.push_back(visual_features(*frames.back().image));
      }
    std::vector<PromptKeypoint> prompts;
    for (std::size_t i = 0; i < ep.keypoint_ids.size(); ++i) {
      PromptKeypoint pk{ep.keypoint_ids[i], {}, ep.texts.at(i)};
      for (const auto& s : ep.supports) pk.support_points.push_back(Point{s.keypoints[pk.keypoint_id].x, s.keypoints[pk.keypoint_id].y});
      prompts.push_back(std::move(pk));
    }
    std::vector<Tensor> out;
    for (const auto& o : forward(supports, query, frames, prompts, visual, textual)) out.push_back(fused(o).value());
    return out;
  }

  static ad::Var fused(const PromptOutput& o) {
    std::optional<detector::HeatmapGroup> hv, ht;
    if (o.visual) hv = detector::HeatmapGroup{prototype::Modality::visual, {*o.visual}};
    if (o.textual) ht = detector::HeatmapGroup{prototype::Modality::textual, {*o.textual}};
    return detector::fuse(hv, ht).maps.at(0).grid;
  }

 private:
  std::vector<Point> locate(const encoder::FeatureMap& query, const PreparedImage& qf,
                            const std::vector<encoder::FeatureMap>& supports, const std::vector<PreparedImage>& frames,
                            const std::vector<PromptKeypoint>& prompts, bool visual, bool textual) const {
    std::vector<Point> out;
    for (const auto& o : forward(supports, query, frames, prompts, visual, textual)) {
      if (!o.visual && !o.textual) throw EvaluationError("no prompt available for a keypoint");
      out.push_back(qf.to_source(detector::heatmap_to_coords(fused(o).value(), cell_stride(query))));
    }
    return out;
  }

  encoder::TextFeature frozen_text(const std::string& text) const {
    std::lock_guard lock(text_mu_);
    auto it = text_cache_.find(text);
    if (it == text_cache_.end()) it = text_cache_.emplace(text, enc_->encode_text(text)).first;
    return it->second;
  }

  ModelConfig cfg_;
  nn::ParameterStore store_;
  std::unique_ptr<encoder::Encoder> enc_;
  encoder::BottleneckAdapter visual_adapter_;
  encoder::TransformerAdapter text_adapter_;
  detector::Decoder decoder_;
  detector::Upsampler upsampler_;
  mutable std::mutex text_mu_;
  mutable std::map<std::string, encoder::TextFeature> text_cache_;
};

// ---------------------------------------------------------------- evaluation

struct EvalOptions {
  EvalMode mode = EvalMode::zero_shot;
  std::string split = "novel";  // base | novel | all
  long episodes = 1000;
  int shots = 1;
  std::uint64_t seed = 0;
  PCKConfig pck;
  std::string text_template = corpus::kDefaultSimpleTemplate;
};

struct EvalResult {
  double pck = 0.0;  // percentage
  long correct = 0;
  long total = 0;
  long episodes = 0;
};

using Predictor = std::function<std::vector<Point>(const corpus::Episode&, EvalMode)>;

inline std::vector<int> split_ids(const corpus::KeypointSchema& schema, const std::string& split) {
  if (split == "base") return schema.base_ids;
  if (split == "novel") return schema.novel_ids;
  if (split == "all") {
    std::vector<int> ids(static_cast<std::size_t>(schema.size()));
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
  }
  throw ConfigurationError("unknown split '" + split + "'");
}

// Mean PCK over every evaluated keypoint of `episodes` seeded episodes.
inline EvalResult evaluate(const Predictor& predict, const corpus::Dataset& ds, const EvalOptions& opt) {
  opt.pck.validate();
  if (ds.size() == 0) throw EvaluationError("evaluation dataset is empty");
  if (opt.episodes < 1) throw EvaluationError("evaluation needs at least one episode");
  const auto ids = split_ids(ds.schema(), opt.split);
  if (ids.empty()) throw EvaluationError("split '" + opt.split + "' has no keypoints");
  corpus::SamplerOptions so;
  so.shots = opt.mode == EvalMode::zero_shot ? 0 : opt.shots;
  so.max_keypoints = 0;
  so.allowed_ids = ids;
  so.text_template = opt.text_template;
  std::mt19937_64 rng(opt.seed);
  EvalResult r;
  for (long e = 0; e < opt.episodes; ++e) {
    corpus::Episode ep;
    try {
      ep = corpus::sample_episode(ds, so, rng);
    } catch (const SamplingError& err) {
      throw EvaluationError(std::string("cannot sample evaluation episodes: ") + err.what());
    }
    const auto pred = predict(ep, opt.mode);
    if (pred.size() != ep.keypoint_ids.size()) throw EvaluationError("predictor returned the wrong number of points");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const auto& gt = ep.query.keypoints[ep.keypoint_ids[i]];
      r.correct += pck_correct(pred[i], {gt.x, gt.y}, ep.query.bbox, opt.pck);
      ++r.total;
    }
    ++r.episodes;
  }
  r.pck = r.total ? 100.0 * static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

inline Predictor model_predictor(const OpenKDModel& model, const corpus::Dataset& ds) {
  return [&model, &ds](const corpus::Episode& ep, EvalMode mode) { return model.predict(ep, ds.store(), mode); };
}

inline EvalResult evaluate(const OpenKDModel& model, const corpus::Dataset& ds, const EvalOptions& opt) {
  return evaluate(model_predictor(model, ds), ds, opt);
}

// ---------------------------------------------------------------- checkpoints

inline constexpr const char* kCheckpointFormat = "openkd-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline json checkpoint_json(const OpenKDModel& model, long step) {
  json params = json::object();
  for (const auto& p : model.store().all())
    params[p.name] = {{"shape", p.var.shape()}, {"group", p.group}, {"data", p.var.value().values()}};
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"config_digest", model.digest()},
          {"model", to_json(model.config())},
          {"step", step},
          {"params", params}};
}

inline void save_checkpoint(const std::filesystem::path& path, const OpenKDModel& model, long step) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out << checkpoint_json(model, step).dump() << "\n";
}

inline json read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw CheckpointError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
}

// Architecture recorded in a checkpoint.
inline ModelConfig checkpoint_model_config(const json& ck) {
  if (!ck.contains("model")) throw CheckpointError("checkpoint has no model block");
  RunConfig c;
  return config_from_json({{"model", ck.at("model")}}, c).model;
}

// Copies every parameter into `model`; returns the recorded step. Any
// mismatch in format, version, architecture digest, names or shapes throws.
inline long load_checkpoint(const json& ck, OpenKDModel& model) {
  if (ck.value("format", "") != kCheckpointFormat) throw CheckpointError("not an openkd checkpoint");
  if (ck.value("version", -1) != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + ck.value("version", json(-1)).dump());
  if (ck.value("config_digest", "") != model.digest())
    throw CheckpointError("checkpoint architecture digest " + ck.value("config_digest", std::string()) +
                          " does not match the model (" + model.digest() + ")");
  const auto& params = ck.at("params");
  if (params.size() != model.store().all().size())
    throw CheckpointError("checkpoint holds " + std::to_string(params.size()) + " parameters, model has " +
                          std::to_string(model.store().all().size()));
  for (auto& p : model.store().all()) {
    if (!params.contains(p.name)) throw CheckpointError("checkpoint lacks parameter " + p.name);
    const auto& e = params.at(p.name);
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != p.var.shape())
      throw CheckpointError("parameter " + p.name + " has shape " + shape_str(shape) + " in the checkpoint, " +
                            shape_str(p.var.shape()) + " in the model");
    const auto data = e.at("data").get<std::vector<double>>();
    Tensor& w = p.var.mutable_value();
    if (data.size() != w.size()) throw CheckpointError("parameter " + p.name + " has the wrong element count");
    std::copy(data.begin(), data.end(), w.data());
  }
  return ck.at("step").get<long>();
}

inline long load_checkpoint(const std::filesystem::path& path, OpenKDModel& model) {
  return load_checkpoint(read_checkpoint(path), model);
}

// ---------------------------------------------------------------- transcripts

// Mock table from a transcript fixture:
//   {"interpolation": [{"from", "to", "z", "category", "replies": [..]}],
//    "parsing": [{"text", "reply"}]}
// Interpolation entries are registered under both the CoT and plain prompts.
inline std::shared_ptr<llm::MockTable> load_transcripts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open transcript fixture " + path.string());
  const json j = json::parse(in);
  auto table = std::make_shared<llm::MockTable>();
  for (const auto& e : j.value("interpolation", json::array())) {
    auxgen::InterpolationPath p;
    p.n1 = 0;
    p.n2 = 1;
    p.t1 = e.at("from").get<std::string>();
    p.t2 = e.at("to").get<std::string>();
    p.z = e.value("z", 0.5);
    p.category = e.value("category", std::string("an animal"));
    const auto replies = e.at("replies").get<std::vector<std::string>>();
    for (bool cot : {true, false}) table->add(auxgen::build_itpl_prompt(p, cot).back().content, replies);
  }
  for (const auto& e : j.value("parsing", json::array()))
    table->add(diverse::build_parse_prompt(e.at("text").get<std::string>()).back().content,
               {e.at("reply").get<std::string>()});
  return table;
}

inline std::unique_ptr<llm::Gateway> make_gateway(const LLMConfig& cfg, const std::filesystem::path& base_dir = {}) {
  const auto mode = llm::parse_mode(cfg.mode);
  auto resolve = [&](const std::string& p) { return p.empty() || base_dir.empty() ? std::filesystem::path(p) : base_dir / p; };
  std::shared_ptr<llm::TranscriptCache> cache;
  if (mode == llm::Mode::record || mode == llm::Mode::replay) {
    if (cfg.cache.empty()) throw ConfigurationError(cfg.mode + " mode needs llm.cache");
    cache = std::make_shared<llm::TranscriptCache>(resolve(cfg.cache));
  }
  std::shared_ptr<llm::Transport> transport;
  if (mode == llm::Mode::live || mode == llm::Mode::record)
    transport = std::make_shared<llm::HttpTransport>(llm::HttpOptions::from_env());
  std::shared_ptr<llm::MockTable> mock;
  if (mode == llm::Mode::mock) {
    if (cfg.transcripts.empty()) throw ConfigurationError("mock mode needs llm.transcripts");
    mock = load_transcripts(resolve(cfg.transcripts));
  }
  return std::make_unique<llm::Gateway>(mode, transport, cache, mock);
}

// ---------------------------------------------------------------- training

struct StepStats {
  long step = 0;
  double loss = 0, lkp = 0, ltt = 0, lvt = 0;
  int aux_pairs = 0, aux_texts = 0;
  std::string feature_source;
};

struct TrainResult {
  long steps = 0;
  std::vector<double> losses;
  std::vector<StepStats> log;
};

struct TrainHooks {
  std::filesystem::path log_path;         // JSON lines; empty disables
  std::filesystem::path checkpoint_path;  // periodic and final snapshot; empty disables
  auxgen::AuditLog* audit = nullptr;
  std::function<void(const StepStats&)> on_step;
};

// Text pools are collected once per interpolation path before training.
inline std::vector<auxgen::TextPool> collect_pools(const std::vector<auxgen::InterpolationPath>& paths,
                                                   const RunConfig& cfg, llm::Gateway* gateway) {
  std::vector<auxgen::TextPool> pools;
  for (const auto& p : paths) {
    if (gateway && cfg.flags.use_aux_text)
      pools.push_back(auxgen::collect_pool(p, cfg.ftc.R, *gateway, cfg.train.cot, cfg.llm.model, cfg.llm.temperature));
    else
      pools.emplace_back();
  }
  return pools;
}

class Trainer {
 public:
  Trainer(OpenKDModel& model, RunConfig cfg, const corpus::Dataset& train_set,
          std::vector<auxgen::InterpolationPath> paths = {}, std::vector<auxgen::TextPool> pools = {})
      : model_(model), cfg_(std::move(cfg)), ds_(train_set), paths_(std::move(paths)), pools_(std::move(pools)),
        rng_(cfg_.seed), adam_(make_adam(cfg_.optim)) {
    cfg_.validate();
    if (pools_.size() < paths_.size()) pools_.resize(paths_.size());
    sampler_.shots = cfg_.train.shots;
    sampler_.max_keypoints = cfg_.train.max_keypoints;
    sampler_.allowed_ids = ds_.schema().base_ids;
  }

  long step() const noexcept { return step_; }

  TrainResult run(const TrainHooks& hooks = {}) { return run(cfg_.train.episodes, hooks); }

  TrainResult run(long steps, const TrainHooks& hooks) {
    TrainResult res;
    std::ofstream log;
    if (!hooks.log_path.empty()) {
      if (hooks.log_path.has_parent_path()) std::filesystem::create_directories(hooks.log_path.parent_path());
      log.open(hooks.log_path, std::ios::app);
      if (!log) throw ConfigurationError("cannot open training log " + hooks.log_path.string());
    }
    const auto t0 = std::chrono::steady_clock::now();
    for (long i = 0; i < steps; ++i) {
      const StepStats s = train_step(hooks.audit);
      res.losses.push_back(s.loss);
      if (hooks.on_step) hooks.on_step(s);
      const bool last = i + 1 == steps;
      if (cfg_.train.log_every > 0 && (step_ % cfg_.train.log_every == 0 || last)) {
        res.log.push_back(s);
        if (log) {
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          log << json{{"step", s.step}, {"loss", s.loss}, {"lkp", s.lkp}, {"ltt", s.ltt}, {"lvt", s.lvt},
                      {"aux_pairs", s.aux_pairs}, {"aux_texts", s.aux_texts}, {"feature_source", s.feature_source},
                      {"seconds", secs}}.dump()
              << "\n";
          log.flush();
        }
        spdlog::debug("step {} loss {:.5f} (kp {:.5f} tt {:.4f} vt {:.4f})", s.step, s.loss, s.lkp, s.ltt, s.lvt);
      }
      if (!hooks.checkpoint_path.empty() &&
          ((cfg_.train.checkpoint_every > 0 && step_ % cfg_.train.checkpoint_every == 0) || last))
        save_checkpoint(hooks.checkpoint_path, model_, step_);
    }
    res.steps = step_;
    return res;
  }

  StepStats train_step(auxgen::AuditLog* audit = nullptr) {
    std::vector<ad::Var> kp_terms, tt_terms, vt_terms;
    StepStats st;
    st.step = step_ + 1;
    auxgen::FeatureContext ctx_template;
    ctx_template.step = step_;
    ctx_template.bootstrap_steps = cfg_.train.bootstrap_steps;
    st.feature_source = ctx_template.source_name();
    for (int b = 0; b < cfg_.train.batch_pairs; ++b) {
      const corpus::EpisodePair pair = next_pair();
      const EpisodeTerms a = episode_terms(pair.first, audit, st);
      const EpisodeTerms c = episode_terms(pair.second, audit, st);
      kp_terms.insert(kp_terms.end(), a.kp.begin(), a.kp.end());
      kp_terms.insert(kp_terms.end(), c.kp.begin(), c.kp.end());
      if (cfg_.flags.use_text && cfg_.loss.lambda2 > 0 && !a.tkps.empty() && a.tkps.size() == c.tkps.size())
        tt_terms.push_back(objective::contrastive_tt(a.tkps, c.tkps, cfg_.loss.tau));
      if (cfg_.flags.use_visual && cfg_.flags.use_text && cfg_.loss.lambda3 > 0) {
        if (cfg_.loss.vt_pairing == "cross_species") {
          if (a.vkps.size() == c.tkps.size() && !a.vkps.empty()) {
            vt_terms.push_back(objective::contrastive_vt(a.vkps, c.tkps, cfg_.loss.tau));
            vt_terms.push_back(objective::contrastive_vt(c.vkps, a.tkps, cfg_.loss.tau));
          }
        } else {
          for (const auto* e : {&a, &c})
            if (!e->vkps.empty() && e->vkps.size() == e->tkps.size())
              vt_terms.push_back(objective::contrastive_vt(e->vkps, e->tkps, cfg_.loss.tau));
        }
        if (cfg_.loss.use_vv && a.vkps.size() == c.vkps.size() && !a.vkps.empty())
          vt_terms.push_back(objective::symmetric_contrastive(a.vkps, c.vkps, cfg_.loss.tau));
      }
    }
    if (kp_terms.empty()) throw ConfigurationError("training step produced no heatmap supervision");
    const ad::Var lkp = ad::average(kp_terms);
    const ad::Var ltt = tt_terms.empty() ? ad::constant(Tensor({1}, 0.0)) : ad::average(tt_terms);
    const ad::Var lvt = vt_terms.empty() ? ad::constant(Tensor({1}, 0.0)) : ad::average(vt_terms);
    ad::Var total = lkp;
    if (!tt_terms.empty() || !vt_terms.empty()) total = objective::total_loss(lkp, ltt, lvt, cfg_.loss);
    else if (cfg_.loss.lambda1 != 1.0) total = ad::scale(lkp, cfg_.loss.lambda1);
    st.loss = total.item();
    st.lkp = lkp.item();
    st.ltt = ltt.item();
    st.lvt = lvt.item();
    if (!std::isfinite(st.loss))
      throw DivergenceError("non-finite loss at step " + std::to_string(st.step) + " (lkp " + std::to_string(st.lkp) +
                            ", ltt " + std::to_string(st.ltt) + ", lvt " + std::to_string(st.lvt) + ")");
    model_.store().zero_grad();
    ad::backward(total);
    adam_.step(model_.store());
    ++step_;
    return st;
  }

 private:
  struct EpisodeTerms {
    std::vector<ad::Var> kp, vkps, tkps;
  };

  static nn::Adam make_adam(const OptimConfig& o) {
    nn::AdamOptions a;
    a.beta1 = o.beta1;
    a.beta2 = o.beta2;
    a.group_lr = {{nn::kAdapterGroup, o.lr_adapter}, {nn::kDecoderGroup, o.lr_decoder},
                  {nn::kEncoderStageGroup, o.lr_encoder}};
    return nn::Adam(a);
  }

  corpus::EpisodePair next_pair() {
    if (cfg_.train.fixed_episode) {
      if (!fixed_) fixed_ = corpus::sample_episode_pair(ds_, sampler_, rng_);
      return *fixed_;
    }
    return corpus::sample_episode_pair(ds_, sampler_, rng_);
  }

  EpisodeTerms episode_terms(const corpus::Episode& ep, auxgen::AuditLog* audit, StepStats& st) {
    const auto& images = ds_.store();
    const auto qf = model_.prepare(images, ep.query.image_ref);
    const auto query = model_.visual_features(*qf.image);
    std::vector<PreparedImage> frames;
    std::vector<encoder::FeatureMap> supports;
    for (const auto& s : ep.supports) {
      frames.push_back(model_.prepare(images, s.image_ref));
      supports.push_back(model_.visual_features(*frames.back().image));
    }
    const double cell = OpenKDModel::cell_stride(query);
    const int side = query.side() * 2;
    const detector::GaussianSpec spec{cfg_.train.sigma_gt};
    auto gt = [&](Point p) { return detector::gt_heatmap(qf.to_model(p), spec, side, side, cell); };

    EpisodeTerms t;
    std::vector<PromptKeypoint> main;
    std::vector<Point> main_gt;
    for (std::size_t i = 0; i < ep.keypoint_ids.size(); ++i) {
      PromptKeypoint pk{ep.keypoint_ids[i], {}, ep.texts[i]};
      for (const auto& s : ep.supports)
        pk.support_points.push_back(Point{s.keypoints[pk.keypoint_id].x, s.keypoints[pk.keypoint_id].y});
      main.push_back(std::move(pk));
      const auto& q = ep.query.keypoints[ep.keypoint_ids[i]];
      main_gt.push_back({q.x, q.y});
    }
    const auto out = model_.forward(supports, query, frames, main, cfg_.flags.use_visual, cfg_.flags.use_text);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const Tensor g = gt(main_gt[i]);
      if (out[i].visual) {
        t.kp.push_back(ad::mse(out[i].visual->grid, ad::constant(g)));
        t.vkps.push_back(*out[i].vkp);
      }
      if (out[i].textual) {
        t.kp.push_back(ad::mse(out[i].textual->grid, ad::constant(g)));
        t.tkps.push_back(*out[i].tkp);
      }
    }

    if ((cfg_.flags.use_aux_kp || cfg_.flags.use_aux_text) && !paths_.empty() && !ep.supports.empty()) {
      auxgen::FeatureContext ctx;
      ctx.step = step_;
      ctx.bootstrap_steps = cfg_.train.bootstrap_steps;
      const auto& sframe = frames.front();
      std::optional<encoder::FeatureMap> raw_support, adapted_support;
      auto source = [&](bool adapted) {
        auxgen::FeatureSource fs;
        fs.vkr = [&, adapted](Point p) {
          auto& slot = adapted ? adapted_support : raw_support;
          if (!slot) {
            const auto fm = model_.visual_features(*sframe.image, adapted);
            slot = encoder::FeatureMap{ad::constant(fm.grid.value()), fm.stride};
          }
          return prototype::extract_vkr(*slot, sframe.to_model(p), model_.config().vkr_sigma).vector.value();
        };
        fs.text = [&, adapted](const std::string& s) {
          return model_.text_vector(corpus::simple_prompt(sampler_.text_template, s, ep.species), adapted).value();
        };
        return fs;
      };
      ctx.original = source(false);
      ctx.adapted = source(true);
      const Mask* smask = ep.supports.front().mask_ref ? images.mask(*ep.supports.front().mask_ref).get() : nullptr;
      const Mask* qmask = ep.query.mask_ref ? images.mask(*ep.query.mask_ref).get() : nullptr;
      for (std::size_t k = 0; k < paths_.size(); ++k) {
        auto pair = auxgen::make_auxiliary_pair(ep, paths_[k], cfg_.ftc, pools_[k], ctx, rng_, smask, qmask);
        if (!pair) continue;
        if (audit) audit->write(step_, *pair);
        ++st.aux_pairs;
        PromptKeypoint pk{-1, {pair->support_point}, std::nullopt};
        if (cfg_.flags.use_aux_text && pair->text) {
          pk.text = corpus::simple_prompt(sampler_.text_template, *pair->text, ep.species);
          ++st.aux_texts;
        }
        const auto o = model_.forward(supports, query, frames, {pk}, cfg_.flags.use_aux_kp, cfg_.flags.use_aux_text);
        const Tensor g = gt(pair->query_point);
        if (o[0].visual) t.kp.push_back(ad::mse(o[0].visual->grid, ad::constant(g)));
        if (o[0].textual) t.kp.push_back(ad::mse(o[0].textual->grid, ad::constant(g)));
      }
    }
    return t;
  }

  OpenKDModel& model_;
  RunConfig cfg_;
  const corpus::Dataset& ds_;
  std::vector<auxgen::InterpolationPath> paths_;
  std::vector<auxgen::TextPool> pools_;
  std::mt19937_64 rng_;
  nn::Adam adam_;
  corpus::SamplerOptions sampler_;
  std::optional<corpus::EpisodePair> fixed_;
  long step_ = 0;
};

// ---------------------------------------------------------------- diverse prompts

struct DiverseScore {
  double pck = 0.0;
  long correct = 0;
  long total = 0;
  long parse_failures = 0;
};

// PCK of parse-then-detect over a diverse prompt set. Each prompt's
// instance is the query; every ground-truth keypoint is scored. Prompts
// whose parse fails, and parsed names outside the schema, score zero.
// Mode none scores the single raw-text prediction against every keypoint.
inline DiverseScore score_diverse(const OpenKDModel& model, const corpus::Dataset& ds,
                                  const std::vector<diverse::DiversePrompt>& prompts, diverse::ParseMode mode,
                                  const diverse::Parser& parser, const PCKConfig& pck = {},
                                  const std::string& simple_template = corpus::kDefaultSimpleTemplate) {
  DiverseScore s;
  for (const auto& p : prompts) {
    const auto& in = ds.instances().at(std::stoul(p.instance_id));
    auto detect = [&](const std::vector<std::string>& texts) { return model.detect_texts(ds.store(), in.image_ref, texts); };
    std::vector<diverse::KeypointPrediction> preds;
    try {
      preds = diverse::parse_then_detect(p.text, mode, parser, detect, simple_template);
    } catch (const ParseError&) {
      ++s.parse_failures;
    }
    for (const auto& name : p.gt_keypoints) {
      ++s.total;
      const int id = ds.schema().index_of(name);
      if (id < 0) throw EvaluationError("ground-truth keypoint '" + name + "' is not in the schema");
      const auto& gt = in.keypoints[id];
      for (const auto& kp : preds) {
        if (!kp.name.empty() && kp.name != name) continue;
        if (pck_correct(kp.point, {gt.x, gt.y}, in.bbox, pck)) {
          ++s.correct;
          break;
        }
        if (!kp.name.empty()) break;
      }
    }
  }
  s.pck = s.total ? 100.0 * static_cast<double>(s.correct) / static_cast<double>(s.total) : 0.0;
  return s;
}

// Reference: simple prompts built from the ground-truth fields.
inline DiverseScore score_simple(const OpenKDModel& model, const corpus::Dataset& ds,
                                 const std::vector<diverse::DiversePrompt>& prompts, const PCKConfig& pck = {},
                                 const std::string& simple_template = corpus::kDefaultSimpleTemplate) {
  return score_diverse(
      model, ds, prompts, diverse::ParseMode::fallback,
      [&prompts](const std::string& text) {
        for (const auto& p : prompts)
          if (p.text == text) return diverse::ParsedPrompt{p.gt_object, p.gt_keypoints, true, ""};
        return diverse::ParsedPrompt::failure("unknown prompt");
      },
      pck, simple_template);
}

}  // namespace openkd::harness
