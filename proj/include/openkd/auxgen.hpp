#pragma once

// Auxiliary keypoint-text pairs: points interpolated along predefined body
// paths, LLM-named with vanilla or chain-of-thought prompts, and matched to
// the visual feature by correlation or false-text-controlled sampling.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "openkd/corpus.hpp"
#include "openkd/errors.hpp"
#include "openkd/image.hpp"
#include "openkd/llm_gateway.hpp"
#include "openkd/prototype.hpp"
#include "openkd/tensor.hpp"

namespace openkd::auxgen {

using prototype::Point;

inline constexpr const char* kSystemInstruction = "You are a helpful assistant that produces keypoints of an animal.";
inline constexpr const char* kExampleQuestion =
    "Q: Please give me one most common body part/keypoint at 1/2 between left-front knee and left-front paw of "
    "an animal. Please answer in concise words. Provide no excessive explanations.";
inline constexpr const char* kExampleAnswer =
    "A: The starting point is left-front knee. The end point is left-front paw. The answer should be between the "
    "starting point and end point. Left-front ankle is between the starting point and end point. The answer is "
    "left-front ankle.";

struct InterpolationPath {
  int n1 = 0, n2 = 0;
  double z = 0.5;
  std::string t1, t2;
  std::string category = "an animal";

  void validate() const {
    if (!(z > 0 && z < 1)) throw ConfigurationError("interpolation node z must lie in (0, 1)");
    if (n1 == n2) throw ConfigurationError("interpolation path endpoints must differ");
    if (t1.empty() || t2.empty()) throw ConfigurationError("interpolation path needs endpoint names");
  }

  std::string label() const { return t1 + " -> " + t2; }
};

// {"paths": [{"from": name, "to": name, "z": 0.5, "category": "an animal"}]}
inline std::vector<InterpolationPath> paths_from_json(const nlohmann::json& j, const corpus::KeypointSchema& schema) {
  std::vector<InterpolationPath> out;
  for (const auto& r : j.at("paths")) {
    InterpolationPath p;
    p.t1 = r.at("from").get<std::string>();
    p.t2 = r.at("to").get<std::string>();
    p.n1 = schema.index_of(p.t1);
    p.n2 = schema.index_of(p.t2);
    if (p.n1 < 0 || p.n2 < 0) throw ConfigurationError("interpolation path names unknown keypoint: " + p.label());
    p.z = r.value("z", 0.5);
    p.category = r.value("category", std::string("an animal"));
    p.validate();
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<InterpolationPath> load_paths(const std::filesystem::path& file, const corpus::KeypointSchema& schema) {
  std::ifstream in(file);
  if (!in) throw ConfigurationError("cannot open interpolation path table " + file.string());
  return paths_from_json(nlohmann::json::parse(in), schema);
}

inline Point interpolate_visual(Point p1, Point p2, double z) {
  if (!(z >= 0 && z <= 1)) throw DomainError("interpolation node must lie in [0, 1]");
  return {(1 - z) * p1.x + z * p2.x, (1 - z) * p1.y + z * p2.y};
}

// Permissive without a mask; otherwise the pixel under p must be foreground.
inline bool foreground_gate(Point p, const Mask* mask) {
  if (!mask) return true;
  const int x = static_cast<int>(std::floor(p.x)), y = static_cast<int>(std::floor(p.y));
  return mask->contains(x, y) && mask->at(x, y) != 0;
}

// 0.5 -> "1/2"; falls back to a decimal for fractions with large denominators.
inline std::string format_fraction(double z) {
  for (int den = 2; den <= 12; ++den) {
    const double num = z * den;
    if (std::abs(num - std::round(num)) < 1e-9) {
      const int n = static_cast<int>(std::round(num));
      if (std::gcd(n, den) == 1) return std::to_string(n) + "/" + std::to_string(den);
    }
  }
  std::ostringstream s;
  s << z;
  return s.str();
}

inline std::string itpl_question(const InterpolationPath& path) {
  return "Please give me three most common body parts/keypoints at " + format_fraction(path.z) + " between " +
         path.t1 + " and " + path.t2 + " of " + path.category +
         ". Pay attention to the left and right. Please answer in concise words like \"1. 2. 3.\". Please do not "
         "include " + path.t1 + " and " + path.t2 + " in answers. Provide no excessive explanations.";
}

inline std::vector<llm::Message> build_itpl_prompt(const InterpolationPath& path, bool cot) {
  if (path.t1.empty() || path.t2.empty()) throw ArgumentError("interpolation prompt needs endpoint names");
  std::vector<llm::Message> msgs{{"system", kSystemInstruction}};
  if (!cot) {
    msgs.push_back({"user", itpl_question(path)});
    return msgs;
  }
  msgs.push_back({"user", kExampleQuestion});
  msgs.push_back({"assistant", kExampleAnswer});
  msgs.push_back({"user", "Q: " + itpl_question(path)});
  return msgs;
}

namespace detail {
inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}
}  // namespace detail

// Extracts up to three "k. answer" items, stripping trailing punctuation and
// lowercasing. Returns an empty list when nothing is numbered.
inline std::vector<std::string> parse_numbered_answers(const std::string& reply) {
  static const std::regex split_inline(R"(\s+(?=[1-9][.)]\s))");
  static const std::regex item(R"(^\s*[1-9][.)]\s*(.+)$)");
  const std::string text = std::regex_replace(reply, split_inline, "\n");
  std::vector<std::string> out;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line) && out.size() < 3) {
    std::smatch m;
    if (!std::regex_match(line, m, item)) continue;
    std::string a = detail::trim(m[1].str());
    while (!a.empty() && std::string(".,;:!").find(a.back()) != std::string::npos) a.pop_back();
    a = detail::lower(detail::trim(a));
    if (!a.empty()) out.push_back(a);
  }
  return out;
}

struct Candidate {
  std::string text;
  int repetition = 0;
  int rank = 1;  // 1..3 within its repetition
};

struct TextPool {
  std::vector<Candidate> candidates;
  std::vector<int> failed_repetitions;
  int repetitions = 0;

  bool empty() const noexcept { return candidates.empty(); }
  std::size_t size() const noexcept { return candidates.size(); }
};

inline TextPool collect_pool(const InterpolationPath& path, int R, llm::Gateway& gateway, bool cot = true,
                             const std::string& model = "gpt-3.5-turbo", double temperature = 1.0) {
  if (R < 1) throw ArgumentError("R must be at least 1");
  llm::ChatRequest req;
  req.model = model;
  req.temperature = temperature;
  req.messages = build_itpl_prompt(path, cot);
  TextPool pool;
  pool.repetitions = R;
  for (int r = 0; r < R; ++r) {
    const auto answers = parse_numbered_answers(gateway.chat(req, r));
    if (answers.empty()) {
      pool.failed_repetitions.push_back(r);
      continue;
    }
    for (std::size_t k = 0; k < answers.size(); ++k)
      pool.candidates.push_back({answers[k], r, static_cast<int>(k) + 1});
  }
  return pool;
}

using TextFeatureFn = std::function<Tensor(const std::string&)>;

inline std::vector<double> pool_similarities(const TextPool& pool, const Tensor& phi, const TextFeatureFn& features) {
  std::vector<double> sims;
  for (const auto& c : pool.candidates) {
    const Tensor t = features(c.text);
    sims.push_back(cosine(phi.values(), t.values()));
  }
  return sims;
}

// Correlation selection: argmax cosine(phi, text); ties go to the earliest
// pool index.
inline std::string select_text_corr(const TextPool& pool, const Tensor& phi, const TextFeatureFn& features) {
  if (pool.empty()) throw SelectionError("cannot select from an empty text pool");
  const auto sims = pool_similarities(pool, phi, features);
  const auto best = std::max_element(sims.begin(), sims.end()) - sims.begin();
  return pool.candidates[static_cast<std::size_t>(best)].text;
}

struct FTCConfig {
  int R = 3;
  int eta = 1;
  double alpha = 0.01;

  void validate() const {
    if (R < 1) throw ConfigurationError("ftc.R must be >= 1");
    if (eta < 1 || eta > 3) throw ConfigurationError("ftc.eta must lie in [1, 3]");
    if (!(alpha >= -1 && alpha <= 1)) throw ConfigurationError("ftc.alpha must lie in [-1, 1]");
  }
};

struct FTCRecord {
  std::vector<double> similarities;  // per pool candidate
  std::vector<int> window;           // pool indices with rank <= eta
  std::vector<int> accepted;         // window entries with similarity >= alpha
  int chosen = -1;
  std::optional<std::string> text;
};

// Window by rank first, then reject candidates below alpha, then draw
// uniformly from the survivors. No survivor yields an absent text.
inline FTCRecord ftc_sample(const TextPool& pool, const Tensor& phi, const FTCConfig& cfg,
                            const TextFeatureFn& features, std::mt19937_64& rng) {
  cfg.validate();
  if (pool.empty()) throw SelectionError("cannot sample from an empty text pool");
  FTCRecord rec;
  rec.similarities = pool_similarities(pool, phi, features);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool.candidates[i].rank > cfg.eta) continue;
    rec.window.push_back(static_cast<int>(i));
    if (rec.similarities[i] >= cfg.alpha) rec.accepted.push_back(static_cast<int>(i));
  }
  if (rec.accepted.empty()) return rec;
  const auto pick = std::uniform_int_distribution<std::size_t>(0, rec.accepted.size() - 1)(rng);
  rec.chosen = rec.accepted[pick];
  rec.text = pool.candidates[static_cast<std::size_t>(rec.chosen)].text;
  return rec;
}

// Which encoder features feed the similarity computations.
struct FeatureSource {
  std::function<Tensor(Point)> vkr;  // support VKR at a pixel location
  TextFeatureFn text;
};

struct FeatureContext {
  long step = 0;
  long bootstrap_steps = 0;
  FeatureSource original;
  FeatureSource adapted;

  bool use_adapted() const noexcept { return step >= bootstrap_steps; }
  const FeatureSource& active() const noexcept { return use_adapted() ? adapted : original; }
  const char* source_name() const noexcept { return use_adapted() ? "adapted" : "original"; }
};

struct AuxiliaryPair {
  Point support_point;
  Point query_point;
  std::optional<std::string> text;
  std::string path;
  std::string feature_source;
  FTCRecord ftc;
  std::vector<Candidate> pool;
};

// Interpolates between the path endpoints in the first support and in the
// query. Absent when an endpoint is invisible, there is no support, or
// either point fails the foreground gate.
inline std::optional<AuxiliaryPair> make_auxiliary_pair(const corpus::Episode& ep, const InterpolationPath& path,
                                                        const FTCConfig& cfg, const TextPool& pool,
                                                        const FeatureContext& ctx, std::mt19937_64& rng,
                                                        const Mask* support_mask = nullptr,
                                                        const Mask* query_mask = nullptr) {
  if (ep.supports.empty()) return std::nullopt;
  const auto& s = ep.supports.front();
  const auto& q = ep.query;
  auto visible = [&](const corpus::Instance& in) { return in.keypoints[path.n1].visible && in.keypoints[path.n2].visible; };
  if (!visible(s) || !visible(q)) return std::nullopt;
  auto pt = [](const corpus::Keypoint& k) { return Point{k.x, k.y}; };
  AuxiliaryPair pair;
  pair.path = path.label();
  pair.support_point = interpolate_visual(pt(s.keypoints[path.n1]), pt(s.keypoints[path.n2]), path.z);
  pair.query_point = interpolate_visual(pt(q.keypoints[path.n1]), pt(q.keypoints[path.n2]), path.z);
  if (!foreground_gate(pair.support_point, support_mask) || !foreground_gate(pair.query_point, query_mask))
    return std::nullopt;
  pair.feature_source = ctx.source_name();
  pair.pool = pool.candidates;
  if (!pool.empty()) {
    const auto& src = ctx.active();
    pair.ftc = ftc_sample(pool, src.vkr(pair.support_point), cfg, src.text, rng);
    pair.text = pair.ftc.text;
  }
  return pair;
}

inline nlohmann::json to_json(const AuxiliaryPair& p) {
  nlohmann::json pool = nlohmann::json::array();
  for (const auto& c : p.pool) pool.push_back({{"text", c.text}, {"repetition", c.repetition}, {"rank", c.rank}});
  return {{"path", p.path},
          {"support_point", {p.support_point.x, p.support_point.y}},
          {"query_point", {p.query_point.x, p.query_point.y}},
          {"feature_source", p.feature_source},
          {"pool", pool},
          {"similarities", p.ftc.similarities},
          {"window", p.ftc.window},
          {"accepted", p.ftc.accepted},
          {"decision", p.text ? nlohmann::json(*p.text) : nlohmann::json(nullptr)},
          {"visual_only", !p.text.has_value()}};
}

// JSON-lines audit trail of every auxiliary pair decision.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(const std::filesystem::path& path) : out_(path, std::ios::app) {
    if (!out_) throw ConfigurationError("cannot open auxiliary audit log " + path.string());
  }

  void write(long step, const AuxiliaryPair& p) {
    std::lock_guard lock(mu_);
    if (!out_.is_open()) return;
    auto j = to_json(p);
    j["step"] = step;
    out_ << j.dump() << "\n";
    out_.flush();
  }

 private:
  std::mutex mu_;
  std::ofstream out_;
};

}  // namespace openkd::auxgen
