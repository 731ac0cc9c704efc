#pragma once

// Diverse natural-language keypoint prompts: template synthesis, LLM and
// rule-based parsing back to (object, keypoints), scoring, and
// parse-then-detect.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "openkd/corpus.hpp"
#include "openkd/errors.hpp"
#include "openkd/llm_gateway.hpp"
#include "openkd/prototype.hpp"

namespace openkd::diverse {

inline constexpr const char* kKeypointSlot = "<keypoint>";
inline constexpr const char* kObjectSlot = "<obj>";
inline constexpr const char* kObjectSlotLong = "<object>";

namespace detail {

inline std::size_t count_of(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + needle.size())) ++n;
  return n;
}

inline void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) s.replace(pos, from.size(), to);
}

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

// Lowercase, hyphens and underscores to spaces, runs of spaces collapsed.
inline std::string fold(const std::string& s) {
  std::string out;
  for (char c : lower(trim(s))) {
    if (c == '-' || c == '_') c = ' ';
    if (c == ' ' && (out.empty() || out.back() == ' ')) continue;
    out.push_back(c);
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

inline std::string strip_trailing_punct(std::string s) {
  s = trim(std::move(s));
  while (!s.empty() && std::string(".,;:!?\"'").find(s.back()) != std::string::npos) s.pop_back();
  while (!s.empty() && (s.front() == '"' || s.front() == '\'')) s.erase(s.begin());
  return trim(std::move(s));
}

inline std::string regex_escape(const std::string& s) {
  static const std::string special = R"(\^$.|?*+()[]{})";
  std::string out;
  for (char c : s) {
    if (special.find(c) != std::string::npos) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

}  // namespace detail

inline bool has_object_slot(const std::string& tmpl) {
  return tmpl.find(kObjectSlot) != std::string::npos || tmpl.find(kObjectSlotLong) != std::string::npos;
}

struct TemplateBank {
  std::vector<std::string> templates;
  std::size_t verbatim_count = 0;  // leading entries reproduced from the published listing

  std::size_t size() const noexcept { return templates.size(); }

  void validate() const {
    for (const auto& t : templates) {
      if (detail::count_of(t, kKeypointSlot) != 1)
        throw ConfigurationError("template must contain <keypoint> exactly once: " + t);
      if (detail::count_of(t, kObjectSlot) + detail::count_of(t, kObjectSlotLong) > 1)
        throw ConfigurationError("template has more than one object slot: " + t);
    }
  }

  // {"verbatim": [...], "authored": [...]}
  static TemplateBank from_json(const nlohmann::json& j) {
    TemplateBank b;
    for (const auto& t : j.at("verbatim")) b.templates.push_back(t.get<std::string>());
    b.verbatim_count = b.templates.size();
    if (j.contains("authored"))
      for (const auto& t : j.at("authored")) b.templates.push_back(t.get<std::string>());
    b.validate();
    return b;
  }

  static TemplateBank load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigurationError("cannot open template bank " + path.string());
    return from_json(nlohmann::json::parse(in));
  }
};

inline std::string join_keypoints(const std::vector<std::string>& kps) {
  std::string out;
  for (std::size_t i = 0; i < kps.size(); ++i) out += (i ? ", " : "") + kps[i];
  return out;
}

inline std::string synthesize(const std::string& tmpl, const std::vector<std::string>& keypoints,
                              const std::optional<std::string>& object) {
  if (keypoints.empty()) throw ArgumentError("synthesize needs at least one keypoint");
  std::string out = tmpl;
  if (has_object_slot(tmpl)) {
    if (!object || object->empty()) throw ArgumentError("template requires an object: " + tmpl);
    detail::replace_all(out, kObjectSlotLong, *object);
    detail::replace_all(out, kObjectSlot, *object);
  } else if (object) {
    spdlog::debug("template has no object slot; ignoring object '{}'", *object);
  }
  detail::replace_all(out, kKeypointSlot, join_keypoints(keypoints));
  return out;
}

// Number of (template, non-empty keypoint subset) combinations:
// T * sum_{k=1..N} C(N, k) = T * (2^N - 1).
inline std::uint64_t prompt_space_size(std::uint64_t num_templates, int n) {
  if (n < 1) throw ArgumentError("N must be at least 1");
  if (n > 62) throw ArgumentError("N too large for a 64-bit prompt space");
  return num_templates * ((std::uint64_t{1} << n) - 1);
}

inline std::vector<llm::Message> build_parse_prompt(const std::string& text) {
  if (text.empty()) throw ArgumentError("parse prompt needs non-empty text");
  return {{"user", "Please extract the animal and keypoint keywords from the below text: \"" + text +
                       "\". Give the answer in simple words, like \"Animal type:, Keypoint part:\". If no animal is "
                       "mentioned, set animal type to N/A."}};
}

// Folded alias -> canonical keypoint name. Schema names map to themselves.
class SynonymTable {
 public:
  SynonymTable() = default;
  explicit SynonymTable(const corpus::KeypointSchema& schema) { add_schema(schema); }

  void add_schema(const corpus::KeypointSchema& schema) {
    for (const auto& n : schema.names) add(n, n);
  }

  void add(const std::string& alias, const std::string& canonical) { map_[detail::fold(alias)] = canonical; }

  // {"alias": "canonical", ...}
  void add_json(const nlohmann::json& j) {
    for (auto it = j.begin(); it != j.end(); ++it) add(it.key(), it.value().get<std::string>());
  }

  // Canonical schema name when known, otherwise the lowercased, trimmed
  // input with its original punctuation.
  std::string canonicalize(const std::string& name) const {
    auto it = map_.find(detail::fold(name));
    return it != map_.end() ? it->second : detail::lower(detail::trim(name));
  }

  bool known(const std::string& name) const { return map_.count(detail::fold(name)) != 0; }

  const std::map<std::string, std::string>& entries() const noexcept { return map_; }

 private:
  std::map<std::string, std::string> map_;
};

// Synonym file layout: {"<dataset>": {"alias": "canonical", ...}, ...}.
inline SynonymTable load_synonyms(const std::filesystem::path& path, const std::string& dataset,
                                  const corpus::KeypointSchema& schema) {
  SynonymTable t(schema);
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open synonym table " + path.string());
  const auto j = nlohmann::json::parse(in);
  if (!j.contains(dataset)) throw ConfigurationError("synonym table has no entry for dataset '" + dataset + "'");
  t.add_json(j.at(dataset));
  return t;
}

struct ParsedPrompt {
  std::optional<std::string> object;
  std::vector<std::string> keypoints;
  bool ok = true;
  std::string error;

  static ParsedPrompt failure(std::string why) {
    ParsedPrompt p;
    p.ok = false;
    p.error = std::move(why);
    return p;
  }
};

inline std::vector<std::string> split_keypoints(const std::string& list, const SynonymTable& syn) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    auto k = detail::strip_trailing_punct(cur);
    if (!k.empty()) out.push_back(syn.canonicalize(k));
    cur.clear();
  };
  for (char c : list) {
    if (c == ',' || c == '\n') flush();
    else cur.push_back(c);
  }
  flush();
  return out;
}

// Reads "Animal type: X; Keypoint part: a, b" with ';' or newline between
// the fields. "N/A" means no object.
inline ParsedPrompt parse_reply(const std::string& reply, const SynonymTable& syn) {
  const std::string low = detail::lower(reply);
  const std::string animal_label = "animal type:";
  const std::string kp_label = "keypoint part:";
  const auto a = low.find(animal_label);
  const auto k = low.find(kp_label);
  if (a == std::string::npos && k == std::string::npos) return ParsedPrompt::failure("no labelled fields in reply");
  ParsedPrompt p;
  if (a != std::string::npos) {
    const auto start = a + animal_label.size();
    auto end = reply.find_first_of(";\n", start);
    if (k != std::string::npos && k > start) end = std::min(end, k);
    std::string obj = detail::strip_trailing_punct(reply.substr(start, end == std::string::npos ? std::string::npos : end - start));
    if (!obj.empty() && detail::lower(obj) != "n/a" && detail::lower(obj) != "none") p.object = obj;
  }
  if (k != std::string::npos) {
    const auto start = k + kp_label.size();
    auto end = std::string::npos;
    if (a != std::string::npos && a > k) end = a - start;
    p.keypoints = split_keypoints(reply.substr(start, end), syn);
  }
  if (p.keypoints.empty()) {
    p.ok = false;
    p.error = "reply names no keypoints";
  }
  return p;
}

inline ParsedPrompt llm_parse(const std::string& text, llm::Gateway& gateway, const SynonymTable& syn,
                              const std::string& model = "gpt-3.5-turbo") {
  llm::ChatRequest req;
  req.model = model;
  req.temperature = 0.0;
  req.messages = build_parse_prompt(text);
  return parse_reply(gateway.chat(req, 0), syn);
}

// Deterministic rule-based parser. First tries every template as a full-match
// pattern (longest literal text first), accepting a match only when every
// captured keypoint is a known name and the object is a known species; then
// falls back to scanning the text for known keypoint and species names.
class FallbackParser {
 public:
  FallbackParser(const TemplateBank& bank, SynonymTable syn, std::vector<std::string> species)
      : syn_(std::move(syn)) {
    for (const auto& s : species) species_.insert(detail::fold(s));
    std::vector<std::pair<std::size_t, std::string>> order;
    for (const auto& t : bank.templates) {
      std::string literal = t;
      detail::replace_all(literal, kKeypointSlot, "");
      detail::replace_all(literal, kObjectSlotLong, "");
      detail::replace_all(literal, kObjectSlot, "");
      order.emplace_back(literal.size(), t);
    }
    std::stable_sort(order.begin(), order.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    for (const auto& [_, t] : order) patterns_.push_back(compile(t));
  }

  ParsedPrompt operator()(const std::string& text) const {
    for (const auto& p : patterns_) {
      for (const auto* re : {&p.lazy, &p.greedy}) {
        std::smatch m;
        if (!std::regex_match(text, m, *re)) continue;
        auto parsed = accept(m, p);
        if (parsed) return *parsed;
      }
    }
    return scan(text);
  }

  ParsedPrompt scan(const std::string& text) const {
    const std::string folded = " " + detail::fold(strip_marks(text)) + " ";
    ParsedPrompt p;
    std::vector<std::pair<std::size_t, std::string>> found;
    std::vector<std::pair<std::size_t, std::size_t>> taken;
    std::vector<std::pair<std::string, std::string>> names(syn_.entries().begin(), syn_.entries().end());
    std::stable_sort(names.begin(), names.end(), [](const auto& x, const auto& y) { return x.first.size() > y.first.size(); });
    for (const auto& [alias, canonical] : names) {
      const std::string needle = " " + alias + " ";
      for (auto pos = folded.find(needle); pos != std::string::npos; pos = folded.find(needle, pos + 1)) {
        const std::size_t b = pos + 1, e = pos + needle.size() - 1;
        bool overlaps = false;
        for (auto [tb, te] : taken) overlaps = overlaps || (b < te && tb < e);
        if (overlaps) continue;
        taken.emplace_back(b, e);
        found.emplace_back(b, canonical);
      }
    }
    std::sort(found.begin(), found.end());
    for (const auto& [_, name] : found)
      if (std::find(p.keypoints.begin(), p.keypoints.end(), name) == p.keypoints.end()) p.keypoints.push_back(name);
    std::size_t best = std::string::npos;
    for (const auto& s : species_) {
      const auto pos = folded.find(" " + s + " ");
      if (pos != std::string::npos && pos < best) {
        best = pos;
        p.object = s;
      }
    }
    if (p.keypoints.empty()) return ParsedPrompt::failure("no known keypoint name in: " + text);
    return p;
  }

 private:
  struct Pattern {
    std::regex lazy, greedy;
    int kp_group = 1, obj_group = 0;
  };

  static std::string strip_marks(const std::string& s) {
    std::string out;
    for (char c : s) out.push_back(std::string(",.?!;:'\"").find(c) != std::string::npos ? ' ' : c);
    return out;
  }

  static Pattern compile(const std::string& t) {
    Pattern p;
    std::string lazy, greedy;
    std::size_t i = 0;
    int group = 0;
    while (i < t.size()) {
      auto match_slot = [&](const char* slot) { return t.compare(i, std::char_traits<char>::length(slot), slot) == 0; };
      if (match_slot(kKeypointSlot)) {
        p.kp_group = ++group;
        lazy += "(.+?)";
        greedy += "(.+)";
        i += std::char_traits<char>::length(kKeypointSlot);
      } else if (match_slot(kObjectSlotLong) || match_slot(kObjectSlot)) {
        p.obj_group = ++group;
        lazy += "(.+?)";
        greedy += "(.+)";
        i += std::char_traits<char>::length(match_slot(kObjectSlotLong) ? kObjectSlotLong : kObjectSlot);
      } else {
        const std::string c = detail::regex_escape(std::string(1, t[i]));
        lazy += c;
        greedy += c;
        ++i;
      }
    }
    p.lazy = std::regex(lazy);
    p.greedy = std::regex(greedy);
    return p;
  }

  std::optional<ParsedPrompt> accept(const std::smatch& m, const Pattern& p) const {
    ParsedPrompt out;
    std::string list = m[p.kp_group].str();
    std::vector<std::string> raw;
    std::size_t start = 0;
    while (true) {
      const auto pos = list.find(", ", start);
      raw.push_back(list.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
      if (pos == std::string::npos) break;
      start = pos + 2;
    }
    for (const auto& k : raw) {
      if (!syn_.known(k)) return std::nullopt;
      out.keypoints.push_back(syn_.canonicalize(k));
    }
    if (p.obj_group) {
      const std::string obj = m[p.obj_group].str();
      if (!species_.empty() && !species_.count(detail::fold(obj))) return std::nullopt;
      out.object = obj;
    }
    return out;
  }

  SynonymTable syn_;
  std::set<std::string> species_;
  std::vector<Pattern> patterns_;
};

struct ParsingAccuracy {
  double acc_kp = 0;
  double acc_obj = 0;
};

inline double keypoint_iou(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::size_t inter = 0;
  for (const auto& x : sa) inter += sb.count(x);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

inline bool same_object(const std::optional<std::string>& a, const std::optional<std::string>& b) {
  if (!a || !b) return !a && !b;
  return detail::fold(*a) == detail::fold(*b);
}

// Failed parses count as incorrect for both fields.
inline ParsingAccuracy parsing_accuracy(const std::vector<ParsedPrompt>& preds, const std::vector<ParsedPrompt>& gts,
                                        double iou_threshold = 0.9) {
  if (preds.size() != gts.size()) throw ArgumentError("prediction and ground-truth lists differ in length");
  if (preds.empty()) return {};
  double kp = 0, obj = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!preds[i].ok) continue;
    kp += keypoint_iou(preds[i].keypoints, gts[i].keypoints) >= iou_threshold;
    obj += same_object(preds[i].object, gts[i].object);
  }
  return {kp / double(preds.size()), obj / double(preds.size())};
}

// ---------------------------------------------------------------- prompt sets

struct DiversePrompt {
  std::string instance_id;
  std::string text;
  std::optional<std::string> gt_object;
  std::vector<std::string> gt_keypoints;
  std::string template_text;
};

inline nlohmann::json to_json(const DiversePrompt& p) {
  return {{"instance_id", p.instance_id},
          {"text", p.text},
          {"gt_object", p.gt_object ? nlohmann::json(*p.gt_object) : nlohmann::json(nullptr)},
          {"gt_keypoints", p.gt_keypoints}};
}

inline DiversePrompt prompt_from_json(const nlohmann::json& j) {
  DiversePrompt p;
  p.instance_id = j.at("instance_id").get<std::string>();
  p.text = j.at("text").get<std::string>();
  if (!j.at("gt_object").is_null()) p.gt_object = j.at("gt_object").get<std::string>();
  p.gt_keypoints = j.at("gt_keypoints").get<std::vector<std::string>>();
  return p;
}

inline void save_prompts(const std::filesystem::path& path, const std::vector<DiversePrompt>& ps) {
  std::ofstream out(path);
  if (!out) throw ConfigurationError("cannot write " + path.string());
  for (const auto& p : ps) out << to_json(p).dump() << "\n";
}

inline std::vector<DiversePrompt> load_prompts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open prompt set " + path.string());
  std::vector<DiversePrompt> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(prompt_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// One prompt from a uniformly drawn template and 1..max_keypoints of the
// given visible keypoint names (drawn without replacement, in schema order).
inline DiversePrompt sample_prompt(const TemplateBank& bank, const std::vector<std::string>& visible,
                                   const std::string& object, int max_keypoints, std::mt19937_64& rng) {
  if (visible.empty()) throw SamplingError("no visible keypoints to describe");
  const auto& t = bank.templates[std::uniform_int_distribution<std::size_t>(0, bank.size() - 1)(rng)];
  const int cap = std::min<int>(max_keypoints, static_cast<int>(visible.size()));
  const int k = std::uniform_int_distribution<int>(1, cap)(rng);
  std::vector<std::size_t> idx(visible.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  DiversePrompt p;
  for (auto i : idx) p.gt_keypoints.push_back(visible[i]);
  if (has_object_slot(t)) p.gt_object = object;
  p.text = synthesize(t, p.gt_keypoints, p.gt_object);
  p.template_text = t;
  return p;
}

inline std::vector<DiversePrompt> synthesize_prompt_set(const corpus::Dataset& ds, const TemplateBank& bank,
                                                        int max_keypoints, std::mt19937_64& rng,
                                                        const std::vector<int>& allowed_ids = {}) {
  std::vector<DiversePrompt> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& in = ds.instances()[i];
    std::vector<std::string> visible;
    for (int id = 0; id < ds.schema().size(); ++id) {
      if (!allowed_ids.empty() && std::find(allowed_ids.begin(), allowed_ids.end(), id) == allowed_ids.end()) continue;
      if (in.keypoints[id].visible) visible.push_back(ds.schema().names[id]);
    }
    if (visible.empty()) continue;
    auto p = sample_prompt(bank, visible, in.species, max_keypoints, rng);
    p.instance_id = std::to_string(i);
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------- detection

enum class ParseMode { llm, fallback, none };

inline ParseMode parse_mode_from_string(const std::string& s) {
  if (s == "llm") return ParseMode::llm;
  if (s == "fallback") return ParseMode::fallback;
  if (s == "none") return ParseMode::none;
  throw ConfigurationError("unknown parse mode '" + s + "' (expected llm, fallback or none)");
}

struct KeypointPrediction {
  std::string name;  // empty when the raw text was used unparsed
  prototype::Point point;
};

// Zero-shot detector over text prompts: one predicted point per prompt.
using TextDetector = std::function<std::vector<prototype::Point>(const std::vector<std::string>& prompts)>;
using Parser = std::function<ParsedPrompt(const std::string&)>;

// mode none feeds the raw text as a single prompt and returns one unnamed
// prediction; the other modes parse, rebuild simple prompts and return one
// prediction per parsed keypoint.
inline std::vector<KeypointPrediction> parse_then_detect(const std::string& text, ParseMode mode, const Parser& parser,
                                                         const TextDetector& detect,
                                                         const std::string& simple_template = corpus::kDefaultSimpleTemplate) {
  if (mode == ParseMode::none) return {{"", detect({text}).at(0)}};
  const ParsedPrompt parsed = parser(text);
  if (!parsed.ok) throw ParseError("could not parse prompt \"" + text + "\": " + parsed.error);
  std::vector<std::string> prompts;
  for (const auto& k : parsed.keypoints)
    prompts.push_back(corpus::simple_prompt(simple_template, k, parsed.object.value_or("animal")));
  const auto points = detect(prompts);
  if (points.size() != prompts.size()) throw EvaluationError("detector returned the wrong number of points");
  std::vector<KeypointPrediction> out;
  for (std::size_t i = 0; i < prompts.size(); ++i) out.push_back({parsed.keypoints[i], points[i]});
  return out;
}

}  // namespace openkd::diverse
