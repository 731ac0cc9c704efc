#pragma once

// Dataset model, species splits and episodic sampling.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "openkd/errors.hpp"
#include "openkd/image.hpp"

namespace openkd::corpus {

struct KeypointSchema {
  std::vector<std::string> names;
  std::vector<int> base_ids;
  std::vector<int> novel_ids;
  std::vector<std::pair<int, int>> symmetry_pairs;

  int size() const noexcept { return static_cast<int>(names.size()); }

  int index_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    return it == names.end() ? -1 : static_cast<int>(it - names.begin());
  }

  bool is_novel(int id) const {
    return std::find(novel_ids.begin(), novel_ids.end(), id) != novel_ids.end();
  }

  // Throws SchemaError unless base/novel partition the index range and every
  // symmetry pair is in range.
  void validate() const {
    const int n = size();
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    auto mark = [&](int id, const char* what) {
      if (id < 0 || id >= n)
        throw SchemaError(std::string(what) + " id " + std::to_string(id) + " out of range");
      if (seen[id]++) throw SchemaError("keypoint id " + std::to_string(id) + " is both base and novel");
    };
    for (int id : base_ids) mark(id, "base");
    for (int id : novel_ids) mark(id, "novel");
    for (int i = 0; i < n; ++i)
      if (!seen[i]) throw SchemaError("keypoint '" + names[i] + "' is neither base nor novel");
    for (auto [l, r] : symmetry_pairs)
      if (l < 0 || l >= n || r < 0 || r >= n)
        throw SchemaError("symmetry pair references an invalid keypoint index");
  }
};

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
};

struct Keypoint {
  double x = 0, y = 0;
  bool visible = false;
};

struct Instance {
  std::string image_ref;
  std::string species;
  BBox bbox;
  std::vector<Keypoint> keypoints;
  std::optional<std::string> mask_ref;
};

// Resolves opaque image/mask handles. References are either files relative
// to the manifest directory or in-memory rasters registered by a generator.
class ImageStore {
 public:
  ImageStore() = default;
  explicit ImageStore(std::filesystem::path root) : root_(std::move(root)) {}

  void put(const std::string& ref, Image img) {
    std::lock_guard lock(mu_);
    images_[ref] = std::make_shared<const Image>(std::move(img));
  }
  void put_mask(const std::string& ref, Mask m) {
    std::lock_guard lock(mu_);
    masks_[ref] = std::make_shared<const Mask>(std::move(m));
  }

  std::shared_ptr<const Image> image(const std::string& ref) const {
    std::lock_guard lock(mu_);
    auto it = images_.find(ref);
    if (it != images_.end()) return it->second;
    auto img = std::make_shared<const Image>(pnm::read(root_ / ref));
    images_[ref] = img;
    return img;
  }

  std::shared_ptr<const Mask> mask(const std::string& ref) const {
    std::lock_guard lock(mu_);
    auto it = masks_.find(ref);
    if (it != masks_.end()) return it->second;
    auto m = std::make_shared<const Mask>(pnm::read_mask(root_ / ref));
    masks_[ref] = m;
    return m;
  }

  const std::filesystem::path& root() const noexcept { return root_; }

 private:
  std::filesystem::path root_;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::shared_ptr<const Image>> images_;
  mutable std::map<std::string, std::shared_ptr<const Mask>> masks_;
};

class Dataset {
 public:
  Dataset() : store_(std::make_shared<ImageStore>()) {}
  Dataset(KeypointSchema schema, std::vector<Instance> instances, std::shared_ptr<ImageStore> store)
      : schema_(std::move(schema)), instances_(std::move(instances)), store_(std::move(store)) {
    for (std::size_t i = 0; i < instances_.size(); ++i) by_species_[instances_[i].species].push_back(i);
  }

  const KeypointSchema& schema() const noexcept { return schema_; }
  const std::vector<Instance>& instances() const noexcept { return instances_; }
  std::size_t size() const noexcept { return instances_.size(); }

  // species -> instance indices, species in lexicographic order
  const std::map<std::string, std::vector<std::size_t>>& species_index() const noexcept {
    return by_species_;
  }
  std::vector<std::string> species() const {
    std::vector<std::string> out;
    for (const auto& [s, _] : by_species_) out.push_back(s);
    return out;
  }

  const ImageStore& store() const noexcept { return *store_; }
  const std::shared_ptr<ImageStore>& shared_store() const noexcept { return store_; }

 private:
  KeypointSchema schema_;
  std::vector<Instance> instances_;
  std::map<std::string, std::vector<std::size_t>> by_species_;
  std::shared_ptr<ImageStore> store_;
};

// ---------------------------------------------------------------- manifest

inline KeypointSchema schema_from_json(const nlohmann::json& j) {
  KeypointSchema s;
  try {
    s.names = j.at("names").get<std::vector<std::string>>();
    s.base_ids = j.value("base", std::vector<int>{});
    s.novel_ids = j.value("novel", std::vector<int>{});
    for (const auto& p : j.value("symmetry", nlohmann::json::array()))
      s.symmetry_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed schema: ") + e.what());
  }
  if (s.base_ids.empty() && s.novel_ids.empty()) {
    for (int i = 0; i < s.size(); ++i) s.base_ids.push_back(i);
  }
  s.validate();
  return s;
}

inline nlohmann::json schema_to_json(const KeypointSchema& s) {
  nlohmann::json sym = nlohmann::json::array();
  for (auto [l, r] : s.symmetry_pairs) sym.push_back({l, r});
  return {{"names", s.names}, {"base", s.base_ids}, {"novel", s.novel_ids}, {"symmetry", sym}};
}

inline nlohmann::json instance_to_json(const Instance& in) {
  nlohmann::json kps = nlohmann::json::array();
  for (const auto& k : in.keypoints) kps.push_back({k.x, k.y, k.visible ? 1 : 0});
  return {{"image", in.image_ref},
          {"species", in.species},
          {"bbox", {in.bbox.x, in.bbox.y, in.bbox.w, in.bbox.h}},
          {"keypoints", kps},
          {"mask", in.mask_ref ? nlohmann::json(*in.mask_ref) : nlohmann::json(nullptr)}};
}

inline Instance instance_from_json(const nlohmann::json& r, std::size_t index, const KeypointSchema& schema) {
  Instance in;
  try {
    in.image_ref = r.at("image").get<std::string>();
    in.species = r.at("species").get<std::string>();
    const auto bb = r.at("bbox").get<std::vector<double>>();
    if (bb.size() != 4) throw IngestionError("record " + std::to_string(index) + ": bbox needs 4 numbers");
    in.bbox = {bb[0], bb[1], bb[2], bb[3]};
    for (const auto& k : r.at("keypoints")) {
      if (k.size() != 3) throw IngestionError("record " + std::to_string(index) + ": keypoint needs [x,y,v]");
      in.keypoints.push_back({k.at(0).get<double>(), k.at(1).get<double>(), k.at(2).get<int>() != 0});
    }
    if (r.contains("mask") && !r.at("mask").is_null()) in.mask_ref = r.at("mask").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("malformed record " + std::to_string(index) + ": " + e.what());
  }
  if (in.bbox.w <= 0 || in.bbox.h <= 0)
    throw IngestionError("record " + std::to_string(index) + ": bbox must have positive width and height");
  if (static_cast<int>(in.keypoints.size()) != schema.size()) {
    throw SchemaError("record " + std::to_string(index) + ": " + std::to_string(in.keypoints.size()) +
                      " keypoints, schema has " + std::to_string(schema.size()));
  }
  for (const auto& k : in.keypoints)
    if (k.visible && (k.x < 0 || k.y < 0))
      throw IngestionError("record " + std::to_string(index) + ": visible keypoint outside the image");
  return in;
}

inline nlohmann::json dataset_to_json(const Dataset& ds) {
  nlohmann::json inst = nlohmann::json::array();
  for (const auto& in : ds.instances()) inst.push_back(instance_to_json(in));
  return {{"schema", schema_to_json(ds.schema())}, {"instances", inst}};
}

// Parses a manifest. When `schema` is given it overrides the manifest's own
// schema block, otherwise the manifest must carry one.
inline Dataset dataset_from_json(const nlohmann::json& j, std::shared_ptr<ImageStore> store,
                                 const std::optional<KeypointSchema>& schema = std::nullopt) {
  KeypointSchema s;
  if (schema) {
    s = *schema;
    s.validate();
  } else if (j.contains("schema")) {
    s = schema_from_json(j.at("schema"));
  } else {
    throw SchemaError("manifest has no schema and none was supplied");
  }
  if (!j.contains("instances") || !j.at("instances").is_array())
    throw IngestionError("manifest has no 'instances' array");
  std::vector<Instance> instances;
  std::size_t idx = 0;
  for (const auto& r : j.at("instances")) instances.push_back(instance_from_json(r, idx++, s));
  return Dataset(std::move(s), std::move(instances), std::move(store));
}

inline Dataset load_dataset(const std::filesystem::path& path,
                            const std::optional<KeypointSchema>& schema = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IngestionError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return dataset_from_json(j, std::make_shared<ImageStore>(path.parent_path()), schema);
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write manifest " + path.string());
  out << dataset_to_json(ds).dump(1) << "\n";
}

// ---------------------------------------------------------------- splits

struct SplitConfig {
  std::vector<std::string> train_species;  // empty = every species not in val/test
  std::vector<std::string> val_species;
  std::vector<std::string> test_species;
  std::string keypoint_split = "default";
};

struct DatasetSplit {
  Dataset train, val, test;
};

inline Dataset subset_by_species(const Dataset& ds, const std::set<std::string>& species) {
  std::vector<Instance> out;
  for (const auto& in : ds.instances())
    if (species.count(in.species)) out.push_back(in);
  return Dataset(ds.schema(), std::move(out), ds.shared_store());
}

inline DatasetSplit split_dataset(const Dataset& ds, const SplitConfig& cfg) {
  const auto& index = ds.species_index();
  std::set<std::string> train, val, test;
  auto fill = [&](const std::vector<std::string>& names, std::set<std::string>& dst, const char* role) {
    for (const auto& n : names) {
      if (!index.count(n)) throw ConfigurationError(std::string("unknown ") + role + " species: " + n);
      dst.insert(n);
    }
  };
  fill(cfg.train_species, train, "train");
  fill(cfg.val_species, val, "val");
  fill(cfg.test_species, test, "test");
  auto disjoint = [](const std::set<std::string>& a, const std::set<std::string>& b) {
    for (const auto& s : a)
      if (b.count(s)) return false;
    return true;
  };
  if (!disjoint(train, val) || !disjoint(train, test) || !disjoint(val, test))
    throw ConfigurationError("train/val/test species sets overlap");
  if (cfg.train_species.empty()) {
    for (const auto& [s, _] : index)
      if (!val.count(s) && !test.count(s)) train.insert(s);
  }
  return {subset_by_species(ds, train), subset_by_species(ds, val), subset_by_species(ds, test)};
}

// ---------------------------------------------------------------- episodes

inline constexpr const char* kDefaultSimpleTemplate = "the {keypoint} of a {category} in the photo";

inline std::string simple_prompt(const std::string& tmpl, const std::string& keypoint,
                                 const std::string& category) {
  std::string out = tmpl;
  auto replace = [&out](const std::string& key, const std::string& value) {
    for (std::size_t pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size()))
      out.replace(pos, key.size(), value);
  };
  replace("{keypoint}", keypoint);
  replace("{category}", category);
  return out;
}

struct Episode {
  std::string species;
  std::vector<Instance> supports;
  Instance query;
  std::vector<int> keypoint_ids;
  std::vector<std::string> texts;

  int shots() const noexcept { return static_cast<int>(supports.size()); }
};

struct EpisodePair {
  Episode first;
  Episode second;
};

struct SamplerOptions {
  int shots = 1;      // K
  int max_keypoints = 8;  // N_max
  std::vector<int> allowed_ids;  // empty = every schema index
  std::string text_template = kDefaultSimpleTemplate;
  int max_attempts = 64;
};

namespace detail {

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// k distinct indices from `pool`, in draw order.
inline std::vector<std::size_t> draw_distinct(const std::vector<std::size_t>& pool, std::size_t k,
                                              std::mt19937_64& rng) {
  std::vector<std::size_t> p = pool;
  for (std::size_t i = 0; i < k; ++i) std::swap(p[i], p[i + uniform_index(rng, p.size() - i)]);
  p.resize(k);
  return p;
}

inline std::vector<int> common_visible(const Dataset& ds, const std::vector<std::size_t>& members,
                                       const std::vector<int>& allowed) {
  std::vector<int> ids;
  const int n = ds.schema().size();
  for (int id = 0; id < n; ++id) {
    if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), id) == allowed.end()) continue;
    bool ok = true;
    for (std::size_t m : members) ok = ok && ds.instances()[m].keypoints[id].visible;
    if (ok) ids.push_back(id);
  }
  return ids;
}

inline std::vector<int> truncate_ids(std::vector<int> ids, int n_max, std::mt19937_64& rng) {
  if (n_max > 0 && static_cast<int>(ids.size()) > n_max) {
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(static_cast<std::size_t>(n_max));
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

inline Episode make_episode(const Dataset& ds, const std::string& species,
                            const std::vector<std::size_t>& members, std::vector<int> ids,
                            const SamplerOptions& opt) {
  Episode ep;
  ep.species = species;
  ep.query = ds.instances()[members[0]];
  for (std::size_t i = 1; i < members.size(); ++i) ep.supports.push_back(ds.instances()[members[i]]);
  ep.keypoint_ids = std::move(ids);
  for (int id : ep.keypoint_ids)
    ep.texts.push_back(simple_prompt(opt.text_template, ds.schema().names[id], species));
  return ep;
}

inline std::vector<std::string> qualifying_species(const Dataset& ds, int shots) {
  std::vector<std::string> out;
  for (const auto& [s, idx] : ds.species_index())
    if (static_cast<int>(idx.size()) >= shots + 1) out.push_back(s);
  return out;
}

}  // namespace detail

// One query plus K supports of a single species. keypoint_ids are the ids
// visible in every member, restricted to allowed_ids and capped at N_max.
inline Episode sample_episode(const Dataset& ds, const SamplerOptions& opt, std::mt19937_64& rng) {
  if (opt.shots < 0) throw ArgumentError("K must be non-negative");
  const auto species = detail::qualifying_species(ds, opt.shots);
  if (species.empty())
    throw SamplingError("no species has " + std::to_string(opt.shots + 1) + " instances");
  for (int attempt = 0; attempt < opt.max_attempts; ++attempt) {
    const std::string& s = species[detail::uniform_index(rng, species.size())];
    const auto members = detail::draw_distinct(ds.species_index().at(s), opt.shots + 1, rng);
    auto ids = detail::common_visible(ds, members, opt.allowed_ids);
    if (ids.empty()) continue;
    return detail::make_episode(ds, s, members, detail::truncate_ids(std::move(ids), opt.max_keypoints, rng), opt);
  }
  throw SamplingError("no species with " + std::to_string(opt.shots + 1) +
                      " instances sharing a visible keypoint");
}

// Two episodes of distinct species that share one keypoint ordering.
inline EpisodePair sample_episode_pair(const Dataset& ds, const SamplerOptions& opt, std::mt19937_64& rng) {
  const auto species = detail::qualifying_species(ds, opt.shots);
  if (species.size() < 2) throw SamplingError("episode pairs need at least two species");
  for (int attempt = 0; attempt < opt.max_attempts; ++attempt) {
    const std::size_t a = detail::uniform_index(rng, species.size());
    std::size_t b = detail::uniform_index(rng, species.size() - 1);
    if (b >= a) ++b;
    const auto ma = detail::draw_distinct(ds.species_index().at(species[a]), opt.shots + 1, rng);
    const auto mb = detail::draw_distinct(ds.species_index().at(species[b]), opt.shots + 1, rng);
    std::vector<std::size_t> all = ma;
    all.insert(all.end(), mb.begin(), mb.end());
    auto ids = detail::common_visible(ds, all, opt.allowed_ids);
    if (ids.empty()) continue;
    ids = detail::truncate_ids(std::move(ids), opt.max_keypoints, rng);
    return {detail::make_episode(ds, species[a], ma, ids, opt),
            detail::make_episode(ds, species[b], mb, ids, opt)};
  }
  throw SamplingError("no two species share a visible keypoint");
}

}  // namespace openkd::corpus
