#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "openkd/corpus.hpp"

using namespace openkd;
using namespace openkd::corpus;

namespace {

KeypointSchema tiny_schema() {
  KeypointSchema s;
  s.names = {"eye", "nose", "tail", "paw"};
  s.base_ids = {0, 1, 2};
  s.novel_ids = {3};
  return s;
}

Instance make(const std::string& species, std::vector<int> visible, const std::string& ref = "img") {
  Instance in;
  in.image_ref = ref;
  in.species = species;
  in.bbox = {0, 0, 10, 10};
  for (int i = 0; i < 4; ++i) in.keypoints.push_back({double(i + 1), double(i + 1), visible[i] != 0});
  return in;
}

Dataset fixture() {
  std::vector<Instance> v = {make("cat", {1, 1, 1, 1}), make("cat", {1, 1, 1, 0}), make("cat", {1, 1, 0, 1}),
                             make("dog", {1, 1, 1, 1}), make("dog", {1, 1, 1, 1}), make("cow", {1, 0, 1, 1}),
                             make("cow", {1, 0, 1, 1}), make("cow", {0, 1, 1, 1}), make("pig", {1, 1, 1, 1}),
                             make("pig", {1, 1, 1, 1})};
  return Dataset(tiny_schema(), v, std::make_shared<ImageStore>());
}

std::filesystem::path write_temp(const std::string& name, const std::string& body) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << body;
  return p;
}

}  // namespace

TEST(Schema, ValidationCatchesOverlapAndGaps) {
  auto s = tiny_schema();
  EXPECT_NO_THROW(s.validate());
  s.novel_ids = {2, 3};
  EXPECT_THROW(s.validate(), SchemaError);
  s.novel_ids = {};
  EXPECT_THROW(s.validate(), SchemaError);
  s = tiny_schema();
  s.symmetry_pairs = {{0, 9}};
  EXPECT_THROW(s.validate(), SchemaError);
}

TEST(LoadDataset, EmptyInstanceList) {
  auto p = write_temp("openkd_empty.json", R"({"schema":{"names":["a"],"base":[0],"novel":[]},"instances":[]})");
  auto ds = load_dataset(p);
  EXPECT_EQ(ds.size(), 0u);
  EXPECT_TRUE(ds.species().empty());
}

TEST(LoadDataset, SpeciesIndexCountsByHand) {
  auto p = write_temp("openkd_three.json", R"({
    "schema": {"names": ["eye", "nose"], "base": [0], "novel": [1], "symmetry": []},
    "instances": [
      {"image": "a.ppm", "species": "A", "bbox": [0,0,5,5], "keypoints": [[1,1,1],[2,2,1]], "mask": null},
      {"image": "b.ppm", "species": "B", "bbox": [0,0,5,5], "keypoints": [[1,1,1],[2,2,0]]},
      {"image": "c.ppm", "species": "A", "bbox": [0,0,5,5], "keypoints": [[1,1,0],[2,2,1]], "mask": "c.pgm"}
    ]})");
  auto ds = load_dataset(p);
  EXPECT_EQ(ds.species_index().at("A").size(), 2u);
  EXPECT_EQ(ds.species_index().at("B").size(), 1u);
  EXPECT_EQ(ds.instances()[2].mask_ref.value(), "c.pgm");
}

TEST(LoadDataset, ErrorsNameTheRecord) {
  auto bad = write_temp("openkd_bad.json", R"({"schema":{"names":["a"],"base":[0],"novel":[]},
    "instances":[{"image":"x","species":"s","bbox":[0,0,1,1],"keypoints":[[0,0,1]]},
                 {"image":"x","species":"s","bbox":"oops","keypoints":[[0,0,1]]}]})");
  try {
    load_dataset(bad);
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos);
  }
  auto count = write_temp("openkd_count.json", R"({"schema":{"names":["a","b"],"base":[0,1],"novel":[]},
    "instances":[{"image":"x","species":"s","bbox":[0,0,1,1],"keypoints":[[0,0,1]]}]})");
  EXPECT_THROW(load_dataset(count), SchemaError);
  EXPECT_THROW(load_dataset("/nonexistent/manifest.json"), IngestionError);
}

TEST(LoadDataset, RoundTripThroughJson) {
  auto ds = fixture();
  auto p = std::filesystem::temp_directory_path() / "openkd_roundtrip.json";
  save_dataset(p, ds);
  auto back = load_dataset(p);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.instances()[2].keypoints[2].visible, false);
  EXPECT_EQ(back.schema().novel_ids, ds.schema().novel_ids);
}

TEST(Split, HoldOutOneSpecies) {
  auto ds = fixture();
  SplitConfig cfg;
  cfg.test_species = {"cat"};
  auto sp = split_dataset(ds, cfg);
  EXPECT_EQ(sp.train.species().size(), 3u);
  EXPECT_EQ(sp.test.species().size(), 1u);
  EXPECT_EQ(sp.train.size() + sp.val.size() + sp.test.size(), ds.size());
}

TEST(Split, PartitionCoversExactlyOnce) {
  auto ds = fixture();
  SplitConfig cfg;
  cfg.val_species = {"pig"};
  cfg.test_species = {"cow", "dog"};
  auto sp = split_dataset(ds, cfg);
  EXPECT_EQ(sp.train.size() + sp.val.size() + sp.test.size(), 10u);
  EXPECT_EQ(sp.test.size(), 5u);
  for (const auto& in : sp.train.instances()) EXPECT_EQ(in.species, "cat");
}

TEST(Split, HoldOutNothingAndErrors) {
  auto ds = fixture();
  auto sp = split_dataset(ds, {});
  EXPECT_EQ(sp.test.size(), 0u);
  EXPECT_EQ(sp.train.size(), ds.size());
  SplitConfig bad;
  bad.test_species = {"unicorn"};
  EXPECT_THROW(split_dataset(ds, bad), ConfigurationError);
  SplitConfig overlap;
  overlap.val_species = {"cat"};
  overlap.test_species = {"cat"};
  EXPECT_THROW(split_dataset(ds, overlap), ConfigurationError);
}

TEST(Sampler, ZeroShotHasTextsAndNoSupports) {
  auto ds = fixture();
  std::mt19937_64 rng(3);
  SamplerOptions opt;
  opt.shots = 0;
  auto ep = sample_episode(ds, opt, rng);
  EXPECT_TRUE(ep.supports.empty());
  EXPECT_EQ(ep.texts.size(), ep.keypoint_ids.size());
  EXPECT_FALSE(ep.texts.empty());
}

TEST(Sampler, KeypointsVisibleInEveryMember) {
  auto ds = fixture();
  std::mt19937_64 rng(11);
  SamplerOptions opt;
  opt.shots = 1;
  for (int t = 0; t < 200; ++t) {
    auto ep = sample_episode(ds, opt, rng);
    for (int id : ep.keypoint_ids) {
      EXPECT_TRUE(ep.query.keypoints[id].visible);
      for (const auto& s : ep.supports) {
        EXPECT_TRUE(s.keypoints[id].visible);
        EXPECT_EQ(s.species, ep.species);
      }
    }
  }
}

TEST(Sampler, QueryLackingKeypointExcludesIt) {
  std::vector<Instance> v = {make("cat", {1, 1, 1, 0}), make("cat", {1, 1, 1, 1})};
  Dataset ds(tiny_schema(), v, std::make_shared<ImageStore>());
  std::mt19937_64 rng(1);
  auto ep = sample_episode(ds, {}, rng);
  EXPECT_EQ(ep.keypoint_ids, (std::vector<int>{0, 1, 2}));
}

TEST(Sampler, TruncatesToNMax) {
  auto ds = fixture();
  std::mt19937_64 rng(5);
  SamplerOptions opt;
  opt.max_keypoints = 2;
  for (int t = 0; t < 50; ++t) EXPECT_LE(sample_episode(ds, opt, rng).keypoint_ids.size(), 2u);
}

TEST(Sampler, SeededReplayIsIdentical) {
  auto ds = fixture();
  auto run = [&](int seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    auto p = sample_episode_pair(ds, {}, rng);
    return std::make_tuple(p.first.species, p.second.species, p.first.keypoint_ids, p.first.texts,
                           p.first.query.keypoints[0].x);
  };
  EXPECT_EQ(run(7), run(7));
  std::mt19937_64 a(7), b(7);
  EXPECT_EQ(sample_episode(ds, {}, a).texts, sample_episode(ds, {}, b).texts);
}

TEST(Sampler, PairsShareOrderingAcrossSpecies) {
  auto ds = fixture();
  std::mt19937_64 rng(9);
  for (int t = 0; t < 100; ++t) {
    auto p = sample_episode_pair(ds, {}, rng);
    EXPECT_NE(p.first.species, p.second.species);
    EXPECT_EQ(p.first.keypoint_ids, p.second.keypoint_ids);
  }
}

TEST(Sampler, TwoSpeciesSharingEyeAndNose) {
  KeypointSchema s;
  s.names = {"eye", "nose", "tail"};
  s.base_ids = {0, 1, 2};
  auto mk = [](const std::string& sp, bool tail) {
    Instance in;
    in.species = sp;
    in.bbox = {0, 0, 4, 4};
    in.keypoints = {{1, 1, true}, {2, 2, true}, {3, 3, tail}};
    return in;
  };
  Dataset ds(s, {mk("a", true), mk("a", true), mk("b", false), mk("b", false)}, std::make_shared<ImageStore>());
  std::mt19937_64 rng(2);
  auto p = sample_episode_pair(ds, {}, rng);
  EXPECT_EQ(p.first.keypoint_ids, (std::vector<int>{0, 1}));
  EXPECT_EQ(p.second.keypoint_ids, (std::vector<int>{0, 1}));
}

TEST(Sampler, ErrorsWhenImpossible) {
  std::vector<Instance> single = {make("cat", {1, 1, 1, 1}), make("cat", {1, 1, 1, 1})};
  Dataset one(tiny_schema(), single, std::make_shared<ImageStore>());
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_episode_pair(one, {}, rng), SamplingError);
  SamplerOptions many;
  many.shots = 5;
  EXPECT_THROW(sample_episode(one, many, rng), SamplingError);
  Dataset disjoint(tiny_schema(), {make("a", {1, 0, 0, 0}), make("a", {0, 1, 0, 0})}, std::make_shared<ImageStore>());
  EXPECT_THROW(sample_episode(disjoint, {}, rng), SamplingError);
}

TEST(SimplePrompt, FillsTemplate) {
  EXPECT_EQ(simple_prompt(kDefaultSimpleTemplate, "left eye", "cat"), "the left eye of a cat in the photo");
}
