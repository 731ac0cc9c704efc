#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "openkd/auxgen.hpp"
#include "openkd/harness.hpp"

using namespace openkd;
using namespace openkd::auxgen;

namespace {

InterpolationPath path(const std::string& a, const std::string& b, double z = 0.5) {
  InterpolationPath p;
  p.n1 = 0;
  p.n2 = 1;
  p.t1 = a;
  p.t2 = b;
  p.z = z;
  return p;
}

TextPool pool_of(std::vector<std::pair<std::string, int>> items) {
  TextPool p;
  int rep = 0;
  for (auto& [text, rank] : items) {
    if (rank == 1 && !p.candidates.empty()) ++rep;
    p.candidates.push_back({text, rep, rank});
  }
  p.repetitions = rep + 1;
  return p;
}

// Text features from a fixed table; phi is the first axis.
TextFeatureFn table_features(std::map<std::string, double> sims) {
  return [sims](const std::string& s) {
    const double c = sims.at(s);
    return Tensor({2}, std::vector<double>{c, std::sqrt(std::max(0.0, 1 - c * c))});
  };
}

const Tensor kPhi({2}, std::vector<double>{1.0, 0.0});

std::shared_ptr<llm::MockTable> table_with(const InterpolationPath& p, std::vector<std::string> replies) {
  auto t = std::make_shared<llm::MockTable>();
  t->add(build_itpl_prompt(p, true).back().content, std::move(replies));
  return t;
}

}  // namespace

TEST(Interpolate, Midpoint) {
  auto p = interpolate_visual({0, 0}, {10, 20}, 0.5);
  EXPECT_DOUBLE_EQ(p.x, 5);
  EXPECT_DOUBLE_EQ(p.y, 10);
}

TEST(Interpolate, ZeroIsFirstEndpoint) {
  auto p = interpolate_visual({3, 4}, {10, 20}, 0.0);
  EXPECT_DOUBLE_EQ(p.x, 3);
  EXPECT_DOUBLE_EQ(p.y, 4);
}

TEST(Interpolate, QuarterByHand) {
  auto p = interpolate_visual({4, 0}, {8, 8}, 0.25);
  EXPECT_DOUBLE_EQ(p.x, 5);
  EXPECT_DOUBLE_EQ(p.y, 2);
}

TEST(Interpolate, OutsideUnitIntervalThrows) { EXPECT_THROW(interpolate_visual({0, 0}, {1, 1}, 1.5), DomainError); }

TEST(Interpolate, PathValidation) {
  EXPECT_THROW(path("a", "b", 0.0).validate(), ConfigurationError);
  auto p = path("a", "b");
  p.n2 = 0;
  EXPECT_THROW(p.validate(), ConfigurationError);
}

TEST(Gate, AbsentMaskIsPermissive) { EXPECT_TRUE(foreground_gate({3.5, 2.5}, nullptr)); }

TEST(Gate, BackgroundAndBoundary) {
  Mask m(4, 4);
  m.at(1, 1) = 1;
  m.at(2, 1) = 1;
  EXPECT_FALSE(foreground_gate({0.5, 0.5}, &m));
  EXPECT_TRUE(foreground_gate({2.99, 1.0}, &m));
  EXPECT_FALSE(foreground_gate({3.0, 1.0}, &m));
  EXPECT_FALSE(foreground_gate({-0.5, 1.0}, &m));
}

TEST(Prompt, PlainContainsEndpoints) {
  auto p = path("nose", "left ear");
  p.category = "cat";
  const auto msgs = build_itpl_prompt(p, false);
  ASSERT_EQ(msgs.size(), 2u);
  EXPECT_NE(msgs.back().content.find("between nose and left ear"), std::string::npos);
  EXPECT_NE(msgs.back().content.find("at 1/2 between"), std::string::npos);
  EXPECT_NE(msgs.back().content.find("of cat."), std::string::npos);
}

TEST(Prompt, ChainOfThoughtLayout) {
  const auto msgs = build_itpl_prompt(path("nose", "left ear"), true);
  ASSERT_EQ(msgs.size(), 4u);
  EXPECT_EQ(msgs[0].role, "system");
  EXPECT_EQ(msgs[0].content, "You are a helpful assistant that produces keypoints of an animal.");
  EXPECT_EQ(msgs[1].role, "user");
  EXPECT_EQ(msgs[2].role, "assistant");
  EXPECT_NE(msgs[2].content.find("left-front ankle"), std::string::npos);
  EXPECT_EQ(msgs[3].content.rfind("Q: Please give me three most common body parts/keypoints at 1/2 between nose and left ear", 0), 0u);
}

TEST(Prompt, Injective) {
  std::set<std::string> seen;
  for (auto a : {"nose", "neck", "left ear"})
    for (auto b : {"tail", "left paw"})
      for (double z : {0.25, 0.5})
        EXPECT_TRUE(seen.insert(build_itpl_prompt(path(a, b, z), true).back().content).second);
}

TEST(Prompt, Fractions) {
  EXPECT_EQ(format_fraction(0.5), "1/2");
  EXPECT_EQ(format_fraction(0.25), "1/4");
  EXPECT_EQ(format_fraction(1.0 / 3.0), "1/3");
}

TEST(Answers, ReferenceFirstReply) {
  EXPECT_EQ(parse_numbered_answers("1. Left eye\n2. Left cheek\n3. Left temple"),
            (std::vector<std::string>{"left eye", "left cheek", "left temple"}));
}

TEST(Answers, TrailingPeriodStripped) {
  EXPECT_EQ(parse_numbered_answers("1. Right eye."), (std::vector<std::string>{"right eye"}));
}

TEST(Answers, InlineNumbering) {
  EXPECT_EQ(parse_numbered_answers("1. Chin 2. Throat 3. Jaw"), (std::vector<std::string>{"chin", "throat", "jaw"}));
}

TEST(Answers, ProseFails) { EXPECT_TRUE(parse_numbered_answers("The answer is the left eye.").empty()); }

TEST(Answers, AtMostThree) {
  EXPECT_EQ(parse_numbered_answers("1. a\n2. b\n3. c\n4. d").size(), 3u);
}

TEST(Pool, ThreeRepetitionsOfThree) {
  const auto p = path("nose", "left ear");
  auto gw = llm::Gateway::mock(table_with(p, {"1. a\n2. b\n3. c"}));
  const auto pool = collect_pool(p, 3, gw);
  EXPECT_EQ(pool.size(), 9u);
  EXPECT_TRUE(pool.failed_repetitions.empty());
  EXPECT_EQ(pool.candidates[3].repetition, 1);
  EXPECT_EQ(pool.candidates[3].rank, 1);
}

TEST(Pool, UnparseableRepetitionDropped) {
  const auto p = path("nose", "left ear");
  auto gw = llm::Gateway::mock(table_with(p, {"1. a\n2. b\n3. c", "I am not sure.", "1. d\n2. e\n3. f"}));
  const auto pool = collect_pool(p, 3, gw);
  EXPECT_EQ(pool.size(), 6u);
  EXPECT_EQ(pool.failed_repetitions, std::vector<int>{1});
}

TEST(Pool, ReferenceReplay) {
  auto gw = llm::Gateway::mock(harness::load_transcripts(std::filesystem::path(OPENKD_DATA_DIR) / "reference_transcripts.json"));
  const auto pool = collect_pool(path("nose", "left ear"), 1, gw);
  ASSERT_EQ(pool.size(), 3u);
  EXPECT_EQ(pool.candidates[0].text, "left eye");
  EXPECT_EQ(pool.candidates[1].text, "left cheek");
  EXPECT_EQ(pool.candidates[2].text, "left temple");
  const auto right = collect_pool(path("nose", "right ear"), 1, gw);
  EXPECT_EQ(right.candidates[1].text, "temple");
}

TEST(Select, PoolOfOne) {
  auto pool = pool_of({{"only", 1}});
  EXPECT_EQ(select_text_corr(pool, kPhi, table_features({{"only", -0.3}})), "only");
}

TEST(Select, ArgmaxByHand) {
  auto pool = pool_of({{"a", 1}, {"b", 2}, {"c", 3}});
  EXPECT_EQ(select_text_corr(pool, kPhi, table_features({{"a", 0.2}, {"b", 0.9}, {"c", 0.5}})), "b");
}

TEST(Select, ScaleInvariant) {
  auto pool = pool_of({{"a", 1}, {"b", 2}, {"c", 3}});
  const auto f = table_features({{"a", 0.2}, {"b", 0.9}, {"c", 0.5}});
  Tensor big = kPhi * 10.0;
  EXPECT_EQ(select_text_corr(pool, big, f), select_text_corr(pool, kPhi, f));
}

TEST(Select, EmptyPoolThrows) { EXPECT_THROW(select_text_corr({}, kPhi, table_features({})), SelectionError); }

TEST(Ftc, TotalRejection) {
  auto pool = pool_of({{"a", 1}, {"b", 1}});
  std::mt19937_64 rng(1);
  FTCConfig cfg{2, 1, 0.5};
  const auto rec = ftc_sample(pool, kPhi, cfg, table_features({{"a", 0.1}, {"b", 0.2}}), rng);
  EXPECT_FALSE(rec.text.has_value());
  EXPECT_EQ(rec.chosen, -1);
}

TEST(Ftc, RankWindowBeforeRejection) {
  auto pool = pool_of({{"a", 1}, {"b", 2}, {"c", 3}, {"d", 1}, {"e", 2}, {"f", 3}});
  std::mt19937_64 rng(1);
  FTCConfig cfg{2, 1, -1.0};
  const auto rec = ftc_sample(pool, kPhi, cfg, table_features({{"a", .1}, {"b", .9}, {"c", .9}, {"d", .1}, {"e", .9}, {"f", .9}}), rng);
  EXPECT_EQ(rec.window, (std::vector<int>{0, 3}));
  EXPECT_EQ(rec.accepted, (std::vector<int>{0, 3}));
}

TEST(Ftc, SeededReplay) {
  auto pool = pool_of({{"a", 1}, {"b", 1}});
  const auto f = table_features({{"a", 0.5}, {"b", 0.5}});
  FTCConfig cfg{2, 1, 0.01};
  std::vector<int> first, second;
  for (auto* out : {&first, &second}) {
    std::mt19937_64 rng(42);
    for (int i = 0; i < 20; ++i) out->push_back(ftc_sample(pool, kPhi, cfg, f, rng).chosen);
  }
  EXPECT_EQ(first, second);
}

TEST(Ftc, NoAcceptedTextBelowThreshold) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::map<std::string, double> sims;
    std::vector<std::pair<std::string, int>> items;
    for (int i = 0; i < 9; ++i) {
      const std::string name = "t" + std::to_string(i);
      sims[name] = u(rng);
      items.push_back({name, i % 3 + 1});
    }
    FTCConfig cfg{3, 1 + trial % 3, u(rng)};
    const auto rec = ftc_sample(pool_of(items), kPhi, cfg, table_features(sims), rng);
    for (int i : rec.accepted) EXPECT_GE(rec.similarities[i], cfg.alpha);
    if (rec.text) { EXPECT_GE(sims.at(*rec.text), cfg.alpha - 1e-12); }
  }
}

TEST(Ftc, ConfigValidation) {
  EXPECT_THROW((FTCConfig{3, 0, 0.01}.validate()), ConfigurationError);
  EXPECT_THROW((FTCConfig{0, 1, 0.01}.validate()), ConfigurationError);
  EXPECT_THROW((FTCConfig{3, 1, 2.0}.validate()), ConfigurationError);
}

namespace {

corpus::Episode fixture_episode(bool endpoint_visible = true) {
  corpus::Episode ep;
  ep.species = "cat";
  corpus::Instance s;
  s.keypoints = {{4, 4, true}, {12, 8, true}};
  corpus::Instance q;
  q.keypoints = {{2, 2, true}, {10, 14, endpoint_visible}};
  ep.supports = {s};
  ep.query = q;
  ep.keypoint_ids = {0, 1};
  return ep;
}

FeatureContext fixture_context(long step) {
  FeatureContext ctx;
  ctx.step = step;
  ctx.bootstrap_steps = 10;
  const auto f = table_features({{"a", 0.6}, {"b", 0.3}, {"c", -0.4}});
  ctx.original = {[](Point) { return kPhi; }, f};
  ctx.adapted = {[](Point) { return kPhi; }, f};
  return ctx;
}

}  // namespace

TEST(AuxPair, InvisibleEndpointIsAbsent) {
  std::mt19937_64 rng(0);
  auto p = path("nose", "ear");
  EXPECT_FALSE(make_auxiliary_pair(fixture_episode(false), p, {}, {}, fixture_context(0), rng).has_value());
}

TEST(AuxPair, NoSupportIsAbsent) {
  std::mt19937_64 rng(0);
  auto ep = fixture_episode();
  ep.supports.clear();
  EXPECT_FALSE(make_auxiliary_pair(ep, path("nose", "ear"), {}, {}, fixture_context(0), rng).has_value());
}

TEST(AuxPair, FeatureSourceSwitchesAtBootstrap) {
  std::mt19937_64 rng(0);
  auto pool = pool_of({{"a", 1}, {"b", 2}, {"c", 3}});
  auto before = make_auxiliary_pair(fixture_episode(), path("nose", "ear"), {1, 1, 0.01}, pool, fixture_context(9), rng);
  auto after = make_auxiliary_pair(fixture_episode(), path("nose", "ear"), {1, 1, 0.01}, pool, fixture_context(10), rng);
  EXPECT_EQ(before->feature_source, "original");
  EXPECT_EQ(after->feature_source, "adapted");
}

TEST(AuxPair, PinnedFixture) {
  std::mt19937_64 rng(0);
  auto pool = pool_of({{"a", 1}, {"b", 2}, {"c", 3}});
  auto pair = make_auxiliary_pair(fixture_episode(), path("nose", "ear"), {1, 3, 0.01}, pool, fixture_context(0), rng);
  ASSERT_TRUE(pair.has_value());
  EXPECT_DOUBLE_EQ(pair->support_point.x, 8);
  EXPECT_DOUBLE_EQ(pair->support_point.y, 6);
  EXPECT_DOUBLE_EQ(pair->query_point.x, 6);
  EXPECT_DOUBLE_EQ(pair->query_point.y, 8);
  EXPECT_EQ(pair->ftc.window, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(pair->ftc.accepted, (std::vector<int>{0, 1}));
  ASSERT_TRUE(pair->text.has_value());
  EXPECT_TRUE(*pair->text == "a" || *pair->text == "b");
  const auto j = to_json(*pair);
  EXPECT_EQ(j.at("feature_source"), "original");
  EXPECT_EQ(j.at("visual_only"), false);
}

TEST(AuxPair, EmptyPoolGivesVisualOnlyPair) {
  std::mt19937_64 rng(0);
  auto pair = make_auxiliary_pair(fixture_episode(), path("nose", "ear"), {}, {}, fixture_context(0), rng);
  ASSERT_TRUE(pair.has_value());
  EXPECT_FALSE(pair->text.has_value());
}

TEST(AuxPair, GateRejectsBackground) {
  std::mt19937_64 rng(0);
  Mask m(16, 16);
  EXPECT_FALSE(make_auxiliary_pair(fixture_episode(), path("nose", "ear"), {}, {}, fixture_context(0), rng, &m).has_value());
}

TEST(Audit, WritesJsonLines) {
  const auto file = std::filesystem::temp_directory_path() / "openkd_audit_test.jsonl";
  std::filesystem::remove(file);
  {
    AuditLog log(file);
    std::mt19937_64 rng(0);
    auto pair = make_auxiliary_pair(fixture_episode(), path("nose", "ear"), {}, {}, fixture_context(0), rng);
    log.write(7, *pair);
  }
  std::ifstream in(file);
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("step"), 7);
  EXPECT_EQ(j.at("path"), "nose -> ear");
  EXPECT_TRUE(j.at("decision").is_null());
}

TEST(Paths, LoadedAgainstSchema) {
  corpus::KeypointSchema s;
  s.names = {"nose", "neck"};
  s.base_ids = {0, 1};
  const auto paths = paths_from_json({{"paths", {{{"from", "nose"}, {"to", "neck"}}}}}, s);
  ASSERT_EQ(paths.size(), 1u);
  EXPECT_EQ(paths[0].n2, 1);
  EXPECT_THROW(paths_from_json({{"paths", {{{"from", "nose"}, {"to", "tail"}}}}}, s), ConfigurationError);
}
