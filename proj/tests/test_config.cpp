#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fedsynth/config.hpp"

using namespace fedsynth;
using namespace fedsynth::cli;
using nlohmann::json;

namespace {

std::string field_of(const json& j) {
  try {
    config_from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<accepted>";
}

}  // namespace

TEST(Config, DefaultsMatchTheReferenceSettings) {
  const RunConfig cfg = config_from_json(json::object());
  EXPECT_EQ(cfg.generator.encoding.levels, 10u);
  EXPECT_EQ(cfg.transfer.losses.lambda_texture, 5.0);
  EXPECT_EQ(cfg.transfer.losses.lambda_geometry, 0.2);
  EXPECT_EQ(cfg.transfer.losses.lambda_image, 1.0);
  EXPECT_EQ(cfg.roster.horizontal, 5u);
  EXPECT_EQ(cfg.roster.vertical, 3u);
  EXPECT_EQ(cfg.generator.output_resolution(), 16u);
  EXPECT_EQ(cfg.network.shared_fraction, 0.2);
  EXPECT_EQ(cfg.sweep.users_max, 20u);
  EXPECT_EQ(cfg.roster.thresholds.feature, 0.5);
  EXPECT_EQ(cfg.roster.thresholds.id, 0.5);
}

TEST(Config, UnknownKeysAreRejectedWithTheirPath) {
  EXPECT_EQ(field_of({{"foo", 1}}), "foo");
  EXPECT_EQ(field_of({{"ema", {{"decay", 0.9}, {"foo", 1}}}}), "ema.foo");
  EXPECT_EQ(field_of({{"generator", {{"camera", {{"fov", 1}}}}}}), "generator.camera.fov");
}

TEST(Config, RangeErrorsNameTheField) {
  EXPECT_EQ(field_of({{"ema", {{"decay", -0.1}}}}), "ema.decay");
  EXPECT_EQ(field_of({{"ema", {{"decay", 1.0}}}}), "ema.decay");
  EXPECT_EQ(field_of({{"schedule", {{"fraction", 0.0}}}}), "schedule.fraction");
  EXPECT_EQ(field_of({{"transfer", {{"lambda_texture", -1.0}}}}), "transfer.lambda_texture");
  EXPECT_EQ(field_of({{"schedule", {{"rounds", 0}}}}), "schedule.rounds");
  EXPECT_EQ(field_of({{"train", {{"batch", -2}}}}), "train.batch");
  EXPECT_EQ(field_of({{"network", {{"shared_fraction", 1.5}}}}), "network.shared_fraction");
  EXPECT_EQ(field_of({{"render", {{"snr_db", {30, "x"}}}}}), "render.snr_db[1]");
}

TEST(Config, TypeErrorsNameTheField) {
  EXPECT_EQ(field_of({{"seed", "x"}}), "seed");
  EXPECT_EQ(field_of({{"ema", 0.5}}), "ema");
  EXPECT_EQ(field_of({{"generator", {{"stratified", 1}}}}), "generator.stratified");
  EXPECT_EQ(field_of(json::array()), "<root>");
}

TEST(Config, CrossFieldChecks) {
  EXPECT_EQ(field_of({{"generator", {{"camera", {{"near", 3.0}, {"far", 2.0}}}}}}), "generator.camera.far");
  EXPECT_EQ(field_of({{"sweep", {{"users_min", 5}, {"users_max", 4}}}}), "sweep.users_max");
  EXPECT_EQ(field_of({{"transfer", {{"variant", "bogus"}}}}), "transfer.variant");
  EXPECT_EQ(field_of({{"transfer", {{"rounds", 4}}}, {"schedule", {{"freeze_round", 6}}}}), "schedule.freeze_round");
  EXPECT_EQ(field_of({{"transfer", {{"rounds", 4}}}, {"schedule", {{"freeze_round", 5}}}}), "<accepted>");
  EXPECT_EQ(field_of({{"roster", {{"horizontal", 0}, {"vertical", 0}}}}), "roster");
  EXPECT_EQ(field_of({{"flops", {{"trunk_widths", {8}}}}}), "flops.base_resolutions");
}

TEST(Config, RoundTripIsExact) {
  json j = {{"seed", 42},
            {"ema", {{"decay", 0.5}}},
            {"generator", {{"trunk_width", 32}, {"trunk_layers", 3}}},
            {"network", {{"synthesis_latency", 0.1}}},
            {"render", {{"snr_db", {25.0, 5.0}}}},
            {"roster",
             {{"clients",
               {{{"id", "a"}, {"features", {"rgb", "pose"}}, {"ids", {"s1"}}},
                {{"id", "b"}, {"features", {"rgb"}}, {"ids", {"s2", "s3"}}}}}}}};
  const RunConfig cfg = config_from_json(j);
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_EQ(cfg.federation.ema_decay, 0.5);
  ASSERT_EQ(cfg.roster.clients.size(), 2u);
  EXPECT_EQ(cfg.roster.clients[1].ids.size(), 2u);
  ASSERT_TRUE(cfg.network.synthesis_latency.has_value());

  const json once = to_json(cfg);
  const json twice = to_json(config_from_json(once));
  EXPECT_EQ(once, twice);
  EXPECT_EQ(once.dump(), twice.dump());
  EXPECT_EQ(once["generator"]["trunk_width"], 32);
  EXPECT_TRUE(to_json(RunConfig{})["network"]["synthesis_latency"].is_null());
}

TEST(Config, ClientEntriesAreValidated) {
  EXPECT_EQ(field_of({{"roster", {{"clients", {{{"id", "a"}, {"features", {"rgb"}}}}}}}}), "roster.clients[0].ids");
  EXPECT_EQ(field_of({{"roster", {{"clients", {{{"id", "a"}, {"features", {"rgb"}}, {"ids", {"x"}}, {"k", 1}}}}}}}),
            "roster.clients[0].k");
}

TEST(Config, LoadConfigReportsFileProblems) {
  const auto dir = std::filesystem::path(::testing::TempDir()) / "fedsynth_config_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "bad.json") << "{ not json";
    std::ofstream(dir / "ok.json") << R"({"seed": 7})";
  }
  EXPECT_EQ(load_config((dir / "ok.json").string()).seed, 7u);
  try {
    load_config((dir / "bad.json").string());
    FAIL() << "parse error not reported";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "--config");
  }
  EXPECT_THROW(load_config((dir / "missing.json").string()), ConfigError);
}
