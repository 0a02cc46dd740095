#include <gtest/gtest.h>

#include <fstream>

#include "antrec/config.hpp"
#include "test_util.hpp"

using namespace antrec;
using json = nlohmann::ordered_json;

TEST(Config, DefaultsAreTheReferenceSettings) {
  const EngineConfig c = config_from_json(json::object());
  EXPECT_EQ(c.irl.d, 256u);
  EXPECT_EQ(c.irl.n_h, 8u);
  EXPECT_EQ(c.irl.d_p, 64u);
  EXPECT_EQ(c.irl.omega, 50000.0);
  EXPECT_EQ(c.train.tau, 0.07);
  EXPECT_EQ(c.train.lambda, 1e-3);
  EXPECT_EQ(c.train.learning_rate, 1e-3);
  EXPECT_EQ(c.train.batch_size, 2048u);
  EXPECT_EQ(c.intent.max_seq_len, 50u);
  EXPECT_EQ(c.intent.n_layers, 2u);
  EXPECT_EQ(c.intent.n_heads, 2u);
  EXPECT_EQ(c.intent.d, 256u);
}

TEST(Config, SymbolNamesAreTopLevelKeys) {
  const json j = to_json(EngineConfig{});
  for (const char* k : {"d", "n_h", "d_p", "omega", "beta", "tau", "lambda", "max_seq_len", "batch_size", "learning_rate",
                        "dropout", "n_layers", "n_heads"})
    EXPECT_TRUE(j.contains(k)) << k;
}

TEST(Config, RoundTripsThroughJson) {
  json j;
  j["d"] = 32;
  j["n_h"] = 4;
  j["beta"] = 0.3;
  j["routing"] = "mean";
  j["candidates"] = "in_batch";
  j["adapt_beta"] = 0.2;
  j["k_values"] = {5, 20};
  j["synth"]["shared_structure"] = 0.0;
  j["synth"]["n_tasks"] = 3;
  const EngineConfig c = config_from_json(j);
  EXPECT_EQ(c.irl.d, 32u);
  EXPECT_EQ(c.intent.d, 32u);
  EXPECT_EQ(c.train.routing, RoutingMode::mean);
  EXPECT_EQ(c.train.candidates, CandidateMode::in_batch);
  EXPECT_EQ(*c.adapt_beta, 0.2);
  EXPECT_EQ(c.synth.shared_structure, 0.0);
  const EngineConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(config_from_json(json{{"embedding_dim", 64}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"synth", {{"n_task", 3}}}}), ConfigError);
}

TEST(Config, TypeAndRangeViolations) {
  EXPECT_THROW(config_from_json(json{{"d", "big"}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"d", -4}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"d_p", 7}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"beta", 1.0}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"tau", 0.0}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"d", 30}, {"n_heads", 4}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"routing", "argmax"}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"zero_text", 1}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"synth", {{"seq_len_min", 2}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json::array()), ConfigError);
}

TEST(Config, OverridesWinAndReachSynth) {
  EngineConfig c = config_from_json(json{{"seed", 3}});
  c = apply_override(c, "seed=9");
  c = apply_override(c, "routing=mean");
  c = apply_override(c, "synth.noise_scale=0.01");
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_EQ(c.train.routing, RoutingMode::mean);
  EXPECT_EQ(c.synth.noise_scale, 0.01);
  EXPECT_THROW(apply_override(c, "seed"), ConfigError);
  EXPECT_THROW(apply_override(c, "nonsense=1"), ConfigError);
}

TEST(Config, HashChangesWithAnyField) {
  const EngineConfig a;
  const EngineConfig b = apply_override(a, "lambda=0.01");
  const EngineConfig s = apply_override(a, "synth.seed=8");
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_NE(config_hash(a), config_hash(s));
  EXPECT_EQ(config_hash(a), config_hash(EngineConfig{}));
}

TEST(Config, LoadsFromFile) {
  antrec::testing::TempDir dir("config");
  const auto path = dir.path / "cfg.json";
  std::ofstream(path) << R"({"d": 16, "n_h": 2})";
  EXPECT_EQ(load_config(path).irl.d, 16u);
  std::ofstream(path) << "{not json";
  EXPECT_THROW(load_config(path), ConfigError);
  EXPECT_THROW(load_config(dir.path / "missing.json"), IoError);
}

TEST(Config, DerivedSpecsCarryFields) {
  const EngineConfig c = config_from_json(json{{"adapt_epochs", 7}, {"n_epochs", 3}, {"select_k", 5}, {"probe_nonlinear", true}});
  const AdaptSpec s = c.adapt_spec(AdaptMode::finetune, Variant::with_interaction_emb);
  EXPECT_EQ(s.train.n_epochs, 7u);
  EXPECT_EQ(s.select_k, 5u);
  EXPECT_EQ(s.mode, AdaptMode::finetune);
  EXPECT_TRUE(c.probe_options().nonlinear);
  EXPECT_EQ(c.load_options().max_seq_len, 50u);
}
