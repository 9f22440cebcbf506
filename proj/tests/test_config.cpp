#include <gtest/gtest.h>

#include "mhattnsurv/config.hpp"

using namespace mhattnsurv;
using nlohmann::json;

TEST(ConfigReader, UnknownKeysListedWithPaths) {
  const auto j = json::parse(R"({"seed": 1, "bogus": 2, "train": {"base_lr": 0.1, "lr": 3}})");
  ConfigReader r(j);
  (void)r.get<std::uint64_t>("seed", 0);
  read_train_config(r.child("train"));
  try {
    r.finish();
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.keys(), (std::vector<std::string>{"bogus", "train.lr"}));
  }
}

TEST(ConfigReader, UnknownKeysReportedBeforeMissing) {
  const auto j = json::parse(R"({"typo": 1})");
  ConfigReader r(j);
  (void)r.require<std::string>("dataset");
  EXPECT_THROW(r.finish(), SchemaError);
  const auto k = json::parse(R"({})");
  ConfigReader s(k);
  (void)s.require<std::string>("dataset");
  try {
    s.finish();
    FAIL();
  } catch (const SchemaError&) {
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("dataset"), std::string::npos);
  }
}

TEST(ConfigReader, TypeErrors) {
  const auto j = json::parse(R"({"n": -3, "s": 5, "b": "yes", "x": "1.5", "o": 4})");
  ConfigReader r(j);
  EXPECT_THROW(r.get<std::size_t>("n", 0), ConfigError);
  EXPECT_THROW(r.get<std::string>("s", ""), ConfigError);
  EXPECT_THROW(r.get<bool>("b", false), ConfigError);
  EXPECT_THROW(r.get<double>("x", 0.0), ConfigError);
  EXPECT_THROW(r.child("o"), ConfigError);
  EXPECT_THROW(ConfigReader(json::array()), ConfigError);
}

TEST(ConfigReader, NullMeansDefault) {
  const auto j = json::parse(R"({"heads": null})");
  ConfigReader r(j);
  EXPECT_EQ(r.get<std::size_t>("heads", 8), 8u);
  EXPECT_NO_THROW(r.finish());
}

TEST(TrainConfigJson, Roundtrip) {
  TrainConfig c;
  c.base_lr = 3e-3;
  c.heads = 4;
  c.precision = Precision::f32;
  c.feature_dropout_rate = 0.2;
  const auto j = to_json(c);
  ConfigReader r(j);
  const auto back = read_train_config(r);
  EXPECT_NO_THROW(r.finish());
  EXPECT_EQ(to_json(back), j);
}

TEST(TrainConfigJson, ValuesValidated) {
  const auto bad_rate = json::parse(R"({"feature_dropout_rate": 1.0})");
  ConfigReader a(bad_rate);
  EXPECT_THROW(read_train_config(a), ConfigError);
  const auto bad_precision = json::parse(R"({"precision": "f16"})");
  ConfigReader b(bad_precision);
  EXPECT_THROW(read_train_config(b), ConfigError);
  const auto zero = json::parse(R"({"max_epochs": 0})");
  ConfigReader c(zero);
  EXPECT_THROW(read_train_config(c), ConfigError);
}

TEST(SyntheticConfigJson, Roundtrip) {
  SyntheticConfig c;
  c.patients = 40;
  c.beta = 0.5;
  const auto j = to_json(c);
  ConfigReader r(j);
  EXPECT_EQ(to_json(read_synthetic_config(r)), j);
  EXPECT_NO_THROW(r.finish());
}

TEST(GridJson, RoundtripAndValidation) {
  GridSpec g;
  g.dropout_rates = {0.1};
  g.head_counts = {2, 4};
  const auto j = to_json(g);
  ConfigReader r(j);
  EXPECT_EQ(to_json(read_grid(r)), j);
  const auto bad = json::parse(R"({"dropout_rates": [0.5, 1.5]})");
  ConfigReader s(bad);
  EXPECT_THROW(read_grid(s), ConfigError);
}
