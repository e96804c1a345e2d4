#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fedreid/config.hpp"

using namespace fedreid;

TEST(Config, EmptyOptionalFieldsTakeDefaults) {
  const ExperimentConfig c = parse_config("seed = 7\n");
  EXPECT_EQ(c.fed.clients, 4);
  EXPECT_DOUBLE_EQ(c.fed.fraction, 1.0);
  EXPECT_DOUBLE_EQ(c.fed.beta, 0.0);
  EXPECT_EQ(c.fed.local_steps, 1);
  EXPECT_DOUBLE_EQ(c.fed.temperature, 3.0);
  EXPECT_EQ(c.fed.epochs, 100);
  EXPECT_EQ(c.fed.batch, 32u);
  EXPECT_EQ(c.fed.strategy, Strategy::FedReID);
  EXPECT_EQ(c.mode, Mode::Simulate);
  EXPECT_EQ(c.eval_every, 10);
  EXPECT_EQ(c.master_seed(), 7u);
}

TEST(Config, FractionOutOfRangeIsRangeError) {
  try {
    parse_config("seed = 1\nfraction = 1.5\n");
    FAIL() << "expected RangeError";
  } catch (const RangeError& e) {
    EXPECT_EQ(e.key(), "fraction");
  }
  EXPECT_THROW(parse_config("seed = 1\nfraction = 0\n"), RangeError);
  EXPECT_NO_THROW(parse_config("seed = 1\nfraction = 1\n"));
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    parse_config("seed = 1\nfraction_clients = 0.5\n");
    FAIL() << "expected UnknownKeyError";
  } catch (const UnknownKeyError& e) {
    EXPECT_EQ(e.key(), "fraction_clients");
    EXPECT_NE(std::string(e.what()).find("fraction_clients"), std::string::npos);
  }
}

TEST(Config, SeedIsMandatory) {
  try {
    parse_config("clients = 2\n");
    FAIL() << "expected MissingFieldError";
  } catch (const MissingFieldError& e) {
    EXPECT_EQ(e.key(), "seed");
  }
}

TEST(Config, OtherRangeChecksNameTheKey) {
  const std::vector<std::pair<std::string, std::string>> bad = {
      {"clients", "0"},        {"beta", "-0.1"},      {"local_steps", "0"}, {"temperature", "0"},
      {"batch", "0"},          {"keep_prob", "1.5"},  {"latent_dim", "99"}, {"momentum", "1"},
      {"augment_dropout", "2"}, {"timeout_s", "0"},
  };
  for (const auto& [k, v] : bad) {
    try {
      parse_config("seed = 1\n" + k + " = " + v + "\n");
      ADD_FAILURE() << k << " = " << v << " accepted";
    } catch (const RangeError& e) {
      EXPECT_EQ(e.key(), k);
    }
  }
}

TEST(Config, MalformedValuesAreRejected) {
  EXPECT_THROW(parse_config("seed = abc\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\nclients = 2.5\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\nstrategy = fedprox\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\nnesterov = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\njust text\n"), ConfigError);
}

TEST(Config, CommentsWhitespaceAndOverrides) {
  const auto c = parse_config("# header\n  seed=3   # trailing\n\nclients = 2\nstrategy = fedavg\n",
                              {{"clients", "6"}, {"beta", "0.005"}});
  EXPECT_EQ(c.fed.clients, 6);
  EXPECT_DOUBLE_EQ(c.fed.beta, 0.005);
  EXPECT_EQ(c.fed.strategy, Strategy::FedAVG);
}

TEST(Config, TextRoundTrip) {
  ExperimentConfig a = parse_config(
      "seed = 18446744073709551615\nclients = 3\nfraction = 0.3333333333333333\nbeta = 0.0005\nnoise = double\n"
      "embed_hidden = 12,7\nlr_embed = 0.07\nwall_clock = false\nmode = serve\nendpoint = localhost:9000\n");
  const ExperimentConfig b = parse_config(to_text(a));
  EXPECT_EQ(to_text(a), to_text(b));
  EXPECT_EQ(b.master_seed(), 18446744073709551615ull);
  EXPECT_EQ(b.fed.fraction, a.fed.fraction);
  EXPECT_EQ(b.fed.arch.embed_hidden, (std::vector<std::size_t>{12, 7}));
  EXPECT_EQ(b.fed.noise, NoisePlacement::Double);
  EXPECT_EQ(b.mode, Mode::Serve);
  EXPECT_FALSE(b.wall_clock);
}

TEST(Config, SimulateModeRequiresExistingPaths) {
  EXPECT_THROW(parse_config("seed = 1\nclients = 1\ndatasets = /nonexistent/a.fdds\n"), RangeError);
  // Serve mode does not read client data, so paths are not checked there.
  EXPECT_NO_THROW(parse_config("seed = 1\nclients = 1\nmode = serve\ndatasets = /nonexistent/a.fdds\n"));
  EXPECT_THROW(parse_config("seed = 1\nclients = 3\nmode = serve\ndatasets = a,b\n"), RangeError);
}

TEST(Config, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "fedreid_config_test.cfg";
  {
    std::ofstream(path) << "seed = 11\nlocal_steps = 5\n";
  }
  const auto c = load_config(path.string(), {{"out", "elsewhere"}});
  EXPECT_EQ(c.fed.local_steps, 5);
  EXPECT_EQ(c.out, "elsewhere");
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path.string()), InputError);
}

TEST(Config, SampleConfigMatchesBuiltInDefaults) {
  const auto sample = load_config(std::string(FEDREID_SOURCE_DIR) + "/configs/default.cfg");
  EXPECT_EQ(to_text(sample), to_text(parse_config("seed = 1\n")));
}
