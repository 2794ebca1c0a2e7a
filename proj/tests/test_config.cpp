#include <gtest/gtest.h>

#include <sstream>

#include "capsar/config.hpp"

using namespace capsar;

TEST(RunConfig, DefaultsFollowTrainingSettings) {
  const RunConfig c;
  EXPECT_EQ(c.batch_size, 64u);
  EXPECT_EQ(c.epochs, 80u);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.model.m_plus, 1.0);
  EXPECT_EQ(c.model.m_minus, 0.1);
  EXPECT_EQ(c.model.lambda, 0.003);
  EXPECT_EQ(c.model.dropout, 0.5);
  EXPECT_EQ(c.model.routing_iters, 3u);
  EXPECT_EQ(c.threshold, 0.5);
  EXPECT_EQ(c.top_k, 5u);
}

TEST(RunConfig, ParsesCommentsAndResolvesPaths) {
  std::istringstream in(
      "# smoke run\n"
      "train = data/a.tsv\n"
      "dev=/abs/b.xml   # trailing comment\n"
      "\n"
      "epochs = 12\n"
      "learning_rate = 0.01\n"
      "gru_hidden = 7\n"
      "alpha = 2.5\n");
  const auto c = parse_run_config(in, "/cfg");
  EXPECT_EQ(c.train_path, "/cfg/data/a.tsv");
  EXPECT_EQ(c.dev_path, "/abs/b.xml");
  EXPECT_EQ(c.epochs, 12u);
  EXPECT_EQ(c.learning_rate, 0.01);
  EXPECT_EQ(c.model.gru_hidden, 7u);
  EXPECT_EQ(c.model.alpha, 2.5);
}

TEST(RunConfig, UnknownKeyIsNamed) {
  std::istringstream in("epochs = 3\nlearnig_rate = 0.1\n");
  try {
    parse_run_config(in);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learnig_rate"), std::string::npos);
  }
}

TEST(RunConfig, BadValuesRejected) {
  RunConfig c;
  EXPECT_THROW(c.set("epochs", "ten"), ConfigError);
  EXPECT_THROW(c.set("epochs", "-3"), ConfigError);
  EXPECT_THROW(c.set("alpha", "1.5x"), ConfigError);
  EXPECT_THROW(c.set("format", "json"), ConfigError);
  std::istringstream no_equals("epochs 3\n");
  EXPECT_THROW(parse_run_config(no_equals), ConfigError);
}

TEST(RunConfig, WriteParseRoundTrip) {
  RunConfig c;
  c.model = ModelConfig::toy();
  c.model.lambda = 0.0125;
  c.seed = 99;
  c.threads = 3;
  c.train_path = "/x/train.tsv";
  c.output_dir = "/tmp/out";
  std::ostringstream out;
  write_run_config(c, out);
  std::istringstream in(out.str());
  const auto back = parse_run_config(in);
  EXPECT_EQ(back.model, c.model);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.threads, 3u);
  EXPECT_EQ(back.train_path, c.train_path);
  EXPECT_EQ(back.output_dir, c.output_dir);
  for (const auto& key : RunConfig::keys()) EXPECT_NE(out.str().find(key + " ="), std::string::npos) << key;
}
