#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "rfa/cli.hpp"

using namespace rfa;
namespace fs = std::filesystem;

TEST_CASE("config parsing is strict and round-trips losslessly") {
  SUBCASE("defaults from an empty object") {
    ExperimentConfig c = ExperimentConfig::from_json("{}");
    CHECK(c.seed == 0);
    CHECK(c.dataset.kind == "blobs");
    CHECK(c.train.mode == "fb");
    CHECK(c.attack.epsilon == doctest::Approx(8.0 / 255.0));
  }

  SUBCASE("unknown keys are rejected at every level") {
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"sede": 3})"), ConfigError);
    CHECK_THROWS_AS(
        ExperimentConfig::from_json(R"({"dataset": {"n_per_clas": 10}})"),
        ConfigError);
    CHECK_THROWS_AS(
        ExperimentConfig::from_json(R"({"train": {"mode": "fb", "lr": 0.1}})"),
        ConfigError);
  }

  SUBCASE("invalid enum values are rejected") {
    CHECK_THROWS_AS(
        ExperimentConfig::from_json(R"({"attack": {"space": "pixel"}})"),
        ConfigError);
    CHECK_THROWS_AS(
        ExperimentConfig::from_json(R"({"train": {"mode": "adversarial"}})"),
        ConfigError);
  }

  SUBCASE("to_json round trip preserves every field and the hash") {
    ExperimentConfig c = ExperimentConfig::from_json(
        R"({"seed": 42, "dataset": {"num_classes": 7, "spread": 0.011},
            "attack": {"space": "feature", "eta": 0.25, "g": 2},
            "train": {"mode": "ub", "epochs": 3, "lambda_kl": 0.01},
            "metrics": {"g_list": [2, 4], "attacks": ["fgsm"]}})");
    ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
    CHECK(back.hash().size() == 16);
    CHECK(back.dataset.num_classes == 7);
    CHECK(back.attack.eta == 0.25);
    CHECK(back.train.lambda_kl == 0.01);
    CHECK(back.metrics.g_list == std::vector<std::size_t>{2, 4});
  }

  SUBCASE("different configs hash differently") {
    ExperimentConfig a = ExperimentConfig::from_json(R"({"seed": 1})");
    ExperimentConfig b = ExperimentConfig::from_json(R"({"seed": 2})");
    CHECK(a.hash() != b.hash());
  }
}

TEST_CASE("thread budget comes from RFA_THREADS") {
  unsetenv("RFA_THREADS");
  CHECK(thread_budget() == 1);
  setenv("RFA_THREADS", "4", 1);
  CHECK(thread_budget() == 4);
  setenv("RFA_THREADS", "zero", 1);
  CHECK_THROWS_AS(thread_budget(), ConfigError);
  setenv("RFA_THREADS", "0", 1);
  CHECK_THROWS_AS(thread_budget(), ConfigError);
  unsetenv("RFA_THREADS");
}

TEST_CASE("run_cli maps failures onto the exit-code contract") {
  ExperimentConfig c = ExperimentConfig::from_json("{}");
  c.output_dir = (fs::temp_directory_path() / "rfa_cli_test_out").string();

  SUBCASE("unknown subcommand is a usage error") {
    CHECK(run_cli("retrain", c) == 1);
  }
  SUBCASE("missing checkpoint is a config/data error") {
    c.backbone.checkpoint = "/nonexistent/backbone.rfa1";
    CHECK(run_cli("eval", c) == 1);
  }
  SUBCASE("a tiny pretrain run succeeds end to end") {
    c.dataset.n_per_class = 30;
    c.dataset.test_n_per_class = 10;
    c.dataset.num_classes = 3;
    c.dataset.dim = 8;
    c.dataset.spread = 0.05;
    c.train.mode = "standard";
    c.train.epochs = 2;
    c.train.batch_size = 32;
    CHECK(run_cli("pretrain", c) == 0);
    CHECK(fs::exists(fs::path(c.output_dir) / "backbone.rfa1"));
    CHECK(fs::exists(fs::path(c.output_dir) / "pretrain_curve.csv"));
    CHECK(fs::exists(fs::path(c.output_dir) / "pretrain_report.json"));
    std::ifstream in(fs::path(c.output_dir) / "pretrain_report.json");
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    CHECK(text.find(c.hash()) != std::string::npos);
  }
}
