#pragma once

#include <string>

#include "rfa/adapter.hpp"
#include "rfa/attacks.hpp"
#include "rfa/dataset.hpp"
#include "rfa/trainer.hpp"

namespace rfa {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Full experiment description. Every field has a default; parsing rejects
/// unknown keys so a typo never silently falls back to a default.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  struct DatasetSection {
    std::string kind = "blobs";  // "blobs" | "idx"
    // blobs
    std::size_t n_per_class = 200;
    int num_classes = 3;
    std::size_t dim = 16;
    double spread = 0.06;
    std::size_t test_n_per_class = 50;
    std::size_t train_subset = 0;  // 0 = all
    // idx
    std::string images, labels;
    std::string test_images, test_labels;
  } dataset;

  struct BackboneSection {
    std::string arch = "refnet_d";  // "refnet_d" | "refnet_c"
    std::string checkpoint;         // load path (train/eval/prop1/...)
  } backbone;

  struct AttackSection {
    std::string family = "pgd";   // "fgsm" | "pgd"
    std::string space = "input";  // "input" | "feature"
    std::string norm = "l_inf";   // "l_inf" | "l_2"
    double epsilon = 8.0 / 255.0;
    int k = 10;
    double eta = 0.0;
    std::size_t g = 3;
    bool rand_init = true;
  } attack;

  struct AdapterSection {
    std::size_t d = 4;
    std::size_t hidden_dim = 64;
    std::size_t latent_dim = 32;
    std::string checkpoint;  // load path (eval/detect)
  } adapter;

  struct TrainSection {
    std::string mode = "fb";  // "standard" | "fb" | "ub" | "at_pgd_baseline"
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double lambda_cn = 0.4;
    double lambda_tp = 0.4;
    double lambda_b = 0.6;
    double tau = 0.5;
    double lambda_kl = 0.0;
    double ub_backbone_lr = 0.001;
    bool track_robust_err = true;
  } train;

  struct MetricsSection {
    std::vector<std::size_t> g_list = {1, 3};
    std::size_t samples = 200;
    std::size_t kde_grid = 256;
    std::vector<std::string> attacks = {"pgd_linf", "pgd_l2", "fgsm"};
    std::size_t mic_max_pairs = 16;
  } metrics;

  /// Parse from JSON text; every key optional, unknown keys rejected.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);
  /// Serialize with every field present (round-trips losslessly).
  std::string to_json() const;
  /// Hash of the canonical serialization; stamped into every output.
  std::string hash() const;

  AttackSpec attack_spec() const;
  TrainConfig train_config() const;
};

/// Worker-count bound from RFA_THREADS (default 1); throws ConfigError on
/// a malformed value.
int thread_budget();

// Each command returns 0 on success and throws on failure:
// ConfigError for usage/config problems (exit 1), anything else is a
// runtime/numerical error (exit 2).
int cmd_pretrain(const ExperimentConfig& config);
int cmd_train(const ExperimentConfig& config);
int cmd_eval(const ExperimentConfig& config);
int cmd_prop1(const ExperimentConfig& config);
int cmd_detect(const ExperimentConfig& config);
int cmd_calibrate(const ExperimentConfig& config);

/// Dispatch by subcommand name; maps exceptions to the exit-code contract.
int run_cli(const std::string& command, const ExperimentConfig& config);

}  // namespace rfa
