#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rfa/adapter.hpp"
#include "rfa/attacks.hpp"
#include "rfa/backbone.hpp"
#include "rfa/dataset.hpp"

namespace rfa {

/// Bias-corrected Adam over an explicit parameter list.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the gradients currently on the parameters,
  /// then clears them.
  void step();
  void set_lr(double lr) { lr_ = lr; }
  std::uint64_t t() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

enum class TrainMode { standard, fb, ub, at_pgd_baseline };

struct TrainConfig {
  TrainMode mode = TrainMode::fb;
  AttackSpec attack;
  std::size_t g = 3;
  std::size_t d = 4;
  std::size_t epochs = 10;
  BatchPlan plan;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  std::uint64_t seed = 0;
  /// Learning rate applied to theta_B in UB joint batches (0 collapses UB
  /// to FB behavior on the backbone).
  std::optional<double> ub_backbone_lr;
  /// Optional held-out set for per-epoch test metrics.
  const Dataset* test_data = nullptr;
  /// Compute robust test error every epoch (costs one attack per test batch).
  bool track_robust_err = true;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_std_err = 0.0;
  double test_std_err = 0.0;
  double test_robust_err = 0.0;
  double loss_total = 0.0;
  double loss_cr = 0.0;
  double loss_cn = 0.0;
  double loss_tp = 0.0;
  double loss_b = 0.0;
  double wall_seconds = 0.0;
};

struct RunRecord {
  std::string mode;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<EpochRecord> epochs;

  void to_csv(const std::string& path) const;
  std::string to_json() const;
  /// Field-wise equality of all deterministic metrics (wall time excluded).
  bool same_metrics(const RunRecord& other) const;
};

/// Plain supervised training of the backbone (produces the pre-trained
/// model FB/UB start from).
RunRecord train_standard(SplitNet& net, const Dataset& train,
                         const TrainConfig& config);

/// RFA-FB: adapter-only updates against feature- (or input-) space attacks;
/// theta_B is bitwise unchanged.
RunRecord train_fb(const SplitNet& backbone, RfaModule& rfa,
                   const Dataset& train, const TrainConfig& config);

/// RFA-UB: strict per-batch 1:1 alternation between the FB objective over
/// theta_A and the joint objective over theta_A + theta_B.
RunRecord train_ub(SplitNet& backbone, RfaModule& rfa, const Dataset& train,
                   const TrainConfig& config);

/// AT-PGD baseline: full-model CE minimization on adversarial inputs only.
RunRecord train_at_baseline(SplitNet& backbone, const Dataset& train,
                            const TrainConfig& config);

struct RoReport {
  bool ro_detected = false;
  std::size_t best_epoch = 0;  // 1-based epoch of the smoothed minimum
  double final_gap = 0.0;
};

/// Robust-overfitting test: 5-epoch moving average of test_robust_err;
/// detected when the final smoothed value exceeds the minimum by > 0.02.
RoReport detect_ro(const RunRecord& record);

/// Fraction of misclassified samples (standard error) on a dataset.
double standard_error(const SplitNet& net, const Dataset& data,
                      std::size_t batch_size = 256);

/// FNV-1a hash of a canonical config description, hex-encoded.
std::string config_hash(const std::string& canonical_text);

}  // namespace rfa
