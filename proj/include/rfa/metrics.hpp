#pragma once

#include <vector>

#include "rfa/adapter.hpp"
#include "rfa/attacks.hpp"
#include "rfa/backbone.hpp"
#include "rfa/dataset.hpp"

namespace rfa {

/// First-order stationary condition value for the inner maximization:
/// c = eps * ||grad L(x_k)||_1 - <x_k - x0, grad L(x_k)>. Lower is better
/// converged; c = 0 at a fully converged iterate.
double fosc(const SplitNet& net, const Tensor& x0, const Tensor& xk,
            const std::vector<int>& y, double epsilon);

/// Maximum information coefficient in [0,1] between two scalar sequences.
/// Equal-frequency binning on both axes, grid sizes a*b <= n^0.6. Constant
/// input on either side gives 0.
double mic(const std::vector<double>& xs, const std::vector<double>& ys);

/// Mean MIC over matched feature dimensions of two [batch, dim] tensors,
/// capped at max_pairs seeded-sampled dimensions.
double mic_features(const Tensor& zr, const Tensor& zn, std::size_t max_pairs,
                    std::uint64_t seed = 0);

/// One-sided Mann-Whitney U test p-value for "xs stochastically dominates ys"
/// (normal approximation with tie correction).
double mann_whitney_p_greater(const std::vector<double>& xs,
                              const std::vector<double>& ys);

struct KdeResult {
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0.0;
};

/// Gaussian KDE with Silverman bandwidth 1.06 * sigma * n^(-1/5), evaluated
/// on grid_points spanning the sample range extended by 4 bandwidths.
KdeResult kde(const std::vector<double>& samples, std::size_t grid_points);

struct RocCurve {
  std::vector<double> thresholds;
  std::vector<double> tpr;
  std::vector<double> fpr;
  double auc = 0.0;
  double tnr_at_95_tpr = 0.0;
};

/// Threshold sweep over scores (label 1 = positive); AUC by trapezoid,
/// TNR@95TPR at the smallest threshold achieving TPR >= 0.95.
RocCurve roc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Single-hidden-layer MLP over concatenated (y_hat, y_hat_R) plus sigmoid.
/// An affine scorer cannot work here: on two probability simplexes it can only
/// add per-class weights, and "argmax(y_hat) != argmax(y_hat_R)" is an XOR-style
/// predicate (measured affine ceiling ~0.69 AUC where the hidden layer reaches
/// ~0.99 on the same features). One relu layer of width 2C suffices.
struct Detector {
  Tensor w1;  // [2 * num_classes, 2 * num_classes]
  Tensor b1;  // [2 * num_classes]
  Tensor w2;  // [1, 2 * num_classes]
  Tensor b2;  // [1]
  double threshold = 0.5;

  std::vector<double> score(const Tensor& features) const;
};

/// Trains the detector on (y_hat, y_hat_R) pairs from clean (label 0) and
/// attacked (label 1) samples; balanced classes, Adam, fixed epochs.
/// Threshold picked on a held-out split to maximize balanced accuracy.
Detector train_detector(const SplitNet& backbone, const RfaInference& rfa_i,
                        const Dataset& data, const AttackSpec& attack,
                        std::uint64_t seed);

/// Detector input features for a batch: concat(y_hat, y_hat_R).
Tensor detector_features(const SplitNet& backbone, const RfaInference& rfa_i,
                         const Tensor& x);

/// Gray-box robust accuracy: attacks are generated on the backbone alone;
/// evaluation goes through the adapter (y_hat_R) when rfa_i is non-null.
double robust_accuracy(const SplitNet& backbone, const RfaInference* rfa_i,
                       const AttackSpec& attack, const Dataset& testset,
                       std::uint64_t seed);

struct CorrelationTable {
  double cos_yn_minus_yd_minus = 0.0;  // cos(y_N-, y_D-)
  double cos_yr_minus_yd_plus = 0.0;   // cos(y_R-, y_D+)
  double cos_yr_minus_yn_minus = 0.0;  // cos(y_R-, y_N-)
};

/// Mean cosine similarity between probability vectors over the test set,
/// using the full trained adapter (head_r / head_n retained).
CorrelationTable prediction_correlations(const SplitNet& backbone,
                                         const RfaModule& rfa,
                                         const Dataset& data,
                                         const AttackSpec& attack,
                                         std::uint64_t seed);

}  // namespace rfa
