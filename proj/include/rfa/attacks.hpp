#pragma once

#include <cstdint>
#include <vector>

#include "rfa/backbone.hpp"
#include "rfa/dataset.hpp"
#include "rfa/tensor.hpp"

namespace rfa {

enum class AttackFamily { fgsm, pgd };
enum class AttackSpace { input, feature };
enum class AttackNorm { l_inf, l_2 };

struct AttackSpec {
  AttackFamily family = AttackFamily::pgd;
  AttackSpace space = AttackSpace::input;
  AttackNorm norm = AttackNorm::l_inf;
  double epsilon = 8.0 / 255.0;  // input-space budget
  int k = 10;                    // step count
  double eta = 0.0;              // feature-space scaling factor
  std::size_t g = 0;             // target split index for feature space
  bool rand_init = true;         // input-space PGD only

  void validate(std::size_t num_splits) const;
};

/// Single signed-gradient step: clamp(x + eps * sign(grad_x CE), 0, 1).
Tensor fgsm(const SplitNet& net, const Tensor& x, const std::vector<int>& y,
            double epsilon);

/// k-step PGD in input space. l_inf: step 2.5*eps/k with per-step projection
/// onto the eps ball and [0,1]. l_2: normalized gradient steps with radius
/// projection. Random init inside the ball when rand_init.
Tensor pgd_input(const SplitNet& net, const Tensor& x, const std::vector<int>& y,
                 double epsilon, int k, AttackNorm norm, bool rand_init,
                 Rng& rng);

/// Feature-space PGD at split g: each step adds
/// alpha_g * sign(grad), alpha_g = eta * mean(|z_g|) over the batch, iterate
/// clamped into the l_inf ball of radius k*alpha_g. No value-range clamp.
/// Starts at z_g itself (no random init).
Tensor pgd_feature(const SplitNet& net, const Tensor& z_g,
                   const std::vector<int>& y, const AttackSpec& spec);

/// Scalar batch statistic mean(|z|).
double mean_abs(const Tensor& z);

struct EtaCalibration {
  double eta = 0.0;
  double mu_abs = 0.0;         // mean |z_g| over clean features
  double max_delta_inf = 0.0;  // max over samples of ||delta_g||_inf
  std::size_t batches_used = 0;
  std::size_t samples_used = 0;
};

/// Budget calibration: run input-space PGD(eps, k) over the batches, measure
/// the induced feature displacement at split g, and back out eta_g such that
/// k * eta_g * mu(|z_g|) equals the largest observed displacement.
EtaCalibration calibrate_eta(const SplitNet& net, const std::vector<Batch>& data,
                             std::size_t g, double epsilon, int k, Rng& rng);

struct DeltaLSample {
  std::size_t g = 0;
  double value = 0.0;  // >= 0
};

/// Per-sample |CE at the feature-PGD endpoint - CE at the clean feature|.
std::vector<DeltaLSample> delta_loss_batch(const SplitNet& net, std::size_t g,
                                           double eta, int k, const Batch& batch);

}  // namespace rfa
