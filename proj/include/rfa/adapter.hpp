#pragma once

#include <string>
#include <vector>

#include "rfa/backbone.hpp"
#include "rfa/tensor.hpp"

namespace rfa {

/// Small dense VAE: encoder fc1(relu) -> fc_mu / fc_logvar, decoder
/// fc1(relu) -> fc2 back to feature_dim (series-adapter compatible).
struct Vae {
  Tensor enc1_w, enc1_b;
  Tensor mu_w, mu_b;
  Tensor logvar_w, logvar_b;
  Tensor dec1_w, dec1_b;
  Tensor dec2_w, dec2_b;

  struct Encoded {
    Tensor mu;
    Tensor logvar;
  };
  Encoded encode(const Tensor& z) const;
  Tensor decode(const Tensor& latent) const;
  /// Deterministic pass: decode(mu).
  Tensor forward_deterministic(const Tensor& z) const;

  std::vector<std::pair<std::string, Tensor>> named_params(
      const std::string& prefix) const;
};

Vae make_vae(std::size_t feature_dim, std::size_t hidden_dim,
             std::size_t latent_dim, Rng& rng);

struct LossWeights {
  double lambda_cn = 0.4;
  double lambda_tp = 0.4;
  double lambda_b = 0.6;
  double tau = 0.5;       // triplet margin (dimension-normalized distances)
  double lambda_kl = 0.0; // optional VAE regularizer, off by default
};

/// The adapter: dual VAEs plus duplicated-tail classifiers. All parameters
/// here form theta_A; the backbone is never touched by them.
struct RfaModule {
  std::size_t d = 0;
  std::size_t feature_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t latent_dim = 0;
  Vae vae_r, vae_n;
  TailHead head_r, head_n;

  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
  std::size_t param_count() const;
};

RfaModule make_rfa(const SplitNet& backbone, std::size_t d,
                   std::size_t hidden_dim, std::size_t latent_dim, Rng& rng);

/// Inference plug-in: VAE_R only (RFA_i).
struct RfaInference {
  std::size_t d = 0;
  std::size_t feature_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t latent_dim = 0;
  Vae vae_r;

  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::size_t param_count() const;
};

RfaInference strip_to_inference(const RfaModule& rfa);

struct RfaForward {
  Tensor z_r, z_n;
  Tensor mu_r, logvar_r, mu_n, logvar_n;
};

/// Stochastic adapter pass over a feature batch (training); pass
/// deterministic=true to use mu directly (inference, eval).
RfaForward rfa_forward(const RfaModule& rfa, const Tensor& z_d, Rng& rng,
                       bool deterministic = false);

// ---- loss terms ----------------------------------------------------------------

/// CE(head_r(z_R+), y) + CE(head_r(z_R-), y).
Tensor loss_cr(const RfaModule& rfa, const RfaForward& plus,
               const RfaForward& minus, const std::vector<int>& y);

/// CE(head_n(z_N+), y) + CE(head_n(z_N-), y_bar).
Tensor loss_cn(const RfaModule& rfa, const RfaForward& plus,
               const RfaForward& minus, const std::vector<int>& y,
               const std::vector<int>& y_bar);

/// Erroneous labels from the backbone's adversarial logits; where the argmax
/// still equals y (failed attack) the runner-up class is used instead.
std::vector<int> erroneous_labels(const Tensor& adv_logits,
                                  const std::vector<int>& y);

/// Batch-mean hinge max{d2(a,p) - d2(a,n) + tau, 0}; distances are per-sample
/// squared Euclidean divided by the feature dimension.
Tensor triplet(const Tensor& a, const Tensor& p, const Tensor& n, double tau);

/// Tp(z_R+, z_R-, z_N+, tau) + Tp(z_R+, z_R-, z_N-, tau).
Tensor loss_tp(const RfaForward& plus, const RfaForward& minus, double tau);

/// Optional KL(q || N(0,1)) over both VAEs' encodings, batch mean.
Tensor loss_kl(const RfaForward& plus, const RfaForward& minus);

struct LossComponents {
  Tensor cr, cn, tp, kl;
};

/// L_FB = L_CR + lambda_cn * L_CN + lambda_tp * L_Tp (+ lambda_kl * KL).
Tensor loss_fb(const LossWeights& w, const LossComponents& c);

/// L_UB = L_CR + lambda_tp * L_Tp + lambda_b * L_B (+ lambda_kl * KL).
Tensor loss_ub(const LossWeights& w, const LossComponents& c,
               const Tensor& backbone_ce);

// ---- inference ------------------------------------------------------------------

struct DistillPrediction {
  Tensor y_hat;    // backbone softmax, untouched path
  Tensor y_hat_r;  // robust path: softmax(B_d+[VAE_R(z_d)])
};

DistillPrediction distill_infer(const RfaInference& rfa_i, const SplitNet& backbone,
                                const Tensor& x);

// ---- serialization ("RFA" / "RFAI" descriptors) -----------------------------------

void save_rfa(const RfaModule& rfa, const std::string& path);
RfaModule load_rfa(const std::string& path, const SplitNet& backbone);
void save_rfa_inference(const RfaInference& rfa_i, const std::string& path);
RfaInference load_rfa_inference(const std::string& path);

}  // namespace rfa
