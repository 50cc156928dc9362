#include "rfa/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace rfa {

using nlohmann::json;

// ---- Adam ----------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, double lr, double beta1,
                             double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].size(), 0.0);
    v_[i].assign(params_[i].size(), 0.0);
  }
}

void AdamOptimizer::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor g = params_[i].grad();
    auto p = params_[i].mutable_data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      double mhat = m_[i][j] / bc1;
      double vhat = v_[i][j] / bc2;
      p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    params_[i].zero_grad();
  }
}

// ---- RunRecord -----------------------------------------------------------------

void RunRecord::to_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write CSV: " + path);
  out << "epoch,train_std_err,test_std_err,test_robust_err,loss_total,"
         "loss_cr,loss_cn,loss_tp,loss_b,wall_seconds\n";
  out.precision(17);
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.train_std_err << ',' << e.test_std_err << ','
        << e.test_robust_err << ',' << e.loss_total << ',' << e.loss_cr << ','
        << e.loss_cn << ',' << e.loss_tp << ',' << e.loss_b << ','
        << e.wall_seconds << '\n';
  }
}

std::string RunRecord::to_json() const {
  json j;
  j["mode"] = mode;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["epochs"] = json::array();
  for (const auto& e : epochs) {
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"train_std_err", e.train_std_err},
                           {"test_std_err", e.test_std_err},
                           {"test_robust_err", e.test_robust_err},
                           {"loss_total", e.loss_total},
                           {"loss_cr", e.loss_cr},
                           {"loss_cn", e.loss_cn},
                           {"loss_tp", e.loss_tp},
                           {"loss_b", e.loss_b},
                           {"wall_seconds", e.wall_seconds}});
  }
  return j.dump(2);
}

bool RunRecord::same_metrics(const RunRecord& other) const {
  if (mode != other.mode || seed != other.seed || epochs.size() != other.epochs.size())
    return false;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = other.epochs[i];
    if (a.epoch != b.epoch || a.train_std_err != b.train_std_err ||
        a.test_std_err != b.test_std_err ||
        a.test_robust_err != b.test_robust_err || a.loss_total != b.loss_total ||
        a.loss_cr != b.loss_cr || a.loss_cn != b.loss_cn ||
        a.loss_tp != b.loss_tp || a.loss_b != b.loss_b) {
      return false;
    }
  }
  return true;
}

std::string config_hash(const std::string& canonical_text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical_text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- shared helpers --------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double batch_error(const Tensor& logits, const std::vector<int>& labels) {
  std::size_t n = labels.size();
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (argmax_row(logits, i) != labels[i]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(n);
}

std::vector<Batch> epoch_batches(const Dataset& data, const TrainConfig& cfg,
                                 std::size_t epoch) {
  BatchPlan plan = cfg.plan;
  plan.shuffle_seed = Rng(cfg.seed).split("shuffle").split(epoch).seed();
  return batches(data, plan);
}

/// Robust test error under the training attack. For input-space attacks the
/// prediction path is the backbone (optionally through the adapter); for
/// feature-space attacks the perturbed feature is propagated to d and through
/// VAE_R when an adapter is given.
double robust_error(const SplitNet& net, const RfaModule* rfa,
                    const Dataset& data, const AttackSpec& attack,
                    std::size_t d, std::uint64_t seed) {
  const std::size_t L = net.num_splits();
  BatchPlan plan{256, 0, false};
  plan.batch_size = std::min<std::size_t>(256, data.size());
  std::size_t wrong = 0, total = 0;
  std::size_t batch_idx = 0;
  Rng base(seed);
  for (const Batch& b : batches(data, plan)) {
    Rng rng = base.split(batch_idx++);
    Tensor logits;
    if (attack.space == AttackSpace::input) {
      Tensor x_adv = pgd_input(net, b.images, b.labels, attack.epsilon, attack.k,
                               attack.norm, attack.rand_init, rng);
      Tensor z_d = net.forward_slice(x_adv, 0, rfa ? d : L).detach();
      if (rfa) {
        Tensor z_r = rfa->vae_r.forward_deterministic(z_d).detach();
        logits = net.forward_slice(z_r, d, L).detach();
      } else {
        logits = z_d;
      }
    } else {
      Tensor z_g = net.forward_slice(b.images, 0, attack.g).detach();
      Tensor z_adv = pgd_feature(net, z_g, b.labels, attack);
      if (rfa) {
        Tensor z_d = net.forward_slice(z_adv, attack.g, d).detach();
        Tensor z_r = rfa->vae_r.forward_deterministic(z_d).detach();
        logits = net.forward_slice(z_r, d, L).detach();
      } else {
        logits = net.forward_slice(z_adv, attack.g, L).detach();
      }
    }
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      if (argmax_row(logits, i) != b.labels[i]) ++wrong;
    }
    total += b.labels.size();
  }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

double adapter_clean_error(const SplitNet& net, const RfaModule& rfa,
                           const Dataset& data) {
  const std::size_t L = net.num_splits();
  BatchPlan plan{std::min<std::size_t>(256, data.size()), 0, false};
  std::size_t wrong = 0, total = 0;
  for (const Batch& b : batches(data, plan)) {
    Tensor z_d = net.forward_slice(b.images, 0, rfa.d).detach();
    Tensor z_r = rfa.vae_r.forward_deterministic(z_d).detach();
    Tensor logits = net.forward_slice(z_r, rfa.d, L).detach();
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      if (argmax_row(logits, i) != b.labels[i]) ++wrong;
    }
    total += b.labels.size();
  }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

struct PairedFeatures {
  Tensor z_d_plus;   // clean features at d
  Tensor z_d_minus;  // adversarial features at d
  std::vector<int> y_bar;
};

/// Computes the paired clean/adversarial feature batch for the RFA losses.
/// When with_graph is set, the clean path keeps gradients into theta_B
/// (UB joint phase); the adversarial feature path from g keeps them too.
PairedFeatures paired_features(const SplitNet& net, const Batch& batch,
                               const TrainConfig& cfg, Rng& rng,
                               bool with_graph) {
  const std::size_t L = net.num_splits();
  PairedFeatures out;
  Tensor z_minus_src;  // input to the [g or 0, d) slice on the adversarial path
  std::size_t from = 0;
  if (cfg.attack.space == AttackSpace::feature) {
    AttackSpec spec = cfg.attack;
    spec.g = cfg.g;
    Tensor z_g = net.forward_slice(batch.images, 0, cfg.g).detach();
    z_minus_src = pgd_feature(net, z_g, batch.labels, spec);
    from = cfg.g;
    out.z_d_plus = with_graph
                       ? net.forward_slice(batch.images, 0, cfg.d)
                       : net.forward_slice(z_g, cfg.g, cfg.d).detach();
  } else {
    Rng attack_rng = rng.split("input_attack");
    z_minus_src = pgd_input(net, batch.images, batch.labels, cfg.attack.epsilon,
                            cfg.attack.k, cfg.attack.norm, cfg.attack.rand_init,
                            attack_rng);
    from = 0;
    out.z_d_plus = with_graph ? net.forward_slice(batch.images, 0, cfg.d)
                              : net.forward_slice(batch.images, 0, cfg.d).detach();
  }
  out.z_d_minus = with_graph
                      ? net.forward_slice(z_minus_src, from, cfg.d)
                      : net.forward_slice(z_minus_src, from, cfg.d).detach();
  Tensor adv_logits = net.forward_slice(out.z_d_minus.detach(), cfg.d, L).detach();
  out.y_bar = erroneous_labels(adv_logits, batch.labels);
  return out;
}

void validate_split_config(const TrainConfig& cfg, std::size_t num_splits) {
  if (cfg.d == 0 || cfg.d >= num_splits) {
    throw ShapeError("TrainConfig: requires 0 < d < L");
  }
  if (cfg.attack.space == AttackSpace::feature && cfg.g >= cfg.d) {
    throw ShapeError("TrainConfig: feature-space inner loop requires g < d");
  }
}

}  // namespace

// ---- standard training -------------------------------------------------------------

RunRecord train_standard(SplitNet& net, const Dataset& train,
                         const TrainConfig& config) {
  RunRecord record;
  record.mode = "standard";
  record.seed = config.seed;
  AdamOptimizer adam(net.params(), config.learning_rate, config.beta1,
                     config.beta2, config.adam_eps);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto start = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    double err_acc = 0.0, loss_acc = 0.0;
    std::size_t nb = 0;
    for (const Batch& b : epoch_batches(train, config, epoch)) {
      Tensor logits = net.forward(b.images);
      Tensor loss = cross_entropy_with_logits(logits, b.labels);
      err_acc += batch_error(logits.detach(), b.labels);
      loss_acc += loss.item();
      zero_grads(net.params());
      backward(loss);
      adam.step();
      ++nb;
    }
    rec.train_std_err = err_acc / static_cast<double>(nb);
    rec.loss_total = rec.loss_b = loss_acc / static_cast<double>(nb);
    if (config.test_data) {
      rec.test_std_err = standard_error(net, *config.test_data);
      if (config.track_robust_err) {
        rec.test_robust_err = robust_error(net, nullptr, *config.test_data,
                                           config.attack, config.d, config.seed);
      }
    }
    rec.wall_seconds = seconds_since(start);
    record.epochs.push_back(rec);
  }
  return record;
}

// ---- RFA-FB --------------------------------------------------------------------

RunRecord train_fb(const SplitNet& backbone, RfaModule& rfa,
                   const Dataset& train, const TrainConfig& config) {
  validate_split_config(config, backbone.num_splits());
  RunRecord record;
  record.mode = "fb";
  record.seed = config.seed;
  AdamOptimizer adam(rfa.params(), config.learning_rate, config.beta1,
                     config.beta2, config.adam_eps);
  Rng run_rng = Rng(config.seed).split("fb");
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto start = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t nb = 0;
    Rng epoch_rng = run_rng.split(epoch);
    for (const Batch& b : epoch_batches(train, config, epoch)) {
      Rng batch_rng = epoch_rng.split(nb);
      PairedFeatures feats =
          paired_features(backbone, b, config, batch_rng, /*with_graph=*/false);
      Rng plus_rng = batch_rng.split("plus");
      Rng minus_rng = batch_rng.split("minus");
      RfaForward plus = rfa_forward(rfa, feats.z_d_plus, plus_rng);
      RfaForward minus = rfa_forward(rfa, feats.z_d_minus, minus_rng);
      LossComponents comp;
      comp.cr = loss_cr(rfa, plus, minus, b.labels);
      comp.cn = loss_cn(rfa, plus, minus, b.labels, feats.y_bar);
      comp.tp = loss_tp(plus, minus, config.weights.tau);
      if (config.weights.lambda_kl > 0.0) comp.kl = loss_kl(plus, minus);
      Tensor total = loss_fb(config.weights, comp);
      rec.loss_cr += comp.cr.item();
      rec.loss_cn += comp.cn.item();
      rec.loss_tp += comp.tp.item();
      rec.loss_total += total.item();
      zero_grads(rfa.params());
      backward(total);
      adam.step();
      ++nb;
    }
    rec.loss_cr /= static_cast<double>(nb);
    rec.loss_cn /= static_cast<double>(nb);
    rec.loss_tp /= static_cast<double>(nb);
    rec.loss_total /= static_cast<double>(nb);
    rec.train_std_err = adapter_clean_error(backbone, rfa, train);
    if (config.test_data) {
      rec.test_std_err = adapter_clean_error(backbone, rfa, *config.test_data);
      if (config.track_robust_err) {
        AttackSpec eval = config.attack;
        eval.g = config.g;
        rec.test_robust_err = robust_error(backbone, &rfa, *config.test_data,
                                           eval, config.d, config.seed);
      }
    }
    rec.wall_seconds = seconds_since(start);
    record.epochs.push_back(rec);
  }
  return record;
}

// ---- RFA-UB --------------------------------------------------------------------

RunRecord train_ub(SplitNet& backbone, RfaModule& rfa, const Dataset& train,
                   const TrainConfig& config) {
  validate_split_config(config, backbone.num_splits());
  RunRecord record;
  record.mode = "ub";
  record.seed = config.seed;
  AdamOptimizer adam_a(rfa.params(), config.learning_rate, config.beta1,
                       config.beta2, config.adam_eps);
  AdamOptimizer adam_b(backbone.params(),
                       config.ub_backbone_lr.value_or(config.learning_rate),
                       config.beta1, config.beta2, config.adam_eps);
  Rng run_rng = Rng(config.seed).split("ub");
  std::size_t global_batch = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto start = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t nb = 0;
    Rng epoch_rng = run_rng.split(epoch);
    for (const Batch& b : epoch_batches(train, config, epoch)) {
      Rng batch_rng = epoch_rng.split(nb);
      const bool joint = (global_batch % 2 == 1);  // strict 1:1 alternation
      Rng plus_rng = batch_rng.split("plus");
      Rng minus_rng = batch_rng.split("minus");
      if (!joint) {
        // FB phase: theta_A only, backbone frozen.
        PairedFeatures feats =
            paired_features(backbone, b, config, batch_rng, false);
        RfaForward plus = rfa_forward(rfa, feats.z_d_plus, plus_rng);
        RfaForward minus = rfa_forward(rfa, feats.z_d_minus, minus_rng);
        LossComponents comp;
        comp.cr = loss_cr(rfa, plus, minus, b.labels);
        comp.cn = loss_cn(rfa, plus, minus, b.labels, feats.y_bar);
        comp.tp = loss_tp(plus, minus, config.weights.tau);
        if (config.weights.lambda_kl > 0.0) comp.kl = loss_kl(plus, minus);
        Tensor total = loss_fb(config.weights, comp);
        rec.loss_cr += comp.cr.item();
        rec.loss_cn += comp.cn.item();
        rec.loss_tp += comp.tp.item();
        rec.loss_total += total.item();
        zero_grads(rfa.params());
        zero_grads(backbone.params());
        backward(total);
        adam_a.step();
      } else {
        // Joint phase: theta_A plus theta_B under L_UB.
        PairedFeatures feats =
            paired_features(backbone, b, config, batch_rng, true);
        RfaForward plus = rfa_forward(rfa, feats.z_d_plus, plus_rng);
        RfaForward minus = rfa_forward(rfa, feats.z_d_minus, minus_rng);
        LossComponents comp;
        comp.cr = loss_cr(rfa, plus, minus, b.labels);
        comp.tp = loss_tp(plus, minus, config.weights.tau);
        if (config.weights.lambda_kl > 0.0) comp.kl = loss_kl(plus, minus);
        Tensor backbone_ce =
            cross_entropy_with_logits(backbone.forward(b.images), b.labels);
        Tensor total = loss_ub(config.weights, comp, backbone_ce);
        rec.loss_cr += comp.cr.item();
        rec.loss_tp += comp.tp.item();
        rec.loss_b += backbone_ce.item();
        rec.loss_total += total.item();
        zero_grads(rfa.params());
        zero_grads(backbone.params());
        backward(total);
        adam_a.step();
        adam_b.step();
      }
      ++nb;
      ++global_batch;
    }
    rec.loss_cr /= static_cast<double>(nb);
    rec.loss_cn /= static_cast<double>(nb);
    rec.loss_tp /= static_cast<double>(nb);
    rec.loss_b /= static_cast<double>(nb);
    rec.loss_total /= static_cast<double>(nb);
    rec.train_std_err = adapter_clean_error(backbone, rfa, train);
    if (config.test_data) {
      rec.test_std_err = adapter_clean_error(backbone, rfa, *config.test_data);
      if (config.track_robust_err) {
        AttackSpec eval = config.attack;
        eval.g = config.g;
        rec.test_robust_err = robust_error(backbone, &rfa, *config.test_data,
                                           eval, config.d, config.seed);
      }
    }
    rec.wall_seconds = seconds_since(start);
    record.epochs.push_back(rec);
  }
  return record;
}

// ---- AT-PGD baseline -------------------------------------------------------------

RunRecord train_at_baseline(SplitNet& backbone, const Dataset& train,
                            const TrainConfig& config) {
  if (config.attack.space != AttackSpace::input) {
    throw ShapeError("train_at_baseline: requires an input-space attack");
  }
  RunRecord record;
  record.mode = "at_pgd_baseline";
  record.seed = config.seed;
  AdamOptimizer adam(backbone.params(), config.learning_rate, config.beta1,
                     config.beta2, config.adam_eps);
  Rng run_rng = Rng(config.seed).split("at");
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto start = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    double err_acc = 0.0, loss_acc = 0.0;
    std::size_t nb = 0;
    Rng epoch_rng = run_rng.split(epoch);
    for (const Batch& b : epoch_batches(train, config, epoch)) {
      Rng batch_rng = epoch_rng.split(nb);
      Tensor x_adv =
          pgd_input(backbone, b.images, b.labels, config.attack.epsilon,
                    config.attack.k, config.attack.norm, config.attack.rand_init,
                    batch_rng);
      Tensor logits = backbone.forward(x_adv);
      Tensor loss = cross_entropy_with_logits(logits, b.labels);
      err_acc += batch_error(logits.detach(), b.labels);
      loss_acc += loss.item();
      zero_grads(backbone.params());
      backward(loss);
      adam.step();
      ++nb;
    }
    rec.train_std_err = err_acc / static_cast<double>(nb);
    rec.loss_total = rec.loss_b = loss_acc / static_cast<double>(nb);
    if (config.test_data) {
      rec.test_std_err = standard_error(backbone, *config.test_data);
      if (config.track_robust_err) {
        rec.test_robust_err =
            robust_error(backbone, nullptr, *config.test_data, config.attack,
                         config.d, config.seed);
      }
    }
    rec.wall_seconds = seconds_since(start);
    record.epochs.push_back(rec);
  }
  return record;
}

// ---- robust-overfitting detection ---------------------------------------------------

RoReport detect_ro(const RunRecord& record) {
  if (record.epochs.size() < 10) {
    throw ShapeError("detect_ro: needs at least 10 epochs");
  }
  std::vector<double> smoothed(record.epochs.size());
  for (std::size_t i = 0; i < record.epochs.size(); ++i) {
    std::size_t lo = i >= 4 ? i - 4 : 0;
    double acc = 0.0;
    for (std::size_t j = lo; j <= i; ++j) acc += record.epochs[j].test_robust_err;
    smoothed[i] = acc / static_cast<double>(i - lo + 1);
  }
  RoReport report;
  std::size_t best = 0;
  for (std::size_t i = 1; i < smoothed.size(); ++i) {
    if (smoothed[i] < smoothed[best]) best = i;
  }
  report.best_epoch = record.epochs[best].epoch;
  report.final_gap = smoothed.back() - smoothed[best];
  report.ro_detected = report.final_gap > 0.02;
  return report;
}

double standard_error(const SplitNet& net, const Dataset& data,
                      std::size_t batch_size) {
  BatchPlan plan{std::min(batch_size, data.size()), 0, false};
  std::size_t wrong = 0, total = 0;
  for (const Batch& b : batches(data, plan)) {
    Tensor logits = net.forward(b.images).detach();
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      if (argmax_row(logits, i) != b.labels[i]) ++wrong;
    }
    total += b.labels.size();
  }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

}  // namespace rfa
