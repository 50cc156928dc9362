#include "rfa/metrics.hpp"

#include "rfa/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rfa {

// ---- FOSC ------------------------------------------------------------------------

double fosc(const SplitNet& net, const Tensor& x0, const Tensor& xk,
            const std::vector<int>& y, double epsilon) {
  GradFreeze freeze(net.params());
  Tensor leaf = xk.clone(true);
  Tensor loss = cross_entropy_with_logits(
      reshape(net.forward(leaf),
              {leaf.dim(0), static_cast<std::size_t>(net.num_classes)}),
      y);
  backward(loss);
  Tensor grad = leaf.grad();
  double l1 = 0.0, inner = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    l1 += std::fabs(grad[i]);
    inner += (xk[i] - x0[i]) * grad[i];
  }
  return epsilon * l1 - inner;
}

// ---- MIC -------------------------------------------------------------------------

namespace {

/// Equal-frequency bin index per element: rank-partition into `bins` parts.
std::vector<int> equal_frequency_bins(const std::vector<double>& xs, int bins) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<int> bin(n);
  for (std::size_t r = 0; r < n; ++r) {
    bin[order[r]] = static_cast<int>(r * static_cast<std::size_t>(bins) / n);
  }
  return bin;
}

double binned_mutual_information(const std::vector<int>& bx,
                                 const std::vector<int>& by, int a, int b) {
  const std::size_t n = bx.size();
  std::vector<double> joint(static_cast<std::size_t>(a) * b, 0.0);
  std::vector<double> px(a, 0.0), py(b, 0.0);
  double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    joint[bx[i] * b + by[i]] += inv;
    px[bx[i]] += inv;
    py[by[i]] += inv;
  }
  double mi = 0.0;
  for (int i = 0; i < a; ++i) {
    for (int j = 0; j < b; ++j) {
      double p = joint[i * b + j];
      if (p > 0.0) mi += p * std::log2(p / (px[i] * py[j]));
    }
  }
  return mi;
}

bool is_constant(const std::vector<double>& xs) {
  for (double v : xs) {
    if (v != xs.front()) return false;
  }
  return true;
}

}  // namespace

double mic(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("mic: length mismatch");
  const std::size_t n = xs.size();
  if (n < 25) throw ShapeError("mic: needs at least 25 samples");
  if (is_constant(xs) || is_constant(ys)) return 0.0;

  const double budget = std::pow(static_cast<double>(n), 0.6);
  double best = 0.0;
  for (int a = 2; static_cast<double>(a) * 2.0 <= budget; ++a) {
    std::vector<int> bx = equal_frequency_bins(xs, a);
    int b_max = static_cast<int>(budget / a);
    for (int b = 2; b <= b_max; ++b) {
      std::vector<int> by = equal_frequency_bins(ys, b);
      double mi = binned_mutual_information(bx, by, a, b);
      double norm = std::log2(static_cast<double>(std::min(a, b)));
      best = std::max(best, mi / norm);
    }
  }
  return std::min(std::max(best, 0.0), 1.0);
}

double mic_features(const Tensor& zr, const Tensor& zn, std::size_t max_pairs,
                    std::uint64_t seed) {
  if (zr.rank() != 2 || zr.shape() != zn.shape()) {
    throw ShapeError("mic_features: expects matched [batch, dim] tensors");
  }
  const std::size_t n = zr.dim(0), dim = zr.dim(1);
  std::vector<std::size_t> dims(dim);
  std::iota(dims.begin(), dims.end(), 0);
  if (dim > max_pairs) {
    Rng rng(seed);
    dims = rng.permutation(dim);
    dims.resize(max_pairs);
    std::sort(dims.begin(), dims.end());
  }
  double acc = 0.0;
  std::vector<double> xs(n), ys(n);
  for (std::size_t j : dims) {
    for (std::size_t i = 0; i < n; ++i) {
      xs[i] = zr[i * dim + j];
      ys[i] = zn[i * dim + j];
    }
    acc += mic(xs, ys);
  }
  return acc / static_cast<double>(dims.size());
}

// ---- Mann-Whitney ------------------------------------------------------------------

double mann_whitney_p_greater(const std::vector<double>& xs,
                              const std::vector<double>& ys) {
  const std::size_t n1 = xs.size(), n2 = ys.size();
  if (n1 == 0 || n2 == 0) throw ShapeError("mann_whitney: empty sample");
  std::vector<std::pair<double, int>> pooled;
  pooled.reserve(n1 + n2);
  for (double v : xs) pooled.emplace_back(v, 0);
  for (double v : ys) pooled.emplace_back(v, 1);
  std::sort(pooled.begin(), pooled.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  // Midranks with tie bookkeeping.
  double rank_sum_x = 0.0;
  double tie_correction = 0.0;
  std::size_t i = 0;
  const std::size_t n = pooled.size();
  while (i < n) {
    std::size_t j = i;
    while (j < n && pooled[j].first == pooled[i].first) ++j;
    double midrank = 0.5 * static_cast<double>(i + 1 + j);
    double t = static_cast<double>(j - i);
    tie_correction += t * t * t - t;
    for (std::size_t k = i; k < j; ++k) {
      if (pooled[k].second == 0) rank_sum_x += midrank;
    }
    i = j;
  }
  double u = rank_sum_x - static_cast<double>(n1) * (n1 + 1) / 2.0;
  double mu = static_cast<double>(n1) * n2 / 2.0;
  double nn = static_cast<double>(n);
  double sigma2 = (static_cast<double>(n1) * n2 / 12.0) *
                  ((nn + 1.0) - tie_correction / (nn * (nn - 1.0)));
  if (sigma2 <= 0.0) return 1.0;
  double z = (u - mu - 0.5) / std::sqrt(sigma2);  // continuity correction
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

// ---- KDE -------------------------------------------------------------------------

KdeResult kde(const std::vector<double>& samples, std::size_t grid_points) {
  const std::size_t n = samples.size();
  if (n < 2) throw ShapeError("kde: needs at least 2 samples");
  double mean = std::accumulate(samples.begin(), samples.end(), 0.0) /
                static_cast<double>(n);
  double var = 0.0;
  for (double s : samples) var += (s - mean) * (s - mean);
  var /= static_cast<double>(n - 1);
  if (var == 0.0) throw ShapeError("kde: degenerate sample (zero variance)");
  double sigma = std::sqrt(var);
  double bw = 1.06 * sigma * std::pow(static_cast<double>(n), -0.2);

  auto [mn_it, mx_it] = std::minmax_element(samples.begin(), samples.end());
  double lo = *mn_it - 4.0 * bw;
  double hi = *mx_it + 4.0 * bw;

  KdeResult out;
  out.bandwidth = bw;
  out.grid.resize(grid_points);
  out.density.resize(grid_points);
  const double norm = 1.0 / (static_cast<double>(n) * bw * std::sqrt(2.0 * M_PI));
  for (std::size_t i = 0; i < grid_points; ++i) {
    double x = lo + (hi - lo) * static_cast<double>(i) /
                        static_cast<double>(grid_points - 1);
    out.grid[i] = x;
    double acc = 0.0;
    for (double s : samples) {
      double u = (x - s) / bw;
      acc += std::exp(-0.5 * u * u);
    }
    out.density[i] = acc * norm;
  }
  return out;
}

// ---- ROC -------------------------------------------------------------------------

RocCurve roc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc: length mismatch");
  std::size_t p = 0, neg = 0;
  for (int l : labels) (l != 0 ? p : neg)++;
  if (p == 0 || neg == 0) throw ShapeError("roc: need both classes present");

  std::vector<double> uniq = scores;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

  RocCurve curve;
  // From the strictest threshold (above max: nothing positive) downwards.
  curve.thresholds.push_back(uniq.back() + 1.0);
  curve.tpr.push_back(0.0);
  curve.fpr.push_back(0.0);
  for (auto it = uniq.rbegin(); it != uniq.rend(); ++it) {
    double thr = *it;  // predict positive when score >= thr
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= thr) (labels[i] != 0 ? tp : fp)++;
    }
    curve.thresholds.push_back(thr);
    curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(p));
    curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(neg));
  }

  for (std::size_t i = 1; i < curve.tpr.size(); ++i) {
    curve.auc += 0.5 * (curve.tpr[i] + curve.tpr[i - 1]) *
                 (curve.fpr[i] - curve.fpr[i - 1]);
  }

  // Smallest threshold (last in sweep order the first time) with TPR >= 0.95.
  curve.tnr_at_95_tpr = 0.0;
  for (std::size_t i = 0; i < curve.tpr.size(); ++i) {
    if (curve.tpr[i] >= 0.95) {
      curve.tnr_at_95_tpr = 1.0 - curve.fpr[i];
      break;
    }
  }
  return curve;
}

// ---- detector ----------------------------------------------------------------------

std::vector<double> Detector::score(const Tensor& features) const {
  Tensor logits = affine(relu(affine(features, w1, b1)), w2, b2);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 1.0 / (1.0 + std::exp(-logits[i]));
  }
  return out;
}

Tensor detector_features(const SplitNet& backbone, const RfaInference& rfa_i,
                         const Tensor& x) {
  DistillPrediction pred = distill_infer(rfa_i, backbone, x);
  return concat_cols(pred.y_hat, pred.y_hat_r);
}

namespace {

/// Mean binary cross-entropy of the detector's sigmoid output against labels.
Tensor detector_loss(const Detector& det, const Tensor& features,
                     const std::vector<int>& labels) {
  // Express BCE through the 2-class softmax CE: logits [z, 0] per sample.
  Tensor z = affine(relu(affine(features, det.w1, det.b1)), det.w2, det.b2);  // [n, 1]
  Tensor zeros = Tensor::zeros({z.dim(0), 1});
  Tensor two_logit = concat_cols(z, zeros);
  std::vector<int> ce_labels(labels.size());
  // class 0 of [z, 0] corresponds to label 1 (adversarial)
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ce_labels[i] = labels[i] != 0 ? 0 : 1;
  }
  return cross_entropy_with_logits(two_logit, ce_labels);
}

}  // namespace

Detector train_detector(const SplitNet& backbone, const RfaInference& rfa_i,
                        const Dataset& data, const AttackSpec& attack,
                        std::uint64_t seed) {
  const std::size_t n = data.size();
  if (n < 8) throw ShapeError("train_detector: degenerate data");
  Rng rng(seed);

  // Balanced scores: every sample appears once clean and once attacked.
  Rng attack_rng = rng.split("attack");
  Tensor x_adv;
  if (attack.space != AttackSpace::input) {
    throw ShapeError("train_detector: detection uses input-space attacks");
  }
  if (attack.family == AttackFamily::fgsm) {
    x_adv = fgsm(backbone, data.images, data.labels, attack.epsilon);
  } else {
    x_adv = pgd_input(backbone, data.images, data.labels, attack.epsilon,
                      attack.k, attack.norm, attack.rand_init, attack_rng);
  }
  Tensor feat_clean = detector_features(backbone, rfa_i, data.images).detach();
  Tensor feat_adv = detector_features(backbone, rfa_i, x_adv).detach();

  const std::size_t width = feat_clean.dim(1);
  std::vector<double> all(2 * n * width);
  std::vector<int> labels(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(feat_clean.data().data() + i * width, width,
                all.data() + (2 * i) * width);
    labels[2 * i] = 0;
    std::copy_n(feat_adv.data().data() + i * width, width,
                all.data() + (2 * i + 1) * width);
    labels[2 * i + 1] = 1;
  }
  Tensor features({2 * n, width}, std::move(all));

  // Held-out split for threshold selection.
  Rng split_rng = rng.split("holdout");
  std::vector<std::size_t> perm = split_rng.permutation(2 * n);
  std::size_t n_train = (2 * n * 4) / 5;

  Detector det;
  Rng init = rng.split("init");
  {
    const std::size_t hidden = width;
    double bound = std::sqrt(6.0 / static_cast<double>(width));
    std::vector<double> w1(hidden * width);
    for (double& v : w1) v = init.uniform(-bound, bound);
    det.w1 = Tensor({hidden, width}, std::move(w1), true);
    det.b1 = Tensor({hidden}, std::vector<double>(hidden, 0.0), true);
    std::vector<double> w2(hidden);
    double bound2 = std::sqrt(6.0 / static_cast<double>(hidden));
    for (double& v : w2) v = init.uniform(-bound2, bound2);
    det.w2 = Tensor({1, hidden}, std::move(w2), true);
    det.b2 = Tensor({1}, {0.0}, true);
  }

  std::vector<Tensor> params = {det.w1, det.b1, det.w2, det.b2};
  AdamOptimizer adam(params, 0.01);
  const std::size_t epochs = 400;
  // Gather the training slice once; full-batch steps.
  std::vector<double> train_data(n_train * width);
  std::vector<int> train_labels(n_train);
  for (std::size_t i = 0; i < n_train; ++i) {
    std::copy_n(features.data().data() + perm[i] * width, width,
                train_data.data() + i * width);
    train_labels[i] = labels[perm[i]];
  }
  Tensor train_features({n_train, width}, std::move(train_data));
  for (std::size_t e = 0; e < epochs; ++e) {
    Tensor loss = detector_loss(det, train_features, train_labels);
    zero_grads(params);
    backward(loss);
    adam.step();
  }

  // Threshold: maximize balanced accuracy on the held-out slice.
  std::size_t n_hold = 2 * n - n_train;
  std::vector<double> hold_data(n_hold * width);
  std::vector<int> hold_labels(n_hold);
  for (std::size_t i = 0; i < n_hold; ++i) {
    std::copy_n(features.data().data() + perm[n_train + i] * width, width,
                hold_data.data() + i * width);
    hold_labels[i] = labels[perm[n_train + i]];
  }
  std::vector<double> hold_scores =
      det.score(Tensor({n_hold, width}, std::move(hold_data)));
  std::vector<double> candidates = hold_scores;
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()),
                   candidates.end());
  double best_bal = -1.0;
  std::size_t pos = 0, negc = 0;
  for (int l : hold_labels) (l != 0 ? pos : negc)++;
  for (double thr : candidates) {
    std::size_t tp = 0, tn = 0;
    for (std::size_t i = 0; i < n_hold; ++i) {
      bool flag = hold_scores[i] >= thr;
      if (flag && hold_labels[i] != 0) ++tp;
      if (!flag && hold_labels[i] == 0) ++tn;
    }
    double bal = 0.5 * (static_cast<double>(tp) / std::max<std::size_t>(pos, 1) +
                        static_cast<double>(tn) / std::max<std::size_t>(negc, 1));
    if (bal > best_bal) {
      best_bal = bal;
      det.threshold = thr;
    }
  }
  return det;
}

// ---- robust accuracy ----------------------------------------------------------------

double robust_accuracy(const SplitNet& backbone, const RfaInference* rfa_i,
                       const AttackSpec& attack, const Dataset& testset,
                       std::uint64_t seed) {
  BatchPlan plan{std::min<std::size_t>(256, testset.size()), 0, false};
  std::size_t correct = 0, total = 0;
  std::size_t batch_idx = 0;
  Rng base(seed);
  for (const Batch& b : batches(testset, plan)) {
    Rng rng = base.split(batch_idx++);
    Tensor x_adv;
    if (attack.space != AttackSpace::input) {
      throw ShapeError("robust_accuracy: expects an input-space attack");
    }
    if (attack.family == AttackFamily::fgsm) {
      x_adv = fgsm(backbone, b.images, b.labels, attack.epsilon);
    } else {
      x_adv = pgd_input(backbone, b.images, b.labels, attack.epsilon, attack.k,
                        attack.norm, attack.rand_init, rng);
    }
    Tensor probs;
    if (rfa_i) {
      probs = distill_infer(*rfa_i, backbone, x_adv).y_hat_r;
    } else {
      probs = predict(backbone, x_adv).probs;
    }
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      if (argmax_row(probs, i) == b.labels[i]) ++correct;
    }
    total += b.labels.size();
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---- prediction correlations ----------------------------------------------------------

namespace {

double mean_row_cosine(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.dim(0), c = a.dim(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dot += a[i * c + j] * b[i * c + j];
      na += a[i * c + j] * a[i * c + j];
      nb += b[i * c + j] * b[i * c + j];
    }
    acc += dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
  }
  return acc / static_cast<double>(n);
}

}  // namespace

CorrelationTable prediction_correlations(const SplitNet& backbone,
                                         const RfaModule& rfa,
                                         const Dataset& data,
                                         const AttackSpec& attack,
                                         std::uint64_t seed) {
  const std::size_t L = backbone.num_splits();
  BatchPlan plan{std::min<std::size_t>(256, data.size()), 0, false};
  CorrelationTable table;
  double w_sum = 0.0;
  std::size_t batch_idx = 0;
  Rng base(seed);
  Rng det_rng(0);
  for (const Batch& b : batches(data, plan)) {
    Rng rng = base.split(batch_idx++);
    Tensor z_d_minus;
    if (attack.space == AttackSpace::input) {
      Tensor x_adv = pgd_input(backbone, b.images, b.labels, attack.epsilon,
                               attack.k, attack.norm, attack.rand_init, rng);
      z_d_minus = backbone.forward_slice(x_adv, 0, rfa.d).detach();
    } else {
      Tensor z_g = backbone.forward_slice(b.images, 0, attack.g).detach();
      Tensor z_adv = pgd_feature(backbone, z_g, b.labels, attack);
      z_d_minus = backbone.forward_slice(z_adv, attack.g, rfa.d).detach();
    }
    Tensor z_d_plus = backbone.forward_slice(b.images, 0, rfa.d).detach();

    RfaForward minus = rfa_forward(rfa, z_d_minus, det_rng, true);
    Tensor y_d_plus = softmax(backbone.forward_slice(z_d_plus, rfa.d, L).detach());
    Tensor y_d_minus = softmax(backbone.forward_slice(z_d_minus, rfa.d, L).detach());
    Tensor y_r_minus = softmax(rfa.head_r.forward(minus.z_r).detach());
    Tensor y_n_minus = softmax(rfa.head_n.forward(minus.z_n).detach());

    double w = static_cast<double>(b.labels.size());
    table.cos_yn_minus_yd_minus += w * mean_row_cosine(y_n_minus, y_d_minus);
    table.cos_yr_minus_yd_plus += w * mean_row_cosine(y_r_minus, y_d_plus);
    table.cos_yr_minus_yn_minus += w * mean_row_cosine(y_r_minus, y_n_minus);
    w_sum += w;
  }
  table.cos_yn_minus_yd_minus /= w_sum;
  table.cos_yr_minus_yd_plus /= w_sum;
  table.cos_yr_minus_yn_minus /= w_sum;
  return table;
}

}  // namespace rfa
