#include "rfa/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace rfa {

void AttackSpec::validate(std::size_t num_splits) const {
  if (k < 1) throw ShapeError("AttackSpec: k must be >= 1");
  if (space == AttackSpace::input) {
    if (epsilon < 0.0) throw ShapeError("AttackSpec: epsilon must be >= 0");
  } else {
    if (eta < 0.0) throw ShapeError("AttackSpec: eta must be >= 0");
    if (g == 0 || g >= num_splits) {
      throw ShapeError("AttackSpec: feature space requires 0 < g < L");
    }
  }
}

double mean_abs(const Tensor& z) {
  if (z.size() == 0) throw ShapeError("mean_abs: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) acc += std::fabs(z[i]);
  return acc / static_cast<double>(z.size());
}

namespace {

/// Gradient of the mean CE over the full net w.r.t. the input batch.
Tensor input_gradient(const SplitNet& net, const Tensor& x,
                      const std::vector<int>& y) {
  GradFreeze freeze(net.params());
  Tensor leaf = x.clone(true);
  Tensor loss = cross_entropy_with_logits(
      reshape(net.forward(leaf), {leaf.dim(0),
                                  static_cast<std::size_t>(net.num_classes)}),
      y);
  backward(loss);
  return leaf.grad();
}

}  // namespace

Tensor fgsm(const SplitNet& net, const Tensor& x, const std::vector<int>& y,
            double epsilon) {
  Tensor grad = input_gradient(net, x, y);
  Tensor adv = x.clone(false);
  auto out = adv.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = grad[i] > 0.0 ? 1.0 : grad[i] < 0.0 ? -1.0 : 0.0;
    out[i] = std::min(std::max(out[i] + epsilon * s, 0.0), 1.0);
  }
  return adv;
}

Tensor pgd_input(const SplitNet& net, const Tensor& x, const std::vector<int>& y,
                 double epsilon, int k, AttackNorm norm, bool rand_init,
                 Rng& rng) {
  if (k < 1) throw ShapeError("pgd_input: k must be >= 1");
  const std::size_t n = x.dim(0);
  const std::size_t per = x.size() / n;
  const double step = 2.5 * epsilon / static_cast<double>(k);

  Tensor adv = x.clone(false);
  auto av = adv.mutable_data();
  auto xv = x.data();

  auto project = [&]() {
    if (norm == AttackNorm::l_inf) {
      for (std::size_t i = 0; i < av.size(); ++i) {
        av[i] = std::min(std::max(av[i], xv[i] - epsilon), xv[i] + epsilon);
        av[i] = std::min(std::max(av[i], 0.0), 1.0);
      }
    } else {
      for (std::size_t s = 0; s < n; ++s) {
        double norm2 = 0.0;
        for (std::size_t j = 0; j < per; ++j) {
          double d = av[s * per + j] - xv[s * per + j];
          norm2 += d * d;
        }
        norm2 = std::sqrt(norm2);
        if (norm2 > epsilon && norm2 > 0.0) {
          double scale = epsilon / norm2;
          for (std::size_t j = 0; j < per; ++j) {
            av[s * per + j] =
                xv[s * per + j] + (av[s * per + j] - xv[s * per + j]) * scale;
          }
        }
      }
      for (double& v : av) v = std::min(std::max(v, 0.0), 1.0);
    }
  };

  if (rand_init) {
    Rng init = rng.split("pgd_init");
    if (norm == AttackNorm::l_inf) {
      for (double& v : av) v += init.uniform(-epsilon, epsilon);
    } else {
      for (double& v : av) v += init.uniform(-epsilon, epsilon);
    }
    project();
  }

  for (int it = 0; it < k; ++it) {
    Tensor grad = input_gradient(net, adv, y);
    if (norm == AttackNorm::l_inf) {
      for (std::size_t i = 0; i < av.size(); ++i) {
        double s = grad[i] > 0.0 ? 1.0 : grad[i] < 0.0 ? -1.0 : 0.0;
        av[i] += step * s;
      }
    } else {
      for (std::size_t s = 0; s < n; ++s) {
        double norm2 = 0.0;
        for (std::size_t j = 0; j < per; ++j) {
          double g = grad[s * per + j];
          norm2 += g * g;
        }
        norm2 = std::sqrt(norm2);
        if (norm2 == 0.0) continue;
        for (std::size_t j = 0; j < per; ++j) {
          av[s * per + j] += step * grad[s * per + j] / norm2;
        }
      }
    }
    project();
  }
  return adv;
}

Tensor pgd_feature(const SplitNet& net, const Tensor& z_g,
                   const std::vector<int>& y, const AttackSpec& spec) {
  spec.validate(net.num_splits());
  if (z_g.dim(0) == 0) throw ShapeError("pgd_feature: empty batch");
  const double alpha = spec.eta * mean_abs(z_g);
  const double radius = static_cast<double>(spec.k) * alpha;
  const std::size_t L = net.num_splits();

  Tensor adv = z_g.clone(false);
  auto av = adv.mutable_data();
  auto zv = z_g.data();
  for (int it = 0; it < spec.k; ++it) {
    GradFreeze freeze(net.params());
    Tensor leaf = adv.clone(true);
    Tensor loss = cross_entropy_with_logits(
        reshape(net.forward_slice(leaf, spec.g, L),
                {leaf.dim(0), static_cast<std::size_t>(net.num_classes)}),
        y);
    backward(loss);
    Tensor grad = leaf.grad();
    for (std::size_t i = 0; i < av.size(); ++i) {
      double s = grad[i] > 0.0 ? 1.0 : grad[i] < 0.0 ? -1.0 : 0.0;
      av[i] += alpha * s;
      // project into the l_inf ball; features themselves stay unbounded
      av[i] = std::min(std::max(av[i], zv[i] - radius), zv[i] + radius);
    }
  }
  return adv;
}

EtaCalibration calibrate_eta(const SplitNet& net, const std::vector<Batch>& data,
                             std::size_t g, double epsilon, int k, Rng& rng) {
  if (g == 0 || g >= net.num_splits()) {
    throw ShapeError("calibrate_eta: requires 0 < g < L");
  }
  EtaCalibration cal;
  double abs_sum = 0.0;
  std::size_t abs_count = 0;
  for (const Batch& batch : data) {
    Rng batch_rng = rng.split(cal.batches_used);
    Tensor x_adv = pgd_input(net, batch.images, batch.labels, epsilon, k,
                             AttackNorm::l_inf, true, batch_rng);
    Tensor z_clean = net.forward_slice(batch.images, 0, g).detach();
    Tensor z_adv = net.forward_slice(x_adv, 0, g).detach();
    const std::size_t n = batch.labels.size();
    const std::size_t per = z_clean.size() / n;
    for (std::size_t s = 0; s < n; ++s) {
      double linf = 0.0;
      for (std::size_t j = 0; j < per; ++j) {
        linf = std::max(linf,
                        std::fabs(z_adv[s * per + j] - z_clean[s * per + j]));
      }
      cal.max_delta_inf = std::max(cal.max_delta_inf, linf);
    }
    for (std::size_t i = 0; i < z_clean.size(); ++i) {
      abs_sum += std::fabs(z_clean[i]);
    }
    abs_count += z_clean.size();
    cal.samples_used += n;
    ++cal.batches_used;
  }
  if (abs_count == 0) throw ShapeError("calibrate_eta: no data");
  cal.mu_abs = abs_sum / static_cast<double>(abs_count);
  if (cal.mu_abs <= 0.0) {
    throw ShapeError("calibrate_eta: degenerate net (zero feature magnitude)");
  }
  cal.eta = cal.max_delta_inf / (static_cast<double>(k) * cal.mu_abs);
  return cal;
}

std::vector<DeltaLSample> delta_loss_batch(const SplitNet& net, std::size_t g,
                                           double eta, int k, const Batch& batch) {
  AttackSpec spec;
  spec.family = AttackFamily::pgd;
  spec.space = AttackSpace::feature;
  spec.eta = eta;
  spec.k = k;
  spec.g = g;
  spec.rand_init = false;
  const std::size_t L = net.num_splits();
  const std::size_t c = static_cast<std::size_t>(net.num_classes);
  const std::size_t n = batch.labels.size();

  Tensor z_clean = net.forward_slice(batch.images, 0, g).detach();
  std::vector<double> ce_clean = cross_entropy_per_sample(
      reshape(net.forward_slice(z_clean, g, L).detach(), {n, c}), batch.labels);

  std::vector<DeltaLSample> samples(n);
  if (eta == 0.0) {
    for (std::size_t i = 0; i < n; ++i) samples[i] = {g, 0.0};
    return samples;
  }
  Tensor z_adv = pgd_feature(net, z_clean, batch.labels, spec);
  std::vector<double> ce_adv = cross_entropy_per_sample(
      reshape(net.forward_slice(z_adv, g, L).detach(), {n, c}), batch.labels);
  for (std::size_t i = 0; i < n; ++i) {
    samples[i] = {g, std::fabs(ce_adv[i] - ce_clean[i])};
  }
  return samples;
}

}  // namespace rfa
