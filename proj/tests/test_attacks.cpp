#include <doctest.h>

#include <cmath>
#include <vector>

#include "rfa/attacks.hpp"
#include "rfa/dataset.hpp"

using namespace rfa;

namespace {

SplitNet tiny_net(std::uint64_t seed = 13) {
  Rng rng(seed);
  return make_refnet_d(8, 3, rng);
}

Dataset tiny_data() { return synth_blobs(6, 10, 3, 8, 0.07); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double l2_row(const Tensor& a, const Tensor& b, std::size_t row, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double diff = a[row * d + j] - b[row * d + j];
    s += diff * diff;
  }
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("epsilon = 0 attacks return the clean input") {
  SplitNet net = tiny_net();
  Dataset ds = tiny_data();
  Rng rng(1);
  Tensor xf = fgsm(net, ds.images, ds.labels, 0.0);
  CHECK(max_abs_diff(xf, ds.images) == 0.0);
  Tensor xp = pgd_input(net, ds.images, ds.labels, 0.0, 5, AttackNorm::l_inf,
                        true, rng);
  CHECK(max_abs_diff(xp, ds.images) == 0.0);
}

TEST_CASE("l_inf PGD respects the budget and the value range") {
  SplitNet net = tiny_net();
  Dataset ds = tiny_data();
  Rng rng(2);
  double eps = 8.0 / 255.0;
  Tensor adv = pgd_input(net, ds.images, ds.labels, eps, 10, AttackNorm::l_inf,
                         true, rng);
  CHECK(max_abs_diff(adv, ds.images) <= eps + 1e-12);
  for (double v : adv.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("k = 1 l_inf PGD without random init equals FGSM bitwise") {
  SplitNet net = tiny_net();
  Dataset ds = tiny_data();
  Rng rng(3);
  Tensor a = fgsm(net, ds.images, ds.labels, 0.05);
  Tensor b = pgd_input(net, ds.images, ds.labels, 0.05, 1, AttackNorm::l_inf,
                       false, rng);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("FGSM increases the loss on an untrained net's worst direction") {
  SplitNet net = tiny_net();
  Dataset ds = tiny_data();
  Tensor adv = fgsm(net, ds.images, ds.labels, 0.1);
  double clean = cross_entropy_with_logits(net.forward(ds.images), ds.labels).item();
  double attacked =
      cross_entropy_with_logits(net.forward(adv), ds.labels).item();
  CHECK(attacked >= clean);  // first-order step should not lower the mean CE
}

TEST_CASE("l_2 PGD stays inside the l_2 ball per sample") {
  SplitNet net = tiny_net();
  Dataset ds = tiny_data();
  Rng rng(4);
  double eps = 0.5;
  Tensor adv = pgd_input(net, ds.images, ds.labels, eps, 8, AttackNorm::l_2,
                         true, rng);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(l2_row(adv, ds.images, i, 8) <= eps + 1e-9);
  }
}

TEST_CASE("attacks leave backbone parameter grads untouched") {
  SplitNet net = tiny_net();
  Dataset ds = tiny_data();
  Rng rng(5);
  pgd_input(net, ds.images, ds.labels, 0.03, 5, AttackNorm::l_inf, true, rng);
  for (const Tensor& p : net.params()) {
    Tensor g = p.grad();
    for (double gv : g.data()) CHECK(gv == 0.0);
  }
}

TEST_CASE("feature-space PGD geometry") {
  SplitNet net = tiny_net();
  Dataset ds = tiny_data();
  std::size_t g = 2;
  Tensor z = net.forward_slice(ds.images, 0, g).detach();

  AttackSpec spec;
  spec.space = AttackSpace::feature;
  spec.g = g;
  spec.eta = 0.02;
  spec.k = 5;
  spec.validate(net.num_splits());

  double alpha = spec.eta * mean_abs(z);
  Tensor adv = pgd_feature(net, z, ds.labels, spec);
  CHECK(max_abs_diff(adv, z) <= spec.k * alpha + 1e-12);

  SUBCASE("a single step moves every coordinate by exactly alpha or 0") {
    spec.k = 1;
    Tensor one = pgd_feature(net, z, ds.labels, spec);
    double a1 = spec.eta * mean_abs(z);
    for (std::size_t i = 0; i < z.size(); ++i) {
      double d = std::abs(one[i] - z[i]);
      bool ok = (d == doctest::Approx(a1).epsilon(1e-12)) || d == 0.0;
      CHECK(ok);
    }
  }
  SUBCASE("eta = 0 is a no-op") {
    spec.eta = 0.0;
    Tensor same = pgd_feature(net, z, ds.labels, spec);
    CHECK(max_abs_diff(same, z) == 0.0);
  }
  SUBCASE("no [0,1] clamp in feature space") {
    // shift features so some coordinates are far outside [0,1]; the attack
    // must not pull them back in
    Tensor zs = z.clone();
    for (double& v : zs.mutable_data()) v += 5.0;
    Tensor out = pgd_feature(net, zs, ds.labels, spec);
    bool any_above_one = false;
    for (double v : out.data()) any_above_one |= (v > 1.0);
    CHECK(any_above_one);
  }
}

TEST_CASE("spec validation") {
  AttackSpec spec;
  spec.space = AttackSpace::feature;
  spec.g = 7;
  CHECK_THROWS(spec.validate(5));
  spec.g = 2;
  spec.k = 0;
  CHECK_THROWS(spec.validate(5));
  spec.k = 5;
  spec.eta = -0.1;
  CHECK_THROWS(spec.validate(5));
  AttackSpec in;
  in.epsilon = -0.1;
  CHECK_THROWS(in.validate(5));
}

TEST_CASE("eta calibration") {
  SplitNet net = tiny_net();
  Dataset ds = tiny_data();
  BatchPlan plan;
  plan.batch_size = 10;
  auto bs = batches(ds, plan);

  SUBCASE("epsilon = 0 calibrates to eta = 0") {
    Rng rng(6);
    auto cal = calibrate_eta(net, bs, 2, 0.0, 5, rng);
    CHECK(cal.eta == 0.0);
    CHECK(cal.samples_used == ds.size());
  }
  SUBCASE("consistency: k * eta * mu equals the observed max displacement") {
    Rng rng(6);
    auto cal = calibrate_eta(net, bs, 2, 0.03, 5, rng);
    CHECK(cal.eta > 0.0);
    CHECK(5 * cal.eta * cal.mu_abs ==
          doctest::Approx(cal.max_delta_inf).epsilon(1e-9));
  }
  SUBCASE("eta grows with epsilon") {
    Rng r1(6), r2(6);
    auto small = calibrate_eta(net, bs, 2, 0.01, 5, r1);
    auto large = calibrate_eta(net, bs, 2, 0.08, 5, r2);
    CHECK(large.eta > small.eta);
  }
}

TEST_CASE("delta_loss_batch values are nonnegative; eta = 0 gives zeros") {
  SplitNet net = tiny_net();
  Dataset ds = tiny_data();
  Batch b{ds.images, ds.labels};
  auto zero = delta_loss_batch(net, 2, 0.0, 5, b);
  REQUIRE(zero.size() == ds.size());
  for (const auto& s : zero) CHECK(s.value == 0.0);

  auto nz = delta_loss_batch(net, 2, 0.05, 5, b);
  REQUIRE(nz.size() == ds.size());
  bool any_positive = false;
  for (const auto& s : nz) {
    CHECK(s.value >= 0.0);
    CHECK(s.g == 2);
    any_positive |= (s.value > 0.0);
  }
  CHECK(any_positive);
}
