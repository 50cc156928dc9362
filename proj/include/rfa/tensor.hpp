#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rfa {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Splittable counter-based RNG. Identical (seed, label, draw index) gives
/// identical values on every platform; no libstdc++ distributions involved.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  /// Derives an independent, reproducible stream for a named consumer.
  Rng split(std::string_view label) const;
  Rng split(std::uint64_t index) const;

  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // N(0, 1), Box-Muller
  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;   // stream identity, fixed at construction
  std::uint64_t state_;  // splitmix64 walker
  bool have_cached_ = false;
  double cached_ = 0.0;
};

namespace detail {

struct Node {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backprop;
  std::uint64_t id = 0;

  std::size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Dense 64-bit tensor, row-major, with a recorded computation graph for
/// reverse-mode gradients. Copies share the underlying node (handle semantics);
/// use clone() for an independent value.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> data,
         bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double v,
                     bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  /// Deep copy of the value, detached from any graph.
  Tensor clone(bool requires_grad = false) const;
  /// Same value buffer viewed without gradient history.
  Tensor detach() const;
  /// Gradient accumulated by the last backward(); zeros if none.
  Tensor grad() const;
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Gradients of a scalar seed with respect to every requires_grad node that
/// is reachable from it. Also left in place on the nodes (Tensor::grad()).
class GradientMap {
 public:
  bool contains(const Tensor& t) const;
  Tensor at(const Tensor& t) const;

 private:
  friend GradientMap backward(const Tensor& seed);
  std::vector<std::pair<const detail::Node*, Tensor>> grads_;
};

GradientMap backward(const Tensor& seed);

// ---- primitives (forward + backward rules) --------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise; either may be scalar
Tensor matmul(const Tensor& a, const Tensor& b);
/// x [n, in] (or 4-D, flattened), W [out, in], b [out] -> [n, out]
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
/// x [n, c, h, w], weight [oc, c, 3, 3], bias [oc]; zero padding 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sign(const Tensor& x);  // gradient is 0 everywhere
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// [n, d] -> [n]; per-row sum.
Tensor sum_rows(const Tensor& x);
Tensor norm_l1(const Tensor& x);
Tensor norm_l2(const Tensor& x);
Tensor norm_linf(const Tensor& x);
/// Row-wise softmax of [n, c] (or a single 1-D vector).
Tensor softmax(const Tensor& logits);
/// Mean cross-entropy of [n, c] logits against integer labels.
Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<int>& labels);
/// Per-sample squared Euclidean distance: [n, d] x [n, d] -> [n].
Tensor squared_distance(const Tensor& a, const Tensor& b);
/// Concatenate 2-D tensors along columns.
Tensor concat_cols(const Tensor& a, const Tensor& b);
/// Value-preserving shape change (row-major).
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);
/// z = mu + exp(logvar / 2) * eps, eps ~ N(0,1) drawn from rng.
Tensor reparameterize(const Tensor& mu, const Tensor& logvar, Rng& rng);

/// Per-sample (not averaged) cross-entropy values; no graph recorded.
std::vector<double> cross_entropy_per_sample(const Tensor& logits,
                                             const std::vector<int>& labels);

/// Temporarily clears requires_grad on a parameter set (attack inner loops
/// differentiate w.r.t. activations only); restores on destruction.
class GradFreeze {
 public:
  explicit GradFreeze(const std::vector<Tensor>& params);
  ~GradFreeze();
  GradFreeze(const GradFreeze&) = delete;
  GradFreeze& operator=(const GradFreeze&) = delete;

 private:
  std::vector<std::shared_ptr<detail::Node>> frozen_;
};

void zero_grads(const std::vector<Tensor>& params);

// ---- finite-difference verification ----------------------------------------

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::vector<std::size_t> excluded;  // coordinates skipped at relu-style kinks
};

/// Central-difference check of fn's gradient at `point`. Coordinates whose
/// perturbed evaluations pass within h of a kink (relu/abs/clamp/linf) are
/// excluded and listed in the report.
FiniteDiffReport finite_diff_check(
    const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
    double h, double tol);

}  // namespace rfa
