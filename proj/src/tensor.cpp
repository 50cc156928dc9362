#include "rfa/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace rfa {

// ---- Rng -------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  return splitmix64(s);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

Rng Rng::split(std::string_view label) const {
  return Rng(mix_seed(seed_, fnv1a(label)));
}

Rng Rng::split(std::uint64_t index) const {
  return Rng(mix_seed(seed_, index + 0x632be59bd9b4e019ULL));
}

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  // 53 random bits into [0, 1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  cached_ = r * std::sin(theta);
  have_cached_ = true;
  return r * std::cos(theta);
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = next_u64() % i;
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

// ---- kink monitor (finite-difference exclusions) ---------------------------

namespace {

struct KinkMonitor {
  bool enabled = false;
  double h = 0.0;
  bool hit = false;
};

thread_local KinkMonitor g_kinks;

void note_kink_distance(double dist) {
  if (g_kinks.enabled && dist < g_kinks.h) g_kinks.hit = true;
}

std::atomic<std::uint64_t> g_next_node_id{1};

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NonFiniteError(std::string("non-finite value produced by ") + op);
    }
  }
}

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(std::vector<std::size_t> shape, std::vector<double> value,
                  const char* op, std::vector<NodePtr> parents,
                  std::function<void(detail::Node&)> backprop) {
  check_finite(value, op);
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  bool any_grad = false;
  for (const auto& p : parents) any_grad = any_grad || p->requires_grad;
  n->requires_grad = any_grad;
  if (any_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch");
  }
}

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data,
               bool requires_grad) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("Tensor: product(shape) != data length");
  }
  check_finite(data, "Tensor construction");
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
  node_->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor({}, {v}, requires_grad);
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v,
                    bool requires_grad) {
  std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item(): tensor is not a scalar");
  return node_->value[0];
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->value, requires_grad);
}

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::grad() const {
  if (node_->grad.size() != node_->value.size()) {
    return Tensor::zeros(node_->shape);
  }
  return Tensor(node_->shape, node_->grad);
}

void Tensor::zero_grad() { node_->grad.clear(); }

// ---- backward --------------------------------------------------------------

bool GradientMap::contains(const Tensor& t) const {
  for (const auto& [n, g] : grads_) {
    if (n == t.node().get()) return true;
  }
  return false;
}

Tensor GradientMap::at(const Tensor& t) const {
  for (const auto& [n, g] : grads_) {
    if (n == t.node().get()) return g;
  }
  throw GraphError("GradientMap: tensor has no recorded gradient");
}

GradientMap backward(const Tensor& seed) {
  if (!seed.defined()) throw GraphError("backward: undefined seed");
  if (seed.size() != 1) throw GraphError("backward: seed must be scalar");
  detail::Node* root = seed.node().get();
  if (!root->requires_grad) {
    throw GraphError("backward: seed does not depend on any requires_grad leaf");
  }

  // Iterative post-order topological sort (deterministic parent order).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) n->ensure_grad();
  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }

  GradientMap map;
  for (detail::Node* n : order) {
    if (n->requires_grad && !n->backprop) {
      map.grads_.emplace_back(n, Tensor(n->shape, n->grad));
    }
  }
  return map;
}

// ---- elementwise primitives --------------------------------------------------

namespace {

bool scalar_like(const Tensor& t) { return t.size() == 1; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (!scalar_like(a) && !scalar_like(b)) require_same_shape(a, b, "add");
  const bool a_scalar = scalar_like(a) && !scalar_like(b);
  const bool b_scalar = scalar_like(b) && !scalar_like(a);
  const Tensor& big = a_scalar ? b : a;
  std::vector<double> out(big.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (a_scalar ? a[0] : a[i]) + (b_scalar ? b[0] : b[i]);
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor(make_node(
      big.shape(), std::move(out), "add", {an, bn},
      [an, bn, a_scalar, b_scalar](detail::Node& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          if (a_scalar) {
            for (double g : n.grad) an->grad[0] += g;
          } else {
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          if (b_scalar) {
            for (double g : n.grad) bn->grad[0] += g;
          } else {
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
          }
        }
      }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!scalar_like(a) && !scalar_like(b)) require_same_shape(a, b, "sub");
  const bool a_scalar = scalar_like(a) && !scalar_like(b);
  const bool b_scalar = scalar_like(b) && !scalar_like(a);
  const Tensor& big = a_scalar ? b : a;
  std::vector<double> out(big.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (a_scalar ? a[0] : a[i]) - (b_scalar ? b[0] : b[i]);
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor(make_node(
      big.shape(), std::move(out), "sub", {an, bn},
      [an, bn, a_scalar, b_scalar](detail::Node& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          if (a_scalar) {
            for (double g : n.grad) an->grad[0] += g;
          } else {
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          if (b_scalar) {
            for (double g : n.grad) bn->grad[0] -= g;
          } else {
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
          }
        }
      }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!scalar_like(a) && !scalar_like(b)) require_same_shape(a, b, "mul");
  const bool a_scalar = scalar_like(a) && !scalar_like(b);
  const bool b_scalar = scalar_like(b) && !scalar_like(a);
  const Tensor& big = a_scalar ? b : a;
  std::vector<double> out(big.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (a_scalar ? a[0] : a[i]) * (b_scalar ? b[0] : b[i]);
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor(make_node(
      big.shape(), std::move(out), "mul", {an, bn},
      [an, bn, a_scalar, b_scalar](detail::Node& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double bv = b_scalar ? bn->value[0] : bn->value[i];
            if (a_scalar) {
              an->grad[0] += n.grad[i] * bv;
            } else {
              an->grad[i] += n.grad[i] * bv;
            }
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double av = a_scalar ? an->value[0] : an->value[i];
            if (b_scalar) {
              bn->grad[0] += n.grad[i] * av;
            } else {
              bn->grad[i] += n.grad[i] * av;
            }
          }
        }
      }));
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: expects [m,k] x [k,n]");
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto ncols = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(a.dim(0) * b.dim(1));
  ConstMatMap am(a.data().data(), m, k);
  ConstMatMap bm(b.data().data(), k, ncols);
  MatMap(out.data(), m, ncols) = am * bm;
  auto an = a.node();
  auto bn = b.node();
  return Tensor(make_node(
      {a.dim(0), b.dim(1)}, std::move(out), "matmul", {an, bn},
      [an, bn, m, k, ncols](detail::Node& n) {
        ConstMatMap gm(n.grad.data(), m, ncols);
        if (an->requires_grad) {
          an->ensure_grad();
          MatMap ag(an->grad.data(), m, k);
          ConstMatMap bm(bn->value.data(), k, ncols);
          ag.noalias() += gm * bm.transpose();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          MatMap bg(bn->grad.data(), k, ncols);
          ConstMatMap am(an->value.data(), m, k);
          bg.noalias() += am.transpose() * gm;
        }
      }));
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor xin = x;
  if (x.rank() > 2) {
    std::size_t n = x.dim(0);
    xin = reshape(x, {n, x.size() / n});
  }
  if (xin.rank() != 2 || w.rank() != 2 || b.rank() != 1 ||
      xin.dim(1) != w.dim(1) || w.dim(0) != b.dim(0)) {
    throw ShapeError("affine: expects x [n,in], W [out,in], b [out]");
  }
  const auto n = static_cast<Eigen::Index>(xin.dim(0));
  const auto in = static_cast<Eigen::Index>(xin.dim(1));
  const auto out_dim = static_cast<Eigen::Index>(w.dim(0));
  std::vector<double> out(xin.dim(0) * w.dim(0));
  {
    ConstMatMap xm(xin.data().data(), n, in);
    ConstMatMap wm(w.data().data(), out_dim, in);
    Eigen::Map<const Eigen::VectorXd> bv(b.data().data(), out_dim);
    MatMap om(out.data(), n, out_dim);
    om.noalias() = xm * wm.transpose();
    om.rowwise() += bv.transpose();
  }
  auto xn = xin.node();
  auto wn = w.node();
  auto bn = b.node();
  return Tensor(make_node(
      {xin.dim(0), w.dim(0)}, std::move(out), "affine", {xn, wn, bn},
      [xn, wn, bn, n, in, out_dim](detail::Node& nd) {
        ConstMatMap gm(nd.grad.data(), n, out_dim);
        if (xn->requires_grad) {
          xn->ensure_grad();
          MatMap xg(xn->grad.data(), n, in);
          ConstMatMap wm(wn->value.data(), out_dim, in);
          xg.noalias() += gm * wm;
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          MatMap wg(wn->grad.data(), out_dim, in);
          ConstMatMap xm(xn->value.data(), n, in);
          wg.noalias() += gm.transpose() * xm;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          Eigen::Map<Eigen::VectorXd> bg(bn->grad.data(), out_dim);
          bg += gm.colwise().sum().transpose();
        }
      }));
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1) {
    throw ShapeError("conv2d: expects x [n,c,h,w], weight [oc,c,kh,kw], bias [oc]");
  }
  if (w.dim(2) != 3 || w.dim(3) != 3) throw ShapeError("conv2d: kernel must be 3x3");
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  if (x.dim(1) != w.dim(1) || w.dim(0) != b.dim(0)) {
    throw ShapeError("conv2d: channel mismatch");
  }
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OC = w.dim(0);
  const int pad = 1;
  const std::size_t OH = (H + 2 * pad - 3) / stride + 1;
  const std::size_t OW = (W + 2 * pad - 3) / stride + 1;
  std::vector<double> out(N * OC * OH * OW, 0.0);
  const auto* xv = x.data().data();
  const auto* wv = w.data().data();
  const auto* bv = b.data().data();
  auto xat = [&](std::size_t img, std::size_t c, long i, long j) -> double {
    if (i < 0 || j < 0 || i >= static_cast<long>(H) || j >= static_cast<long>(W))
      return 0.0;
    return xv[((img * C + c) * H + i) * W + j];
  };
  for (std::size_t img = 0; img < N; ++img) {
    for (std::size_t oc = 0; oc < OC; ++oc) {
      for (std::size_t oi = 0; oi < OH; ++oi) {
        for (std::size_t oj = 0; oj < OW; ++oj) {
          double acc = bv[oc];
          for (std::size_t c = 0; c < C; ++c) {
            for (int ki = 0; ki < 3; ++ki) {
              for (int kj = 0; kj < 3; ++kj) {
                long i = static_cast<long>(oi * stride) + ki - pad;
                long j = static_cast<long>(oj * stride) + kj - pad;
                acc += xat(img, c, i, j) * wv[((oc * C + c) * 3 + ki) * 3 + kj];
              }
            }
          }
          out[((img * OC + oc) * OH + oi) * OW + oj] = acc;
        }
      }
    }
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return Tensor(make_node(
      {N, OC, OH, OW}, std::move(out), "conv2d", {xn, wn, bn},
      [xn, wn, bn, N, C, H, W, OC, OH, OW, stride](detail::Node& nd) {
        const int pad = 1;
        const auto* g = nd.grad.data();
        const auto* xv = xn->value.data();
        const auto* wv = wn->value.data();
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t img = 0; img < N; ++img) {
          for (std::size_t oc = 0; oc < OC; ++oc) {
            for (std::size_t oi = 0; oi < OH; ++oi) {
              for (std::size_t oj = 0; oj < OW; ++oj) {
                double go = g[((img * OC + oc) * OH + oi) * OW + oj];
                if (bn->requires_grad) bn->grad[oc] += go;
                for (std::size_t c = 0; c < C; ++c) {
                  for (int ki = 0; ki < 3; ++ki) {
                    for (int kj = 0; kj < 3; ++kj) {
                      long i = static_cast<long>(oi * stride) + ki - pad;
                      long j = static_cast<long>(oj * stride) + kj - pad;
                      if (i < 0 || j < 0 || i >= static_cast<long>(H) ||
                          j >= static_cast<long>(W))
                        continue;
                      std::size_t xi = ((img * C + c) * H + i) * W + j;
                      std::size_t widx = ((oc * C + c) * 3 + ki) * 3 + kj;
                      if (wn->requires_grad) wn->grad[widx] += go * xv[xi];
                      if (xn->requires_grad) xn->grad[xi] += go * wv[widx];
                    }
                  }
                }
              }
            }
          }
        }
      }));
}

// ---- nonlinearities ----------------------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    note_kink_distance(std::fabs(x[i]));
    out[i] = x[i] > 0.0 ? x[i] : 0.0;
  }
  auto xn = x.node();
  return Tensor(make_node(x.shape(), std::move(out), "relu", {xn},
                          [xn](detail::Node& n) {
                            xn->ensure_grad();
                            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                              // subgradient at 0 is 0
                              if (xn->value[i] > 0.0) xn->grad[i] += n.grad[i];
                            }
                          }));
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  auto xn = x.node();
  return Tensor(make_node(x.shape(), std::move(out), "sigmoid", {xn},
                          [xn](detail::Node& n) {
                            xn->ensure_grad();
                            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                              double s = n.value[i];
                              xn->grad[i] += n.grad[i] * s * (1.0 - s);
                            }
                          }));
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  auto xn = x.node();
  return Tensor(make_node(x.shape(), std::move(out), "exp", {xn},
                          [xn](detail::Node& n) {
                            xn->ensure_grad();
                            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                              xn->grad[i] += n.grad[i] * n.value[i];
                            }
                          }));
}

Tensor abs(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    note_kink_distance(std::fabs(x[i]));
    out[i] = std::fabs(x[i]);
  }
  auto xn = x.node();
  return Tensor(make_node(x.shape(), std::move(out), "abs", {xn},
                          [xn](detail::Node& n) {
                            xn->ensure_grad();
                            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                              double s = xn->value[i] > 0.0   ? 1.0
                                         : xn->value[i] < 0.0 ? -1.0
                                                              : 0.0;
                              xn->grad[i] += n.grad[i] * s;
                            }
                          }));
}

Tensor sign(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[i] > 0.0 ? 1.0 : x[i] < 0.0 ? -1.0 : 0.0;
  }
  auto xn = x.node();
  // gradient is 0 everywhere: nothing to accumulate
  return Tensor(make_node(x.shape(), std::move(out), "sign", {xn},
                          [](detail::Node&) {}));
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ShapeError("clamp: lo must be <= hi");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    note_kink_distance(std::fabs(x[i] - lo));
    note_kink_distance(std::fabs(x[i] - hi));
    out[i] = std::min(std::max(x[i], lo), hi);
  }
  auto xn = x.node();
  return Tensor(make_node(x.shape(), std::move(out), "clamp", {xn},
                          [xn, lo, hi](detail::Node& n) {
                            xn->ensure_grad();
                            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                              double v = xn->value[i];
                              if (v > lo && v < hi) xn->grad[i] += n.grad[i];
                            }
                          }));
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  auto xn = x.node();
  return Tensor(make_node({}, {acc}, "sum", {xn}, [xn](detail::Node& n) {
    xn->ensure_grad();
    for (double& g : xn->grad) g += n.grad[0];
  }));
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  double inv = 1.0 / static_cast<double>(x.size());
  auto xn = x.node();
  return Tensor(
      make_node({}, {acc * inv}, "mean", {xn}, [xn, inv](detail::Node& n) {
        xn->ensure_grad();
        for (double& g : xn->grad) g += n.grad[0] * inv;
      }));
}

Tensor sum_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("sum_rows: expects [n, d]");
  std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i] += x[i * d + j];
  }
  auto xn = x.node();
  return Tensor(make_node({n}, std::move(out), "sum_rows", {xn},
                          [xn, n, d](detail::Node& nd) {
                            xn->ensure_grad();
                            for (std::size_t i = 0; i < n; ++i) {
                              for (std::size_t j = 0; j < d; ++j) {
                                xn->grad[i * d + j] += nd.grad[i];
                              }
                            }
                          }));
}

Tensor norm_l1(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    note_kink_distance(std::fabs(x[i]));
    acc += std::fabs(x[i]);
  }
  auto xn = x.node();
  return Tensor(make_node({}, {acc}, "norm_l1", {xn}, [xn](detail::Node& n) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < xn->value.size(); ++i) {
      double s = xn->value[i] > 0.0 ? 1.0 : xn->value[i] < 0.0 ? -1.0 : 0.0;
      xn->grad[i] += n.grad[0] * s;
    }
  }));
}

Tensor norm_l2(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * x[i];
  double nrm = std::sqrt(acc);
  note_kink_distance(nrm);  // not differentiable at 0
  auto xn = x.node();
  return Tensor(make_node({}, {nrm}, "norm_l2", {xn}, [xn, nrm](detail::Node& n) {
    if (nrm == 0.0) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < xn->value.size(); ++i) {
      xn->grad[i] += n.grad[0] * xn->value[i] / nrm;
    }
  }));
}

Tensor norm_linf(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("norm_linf: empty tensor");
  double best = -1.0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double a = std::fabs(x[i]);
    if (a > best) {
      best = a;
      arg = i;
    }
  }
  // the max switches argument at near-ties
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (i != arg) note_kink_distance(best - std::fabs(x[i]));
  }
  note_kink_distance(std::fabs(x[arg]));
  auto xn = x.node();
  return Tensor(make_node({}, {best}, "norm_linf", {xn},
                          [xn, arg](detail::Node& n) {
                            xn->ensure_grad();
                            double v = xn->value[arg];
                            double s = v > 0.0 ? 1.0 : v < 0.0 ? -1.0 : 0.0;
                            xn->grad[arg] += n.grad[0] * s;
                          }));
}

// ---- softmax / cross-entropy ---------------------------------------------------

namespace {

void softmax_row(const double* in, double* out, std::size_t c) {
  double mx = in[0];
  for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
  double denom = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    out[j] = std::exp(in[j] - mx);
    denom += out[j];
  }
  for (std::size_t j = 0; j < c; ++j) out[j] /= denom;
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  std::size_t n = 1, c = 0;
  if (logits.rank() == 1) {
    c = logits.dim(0);
  } else if (logits.rank() == 2) {
    n = logits.dim(0);
    c = logits.dim(1);
  } else {
    throw ShapeError("softmax: expects 1-D or 2-D logits");
  }
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < n; ++i) {
    softmax_row(logits.data().data() + i * c, out.data() + i * c, c);
  }
  auto xn = logits.node();
  return Tensor(make_node(
      logits.shape(), std::move(out), "softmax", {xn}, [xn, n, c](detail::Node& nd) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double* p = nd.value.data() + i * c;
          const double* g = nd.grad.data() + i * c;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += p[j] * g[j];
          for (std::size_t j = 0; j < c; ++j) {
            xn->grad[i * c + j] += p[j] * (g[j] - dot);
          }
        }
      }));
}

Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: expects [n, c] logits");
  std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
  std::vector<double> probs(logits.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ShapeError("cross_entropy: label out of range");
    }
    softmax_row(logits.data().data() + i * c, probs.data() + i * c, c);
    loss -= std::log(std::max(probs[i * c + y], 1e-300));
  }
  loss /= static_cast<double>(n);
  auto xn = logits.node();
  return Tensor(make_node(
      {}, {loss}, "cross_entropy", {xn},
      [xn, probs = std::move(probs), labels, n, c](detail::Node& nd) {
        xn->ensure_grad();
        double scale = nd.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            double onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
            xn->grad[i * c + j] += scale * (probs[i * c + j] - onehot);
          }
        }
      }));
}

std::vector<double> cross_entropy_per_sample(const Tensor& logits,
                                             const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: expects [n, c] logits");
  std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
  std::vector<double> row(c);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    softmax_row(logits.data().data() + i * c, row.data(), c);
    out[i] = -std::log(std::max(row[labels[i]], 1e-300));
  }
  return out;
}

Tensor squared_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "squared_distance");
  if (a.rank() != 2) throw ShapeError("squared_distance: expects [n, d]");
  std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double diff = a[i * d + j] - b[i * d + j];
      out[i] += diff * diff;
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor(make_node(
      {n}, std::move(out), "squared_distance", {an, bn},
      [an, bn, n, d](detail::Node& nd) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            double diff = an->value[i * d + j] - bn->value[i * d + j];
            double g = 2.0 * diff * nd.grad[i];
            if (an->requires_grad) {
              an->ensure_grad();
              an->grad[i * d + j] += g;
            }
            if (bn->requires_grad) {
              bn->ensure_grad();
              bn->grad[i * d + j] -= g;
            }
          }
        }
      }));
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw ShapeError("concat_cols: expects [n, da] and [n, db]");
  }
  std::size_t n = a.dim(0), da = a.dim(1), db = b.dim(1);
  std::vector<double> out(n * (da + db));
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * (da + db), a.data().data() + i * da,
                da * sizeof(double));
    std::memcpy(out.data() + i * (da + db) + da, b.data().data() + i * db,
                db * sizeof(double));
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor(make_node(
      {n, da + db}, std::move(out), "concat_cols", {an, bn},
      [an, bn, n, da, db](detail::Node& nd) {
        for (std::size_t i = 0; i < n; ++i) {
          if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t j = 0; j < da; ++j) {
              an->grad[i * da + j] += nd.grad[i * (da + db) + j];
            }
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t j = 0; j < db; ++j) {
              bn->grad[i * db + j] += nd.grad[i * (da + db) + da + j];
            }
          }
        }
      }));
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: element count mismatch");
  }
  auto xn = x.node();
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor(make_node(std::move(shape), std::move(out), "reshape", {xn},
                          [xn](detail::Node& n) {
                            xn->ensure_grad();
                            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                              xn->grad[i] += n.grad[i];
                            }
                          }));
}

Tensor reparameterize(const Tensor& mu, const Tensor& logvar, Rng& rng) {
  require_same_shape(mu, logvar, "reparameterize");
  std::vector<double> eps(mu.size());
  for (double& e : eps) e = rng.normal();
  std::vector<double> out(mu.size());
  std::vector<double> sigma(mu.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    sigma[i] = std::exp(0.5 * logvar[i]);
    out[i] = mu[i] + sigma[i] * eps[i];
  }
  auto mn = mu.node();
  auto ln = logvar.node();
  return Tensor(make_node(
      mu.shape(), std::move(out), "reparameterize", {mn, ln},
      [mn, ln, eps = std::move(eps), sigma = std::move(sigma)](detail::Node& n) {
        if (mn->requires_grad) {
          mn->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) mn->grad[i] += n.grad[i];
        }
        if (ln->requires_grad) {
          ln->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) {
            ln->grad[i] += n.grad[i] * 0.5 * sigma[i] * eps[i];
          }
        }
      }));
}

GradFreeze::GradFreeze(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    if (p.defined() && p.node()->requires_grad) {
      p.node()->requires_grad = false;
      frozen_.push_back(p.node());
    }
  }
}

GradFreeze::~GradFreeze() {
  for (auto& n : frozen_) n->requires_grad = true;
}

void zero_grads(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    if (p.defined()) p.node()->grad.clear();
  }
}

// ---- finite differences --------------------------------------------------------

FiniteDiffReport finite_diff_check(
    const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
    double h, double tol) {
  Tensor leaf = point.clone(true);
  Tensor value = fn(leaf);
  if (value.size() != 1) throw ShapeError("finite_diff_check: fn must be scalar");
  backward(value);
  Tensor analytic = leaf.grad();

  FiniteDiffReport report;
  report.max_rel_err = 0.0;
  Tensor probe = point.clone(false);
  auto pd = probe.mutable_data();
  for (std::size_t i = 0; i < probe.size(); ++i) {
    double orig = pd[i];
    g_kinks = {true, 2.0 * h, false};
    pd[i] = orig + h;
    double fp = fn(probe).item();
    pd[i] = orig - h;
    double fm = fn(probe).item();
    pd[i] = orig;
    bool near_kink = g_kinks.hit;
    g_kinks = {};
    if (near_kink) {
      report.excluded.push_back(i);
      continue;
    }
    double numeric = (fp - fm) / (2.0 * h);
    double ga = analytic[i];
    double rel = std::fabs(ga - numeric) /
                 std::max({std::fabs(ga), std::fabs(numeric), 1e-8});
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace rfa
