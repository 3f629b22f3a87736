#pragma once

// Dense arrays with eager reverse-mode gradient accumulation.
//
// A DiffTensor is a shared handle: copies alias the same storage. Every op
// records its parents and an adjoint rule when any parent requires a gradient
// and recording is enabled on the calling thread (see NoGradGuard). Leaves are
// tensors created directly by the caller; only leaves keep their gradient
// across backward() calls.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "sgg/error.hpp"

namespace sgg::numerics {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <std::floating_point T = double>
class DiffTensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  DiffTensor() : DiffTensor(Shape{0}, std::vector<T>{}, false) {}

  DiffTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    if (element_count(shape) != values.size()) {
      throw Error("DiffTensor: shape " + shape_string(shape) + " holds " +
                  std::to_string(element_count(shape)) + " values, got " +
                  std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->grad.assign(node_->value.size(), T{0});
    node_->requires_grad = requires_grad;
  }

  static DiffTensor scalar(T v, bool requires_grad = false) {
    return DiffTensor(Shape{}, std::vector<T>{v}, requires_grad);
  }
  static DiffTensor vector(std::vector<T> values, bool requires_grad = false) {
    Shape s{values.size()};
    return DiffTensor(std::move(s), std::move(values), requires_grad);
  }
  template <std::floating_point U>
  static DiffTensor vector(std::span<const U> values, bool requires_grad = false) {
    return vector(std::vector<T>(values.begin(), values.end()), requires_grad);
  }
  static DiffTensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                           bool requires_grad = false) {
    return DiffTensor(Shape{rows, cols}, std::move(values), requires_grad);
  }
  static DiffTensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = element_count(shape);
    return DiffTensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  std::span<const T> value() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  /// Writable view for optimizers and initializers; only meaningful on leaves.
  std::span<T> mutable_value() { return node_->value; }
  std::span<T> mutable_grad() { return node_->grad; }

  T operator[](std::size_t i) const { return node_->value[i]; }
  T item() const {
    if (size() != 1) {
      throw Error("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }

  /// Deep copy of the value; the result is a fresh leaf.
  DiffTensor clone(bool requires_grad = false) const {
    return DiffTensor(shape(), node_->value, requires_grad);
  }

  bool same_storage(const DiffTensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<NodeT>& node() const { return node_; }

 private:
  explicit DiffTensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  template <std::floating_point U>
  friend DiffTensor<U> make_op_result(Shape, std::vector<U>,
                                      std::initializer_list<DiffTensor<U>>,
                                      std::function<void(detail::Node<U>&)>);

  std::shared_ptr<NodeT> node_;
};

template <std::floating_point T>
DiffTensor<T> make_op_result(Shape shape, std::vector<T> value,
                             std::initializer_list<DiffTensor<T>> parents,
                             std::function<void(detail::Node<T>&)> backward) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->grad.assign(node->value.size(), T{0});
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return DiffTensor<T>(std::move(node));
}

namespace detail {

template <std::floating_point T>
bool is_scalar_like(const DiffTensor<T>& t) {
  return t.size() == 1;
}

template <std::floating_point T>
void require_same_shape(const char* op, const DiffTensor<T>& a, const DiffTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                shape_string(b.shape()));
  }
}

template <std::floating_point T>
void require_vector(const char* op, const DiffTensor<T>& a) {
  if (a.rank() != 1) {
    throw Error(std::string(op) + ": expected a 1-D tensor, got " + shape_string(a.shape()));
  }
}

template <std::floating_point T>
void require_finite(const char* op, const DiffTensor<T>& a) {
  for (T v : a.value()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

template <std::floating_point T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <std::floating_point T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <std::floating_point T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <std::floating_point T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. A one-element right operand of a different shape
// broadcasts; nothing else does.

template <std::floating_point T>
DiffTensor<T> add(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  const bool broadcast = b.size() == 1 && a.shape() != b.shape();
  if (!broadcast) detail::require_same_shape("add", a, b);
  std::vector<T> out(a.value().begin(), a.value().end());
  if (broadcast) {
    const T s = b[0];
    for (auto& v : out) v += s;
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  }
  return make_op_result<T>(a.shape(), std::move(out), {a, b}, [broadcast](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    }
    if (pb.requires_grad) {
      if (broadcast) {
        T s{0};
        for (T g : n.grad) s += g;
        pb.grad[0] += s;
      } else {
        for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i];
      }
    }
  });
}

template <std::floating_point T>
DiffTensor<T> sub(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += n.grad[i];
      if (pb.requires_grad) pb.grad[i] -= n.grad[i];
    }
  });
}

template <std::floating_point T>
DiffTensor<T> mul(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  const bool broadcast = b.size() == 1 && a.shape() != b.shape();
  if (!broadcast) detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  if (broadcast) {
    const T s = b[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  }
  return make_op_result<T>(a.shape(), std::move(out), {a, b}, [broadcast](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (broadcast) {
      const T s = pb.value[0];
      if (pa.requires_grad) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * s;
      }
      if (pb.requires_grad) {
        T acc{0};
        for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * pa.value[i];
        pb.grad[0] += acc;
      }
      return;
    }
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += n.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += n.grad[i] * pa.value[i];
    }
  });
}

/// max(0, x); the adjoint at exactly 0 is 0.
template <std::floating_point T>
DiffTensor<T> relu(const DiffTensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
  return make_op_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (pa.value[i] > T{0}) pa.grad[i] += n.grad[i];
    }
  });
}

/// c * a for a constant c.
template <std::floating_point T>
DiffTensor<T> scale(const DiffTensor<T>& a, T c) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return make_op_result<T>(a.shape(), std::move(out), {a}, [c](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * c;
  });
}

/// a + c for a constant c.
template <std::floating_point T>
DiffTensor<T> shift(const DiffTensor<T>& a, T c) {
  std::vector<T> out(a.value().begin(), a.value().end());
  for (auto& v : out) v += c;
  return make_op_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
  });
}

template <std::floating_point T>
DiffTensor<T> sigmoid(const DiffTensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a[i];
    if (x >= T{0}) {
      out[i] = T{1} / (T{1} + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out[i] = e / (T{1} + e);
    }
  }
  return make_op_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const T s = n.value[i];
      pa.grad[i] += n.grad[i] * s * (T{1} - s);
    }
  });
}

/// Copy of the value cut from the graph.
template <std::floating_point T>
DiffTensor<T> detach(const DiffTensor<T>& a) {
  return a.clone(false);
}

// ---------------------------------------------------------------------------
// Reductions.

template <std::floating_point T>
DiffTensor<T> sum(const DiffTensor<T>& a) {
  T s{0};
  for (T v : a.value()) s += v;
  return make_op_result<T>(Shape{}, std::vector<T>{s}, {a}, [](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    const T g = n.grad[0];
    for (auto& v : pa.grad) v += g;
  });
}

template <std::floating_point T>
DiffTensor<T> dot(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  detail::require_same_shape("dot", a, b);
  const T s = detail::ConstVecMap<T>(a.value().data(), a.size())
                  .dot(detail::ConstVecMap<T>(b.value().data(), b.size()));
  return make_op_result<T>(Shape{}, std::vector<T>{s}, {a, b}, [](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const T g = n.grad[0];
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += g * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += g * pa.value[i];
    }
  });
}

/// Largest entry; the adjoint goes to the first maximiser.
template <std::floating_point T>
DiffTensor<T> max(const DiffTensor<T>& a) {
  if (a.size() == 0) throw Error("max: empty tensor");
  const auto v = a.value();
  const std::size_t arg =
      static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  return make_op_result<T>(Shape{}, std::vector<T>{v[arg]}, {a}, [arg](detail::Node<T>& n) {
    n.parents[0]->grad[arg] += n.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

/// W (m x n) times x (n).
template <std::floating_point T>
DiffTensor<T> matvec(const DiffTensor<T>& w, const DiffTensor<T>& x) {
  if (w.rank() != 2 || x.rank() != 1 || w.cols() != x.size()) {
    throw Error("matvec: dimension mismatch " + shape_string(w.shape()) + " * " +
                shape_string(x.shape()));
  }
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  std::vector<T> out(m);
  detail::VecMap<T>(out.data(), m).noalias() =
      detail::ConstMatMap<T>(w.value().data(), m, n) *
      detail::ConstVecMap<T>(x.value().data(), n);
  return make_op_result<T>(Shape{m}, std::move(out), {w, x}, [m, n](detail::Node<T>& node) {
    auto& pw = *node.parents[0];
    auto& px = *node.parents[1];
    detail::ConstVecMap<T> g(node.grad.data(), m);
    if (pw.requires_grad) {
      detail::MatMap<T>(pw.grad.data(), m, n).noalias() +=
          g * detail::ConstVecMap<T>(px.value.data(), n).transpose();
    }
    if (px.requires_grad) {
      detail::VecMap<T>(px.grad.data(), n).noalias() +=
          detail::ConstMatMap<T>(pw.value.data(), m, n).transpose() * g;
    }
  });
}

/// W^T (n x m) times y (m), for W of shape m x n.
template <std::floating_point T>
DiffTensor<T> transposed_matvec(const DiffTensor<T>& w, const DiffTensor<T>& y) {
  if (w.rank() != 2 || y.rank() != 1 || w.rows() != y.size()) {
    throw Error("transposed_matvec: dimension mismatch " + shape_string(w.shape()) + "^T * " +
                shape_string(y.shape()));
  }
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  std::vector<T> out(n);
  detail::VecMap<T>(out.data(), n).noalias() =
      detail::ConstMatMap<T>(w.value().data(), m, n).transpose() *
      detail::ConstVecMap<T>(y.value().data(), m);
  return make_op_result<T>(Shape{n}, std::move(out), {w, y}, [m, n](detail::Node<T>& node) {
    auto& pw = *node.parents[0];
    auto& py = *node.parents[1];
    detail::ConstVecMap<T> g(node.grad.data(), n);
    if (pw.requires_grad) {
      detail::MatMap<T>(pw.grad.data(), m, n).noalias() +=
          detail::ConstVecMap<T>(py.value.data(), m) * g.transpose();
    }
    if (py.requires_grad) {
      detail::VecMap<T>(py.grad.data(), m).noalias() +=
          detail::ConstMatMap<T>(pw.value.data(), m, n) * g;
    }
  });
}

template <std::floating_point T>
DiffTensor<T> concat(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  detail::require_vector("concat", a);
  detail::require_vector("concat", b);
  const std::size_t na = a.size();
  std::vector<T> out;
  out.reserve(na + b.size());
  out.insert(out.end(), a.value().begin(), a.value().end());
  out.insert(out.end(), b.value().begin(), b.value().end());
  const std::size_t total = out.size();
  return make_op_result<T>(Shape{total}, std::move(out), {a, b}, [na](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < na; ++i) pa.grad[i] += n.grad[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < pb.grad.size(); ++i) pb.grad[i] += n.grad[na + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Probability ops.

template <std::floating_point T>
DiffTensor<T> softmax(const DiffTensor<T>& z) {
  detail::require_vector("softmax", z);
  if (z.size() == 0) throw Error("softmax: empty input");
  detail::require_finite("softmax", z);
  const auto v = z.value();
  const T top = *std::max_element(v.begin(), v.end());
  std::vector<T> out(v.size());
  T total{0};
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - top);
    total += out[i];
  }
  for (auto& p : out) p /= total;
  return make_op_result<T>(z.shape(), std::move(out), {z}, [](detail::Node<T>& n) {
    auto& pz = *n.parents[0];
    T inner{0};
    for (std::size_t i = 0; i < n.grad.size(); ++i) inner += n.grad[i] * n.value[i];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      pz.grad[i] += n.value[i] * (n.grad[i] - inner);
    }
  });
}

/// -log softmax(z)[label].
template <std::floating_point T>
DiffTensor<T> cross_entropy(const DiffTensor<T>& logits, std::size_t label) {
  detail::require_vector("cross_entropy", logits);
  if (label >= logits.size()) {
    throw Error("cross_entropy: label " + std::to_string(label) + " out of range " +
                std::to_string(logits.size()));
  }
  detail::require_finite("cross_entropy", logits);
  const auto v = logits.value();
  const T top = *std::max_element(v.begin(), v.end());
  T total{0};
  for (T x : v) total += std::exp(x - top);
  const T log_norm = top + std::log(total);
  return make_op_result<T>(
      Shape{}, std::vector<T>{log_norm - v[label]}, {logits},
      [label, log_norm](detail::Node<T>& n) {
        auto& pz = *n.parents[0];
        const T g = n.grad[0];
        for (std::size_t i = 0; i < pz.value.size(); ++i) {
          const T p = std::exp(pz.value[i] - log_norm);
          pz.grad[i] += g * (p - (i == label ? T{1} : T{0}));
        }
      });
}

/// Sum over c of weights[c] * BCE(probs[c], targets[c]); probabilities are
/// clamped to [1e-7, 1 - 1e-7] and clamped entries pass no gradient.
template <std::floating_point T>
DiffTensor<T> weighted_bce(const DiffTensor<T>& probs, std::span<const T> targets,
                           std::span<const T> weights) {
  detail::require_vector("weighted_bce", probs);
  if (targets.size() != probs.size() || weights.size() != probs.size()) {
    throw Error("weighted_bce: expected " + std::to_string(probs.size()) +
                " targets and weights");
  }
  constexpr T lo = T(1e-7);
  constexpr T hi = T(1) - T(1e-7);
  T loss{0};
  for (std::size_t c = 0; c < probs.size(); ++c) {
    const T l = targets[c];
    if (l != T{0} && l != T{1}) throw Error("weighted_bce: non-binary target");
    const T p = std::clamp(probs[c], lo, hi);
    loss -= weights[c] * (l * std::log(p) + (T{1} - l) * std::log(T{1} - p));
  }
  std::vector<T> l(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  return make_op_result<T>(
      Shape{}, std::vector<T>{loss}, {probs},
      [l = std::move(l), w = std::move(w)](detail::Node<T>& n) {
        auto& pp = *n.parents[0];
        const T g = n.grad[0];
        for (std::size_t c = 0; c < pp.value.size(); ++c) {
          const T p = pp.value[c];
          if (p < lo || p > hi) continue;
          pp.grad[c] += g * w[c] * (-l[c] / p + (T{1} - l[c]) / (T{1} - p));
        }
      });
}

// ---------------------------------------------------------------------------
// Distances. Mean absolute difference; the subgradient at a tie is 0.

template <std::floating_point T>
DiffTensor<T> l1_distance(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  detail::require_same_shape("l1_distance", a, b);
  if (a.size() == 0) throw Error("l1_distance: empty input");
  const T inv = T{1} / static_cast<T>(a.size());
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return make_op_result<T>(Shape{}, std::vector<T>{s * inv}, {a, b}, [inv](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const T g = n.grad[0] * inv;
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      const T d = pa.value[i] - pb.value[i];
      const T sgn = d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0});
      if (pa.requires_grad) pa.grad[i] += g * sgn;
      if (pb.requires_grad) pb.grad[i] -= g * sgn;
    }
  });
}

/// Mean absolute distance from x to every row of M (rows x n); one entry per row.
template <std::floating_point T>
DiffTensor<T> row_l1_distances(const DiffTensor<T>& rows, const DiffTensor<T>& x) {
  if (rows.rank() != 2 || x.rank() != 1 || rows.cols() != x.size() || x.size() == 0) {
    throw Error("row_l1_distances: dimension mismatch " + shape_string(rows.shape()) + " vs " +
                shape_string(x.shape()));
  }
  const std::size_t m = rows.rows();
  const std::size_t n = rows.cols();
  const T inv = T{1} / static_cast<T>(n);
  std::vector<T> out(m);
  const auto mv = rows.value();
  const auto xv = x.value();
  for (std::size_t r = 0; r < m; ++r) {
    T s{0};
    const T* row = mv.data() + r * n;
    for (std::size_t k = 0; k < n; ++k) s += std::abs(xv[k] - row[k]);
    out[r] = s * inv;
  }
  return make_op_result<T>(Shape{m}, std::move(out), {rows, x}, [m, n, inv](detail::Node<T>& nd) {
    auto& pm = *nd.parents[0];
    auto& px = *nd.parents[1];
    for (std::size_t r = 0; r < m; ++r) {
      const T g = nd.grad[r] * inv;
      if (g == T{0}) continue;
      const T* row = pm.value.data() + r * n;
      T* row_grad = pm.grad.data() + r * n;
      for (std::size_t k = 0; k < n; ++k) {
        const T d = px.value[k] - row[k];
        const T sgn = d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0});
        if (px.requires_grad) px.grad[k] += g * sgn;
        if (pm.requires_grad) row_grad[k] -= g * sgn;
      }
    }
  });
}

// ---------------------------------------------------------------------------

/// Reverse sweep from a one-element loss. Leaf gradients accumulate across
/// calls; intermediate gradients are reset at the start of each sweep.
template <std::floating_point T>
void backward(const DiffTensor<T>& loss) {
  if (loss.size() != 1) {
    throw Error("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  using NodeT = detail::Node<T>;
  NodeT* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.contains(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* node : order) {
    if (node->backward) std::fill(node->grad.begin(), node->grad.end(), T{0});
  }
  root->grad[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

}  // namespace sgg::numerics
