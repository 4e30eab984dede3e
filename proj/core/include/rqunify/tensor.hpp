#pragma once

// Dense-tensor engine with reverse-mode autodiff. Tensors are handles to
// heap nodes; every op allocates a fresh node holding the value, parent
// links and a backward closure, so the tape is rebuilt on each forward
// pass. backward() topologically sorts the reachable subgraph and runs the
// closures in reverse order, accumulating gradients additively.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "rqunify/errors.hpp"

namespace rqunify {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Global toggle: when on, every op output is scanned for NaN/Inf and a
// NumericError naming the op is thrown. Off by default (training speed).
inline bool& numeric_check_enabled() {
  static bool enabled = false;
  return enabled;
}

template <typename S>
struct NodeT {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily by backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<NodeT<S>>> parents;
  std::function<void(NodeT<S>&)> backward_fn;  // adds into parents' grads

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <typename S>
class TensorT {
 public:
  using Node = NodeT<S>;
  using NodePtr = std::shared_ptr<Node>;

  TensorT() = default;
  explicit TensorT(NodePtr n) : n_(std::move(n)) {}

  static TensorT zeros(const Shape& shape, bool requires_grad = false) {
    return filled(shape, S(0), requires_grad);
  }

  static TensorT filled(const Shape& shape, S v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.assign(shape_numel(shape), v);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_data(const Shape& shape, std::vector<S> data,
                           bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ContractError("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(S v, bool requires_grad = false) {
    return from_data({}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return n_->numel(); }
  int64_t dim(int i) const { return n_->shape[i]; }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  std::vector<S>& data() { return n_->value; }
  const std::vector<S>& data() const { return n_->value; }
  std::vector<S>& grad() { return n_->grad; }
  const std::vector<S>& grad() const { return n_->grad; }
  bool has_grad() const { return !n_->grad.empty(); }

  S item() const {
    if (numel() != 1)
      throw ContractError("item() on tensor with numel " +
                          std::to_string(numel()));
    return n_->value[0];
  }

  void zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), S(0)); }

  NodePtr node() const { return n_; }

  // Drops history: returns a leaf sharing no graph edges with this tensor.
  TensorT detach() const {
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->requires_grad = false;
    return TensorT(std::move(n));
  }

 private:
  NodePtr n_;
};

namespace detail {

template <typename S>
void check_finite(const NodeT<S>& n) {
  if (!numeric_check_enabled()) return;
  for (S v : n.value)
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite value produced by op '") +
                         n.op + "'");
}

template <typename S>
std::shared_ptr<NodeT<S>> make_node(
    const char* op, Shape shape,
    std::vector<std::shared_ptr<NodeT<S>>> parents) {
  auto n = std::make_shared<NodeT<S>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value.resize(shape_numel(n->shape));
  n->parents = std::move(parents);
  for (auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

template <typename S>
using EMat =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

}  // namespace detail

// The tape: reverse topological order of the subgraph reachable from a
// root, each node exactly once.
template <typename S>
std::vector<NodeT<S>*> build_tape(NodeT<S>* root) {
  std::vector<NodeT<S>*> order;
  std::unordered_set<NodeT<S>*> seen;
  // Iterative postorder DFS; creation order of parents is preserved.
  std::vector<std::pair<NodeT<S>*, size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      NodeT<S>* p = node->parents[idx++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // topological: parents before children
}

template <typename S>
void backward(const TensorT<S>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(loss.shape()));
  NodeT<S>* root = loss.node().get();
  root->ensure_grad();
  root->grad[0] += S(1);
  auto tape = build_tape(root);
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    NodeT<S>* n = *it;
    if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ContractError("add shape mismatch: " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
  auto n = detail::make_node<S>("add", a.shape(), {a.node(), b.node()});
  for (int64_t i = 0; i < n->numel(); ++i)
    n->value[i] = a.data()[i] + b.data()[i];
  n->backward_fn = [](NodeT<S>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) p->grad[i] += self.grad[i];
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ContractError("sub shape mismatch: " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
  auto n = detail::make_node<S>("sub", a.shape(), {a.node(), b.node()});
  for (int64_t i = 0; i < n->numel(); ++i)
    n->value[i] = a.data()[i] - b.data()[i];
  n->backward_fn = [](NodeT<S>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pb->grad[i] -= self.grad[i];
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ContractError("mul shape mismatch: " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
  auto n = detail::make_node<S>("mul", a.shape(), {a.node(), b.node()});
  for (int64_t i = 0; i < n->numel(); ++i)
    n->value[i] = a.data()[i] * b.data()[i];
  n->backward_fn = [](NodeT<S>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i)
        pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i)
        pb->grad[i] += self.grad[i] * pa->value[i];
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  auto n = detail::make_node<S>("scale", a.shape(), {a.node()});
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = a.data()[i] * c;
  n->backward_fn = [c](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      p->grad[i] += self.grad[i] * c;
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& a, S c) {
  auto n = detail::make_node<S>("add_scalar", a.shape(), {a.node()});
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = a.data()[i] + c;
  n->backward_fn = [](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) p->grad[i] += self.grad[i];
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// Adds a length-C row vector to every row of an [R, C] matrix (bias add).
template <typename S>
TensorT<S> add_rowvec(const TensorT<S>& a, const TensorT<S>& v) {
  if (a.shape().size() != 2 || v.shape().size() != 1 ||
      a.dim(1) != v.dim(0))
    throw ContractError("add_rowvec expects [R,C] + [C], got " +
                        shape_str(a.shape()) + " + " + shape_str(v.shape()));
  const int64_t R = a.dim(0), C = a.dim(1);
  auto n = detail::make_node<S>("add_rowvec", a.shape(), {a.node(), v.node()});
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c)
      n->value[r * C + c] = a.data()[r * C + c] + v.data()[c];
  n->backward_fn = [R, C](NodeT<S>& self) {
    auto& pa = self.parents[0];
    auto& pv = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c)
          pv->grad[c] += self.grad[r * C + c];
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel())
    throw ContractError("reshape numel mismatch: " + shape_str(a.shape()) +
                        " -> " + shape_str(shape));
  auto n = detail::make_node<S>("reshape", shape, {a.node()});
  n->value = a.data();
  n->backward_fn = [](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) p->grad[i] += self.grad[i];
  };
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
  if (a.shape().size() != 2)
    throw ContractError("transpose expects 2-D, got " + shape_str(a.shape()));
  const int64_t R = a.dim(0), C = a.dim(1);
  auto n = detail::make_node<S>("transpose", {C, R}, {a.node()});
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) n->value[c * R + r] = a.data()[r * C + c];
  n->backward_fn = [R, C](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < C; ++c)
        p->grad[r * C + c] += self.grad[c * R + r];
  };
  return TensorT<S>(n);
}

// ---------------------------------------------------------------------------
// matmul — Eigen-backed GEMM; backward dA = dC*B^T, dB = A^T*dC.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    throw ContractError("matmul shape mismatch: " + shape_str(a.shape()) +
                        " x " + shape_str(b.shape()));
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  auto n = detail::make_node<S>("matmul", {M, N}, {a.node(), b.node()});
  detail::ECMap<S> A(a.data().data(), M, K), B(b.data().data(), K, N);
  detail::EMap<S>(n->value.data(), M, N).noalias() = A * B;
  n->backward_fn = [M, K, N](NodeT<S>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    detail::ECMap<S> dC(self.grad.data(), M, N);
    detail::ECMap<S> A(pa->value.data(), M, K), B(pb->value.data(), K, N);
    if (pa->requires_grad) {
      pa->ensure_grad();
      detail::EMap<S>(pa->grad.data(), M, K).noalias() += dC * B.transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      detail::EMap<S>(pb->grad.data(), K, N).noalias() += A.transpose() * dC;
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
  auto n = detail::make_node<S>("relu", a.shape(), {a.node()});
  for (int64_t i = 0; i < n->numel(); ++i)
    n->value[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
  n->backward_fn = [](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      if (p->value[i] > S(0)) p->grad[i] += self.grad[i];
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
  // tanh approximation
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  auto n = detail::make_node<S>("gelu", a.shape(), {a.node()});
  for (int64_t i = 0; i < n->numel(); ++i) {
    double x = a.data()[i];
    n->value[i] = S(0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x))));
  }
  n->backward_fn = [](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) {
      double x = p->value[i];
      double u = kC * (x + 0.044715 * x * x * x);
      double t = std::tanh(u);
      double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
      double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      p->grad[i] += self.grad[i] * S(d);
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  auto n = detail::make_node<S>("sigmoid", a.shape(), {a.node()});
  for (int64_t i = 0; i < n->numel(); ++i)
    n->value[i] = S(1) / (S(1) + std::exp(-a.data()[i]));
  n->backward_fn = [](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) {
      S y = self.value[i];
      p->grad[i] += self.grad[i] * y * (S(1) - y);
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> exp_op(const TensorT<S>& a) {
  auto n = detail::make_node<S>("exp", a.shape(), {a.node()});
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = std::exp(a.data()[i]);
  n->backward_fn = [](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      p->grad[i] += self.grad[i] * self.value[i];
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
  auto n = detail::make_node<S>("sum", Shape{}, {a.node()});
  n->value[0] = std::accumulate(a.data().begin(), a.data().end(), S(0));
  n->backward_fn = [](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (auto& g : p->grad) g += self.grad[0];
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> mean(const TensorT<S>& a) {
  return scale(sum(a), S(1) / S(a.numel()));
}

// Column-wise mean of an [R, C] matrix -> length-C vector (mean pooling).
template <typename S>
TensorT<S> mean_rows(const TensorT<S>& a) {
  if (a.shape().size() != 2)
    throw ContractError("mean_rows expects 2-D, got " + shape_str(a.shape()));
  const int64_t R = a.dim(0), C = a.dim(1);
  auto n = detail::make_node<S>("mean_rows", {C}, {a.node()});
  for (int64_t c = 0; c < C; ++c) {
    S acc = 0;
    for (int64_t r = 0; r < R; ++r) acc += a.data()[r * C + c];
    n->value[c] = acc / S(R);
  }
  n->backward_fn = [R, C](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < C; ++c)
        p->grad[r * C + c] += self.grad[c] / S(R);
  };
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ContractError("mse shape mismatch: " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
  auto n = detail::make_node<S>("mse", Shape{}, {a.node(), b.node()});
  S acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    S d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  n->value[0] = acc / S(a.numel());
  n->backward_fn = [](NodeT<S>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const int64_t N = pa->numel();
    S g = self.grad[0] * S(2) / S(N);
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < N; ++i)
        pa->grad[i] += g * (pa->value[i] - pb->value[i]);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < N; ++i)
        pb->grad[i] -= g * (pa->value[i] - pb->value[i]);
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// ---------------------------------------------------------------------------
// softmax / log-softmax / cross-entropy over the last axis
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> softmax(const TensorT<S>& a) {
  if (a.shape().empty())
    throw ContractError("softmax needs at least one axis");
  const int64_t C = a.shape().back();
  const int64_t R = a.numel() / C;
  for (S v : a.data())
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  auto n = detail::make_node<S>("softmax", a.shape(), {a.node()});
  for (int64_t r = 0; r < R; ++r) {
    const S* x = a.data().data() + r * C;
    S* y = n->value.data() + r * C;
    S m = *std::max_element(x, x + C);
    S z = 0;
    for (int64_t c = 0; c < C; ++c) {
      y[c] = std::exp(x[c] - m);
      z += y[c];
    }
    for (int64_t c = 0; c < C; ++c) y[c] /= z;
  }
  n->backward_fn = [R, C](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      const S* y = self.value.data() + r * C;
      const S* dy = self.grad.data() + r * C;
      S dot = 0;
      for (int64_t c = 0; c < C; ++c) dot += y[c] * dy[c];
      S* dx = p->grad.data() + r * C;
      for (int64_t c = 0; c < C; ++c) dx[c] += y[c] * (dy[c] - dot);
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> log_softmax(const TensorT<S>& a) {
  if (a.shape().empty())
    throw ContractError("log_softmax needs at least one axis");
  const int64_t C = a.shape().back();
  const int64_t R = a.numel() / C;
  auto n = detail::make_node<S>("log_softmax", a.shape(), {a.node()});
  for (int64_t r = 0; r < R; ++r) {
    const S* x = a.data().data() + r * C;
    S* y = n->value.data() + r * C;
    S m = *std::max_element(x, x + C);
    S z = 0;
    for (int64_t c = 0; c < C; ++c) z += std::exp(x[c] - m);
    S lz = m + std::log(z);
    for (int64_t c = 0; c < C; ++c) y[c] = x[c] - lz;
  }
  n->backward_fn = [R, C](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      const S* y = self.value.data() + r * C;
      const S* dy = self.grad.data() + r * C;
      S tot = 0;
      for (int64_t c = 0; c < C; ++c) tot += dy[c];
      S* dx = p->grad.data() + r * C;
      for (int64_t c = 0; c < C; ++c)
        dx[c] += dy[c] - std::exp(y[c]) * tot;
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// -log softmax(logits)[target] for a single logit row.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, int64_t target) {
  if (logits.shape().size() != 1)
    throw ContractError("cross_entropy expects a 1-D logit row, got " +
                        shape_str(logits.shape()));
  if (target < 0 || target >= logits.dim(0))
    throw ContractError("cross_entropy target " + std::to_string(target) +
                        " out of range [0, " + std::to_string(logits.dim(0)) +
                        ")");
  auto ls = log_softmax(logits);
  auto n = detail::make_node<S>("cross_entropy", Shape{}, {ls.node()});
  n->value[0] = -ls.data()[target];
  n->backward_fn = [target](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad[target] -= self.grad[0];
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// Summed cross-entropy over selected rows of an [R, C] logit matrix.
// Rows with target < 0 are skipped and contribute exactly zero.
template <typename S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits,
                              const std::vector<int64_t>& targets) {
  if (logits.shape().size() != 2 ||
      logits.dim(0) != static_cast<int64_t>(targets.size()))
    throw ContractError("cross_entropy_rows: logits " +
                        shape_str(logits.shape()) + " vs " +
                        std::to_string(targets.size()) + " targets");
  const int64_t C = logits.dim(1);
  for (int64_t t : targets)
    if (t >= C)
      throw ContractError("cross_entropy_rows target out of range");
  auto ls = log_softmax(logits);
  auto n = detail::make_node<S>("cross_entropy_rows", Shape{}, {ls.node()});
  S acc = 0;
  for (size_t r = 0; r < targets.size(); ++r)
    if (targets[r] >= 0) acc -= ls.data()[r * C + targets[r]];
  n->value[0] = acc;
  auto tgts = targets;
  n->backward_fn = [tgts, C](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t r = 0; r < tgts.size(); ++r)
      if (tgts[r] >= 0) p->grad[r * C + tgts[r]] -= self.grad[0];
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// ---------------------------------------------------------------------------
// Slicing / concatenation (2-D, by rows or columns)
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> slice_rows(const TensorT<S>& a, int64_t r0, int64_t r1) {
  if (a.shape().size() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1)
    throw ContractError("slice_rows bad range");
  const int64_t C = a.dim(1);
  auto n = detail::make_node<S>("slice_rows", {r1 - r0, C}, {a.node()});
  std::copy(a.data().begin() + r0 * C, a.data().begin() + r1 * C,
            n->value.begin());
  n->backward_fn = [r0, C](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      p->grad[r0 * C + i] += self.grad[i];
  };
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& a, int64_t c0, int64_t c1) {
  if (a.shape().size() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw ContractError("slice_cols bad range");
  const int64_t R = a.dim(0), C = a.dim(1), W = c1 - c0;
  auto n = detail::make_node<S>("slice_cols", {R, W}, {a.node()});
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < W; ++c)
      n->value[r * W + c] = a.data()[r * C + c0 + c];
  n->backward_fn = [R, C, W, c0](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < W; ++c)
        p->grad[r * C + c0 + c] += self.grad[r * W + c];
  };
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty");
  const int64_t R = parts[0].dim(0);
  int64_t C = 0;
  std::vector<std::shared_ptr<NodeT<S>>> ps;
  for (auto& p : parts) {
    if (p.shape().size() != 2 || p.dim(0) != R)
      throw ContractError("concat_cols row mismatch");
    C += p.dim(1);
    ps.push_back(p.node());
  }
  auto n = detail::make_node<S>("concat_cols", {R, C}, std::move(ps));
  int64_t off = 0;
  for (auto& p : parts) {
    const int64_t W = p.dim(1);
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < W; ++c)
        n->value[r * C + off + c] = p.data()[r * W + c];
    off += W;
  }
  n->backward_fn = [R, C](NodeT<S>& self) {
    int64_t off = 0;
    for (auto& p : self.parents) {
      const int64_t W = p->shape[1];
      if (p->requires_grad) {
        p->ensure_grad();
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < W; ++c)
            p->grad[r * W + c] += self.grad[r * C + off + c];
      }
      off += W;
    }
  };
  return TensorT<S>(n);
}

template <typename S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty");
  const int64_t C = parts[0].dim(1);
  int64_t R = 0;
  std::vector<std::shared_ptr<NodeT<S>>> ps;
  for (auto& p : parts) {
    if (p.shape().size() != 2 || p.dim(1) != C)
      throw ContractError("concat_rows col mismatch");
    R += p.dim(0);
    ps.push_back(p.node());
  }
  auto n = detail::make_node<S>("concat_rows", {R, C}, std::move(ps));
  int64_t off = 0;
  for (auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), n->value.begin() + off);
    off += p.numel();
  }
  n->backward_fn = [](NodeT<S>& self) {
    int64_t off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (int64_t i = 0; i < p->numel(); ++i)
          p->grad[i] += self.grad[off + i];
      }
      off += p->numel();
    }
  };
  return TensorT<S>(n);
}

// Row gather from a [K, C] table; backward scatter-adds. index < 0 yields a
// zero row (used for im2col padding).
template <typename S>
TensorT<S> gather_rows(const TensorT<S>& table,
                       const std::vector<int64_t>& idx) {
  if (table.shape().size() != 2)
    throw ContractError("gather_rows expects 2-D table");
  const int64_t K = table.dim(0), C = table.dim(1);
  for (int64_t i : idx)
    if (i >= K) throw ContractError("gather_rows index out of range");
  auto n = detail::make_node<S>(
      "gather_rows", {static_cast<int64_t>(idx.size()), C}, {table.node()});
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0) continue;  // zero row
    std::copy(table.data().begin() + idx[r] * C,
              table.data().begin() + (idx[r] + 1) * C,
              n->value.begin() + r * C);
  }
  auto ix = idx;
  n->backward_fn = [ix, C](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t r = 0; r < ix.size(); ++r) {
      if (ix[r] < 0) continue;
      for (int64_t c = 0; c < C; ++c)
        p->grad[ix[r] * C + c] += self.grad[r * C + c];
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis (per row), with gain and bias.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& a, const TensorT<S>& gain,
                      const TensorT<S>& bias, S eps = S(1e-5)) {
  const int64_t C = a.shape().back();
  const int64_t R = a.numel() / C;
  if (gain.numel() != C || bias.numel() != C)
    throw ContractError("layer_norm gain/bias size mismatch");
  auto n = detail::make_node<S>("layer_norm", a.shape(),
                                {a.node(), gain.node(), bias.node()});
  std::vector<S> mu(R), rstd(R);
  for (int64_t r = 0; r < R; ++r) {
    const S* x = a.data().data() + r * C;
    S m = 0;
    for (int64_t c = 0; c < C; ++c) m += x[c];
    m /= S(C);
    S v = 0;
    for (int64_t c = 0; c < C; ++c) v += (x[c] - m) * (x[c] - m);
    v /= S(C);
    mu[r] = m;
    rstd[r] = S(1) / std::sqrt(v + eps);
    S* y = n->value.data() + r * C;
    for (int64_t c = 0; c < C; ++c)
      y[c] = (x[c] - m) * rstd[r] * gain.data()[c] + bias.data()[c];
  }
  n->backward_fn = [R, C, mu, rstd](NodeT<S>& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    if (px->requires_grad) px->ensure_grad();
    if (pg->requires_grad) pg->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      const S* x = px->value.data() + r * C;
      const S* dy = self.grad.data() + r * C;
      // xhat and the two reduction terms
      S sum_dyg = 0, sum_dyg_xhat = 0;
      for (int64_t c = 0; c < C; ++c) {
        S xhat = (x[c] - mu[r]) * rstd[r];
        S dyg = dy[c] * pg->value[c];
        sum_dyg += dyg;
        sum_dyg_xhat += dyg * xhat;
      }
      for (int64_t c = 0; c < C; ++c) {
        S xhat = (x[c] - mu[r]) * rstd[r];
        if (px->requires_grad) {
          S dyg = dy[c] * pg->value[c];
          px->grad[r * C + c] +=
              rstd[r] * (dyg - sum_dyg / S(C) - xhat * sum_dyg_xhat / S(C));
        }
        if (pg->requires_grad) pg->grad[c] += dy[c] * xhat;
        if (pb->requires_grad) pb->grad[c] += dy[c];
      }
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// ---------------------------------------------------------------------------
// L2 row normalization (contrastive embeddings)
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> l2_normalize_rows(const TensorT<S>& a, S eps = S(1e-12)) {
  if (a.shape().size() != 2)
    throw ContractError("l2_normalize_rows expects 2-D");
  const int64_t R = a.dim(0), C = a.dim(1);
  auto n = detail::make_node<S>("l2_normalize_rows", a.shape(), {a.node()});
  std::vector<S> inv(R);
  for (int64_t r = 0; r < R; ++r) {
    const S* x = a.data().data() + r * C;
    S nrm = 0;
    for (int64_t c = 0; c < C; ++c) nrm += x[c] * x[c];
    nrm = std::sqrt(nrm);
    if (nrm < eps)
      throw NumericError("l2_normalize_rows: zero-norm embedding row " +
                         std::to_string(r));
    inv[r] = S(1) / nrm;
    for (int64_t c = 0; c < C; ++c) n->value[r * C + c] = x[c] * inv[r];
  }
  n->backward_fn = [R, C, inv](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      const S* y = self.value.data() + r * C;
      const S* dy = self.grad.data() + r * C;
      S dot = 0;
      for (int64_t c = 0; c < C; ++c) dot += y[c] * dy[c];
      for (int64_t c = 0; c < C; ++c)
        p->grad[r * C + c] += inv[r] * (dy[c] - y[c] * dot);
    }
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

// Straight-through: forward takes `replacement` values, backward routes the
// gradient unchanged into `pre`.
template <typename S>
TensorT<S> straight_through(const TensorT<S>& pre,
                            const std::vector<S>& replacement) {
  if (static_cast<int64_t>(replacement.size()) != pre.numel())
    throw ContractError("straight_through size mismatch");
  auto n = detail::make_node<S>("straight_through", pre.shape(), {pre.node()});
  n->value = replacement;
  n->backward_fn = [](NodeT<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) p->grad[i] += self.grad[i];
  };
  detail::check_finite(*n);
  return TensorT<S>(n);
}

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace rqunify
