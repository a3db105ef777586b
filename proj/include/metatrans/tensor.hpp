#pragma once

// Dense 2-D tensors (64-bit) with define-by-run reverse-mode autodiff.
//
// Every forward operation records a node holding the output values, the
// parent nodes, and a closure that scatters the output gradient back into
// the parents. backward() walks the recorded graph once in reverse
// topological order and accumulates into grad buffers (it never
// overwrites). Graphs are rebuilt on every forward pass.
//
// Layout is row-major and time-major: a sequence of T frames with d
// features is a T x d matrix, so a temporal permutation is a row
// permutation. Broadcasting is limited to (n x d) op (1 x d) and
// scalar op tensor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace metatrans {

// Error taxonomy shared across the library.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily; same length as value
  bool requires_grad = false;
  bool needs_grad = false;  // requires_grad or downstream of such a node
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backprop;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Records closures only while enabled; evaluation-only code paths can
// switch it off per thread to skip graph construction.
class GradMode {
 public:
  static bool& enabled() {
    thread_local bool e = true;
    return e;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  Tensor(std::vector<int> shape, std::vector<double> data,
         bool requires_grad = false) {
    std::size_t n = 1;
    for (int s : shape) {
      if (s <= 0) throw DimensionError("tensor dimensions must be positive");
      n *= static_cast<std::size_t>(s);
    }
    if (n != data.size()) {
      throw DimensionError("shape " + detail::shape_str(shape) +
                           " does not match data length " +
                           std::to_string(data.size()));
    }
    detail::check_finite(data, "tensor construction");
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
    node_->needs_grad = requires_grad;
  }

  static Tensor zeros(int r, int c, bool requires_grad = false) {
    return Tensor({r, c}, std::vector<double>(std::size_t(r) * c, 0.0),
                  requires_grad);
  }
  static Tensor full(int r, int c, double v, bool requires_grad = false) {
    return Tensor({r, c}, std::vector<double>(std::size_t(r) * c, v),
                  requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1, 1}, {v}, requires_grad);
  }
  static Tensor row(std::vector<double> v, bool requires_grad = false) {
    int d = static_cast<int>(v.size());
    return Tensor({1, d}, std::move(v), requires_grad);
  }
  static Tensor matrix(int r, int c, std::vector<double> data,
                       bool requires_grad = false) {
    return Tensor({r, c}, std::move(data), requires_grad);
  }
  static Tensor uniform(int r, int c, double lo, double hi,
                        std::mt19937_64& rng, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> data(std::size_t(r) * c);
    for (auto& x : data) x = dist(rng);
    return Tensor({r, c}, std::move(data), requires_grad);
  }
  static Tensor gaussian(int r, int c, double mean, double stddev,
                         std::mt19937_64& rng, bool requires_grad = false) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<double> data(std::size_t(r) * c);
    for (auto& x : data) x = dist(rng);
    return Tensor({r, c}, std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const NodePtr& node() const { return node_; }

  const std::vector<int>& shape() const { return require().shape; }
  int rows() const { return require().shape.at(0); }
  int cols() const { return require().shape.at(1); }
  std::size_t numel() const { return require().value.size(); }

  const std::vector<double>& data() const { return require().value; }

  // Leaf-only mutation (parameter updates, finite-difference probes).
  // Mutating a leaf invalidates graphs previously recorded from it.
  std::vector<double>& data_mut() {
    TensorNode& n = require();
    if (!n.parents.empty()) {
      throw ContractError("data_mut() is only valid on leaf tensors");
    }
    return n.value;
  }

  bool requires_grad() const { return require().requires_grad; }
  bool has_grad() const { return require().grad.size() == numel(); }
  const std::vector<double>& grad() const {
    const TensorNode& n = require();
    if (n.grad.size() != n.value.size()) {
      throw ContractError("tensor has no gradient; run backward() first");
    }
    return n.grad;
  }
  void zero_grad() { require().grad.assign(numel(), 0.0); }

  double item() const {
    const TensorNode& n = require();
    if (n.value.size() != 1) {
      throw ContractError("item() requires a scalar tensor");
    }
    return n.value[0];
  }
  double at(int r, int c) const {
    const TensorNode& n = require();
    return n.value[std::size_t(r) * n.shape.at(1) + c];
  }

  // Copy of the values with no graph attached.
  Tensor detach() const {
    const TensorNode& n = require();
    return Tensor(n.shape, n.value, false);
  }

 private:
  TensorNode& require() {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
  }
  const TensorNode& require() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
  }

  NodePtr node_;
};

namespace detail {

inline NodePtr new_node(std::vector<int> shape, std::vector<double> value,
                        std::vector<NodePtr> parents, const char* op) {
  check_finite(value, op);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) needs = needs || p->needs_grad;
  }
  n->needs_grad = needs;
  if (needs) n->parents = std::move(parents);
  return n;
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw DimensionError(std::string(op) + " expects a 2-D tensor, got " +
                         shape_str(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic.

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "add");
  detail::require_2d(b, "add");
  const int ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  const bool same = (ar == br && ac == bc);
  const bool rowb = (br == 1 && bc == ac && ar >= 1);
  if (!same && !rowb) {
    throw DimensionError("add: incompatible shapes " +
                         detail::shape_str(a.shape()) + " and " +
                         detail::shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  } else {
    for (int i = 0; i < ar; ++i)
      for (int j = 0; j < ac; ++j)
        out[std::size_t(i) * ac + j] = av[std::size_t(i) * ac + j] + bv[j];
  }
  auto n = detail::new_node({ar, ac}, std::move(out), {a.node(), b.node()},
                            "add");
  if (n->needs_grad) {
    NodePtr pa = a.node(), pb = b.node();
    n->backprop = [pa, pb, ar, ac, same](TensorNode& self) {
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        if (same) {
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] += self.grad[i];
        } else {
          for (int i = 0; i < ar; ++i)
            for (int j = 0; j < ac; ++j)
              pb->grad[j] += self.grad[std::size_t(i) * ac + j];
        }
      }
    };
  }
  return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "sub");
  detail::require_2d(b, "sub");
  const int ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  const bool same = (ar == br && ac == bc);
  const bool rowb = (br == 1 && bc == ac && ar >= 1);
  if (!same && !rowb) {
    throw DimensionError("sub: incompatible shapes " +
                         detail::shape_str(a.shape()) + " and " +
                         detail::shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  } else {
    for (int i = 0; i < ar; ++i)
      for (int j = 0; j < ac; ++j)
        out[std::size_t(i) * ac + j] = av[std::size_t(i) * ac + j] - bv[j];
  }
  auto n = detail::new_node({ar, ac}, std::move(out), {a.node(), b.node()},
                            "sub");
  if (n->needs_grad) {
    NodePtr pa = a.node(), pb = b.node();
    n->backprop = [pa, pb, ar, ac, same](TensorNode& self) {
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        if (same) {
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] -= self.grad[i];
        } else {
          for (int i = 0; i < ar; ++i)
            for (int j = 0; j < ac; ++j)
              pb->grad[j] -= self.grad[std::size_t(i) * ac + j];
        }
      }
    };
  }
  return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "mul");
  detail::require_2d(b, "mul");
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ, " +
                         detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto n = detail::new_node(a.shape(), std::move(out), {a.node(), b.node()},
                            "mul");
  if (n->needs_grad) {
    NodePtr pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](TensorNode& self) {
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->value[i];
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i] * pa->value[i];
      }
    };
  }
  return Tensor(n);
}

inline Tensor scale(const Tensor& a, double k) {
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * k;
  auto n = detail::new_node(a.shape(), std::move(out), {a.node()}, "scale");
  if (n->needs_grad) {
    NodePtr pa = a.node();
    n->backprop = [pa, k](TensorNode& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * k;
    };
  }
  return Tensor(n);
}

inline Tensor add_scalar(const Tensor& a, double k) {
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + k;
  auto n = detail::new_node(a.shape(), std::move(out), {a.node()},
                            "add_scalar");
  if (n->needs_grad) {
    NodePtr pa = a.node();
    n->backprop = [pa](TensorNode& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i];
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Matrix operations.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const int m = a.rows(), k = a.cols(), k2 = b.rows(), p = b.cols();
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions disagree, " +
                         detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  }
  std::vector<double> out(std::size_t(m) * p, 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int i = 0; i < m; ++i) {
    for (int t = 0; t < k; ++t) {
      const double aik = av[std::size_t(i) * k + t];
      const double* brow = &bv[std::size_t(t) * p];
      double* orow = &out[std::size_t(i) * p];
      for (int j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  }
  auto n =
      detail::new_node({m, p}, std::move(out), {a.node(), b.node()}, "matmul");
  if (n->needs_grad) {
    NodePtr pa = a.node(), pb = b.node();
    n->backprop = [pa, pb, m, k, p](TensorNode& self) {
      if (pa->needs_grad) {
        pa->ensure_grad();
        // dA = dC . B^T
        for (int i = 0; i < m; ++i)
          for (int t = 0; t < k; ++t) {
            double acc = 0.0;
            const double* grow = &self.grad[std::size_t(i) * p];
            const double* brow = &pb->value[std::size_t(t) * p];
            for (int j = 0; j < p; ++j) acc += grow[j] * brow[j];
            pa->grad[std::size_t(i) * k + t] += acc;
          }
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        // dB = A^T . dC
        for (int t = 0; t < k; ++t)
          for (int i = 0; i < m; ++i) {
            const double ait = pa->value[std::size_t(i) * k + t];
            const double* grow = &self.grad[std::size_t(i) * p];
            double* brow = &pb->grad[std::size_t(t) * p];
            for (int j = 0; j < p; ++j) brow[j] += ait * grow[j];
          }
      }
    };
  }
  return Tensor(n);
}

inline Tensor transpose(const Tensor& a) {
  detail::require_2d(a, "transpose");
  const int r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[std::size_t(j) * r + i] = av[std::size_t(i) * c + j];
  auto n = detail::new_node({c, r}, std::move(out), {a.node()}, "transpose");
  if (n->needs_grad) {
    NodePtr pa = a.node();
    n->backprop = [pa, r, c](TensorNode& self) {
      pa->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          pa->grad[std::size_t(i) * c + j] += self.grad[std::size_t(j) * r + i];
    };
  }
  return Tensor(n);
}

inline Tensor concat_cols(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ContractError("concat_cols: empty input list");
  const int r = xs.front().rows();
  int total = 0;
  std::vector<NodePtr> parents;
  parents.reserve(xs.size());
  for (const auto& x : xs) {
    detail::require_2d(x, "concat_cols");
    if (x.rows() != r) {
      throw DimensionError("concat_cols: row counts differ");
    }
    total += x.cols();
    parents.push_back(x.node());
  }
  std::vector<double> out(std::size_t(r) * total);
  int off = 0;
  for (const auto& x : xs) {
    const int c = x.cols();
    const auto& v = x.data();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        out[std::size_t(i) * total + off + j] = v[std::size_t(i) * c + j];
    off += c;
  }
  std::vector<int> widths;
  for (const auto& x : xs) widths.push_back(x.cols());
  auto n = detail::new_node({r, total}, std::move(out), std::move(parents),
                            "concat_cols");
  if (n->needs_grad) {
    std::vector<NodePtr> ps = n->parents;
    n->backprop = [ps, widths, r, total](TensorNode& self) {
      int off = 0;
      for (std::size_t h = 0; h < ps.size(); ++h) {
        const int c = widths[h];
        if (ps[h]->needs_grad) {
          ps[h]->ensure_grad();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              ps[h]->grad[std::size_t(i) * c + j] +=
                  self.grad[std::size_t(i) * total + off + j];
        }
        off += c;
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization.

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = av[i] > 0.0 ? av[i] : 0.0;
  auto n = detail::new_node(a.shape(), std::move(out), {a.node()}, "relu");
  if (n->needs_grad) {
    NodePtr pa = a.node();
    n->backprop = [pa](TensorNode& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (pa->value[i] > 0.0) pa->grad[i] += self.grad[i];
    };
  }
  return Tensor(n);
}

// Custom elementwise map with caller-supplied derivative. Also the hook used
// by tests to install a deliberately wrong rule as a negative control.
inline Tensor unary_map(const Tensor& a, const std::function<double(double)>& f,
                        const std::function<double(double)>& df,
                        const char* name = "unary_map") {
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto n = detail::new_node(a.shape(), std::move(out), {a.node()}, name);
  if (n->needs_grad) {
    NodePtr pa = a.node();
    n->backprop = [pa, df](TensorNode& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * df(pa->value[i]);
    };
  }
  return Tensor(n);
}

// Row-wise softmax with max subtraction. Each output row is nonnegative and
// sums to 1.
inline Tensor softmax_rows(const Tensor& a) {
  detail::require_2d(a, "softmax_rows");
  const int r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (int i = 0; i < r; ++i) {
    const double* in = &av[std::size_t(i) * c];
    double* o = &out[std::size_t(i) * c];
    double mx = in[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (int j = 0; j < c; ++j) o[j] /= sum;
  }
  auto n = detail::new_node({r, c}, std::move(out), {a.node()},
                            "softmax_rows");
  if (n->needs_grad) {
    NodePtr pa = a.node();
    n->backprop = [pa, r, c](TensorNode& self) {
      pa->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* y = &self.value[std::size_t(i) * c];
        const double* dy = &self.grad[std::size_t(i) * c];
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += dy[j] * y[j];
        double* dx = &pa->grad[std::size_t(i) * c];
        for (int j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return Tensor(n);
}

// Layer normalization per time row over its feature dimension, followed by
// a learned per-feature gain and bias. Uses population variance.
inline Tensor layer_norm_feature(const Tensor& x, const Tensor& gain,
                                 const Tensor& bias, double eps) {
  detail::require_2d(x, "layer_norm_feature");
  if (eps <= 0.0) throw ContractError("layer_norm_feature: eps must be > 0");
  const int r = x.rows(), c = x.cols();
  if (gain.numel() != static_cast<std::size_t>(c) ||
      bias.numel() != static_cast<std::size_t>(c)) {
    throw DimensionError("layer_norm_feature: gain/bias must have length d");
  }
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(r);
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  for (int i = 0; i < r; ++i) {
    const double* in = &xv[std::size_t(i) * c];
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += in[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double dv = in[j] - mean;
      var += dv * dv;
    }
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    double* xh = &xhat[std::size_t(i) * c];
    double* o = &out[std::size_t(i) * c];
    for (int j = 0; j < c; ++j) {
      xh[j] = (in[j] - mean) * inv;
      o[j] = xh[j] * gv[j] + bv[j];
    }
  }
  auto n = detail::new_node({r, c}, std::move(out),
                            {x.node(), gain.node(), bias.node()},
                            "layer_norm_feature");
  if (n->needs_grad) {
    NodePtr px = x.node(), pg = gain.node(), pb = bias.node();
    n->backprop = [px, pg, pb, xhat = std::move(xhat),
                   inv_std = std::move(inv_std), r, c](TensorNode& self) {
      for (int i = 0; i < r; ++i) {
        const double* dy = &self.grad[std::size_t(i) * c];
        const double* xh = &xhat[std::size_t(i) * c];
        if (pg->needs_grad) {
          pg->ensure_grad();
          for (int j = 0; j < c; ++j) pg->grad[j] += dy[j] * xh[j];
        }
        if (pb->needs_grad) {
          pb->ensure_grad();
          for (int j = 0; j < c; ++j) pb->grad[j] += dy[j];
        }
        if (px->needs_grad) {
          px->ensure_grad();
          // h_j = dy_j * gain_j; dx = inv*(h - mean(h) - xhat*mean(h*xhat))
          double mean_h = 0.0, mean_hx = 0.0;
          for (int j = 0; j < c; ++j) {
            const double h = dy[j] * pg->value[j];
            mean_h += h;
            mean_hx += h * xh[j];
          }
          mean_h /= c;
          mean_hx /= c;
          double* dx = &px->grad[std::size_t(i) * c];
          for (int j = 0; j < c; ++j) {
            const double h = dy[j] * pg->value[j];
            dx[j] += inv_std[i] * (h - mean_h - xh[j] * mean_hx);
          }
        }
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Pooling and broadcast helpers.

// Column means over the time rows: (T x d) -> (1 x d). The gradient spreads
// 1/T to every row.
inline Tensor mean_pool_time(const Tensor& x) {
  detail::require_2d(x, "mean_pool_time");
  const int r = x.rows(), c = x.cols();
  std::vector<double> out(c, 0.0);
  const auto& xv = x.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[j] += xv[std::size_t(i) * c + j];
  for (int j = 0; j < c; ++j) out[j] /= r;
  auto n = detail::new_node({1, c}, std::move(out), {x.node()},
                            "mean_pool_time");
  if (n->needs_grad) {
    NodePtr px = x.node();
    n->backprop = [px, r, c](TensorNode& self) {
      px->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          px->grad[std::size_t(i) * c + j] += self.grad[j] / r;
    };
  }
  return Tensor(n);
}

// (1 x d) -> (n x d) by repetition; the gradient sums over the repeated rows.
inline Tensor repeat_rows(const Tensor& x, int n_rows) {
  detail::require_2d(x, "repeat_rows");
  if (x.rows() != 1) throw DimensionError("repeat_rows expects a 1 x d tensor");
  if (n_rows < 1) throw DimensionError("repeat_rows: count must be >= 1");
  const int c = x.cols();
  std::vector<double> out(std::size_t(n_rows) * c);
  const auto& xv = x.data();
  for (int i = 0; i < n_rows; ++i)
    for (int j = 0; j < c; ++j) out[std::size_t(i) * c + j] = xv[j];
  auto n = detail::new_node({n_rows, c}, std::move(out), {x.node()},
                            "repeat_rows");
  if (n->needs_grad) {
    NodePtr px = x.node();
    n->backprop = [px, n_rows, c](TensorNode& self) {
      px->ensure_grad();
      for (int i = 0; i < n_rows; ++i)
        for (int j = 0; j < c; ++j)
          px->grad[j] += self.grad[std::size_t(i) * c + j];
    };
  }
  return Tensor(n);
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto n = detail::new_node({1, 1}, {s}, {x.node()}, "sum_all");
  if (n->needs_grad) {
    NodePtr px = x.node();
    n->backprop = [px](TensorNode& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < px->grad.size(); ++i)
        px->grad[i] += self.grad[0];
    };
  }
  return Tensor(n);
}

// Mean of a list of scalar tensors; used to average per-sample losses.
inline Tensor mean_of(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ContractError("mean_of: empty list");
  double s = 0.0;
  std::vector<NodePtr> parents;
  parents.reserve(scalars.size());
  for (const auto& t : scalars) {
    if (t.numel() != 1) throw ContractError("mean_of expects scalar tensors");
    s += t.item();
    parents.push_back(t.node());
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  auto n = detail::new_node({1, 1}, {s * inv}, std::move(parents), "mean_of");
  if (n->needs_grad) {
    std::vector<NodePtr> ps = n->parents;
    n->backprop = [ps, inv](TensorNode& self) {
      for (const auto& p : ps) {
        if (!p->needs_grad) continue;
        p->ensure_grad();
        p->grad[0] += self.grad[0] * inv;
      }
    };
  }
  return Tensor(n);
}

// Identity forward; backward multiplies the upstream gradient by -lambda.
inline Tensor gradient_reversal(const Tensor& x, double lambda) {
  if (lambda < 0.0) throw ContractError("gradient_reversal: lambda must be >= 0");
  auto n = detail::new_node(x.shape(), x.data(), {x.node()},
                            "gradient_reversal");
  if (n->needs_grad) {
    NodePtr px = x.node();
    n->backprop = [px, lambda](TensorNode& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        px->grad[i] += -lambda * self.grad[i];
    };
  }
  return Tensor(n);
}

// Mean cross-entropy from logits. logits is (n x C); labels holds one class
// index in [0, C) per row. Forward uses log-sum-exp with max subtraction.
inline Tensor cross_entropy_logits(const Tensor& logits,
                                   const std::vector<int>& labels) {
  detail::require_2d(logits, "cross_entropy_logits");
  const int n_rows = logits.rows(), c = logits.cols();
  if (static_cast<int>(labels.size()) != n_rows) {
    throw DimensionError("cross_entropy_logits: one label per row required");
  }
  for (int y : labels) {
    if (y < 0 || y >= c) {
      throw ContractError("cross_entropy_logits: label out of range");
    }
  }
  const auto& lv = logits.data();
  double total = 0.0;
  for (int i = 0; i < n_rows; ++i) {
    const double* in = &lv[std::size_t(i) * c];
    double mx = in[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(in[j] - mx);
    total += (mx + std::log(sum)) - in[labels[i]];
  }
  auto n = detail::new_node({1, 1}, {total / n_rows}, {logits.node()},
                            "cross_entropy_logits");
  if (n->needs_grad) {
    NodePtr pl = logits.node();
    std::vector<int> ls = labels;
    n->backprop = [pl, ls, n_rows, c](TensorNode& self) {
      pl->ensure_grad();
      const double up = self.grad[0] / n_rows;
      for (int i = 0; i < n_rows; ++i) {
        const double* in = &pl->value[std::size_t(i) * c];
        double mx = in[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(in[j] - mx);
        double* dx = &pl->grad[std::size_t(i) * c];
        for (int j = 0; j < c; ++j) {
          const double p = std::exp(in[j] - mx) / sum;
          dx[j] += up * (p - (j == ls[i] ? 1.0 : 0.0));
        }
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Reverse pass.

// Populates grad buffers for every tensor reachable from the scalar root.
// Contributions accumulate; tensors consumed twice receive the sum.
inline void backward(const Tensor& root) {
  const NodePtr& r = root.node();
  if (!r) throw ContractError("backward: undefined root");
  if (r->numel() != 1) throw ContractError("backward requires a scalar root");
  if (!r->needs_grad) return;  // nothing trainable upstream

  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(r.get(), 0);
  seen.insert(r.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx++].get();
      if (p->needs_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  r->ensure_grad();
  r->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  double h = 0.0;
  double tol = 0.0;
  std::vector<GradCheckEntry> params;
};

// Compares the analytic gradient of f() w.r.t. each listed leaf parameter
// against central differences. The relative error divisor is floored at 1e-2
// so near-zero gradient entries are judged on absolute error.
inline GradCheckReport grad_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double h,
    double tol) {
  if (h <= 0.0 || tol <= 0.0) throw ContractError("grad_check: h, tol > 0");
  const double v1 = f().item();
  const double v2 = f().item();
  if (v1 != v2) {
    throw ContractError("grad_check: builder is not deterministic");
  }

  for (auto& [name, p] : params) {
    const_cast<Tensor&>(p).zero_grad();
  }
  Tensor root = f();
  backward(root);

  GradCheckReport report;
  report.h = h;
  report.tol = tol;
  for (const auto& [name, p] : params) {
    std::vector<double> analytic =
        p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0);
    Tensor param = p;  // shared handle; mutations hit the same node
    auto& data = param.data_mut();
    GradCheckEntry entry;
    entry.name = name;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      double fp, fm;
      {
        NoGradGuard ng;
        data[i] = saved + h;
        fp = f().item();
        data[i] = saved - h;
        fm = f().item();
        data[i] = saved;
      }
      const double fd = (fp - fm) / (2.0 * h);
      const double denom =
          std::max({std::fabs(analytic[i]), std::fabs(fd), 1e-2});
      entry.max_rel_err =
          std::max(entry.max_rel_err, std::fabs(analytic[i] - fd) / denom);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.params.push_back(std::move(entry));
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace metatrans
