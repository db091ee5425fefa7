#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap shared handle onto a Node. Every op that sees at least
// one input requiring gradient (while grad mode is on) records its inputs and
// a backward closure on the output node; Graph collects the reachable nodes
// and replays the closures in reverse construction order.
//
// Reductions accumulate in double regardless of the storage type.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace pathadapt {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline std::uint64_t next_seq() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}
inline int& no_grad_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth(); }
  ~NoGradGuard() { --detail::no_grad_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <class T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : n_(std::make_shared<Node<T>>()) {
    n_->data.assign(numel(shape), fill);
    n_->shape = std::move(shape);
    n_->seq = detail::next_seq();
  }
  Tensor(Shape shape, std::vector<T> values) : n_(std::make_shared<Node<T>>()) {
    if (values.size() != numel(shape))
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    n_->shape = std::move(shape);
    n_->data = std::move(values);
    n_->seq = detail::next_seq();
  }
  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::vector<T>(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t size() const { return n_->data.size(); }

  std::span<T> data() { return n_->data; }
  std::span<const T> data() const { return n_->data; }
  std::vector<T>& values() { return n_->data; }
  const std::vector<T>& values() const { return n_->data; }

  bool has_grad() const { return n_->grad.size() == n_->data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) n_->ensure_grad();
    return n_->grad;
  }
  std::span<T> grad_mut() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->data.size(), T(0)); }
  void clear_grad() { n_->grad.clear(); }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    n_->requires_grad = on;
    return *this;
  }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return n_->data[0];
  }
  T& operator[](std::size_t i) { return n_->data[i]; }
  T operator[](std::size_t i) const { return n_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return n_->data[r * n_->shape.back() + c]; }
  T at(std::size_t r, std::size_t c) const { return n_->data[r * n_->shape.back() + c]; }

  // Fresh leaf with copied data; no graph, no grad.
  Tensor detach() const { return Tensor(shape(), values()); }

  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& impl() const { return n_; }

  void backward() const;

 private:
  std::shared_ptr<Node<T>> n_;
};

// Nodes reachable from a root, in construction order.
template <class T>
class Graph {
 public:
  explicit Graph(const Tensor<T>& root) {
    std::unordered_set<const Node<T>*> seen;
    std::vector<Node<T>*> stack{root.node()};
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      if (!n->requires_grad || !seen.insert(n).second) continue;
      nodes_.push_back(n);
      for (const auto& in : n->inputs) stack.push_back(in.get());
    }
    std::sort(nodes_.begin(), nodes_.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->seq < b->seq; });
  }

  const std::vector<Node<T>*>& nodes() const { return nodes_; }

  // Seeds d(root)/d(root) = 1 (root must be a scalar) and replays backward
  // closures from the newest node to the oldest.
  void backward(const Tensor<T>& root) {
    if (root.size() != 1)
      throw DimensionError("backward() needs a scalar root, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;
    Node<T>* r = root.node();
    r->ensure_grad();
    r->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.size() == n->data.size()) n->backward_fn(*n);
    }
  }

 private:
  std::vector<Node<T>*> nodes_;
};

template <class T>
void Tensor<T>::backward() const {
  Graph<T> g(*this);
  g.backward(*this);
}

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ins) {
  if (!grad_enabled()) return false;
  for (const auto* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// Wraps raw output values into a tensor and, when needed, wires the graph.
template <class T, class Fn>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> ins, Fn&& backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (any_requires_grad<T>(ins)) {
    Node<T>* n = out.node();
    n->requires_grad = true;
    n->op = op;
    for (const auto* t : ins)
      if (t->defined()) n->inputs.push_back(t->impl());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return out;
}

template <class T>
inline T* grad_of(Node<T>* n) {
  if (!n || !n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

template <class T>
void require_rank2(const Tensor<T>& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

// y[m x n] = a[m x k] * b[k x n], double accumulators, no graph.
template <class T>
void gemm_nn(const T* a, const T* b, T* y, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(br[j]);
    }
    T* yr = y + i * n;
    if (accumulate)
      for (std::size_t j = 0; j < n; ++j) yr[j] += static_cast<T>(acc[j]);
    else
      for (std::size_t j = 0; j < n; ++j) yr[j] = static_cast<T>(acc[j]);
  }
}

template <class T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::require(b.dim(0) == k, "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                     " x " + shape_str(b.shape()));
  std::vector<T> y(m * n);
  detail::gemm_nn(a.data().data(), b.data().data(), y.data(), m, k, n, false);
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>({m, n}, std::move(y), "matmul", {&a, &b},
                                [an, bn, m, k, n](Node<T>& out) {
                                  const T* dy = out.grad.data();
                                  if (T* da = detail::grad_of(an)) {
                                    auto bt = detail::transposed(bn->data.data(), k, n);
                                    detail::gemm_nn(dy, bt.data(), da, m, n, k, true);
                                  }
                                  if (T* db = detail::grad_of(bn)) {
                                    auto at = detail::transposed(an->data.data(), m, k);
                                    detail::gemm_nn(at.data(), dy, db, k, m, n, true);
                                  }
                                });
}

// y = x W^T + b, the shape every dense layer uses. `bias` may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank2(x, "linear");
  detail::require_rank2(weight, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  detail::require(weight.dim(1) == in, "linear: input " + shape_str(x.shape()) +
                                           " does not fit weight " + shape_str(weight.shape()));
  if (bias.defined())
    detail::require(bias.size() == out_dim, "linear: bias " + shape_str(bias.shape()) +
                                                " does not fit weight " +
                                                shape_str(weight.shape()));
  std::vector<T> y(n * out_dim);
  auto wt = detail::transposed(weight.data().data(), out_dim, in);
  detail::gemm_nn(x.data().data(), wt.data(), y.data(), n, in, out_dim, false);
  if (bias.defined())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_dim; ++o) y[i * out_dim + o] += bias[o];
  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      {n, out_dim}, std::move(y), "linear", {&x, &weight, &bias},
      [xn, wn, bn, n, in, out_dim](Node<T>& out) {
        const T* dy = out.grad.data();
        if (T* dx = detail::grad_of(xn))
          detail::gemm_nn(dy, wn->data.data(), dx, n, out_dim, in, true);
        if (T* dw = detail::grad_of(wn)) {
          auto dyt = detail::transposed(dy, n, out_dim);
          detail::gemm_nn(dyt.data(), xn->data.data(), dw, out_dim, n, in, true);
        }
        if (T* db = detail::grad_of(bn)) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += dy[i * out_dim + o];
            db[o] += static_cast<T>(s);
          }
        }
      });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Node<T>* an = a.node();
  return detail::make_result<T>({c, r}, detail::transposed(a.data().data(), r, c), "transpose",
                                {&a}, [an, r, c](Node<T>& out) {
                                  T* da = detail::grad_of(an);
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j)
                                      da[i * c + j] += out.grad[j * r + i];
                                });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(numel(shape) == a.size(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Node<T>* an = a.node();
  return detail::make_result<T>(std::move(shape), a.values(), "reshape", {&a},
                                [an](Node<T>& out) {
                                  T* da = detail::grad_of(an);
                                  for (std::size_t i = 0; i < out.grad.size(); ++i)
                                    da[i] += out.grad[i];
                                });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "add");
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(y), "add", {&a, &b},
                                [an, bn](Node<T>& out) {
                                  for (Node<T>* in : {an, bn})
                                    if (T* d = detail::grad_of(in))
                                      for (std::size_t i = 0; i < out.grad.size(); ++i)
                                        d[i] += out.grad[i];
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "sub");
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(y), "sub", {&a, &b},
                                [an, bn](Node<T>& out) {
                                  if (T* d = detail::grad_of(an))
                                    for (std::size_t i = 0; i < out.grad.size(); ++i)
                                      d[i] += out.grad[i];
                                  if (T* d = detail::grad_of(bn))
                                    for (std::size_t i = 0; i < out.grad.size(); ++i)
                                      d[i] -= out.grad[i];
                                });
}

// Hadamard product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mul");
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(y), "mul", {&a, &b},
                                [an, bn](Node<T>& out) {
                                  if (T* d = detail::grad_of(an))
                                    for (std::size_t i = 0; i < out.grad.size(); ++i)
                                      d[i] += out.grad[i] * bn->data[i];
                                  if (T* d = detail::grad_of(bn))
                                    for (std::size_t i = 0; i < out.grad.size(); ++i)
                                      d[i] += out.grad[i] * an->data[i];
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * s;
  Node<T>* an = a.node();
  return detail::make_result<T>(a.shape(), std::move(y), "scale", {&a},
                                [an, s](Node<T>& out) {
                                  T* d = detail::grad_of(an);
                                  for (std::size_t i = 0; i < out.grad.size(); ++i)
                                    d[i] += out.grad[i] * s;
                                });
}

// x[n x d] + b[d] broadcast over rows; the only broadcast the library allows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require_rank2(x, "add_bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  detail::require(b.size() == d, "add_bias: bias " + shape_str(b.shape()) + " does not fit " +
                                     shape_str(x.shape()));
  std::vector<T> y(x.values());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] += b[j];
  Node<T>* xn = x.node();
  Node<T>* bn = b.node();
  return detail::make_result<T>(x.shape(), std::move(y), "add_bias", {&x, &b},
                                [xn, bn, n, d](Node<T>& out) {
                                  if (T* dx = detail::grad_of(xn))
                                    for (std::size_t i = 0; i < n * d; ++i) dx[i] += out.grad[i];
                                  if (T* db = detail::grad_of(bn))
                                    for (std::size_t j = 0; j < d; ++j) {
                                      double s = 0.0;
                                      for (std::size_t i = 0; i < n; ++i) s += out.grad[i * d + j];
                                      db[j] += static_cast<T>(s);
                                    }
                                });
}

namespace detail {
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& a, const char* op, F f, DF df) {
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(a[i]);
  Node<T>* an = a.node();
  return make_result<T>(a.shape(), std::move(y), op, {&a}, [an, df](Node<T>& out) {
    T* d = grad_of(an);
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      d[i] += out.grad[i] * df(an->data[i], out.data[i]);
  });
}
}  // namespace detail

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      a, "gelu",
      [](T x) { return static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2))); },
      [](T x, T) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * double(x) * x);
        return static_cast<T>(cdf + x * pdf);
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid", [](T x) { return static_cast<T>(1.0 / (1.0 + std::exp(-double(x)))); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(
      a, "tanh", [](T x) { return static_cast<T>(std::tanh(double(x))); },
      [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  double s = 0.0;
  for (T v : a.data()) s += v;
  Node<T>* an = a.node();
  return detail::make_result<T>({1}, {static_cast<T>(s)}, "sum", {&a}, [an](Node<T>& out) {
    T* d = detail::grad_of(an);
    for (std::size_t i = 0; i < an->data.size(); ++i) d[i] += out.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  detail::require(a.size() > 0, "mean of an empty tensor");
  double s = 0.0;
  for (T v : a.data()) s += v;
  const double n = static_cast<double>(a.size());
  Node<T>* an = a.node();
  return detail::make_result<T>({1}, {static_cast<T>(s / n)}, "mean", {&a},
                                [an, n](Node<T>& out) {
                                  T* d = detail::grad_of(an);
                                  const T g = static_cast<T>(out.grad[0] / n);
                                  for (std::size_t i = 0; i < an->data.size(); ++i) d[i] += g;
                                });
}

// Softmax of a vector (axis 0) or along either axis of a matrix. Max-shifted,
// denominators in double.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(x.rank() == 1 || x.rank() == 2,
                  "softmax: expected rank 1 or 2, got " + shape_str(x.shape()));
  detail::require(axis < x.rank(), "softmax: axis " + std::to_string(axis) +
                                       " out of range for " + shape_str(x.shape()));
  for (T v : x.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw std::domain_error("softmax: non-finite input");
  const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
  const std::size_t cols = x.rank() == 1 ? x.dim(0) : x.dim(1);
  // Iterate "lines" along the axis: count lines, line length, stride.
  const bool along_cols = x.rank() == 1 || axis == 1;
  const std::size_t lines = along_cols ? rows : cols;
  const std::size_t len = along_cols ? cols : rows;
  const std::size_t stride = along_cols ? 1 : cols;
  auto base = [=](std::size_t l) { return along_cols ? l * cols : l; };

  std::vector<T> y(x.size());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t o = base(l);
    T mx = x[o];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x[o + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += std::exp(double(x[o + i * stride]) - mx);
    for (std::size_t i = 0; i < len; ++i)
      y[o + i * stride] = static_cast<T>(std::exp(double(x[o + i * stride]) - mx) / z);
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(y), "softmax", {&x},
                                [xn, lines, len, stride, base](Node<T>& out) {
                                  T* dx = detail::grad_of(xn);
                                  for (std::size_t l = 0; l < lines; ++l) {
                                    const std::size_t o = base(l);
                                    double dot = 0.0;
                                    for (std::size_t i = 0; i < len; ++i)
                                      dot += double(out.grad[o + i * stride]) *
                                             out.data[o + i * stride];
                                    for (std::size_t i = 0; i < len; ++i) {
                                      const std::size_t k = o + i * stride;
                                      dx[k] += static_cast<T>(out.data[k] *
                                                              (out.grad[k] - dot));
                                    }
                                  }
                                });
}

// Row-wise layer normalization (biased variance) followed by gamma/beta.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-5)) {
  detail::require_rank2(x, "layernorm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  detail::require(gamma.size() == d && beta.size() == d,
                  "layernorm: gamma/beta must have width " + std::to_string(d));
  detail::require(eps > T(0), "layernorm: eps must be positive");
  std::vector<T> y(n * d);
  std::vector<double> xhat(n * d), inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[i * d + j];
    mu /= double(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x[i * d + j] - mu;
      var += c * c;
    }
    var /= double(d);
    inv_std[i] = 1.0 / std::sqrt(var + double(eps));
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (x[i * d + j] - mu) * inv_std[i];
      y[i * d + j] = static_cast<T>(xhat[i * d + j] * gamma[j] + beta[j]);
    }
  }
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(y), "layernorm", {&x, &gamma, &beta},
      [xn, gn, bn, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& out) {
        const T* dy = out.grad.data();
        if (T* dg = detail::grad_of(gn))
          for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += dy[i * d + j] * xhat[i * d + j];
            dg[j] += static_cast<T>(s);
          }
        if (T* db = detail::grad_of(bn))
          for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += dy[i * d + j];
            db[j] += static_cast<T>(s);
          }
        if (T* dx = detail::grad_of(xn))
          for (std::size_t i = 0; i < n; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double g = double(dy[i * d + j]) * gn->data[j];
              s1 += g;
              s2 += g * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double g = double(dy[i * d + j]) * gn->data[j];
              dx[i * d + j] += static_cast<T>(
                  inv_std[i] * (g - s1 / double(d) - xhat[i * d + j] * s2 / double(d)));
            }
          }
      });
}

// Mean softmax cross-entropy of logits[n x C] against integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  detail::require(labels.size() == n, "cross_entropy: " + std::to_string(labels.size()) +
                                          " labels for " + std::to_string(n) + " rows");
  detail::require(n > 0, "cross_entropy: empty batch");
  std::vector<double> prob(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(c) + ")");
    double mx = logits[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, double(logits[i * c + j]));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(double(logits[i * c + j]) - mx);
    for (std::size_t j = 0; j < c; ++j)
      prob[i * c + j] = std::exp(double(logits[i * c + j]) - mx) / z;
    loss += -(double(logits[i * c + y]) - mx - std::log(z));
  }
  loss /= double(n);
  Node<T>* ln = logits.node();
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result<T>(
      {1}, {static_cast<T>(loss)}, "cross_entropy", {&logits},
      [ln, n, c, prob = std::move(prob), lab = std::move(lab)](Node<T>& out) {
        T* d = detail::grad_of(ln);
        const double g = double(out.grad[0]) / double(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double t = (static_cast<int>(j) == lab[i]) ? 1.0 : 0.0;
            d[i * c + j] += static_cast<T>(g * (prob[i * c + j] - t));
          }
      });
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  return cross_entropy(logits, std::span<const int>(labels));
}

// Scales every row of x[n x d] to unit L2 norm. Zero rows are an error.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  detail::require_rank2(x, "l2_normalize_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> norms(n);
  std::vector<T> y(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += double(x[i * d + j]) * x[i * d + j];
    if (!(s > 0.0)) throw std::domain_error("l2_normalize_rows: zero-norm row " + std::to_string(i));
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = static_cast<T>(x[i * d + j] / norms[i]);
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(y), "l2_normalize_rows", {&x},
                                [xn, n, d, norms = std::move(norms)](Node<T>& out) {
                                  T* dx = detail::grad_of(xn);
                                  for (std::size_t i = 0; i < n; ++i) {
                                    double dot = 0.0;
                                    for (std::size_t j = 0; j < d; ++j)
                                      dot += double(out.grad[i * d + j]) * out.data[i * d + j];
                                    for (std::size_t j = 0; j < d; ++j)
                                      dx[i * d + j] += static_cast<T>(
                                          (out.grad[i * d + j] - out.data[i * d + j] * dot) /
                                          norms[i]);
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Row plumbing

// Stacks matrices with equal width on top of each other.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t d = parts.front().dim(1);
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    detail::require(p.dim(1) == d, "concat_rows: width mismatch " + shape_str(p.shape()) +
                                       " vs " + shape_str(parts.front().shape()));
    n += p.dim(0);
  }
  std::vector<T> y;
  y.reserve(n * d);
  for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
  Tensor<T> out({n, d}, std::move(y));
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    Node<T>* on = out.node();
    on->requires_grad = true;
    on->op = "concat_rows";
    std::vector<Node<T>*> ins;
    for (const auto& p : parts) {
      on->inputs.push_back(p.impl());
      ins.push_back(p.node());
    }
    on->backward_fn = [ins](Node<T>& o) {
      std::size_t off = 0;
      for (Node<T>* in : ins) {
        if (T* d = detail::grad_of(in))
          for (std::size_t i = 0; i < in->data.size(); ++i) d[i] += o.grad[off + i];
        off += in->data.size();
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  detail::require_rank2(x, "gather_rows");
  const std::size_t d = x.dim(1);
  std::vector<T> y(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < x.dim(0), "gather_rows: row " + std::to_string(rows[i]) +
                                            " out of range for " + shape_str(x.shape()));
    std::copy_n(x.data().data() + rows[i] * d, d, y.data() + i * d);
  }
  Node<T>* xn = x.node();
  return detail::make_result<T>({rows.size(), d}, std::move(y), "gather_rows", {&x},
                                [xn, rows, d](Node<T>& out) {
                                  T* dx = detail::grad_of(xn);
                                  for (std::size_t i = 0; i < rows.size(); ++i)
                                    for (std::size_t j = 0; j < d; ++j)
                                      dx[rows[i] * d + j] += out.grad[i * d + j];
                                });
}

// Interleaves rows from two matrices: output row dest_a[i] <- a row i,
// output row dest_b[i] <- b row i. Every output row must be covered once.
template <class T>
Tensor<T> assemble_rows(const Tensor<T>& a, const std::vector<std::size_t>& dest_a,
                        const Tensor<T>& b, const std::vector<std::size_t>& dest_b) {
  const std::size_t n = dest_a.size() + dest_b.size();
  const std::size_t d = a.defined() ? a.dim(1) : b.dim(1);
  if (a.defined()) detail::require(a.dim(0) == dest_a.size() && a.dim(1) == d, "assemble_rows: a");
  if (b.defined()) detail::require(b.dim(0) == dest_b.size() && b.dim(1) == d, "assemble_rows: b");
  std::vector<T> y(n * d);
  std::vector<char> hit(n, 0);
  auto place = [&](const Tensor<T>& src, const std::vector<std::size_t>& dest) {
    for (std::size_t i = 0; i < dest.size(); ++i) {
      detail::require(dest[i] < n && !hit[dest[i]], "assemble_rows: bad destination index");
      hit[dest[i]] = 1;
      std::copy_n(src.data().data() + i * d, d, y.data() + dest[i] * d);
    }
  };
  if (!dest_a.empty()) place(a, dest_a);
  if (!dest_b.empty()) place(b, dest_b);
  Node<T>* an = a.defined() ? a.node() : nullptr;
  Node<T>* bn = b.defined() ? b.node() : nullptr;
  return detail::make_result<T>({n, d}, std::move(y), "assemble_rows", {&a, &b},
                                [an, bn, dest_a, dest_b, d](Node<T>& out) {
                                  auto back = [&](Node<T>* in, const std::vector<std::size_t>& dest) {
                                    if (T* g = detail::grad_of(in))
                                      for (std::size_t i = 0; i < dest.size(); ++i)
                                        for (std::size_t j = 0; j < d; ++j)
                                          g[i * d + j] += out.grad[dest[i] * d + j];
                                  };
                                  back(an, dest_a);
                                  back(bn, dest_b);
                                });
}

// ---------------------------------------------------------------------------
// Helpers shared by tests and training code

template <class T, class U>
Tensor<U> cast(const Tensor<T>& t) {
  std::vector<U> v(t.data().begin(), t.data().end());
  Tensor<U> out(t.shape(), std::move(v));
  out.set_requires_grad(t.requires_grad());
  return out;
}

}  // namespace pathadapt
