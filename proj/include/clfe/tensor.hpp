#pragma once

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// Operations record themselves on the tape that is active on the calling
// thread (see Tape::Scope) whenever at least one operand requires a gradient.
// With no active tape the same functions run as plain numerics, which is how
// evaluation passes avoid paying for the tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clfe/errors.hpp"

namespace clfe {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  Tape* tape = nullptr;
  long tape_id = -1;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

// Folds the branch taken by every piecewise op into a signature while a
// gradient check is probing. Two evaluations with different signatures
// straddle a kink and the finite difference is meaningless there.
struct KinkProbe {
  bool active = false;
  std::uint64_t signature = 1469598103934665603ULL;

  void fold(int branch) {
    if (!active) return;
    signature ^= static_cast<std::uint64_t>(branch + 3);
    signature *= 1099511628211ULL;
  }
};

inline thread_local KinkProbe kink_probe;
inline thread_local Tape* active_tape = nullptr;

}  // namespace detail

/// Handle to a dense row-major tensor. Copies share storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return from(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor filled(Shape shape, double v) {
    std::vector<double> d(shape_numel(shape), v);
    return from(std::move(shape), std::move(d));
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> data, bool requires_grad = false) {
    return from({r, c}, std::move(data), requires_grad);
  }
  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->value[i * n + i] = 1.0;
    return t;
  }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  /// Leading dimension; a 1-D tensor of length n is treated as n x 1.
  std::size_t rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
  /// Product of the trailing dimensions; stays defined when rows() == 0.
  std::size_t cols() const {
    std::size_t c = 1;
    for (std::size_t i = 1; i < node_->shape.size(); ++i) c *= node_->shape[i];
    return c;
  }

  std::span<const double> data() const& { return node_->value; }
  /// A temporary may hold the last reference to its storage.
  std::span<const double> data() const&& = delete;
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }
  long tape_id() const { return node_->tape_id; }

  /// Deep copy with no tape history.
  Tensor clone(bool requires_grad = false) const { return from(shape(), node_->value, requires_grad); }
  /// Untracked copy under a new shape of equal element count.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel()) throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
    auto n = std::make_shared<detail::Node>(*node_);
    n->shape = std::move(s);
    n->tape = nullptr;
    n->tape_id = -1;
    return Tensor(std::move(n));
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Ordered log of differentiable operations. Records are appended in
/// execution order, so every record's inputs precede it.
class Tape {
 public:
  struct Record {
    const char* op;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    std::function<void()> backward;
  };

  /// Makes a tape the recording target of the current thread for its lifetime.
  class Scope {
   public:
    explicit Scope(Tape& t) : previous_(detail::active_tape) { detail::active_tape = &t; }
    ~Scope() { detail::active_tape = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  /// Disables recording on the current thread for its lifetime.
  class Pause {
   public:
    Pause() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
    ~Pause() { detail::active_tape = previous_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape; }

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  bool consumed() const { return consumed_; }

  void record(const char* op, std::vector<std::shared_ptr<detail::Node>> inputs,
              const std::shared_ptr<detail::Node>& output, std::function<void()> backward) {
    output->requires_grad = true;
    output->tape = this;
    output->tape_id = static_cast<long>(records_.size());
    records_.push_back({op, std::move(inputs), output, std::move(backward)});
  }

  /// Populates grad on every requires_grad tensor reachable from loss.
  void backward(const Tensor& loss) {
    if (!loss) throw ContractError("backward on empty tensor");
    if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (loss.node()->tape != this) throw ContractError("loss was not recorded on this tape");
    if (consumed_) throw ContractError("backward already ran on this tape; reset() before reuse");
    consumed_ = true;
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
  }

  void reset() {
    for (auto& r : records_) {
      r.output->tape = nullptr;
      r.output->tape_id = -1;
    }
    records_.clear();
    consumed_ = false;
  }

  ~Tape() { reset(); }

 private:
  std::vector<Record> records_;
  bool consumed_ = false;
};

/// Runs backward on the tape that recorded loss.
inline void backward(const Tensor& loss) {
  if (!loss || loss.node()->tape == nullptr) throw ContractError("loss is not attached to a tape");
  loss.node()->tape->backward(loss);
}

/// Constant CSR matrix used as the left operand of spmm.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> indices;
  std::vector<double> values;

  double dense_at(std::size_t r, std::size_t c) const {
    for (std::size_t k = offsets[r]; k < offsets[r + 1]; ++k)
      if (indices[k] == c) return values[k];
    return 0.0;
  }
};

namespace detail {

inline bool wants_grad(std::initializer_list<const Tensor*> xs) {
  if (active_tape == nullptr) return false;
  for (const Tensor* x : xs)
    if (x->requires_grad()) return true;
  return false;
}

inline void check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
  for (double v : t.data())
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + " produced a non-finite value");
#else
  (void)t;
  (void)op;
#endif
}

// Registers out on the active tape when any input needs a gradient. The
// backward callback receives the output gradient.
template <class F>
Tensor finish(const char* op, std::initializer_list<const Tensor*> inputs, Tensor out, F&& fn) {
  check_finite(out, op);
  if (!wants_grad(inputs)) return out;
  std::vector<std::shared_ptr<Node>> in;
  in.reserve(inputs.size());
  for (const Tensor* x : inputs) in.push_back(x->node());
  auto out_node = out.node();
  Node* raw = out_node.get();
  active_tape->record(op, std::move(in), out_node,
                      [raw, fn = std::forward<F>(fn)]() { fn(std::span<const double>(raw->grad)); });
  return out;
}

// Gradient buffer of an input, or nullptr when it does not take gradients.
inline std::vector<double>* gbuf(const std::shared_ptr<Node>& n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> c(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::finish("matmul", {&a, &b}, Tensor::matrix(m, n, std::move(c)), [an, bn, m, k, n](std::span<const double> g) {
    if (auto* ga = detail::gbuf(an)) {
      const double* B = bn->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
          (*ga)[i * k + p] += s;
        }
    }
    if (auto* gb = detail::gbuf(bn)) {
      const double* A = an->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          double* row = gb->data() + p * n;
          for (std::size_t j = 0; j < n; ++j) row[j] += aip * g[i * n + j];
        }
    }
  });
}

/// Constant sparse matrix times dense matrix. s must outlive the backward pass.
inline Tensor spmm(const SparseMatrix& s, const Tensor& x) {
  detail::require_2d(x, "spmm");
  if (x.rows() != s.cols)
    throw DimensionError("spmm: sparse matrix has " + std::to_string(s.cols) + " columns, dense operand " +
                         shape_str(x.shape()));
  const std::size_t d = x.cols();
  std::vector<double> out(s.rows * d, 0.0);
  const double* X = x.data().data();
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t k = s.offsets[r]; k < s.offsets[r + 1]; ++k) {
      const double v = s.values[k];
      const double* xr = X + s.indices[k] * d;
      double* o = out.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) o[j] += v * xr[j];
    }
  auto xn = x.node();
  const SparseMatrix* sp = &s;
  return detail::finish("spmm", {&x}, Tensor::matrix(s.rows, d, std::move(out)), [xn, sp, d](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t r = 0; r < sp->rows; ++r)
      for (std::size_t k = sp->offsets[r]; k < sp->offsets[r + 1]; ++k) {
        const double v = sp->values[k];
        double* gr = gx.data() + sp->indices[k] * d;
        for (std::size_t j = 0; j < d; ++j) gr[j] += v * g[r * d + j];
      }
  });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "concat_cols");
  detail::require_2d(b, "concat_cols");
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  if (b.rows() != m)
    throw DimensionError("concat_cols: row counts differ, " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<double> out(m * (p + q));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().data() + i * p, p, out.data() + i * (p + q));
    std::copy_n(b.data().data() + i * q, q, out.data() + i * (p + q) + p);
  }
  auto an = a.node(), bn = b.node();
  return detail::finish("concat_cols", {&a, &b}, Tensor::matrix(m, p + q, std::move(out)),
                        [an, bn, m, p, q](std::span<const double> g) {
                          if (auto* ga = detail::gbuf(an))
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < p; ++j) (*ga)[i * p + j] += g[i * (p + q) + j];
                          if (auto* gb = detail::gbuf(bn))
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < q; ++j) (*gb)[i * q + j] += g[i * (p + q) + p + j];
                        });
}

/// Columns [begin, begin+count) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_2d(x, "slice_cols");
  const std::size_t m = x.rows(), w = x.cols();
  if (begin + count > w) throw DimensionError("slice_cols: range exceeds width " + std::to_string(w));
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(x.data().data() + i * w + begin, count, out.data() + i * count);
  auto xn = x.node();
  return detail::finish("slice_cols", {&x}, Tensor::matrix(m, count, std::move(out)),
                        [xn, m, w, begin, count](std::span<const double> g) {
                          auto& gx = xn->grad_buffer();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < count; ++j) gx[i * w + begin + j] += g[i * count + j];
                        });
}

inline std::pair<Tensor, Tensor> split_cols(const Tensor& x, std::size_t left_width) {
  return {slice_cols(x, 0, left_width), slice_cols(x, left_width, x.cols() - left_width)};
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::finish("add", {&a, &b}, Tensor::from(a.shape(), std::move(out)), [an, bn](std::span<const double> g) {
    if (auto* ga = detail::gbuf(an))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = detail::gbuf(bn))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto an = a.node(), bn = b.node();
  return detail::finish("sub", {&a, &b}, Tensor::from(a.shape(), std::move(out)), [an, bn](std::span<const double> g) {
    if (auto* ga = detail::gbuf(an))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = detail::gbuf(bn))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return detail::finish("mul", {&a, &b}, Tensor::from(a.shape(), std::move(out)), [an, bn](std::span<const double> g) {
    if (auto* ga = detail::gbuf(an))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bn->value[i];
    if (auto* gb = detail::gbuf(bn))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * an->value[i];
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  auto an = a.node(), bn = b.node();
  return detail::finish("div", {&a, &b}, Tensor::from(a.shape(), std::move(out)), [an, bn](std::span<const double> g) {
    if (auto* ga = detail::gbuf(an))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bn->value[i];
    if (auto* gb = detail::gbuf(bn))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double bi = bn->value[i];
        (*gb)[i] -= g[i] * an->value[i] / (bi * bi);
      }
  });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
  auto xn = x.node();
  return detail::finish("scale", {&x}, Tensor::from(x.shape(), std::move(out)), [xn, c](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
  });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + c;
  auto xn = x.node();
  return detail::finish("add_scalar", {&x}, Tensor::from(x.shape(), std::move(out)), [xn](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// x (m x n) plus a bias row b (length n) broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  detail::require_2d(x, "add_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (b.numel() != n)
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match width of " + shape_str(x.shape()));
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
  auto xn = x.node(), bn = b.node();
  return detail::finish("add_bias", {&x, &b}, Tensor::matrix(m, n, std::move(out)), [xn, bn, m, n](std::span<const double> g) {
    if (auto* gx = detail::gbuf(xn))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    if (auto* gb = detail::gbuf(bn))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
  });
}

/// Multiplies row i by the constant factor f[i].
inline Tensor scale_rows(const Tensor& x, std::span<const double> f) {
  const std::size_t m = x.rows(), n = x.cols();
  if (f.size() != m) throw DimensionError("scale_rows: " + std::to_string(f.size()) + " factors for " + std::to_string(m) + " rows");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * f[i];
  auto xn = x.node();
  std::vector<double> fs(f.begin(), f.end());
  return detail::finish("scale_rows", {&x}, Tensor::from(x.shape(), std::move(out)),
                        [xn, fs = std::move(fs), n](std::span<const double> g) {
                          auto& gx = xn->grad_buffer();
                          for (std::size_t i = 0; i < fs.size(); ++i)
                            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * fs[i];
                        });
}

enum class Activation { identity, relu, sigmoid, tanh, leaky_relu };

inline constexpr double kLeakyReluSlope = 0.2;

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    detail::kink_probe.fold(x[i] > 0.0);
    out[i] = x[i] <= 0.0 ? 0.0 : x[i];  // NaN passes through
  }
  auto xn = x.node();
  return detail::finish("relu", {&x}, Tensor::from(x.shape(), std::move(out)), [xn](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn->value[i] > 0.0) gx[i] += g[i];
  });
}

inline Tensor leaky_relu(const Tensor& x, double alpha = kLeakyReluSlope) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    detail::kink_probe.fold(x[i] > 0.0);
    out[i] = x[i] > 0.0 ? x[i] : alpha * x[i];
  }
  auto xn = x.node();
  return detail::finish("leaky_relu", {&x}, Tensor::from(x.shape(), std::move(out)), [xn, alpha](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xn->value[i] > 0.0 ? g[i] : alpha * g[i];
  });
}

inline double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node();
  detail::Node* ynode = y.node().get();
  return detail::finish("sigmoid", {&x}, y, [xn, ynode](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = ynode->value[i];
      gx[i] += g[i] * s * (1.0 - s);
    }
  });
}

inline Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node();
  detail::Node* ynode = y.node().get();
  return detail::finish("tanh", {&x}, y, [xn, ynode](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = ynode->value[i];
      gx[i] += g[i] * (1.0 - t * t);
    }
  });
}

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
    case Activation::leaky_relu: return leaky_relu(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Graph-indexed ops

/// Row i of the result is x[idx[i]].
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(idx.size() * d);
  for (std::size_t e = 0; e < idx.size(); ++e) {
    if (idx[e] >= n) throw IndexError("gather_rows: index " + std::to_string(idx[e]) + " >= " + std::to_string(n));
    std::copy_n(x.data().data() + idx[e] * d, d, out.data() + e * d);
  }
  auto xn = x.node();
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return detail::finish("gather_rows", {&x}, Tensor::matrix(idx.size(), d, std::move(out)),
                        [xn, ids = std::move(ids), d](std::span<const double> g) {
                          auto& gx = xn->grad_buffer();
                          for (std::size_t e = 0; e < ids.size(); ++e)
                            for (std::size_t j = 0; j < d; ++j) gx[ids[e] * d + j] += g[e * d + j];
                        });
}

/// Row i of the result sums message rows whose destination is i, accumulated
/// in ascending edge order.
inline Tensor scatter_add(const Tensor& messages, std::span<const std::size_t> dst, std::size_t n) {
  const std::size_t E = messages.rows(), d = messages.cols();
  if (dst.size() != E) throw DimensionError("scatter_add: " + std::to_string(dst.size()) + " destinations for " + std::to_string(E) + " messages");
  std::vector<double> out(n * d, 0.0);
  for (std::size_t e = 0; e < E; ++e) {
    if (dst[e] >= n) throw IndexError("scatter_add: destination " + std::to_string(dst[e]) + " >= " + std::to_string(n));
    double* o = out.data() + dst[e] * d;
    const double* m = messages.data().data() + e * d;
    for (std::size_t j = 0; j < d; ++j) o[j] += m[j];
  }
  auto mn = messages.node();
  std::vector<std::size_t> ids(dst.begin(), dst.end());
  return detail::finish("scatter_add", {&messages}, Tensor::matrix(n, d, std::move(out)),
                        [mn, ids = std::move(ids), d](std::span<const double> g) {
                          auto& gm = mn->grad_buffer();
                          for (std::size_t e = 0; e < ids.size(); ++e)
                            for (std::size_t j = 0; j < d; ++j) gm[e * d + j] += g[ids[e] * d + j];
                        });
}

/// Softmax over the entries that share a segment id, independently for each
/// column. Accepts [E] or [E x H].
inline Tensor segment_softmax(const Tensor& scores, std::span<const std::size_t> segments, std::size_t num_segments) {
  const std::size_t E = scores.rows(), H = scores.cols();
  if (segments.size() != E) throw DimensionError("segment_softmax: segment vector length differs from score count");
  std::vector<double> mx(num_segments * H, -std::numeric_limits<double>::infinity());
  for (std::size_t e = 0; e < E; ++e) {
    if (segments[e] >= num_segments) throw IndexError("segment_softmax: segment id out of range");
    for (std::size_t h = 0; h < H; ++h) mx[segments[e] * H + h] = std::max(mx[segments[e] * H + h], scores[e * H + h]);
  }
  std::vector<double> out(E * H), denom(num_segments * H, 0.0);
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t h = 0; h < H; ++h) {
      out[e * H + h] = std::exp(scores[e * H + h] - mx[segments[e] * H + h]);
      denom[segments[e] * H + h] += out[e * H + h];
    }
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t h = 0; h < H; ++h) out[e * H + h] /= denom[segments[e] * H + h];
  Tensor y = Tensor::from(scores.shape(), std::move(out));
  auto sn = scores.node();
  detail::Node* yn = y.node().get();
  std::vector<std::size_t> seg(segments.begin(), segments.end());
  return detail::finish("segment_softmax", {&scores}, y, [sn, yn, seg = std::move(seg), num_segments, H](std::span<const double> g) {
    // d s_e = y_e (g_e - sum_{e' in seg} g_e' y_e')
    std::vector<double> dot(num_segments * H, 0.0);
    const auto& y = yn->value;
    for (std::size_t e = 0; e < seg.size(); ++e)
      for (std::size_t h = 0; h < H; ++h) dot[seg[e] * H + h] += g[e * H + h] * y[e * H + h];
    auto& gs = sn->grad_buffer();
    for (std::size_t e = 0; e < seg.size(); ++e)
      for (std::size_t h = 0; h < H; ++h) gs[e * H + h] += y[e * H + h] * (g[e * H + h] - dot[seg[e] * H + h]);
  });
}

/// Per-head dot product: x is n x (H*k), a is H x k, result n x H.
inline Tensor head_dot(const Tensor& x, const Tensor& a) {
  detail::require_2d(x, "head_dot");
  detail::require_2d(a, "head_dot");
  const std::size_t n = x.rows(), H = a.rows(), k = a.cols();
  if (x.cols() != H * k) throw DimensionError("head_dot: " + shape_str(x.shape()) + " incompatible with heads " + shape_str(a.shape()));
  std::vector<double> out(n * H, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t h = 0; h < H; ++h) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += x[i * H * k + h * k + j] * a[h * k + j];
      out[i * H + h] = s;
    }
  auto xn = x.node(), an = a.node();
  return detail::finish("head_dot", {&x, &a}, Tensor::matrix(n, H, std::move(out)), [xn, an, n, H, k](std::span<const double> g) {
    if (auto* gx = detail::gbuf(xn))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t j = 0; j < k; ++j) (*gx)[i * H * k + h * k + j] += g[i * H + h] * an->value[h * k + j];
    if (auto* ga = detail::gbuf(an))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t j = 0; j < k; ++j) (*ga)[h * k + j] += g[i * H + h] * xn->value[i * H * k + h * k + j];
  });
}

/// Scales each k-wide column block of x (E x (B*k)) by the matching column of s (E x B).
inline Tensor mul_col_blocks(const Tensor& x, const Tensor& s) {
  const std::size_t E = x.rows(), B = s.cols();
  if (s.rows() != E || B == 0 || x.cols() % B != 0)
    throw DimensionError("mul_col_blocks: " + shape_str(x.shape()) + " incompatible with " + shape_str(s.shape()));
  const std::size_t k = x.cols() / B;
  std::vector<double> out(x.numel());
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < k; ++j) out[e * B * k + b * k + j] = x[e * B * k + b * k + j] * s[e * B + b];
  auto xn = x.node(), sn = s.node();
  return detail::finish("mul_col_blocks", {&x, &s}, Tensor::matrix(E, B * k, std::move(out)), [xn, sn, E, B, k](std::span<const double> g) {
    if (auto* gx = detail::gbuf(xn))
      for (std::size_t e = 0; e < E; ++e)
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t j = 0; j < k; ++j) (*gx)[e * B * k + b * k + j] += g[e * B * k + b * k + j] * sn->value[e * B + b];
    if (auto* gs = detail::gbuf(sn))
      for (std::size_t e = 0; e < E; ++e)
        for (std::size_t b = 0; b < B; ++b) {
          double acc = 0.0;
          for (std::size_t j = 0; j < k; ++j) acc += g[e * B * k + b * k + j] * xn->value[e * B * k + b * k + j];
          (*gs)[e * B + b] += acc;
        }
  });
}

/// Sums the B column blocks of x (n x (B*k)) into n x k.
inline Tensor sum_col_blocks(const Tensor& x, std::size_t blocks) {
  const std::size_t n = x.rows();
  if (blocks == 0 || x.cols() % blocks != 0) throw DimensionError("sum_col_blocks: width not divisible by block count");
  const std::size_t k = x.cols() / blocks;
  std::vector<double> out(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t j = 0; j < k; ++j) out[i * k + j] += x[i * blocks * k + b * k + j];
  auto xn = x.node();
  return detail::finish("sum_col_blocks", {&x}, Tensor::matrix(n, k, std::move(out)), [xn, n, blocks, k](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t j = 0; j < k; ++j) gx[i * blocks * k + b * k + j] += g[i * k + j];
  });
}

/// Gaussian mixture weights w[e,k] = exp(-1/2 sum_p (u[e,p]-mu[k,p])^2 / exp(log_sigma[k,p]))
/// for constant pseudo-coordinates u (E x P).
inline Tensor gaussian_kernel(const Tensor& pseudo, const Tensor& mu, const Tensor& log_sigma) {
  detail::require_2d(pseudo, "gaussian_kernel");
  detail::require_same(mu, log_sigma, "gaussian_kernel");
  const std::size_t E = pseudo.rows(), P = pseudo.cols(), K = mu.rows();
  if (mu.cols() != P) throw DimensionError("gaussian_kernel: mean width " + shape_str(mu.shape()) + " vs coordinates " + shape_str(pseudo.shape()));
  std::vector<double> out(E * K);
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t k = 0; k < K; ++k) {
      double q = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        const double diff = pseudo[e * P + p] - mu[k * P + p];
        q += diff * diff / std::exp(log_sigma[k * P + p]);
      }
      out[e * K + k] = std::exp(-0.5 * q);
    }
  Tensor y = Tensor::matrix(E, K, std::move(out));
  auto un = pseudo.node(), mn = mu.node(), sn = log_sigma.node();
  detail::Node* yn = y.node().get();
  return detail::finish("gaussian_kernel", {&pseudo, &mu, &log_sigma}, y, [un, mn, sn, yn, E, P, K](std::span<const double> g) {
    auto* gm = detail::gbuf(mn);
    auto* gs = detail::gbuf(sn);
    for (std::size_t e = 0; e < E; ++e)
      for (std::size_t k = 0; k < K; ++k) {
        const double gw = g[e * K + k] * yn->value[e * K + k];
        for (std::size_t p = 0; p < P; ++p) {
          const double diff = un->value[e * P + p] - mn->value[k * P + p];
          const double inv = std::exp(-sn->value[k * P + p]);
          if (gm) (*gm)[k * P + p] += gw * diff * inv;
          if (gs) (*gs)[k * P + p] += gw * 0.5 * diff * diff * inv;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return detail::finish("sum", {&x}, Tensor::scalar(s), [xn](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (double& v : gx) v += g[0];
  });
}

inline Tensor sum_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  auto xn = x.node();
  return detail::finish("sum_rows", {&x}, Tensor::from({n}, std::move(out)), [xn, m, n](std::span<const double> g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j];
  });
}

inline Tensor mean_rows(const Tensor& x) {
  if (x.rows() == 0) throw ContractError("mean_rows of an empty tensor");
  return scale(sum_rows(x), 1.0 / static_cast<double>(x.rows()));
}

/// Per-segment row means; segs[i] is the segment of row i. Empty segments give
/// a zero row and are listed in *empty when provided.
inline Tensor mean_segments(const Tensor& x, std::span<const std::size_t> segs, std::size_t num_segments,
                            std::vector<std::size_t>* empty = nullptr) {
  const std::size_t m = x.rows(), n = x.cols();
  if (segs.size() != m) throw DimensionError("mean_segments: segment vector length differs from row count");
  std::vector<double> count(num_segments, 0.0);
  for (std::size_t s : segs) {
    if (s >= num_segments) throw IndexError("mean_segments: segment id out of range");
    count[s] += 1.0;
  }
  std::vector<double> out(num_segments * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[segs[i] * n + j] += x[i * n + j];
  for (std::size_t s = 0; s < num_segments; ++s) {
    if (count[s] == 0.0) {
      if (empty) empty->push_back(s);
      continue;
    }
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] /= count[s];
  }
  auto xn = x.node();
  std::vector<std::size_t> sg(segs.begin(), segs.end());
  return detail::finish("mean_segments", {&x}, Tensor::matrix(num_segments, n, std::move(out)),
                        [xn, sg = std::move(sg), count = std::move(count), n](std::span<const double> g) {
                          auto& gx = xn->grad_buffer();
                          for (std::size_t i = 0; i < sg.size(); ++i)
                            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[sg[i] * n + j] / count[sg[i]];
                        });
}

// ---------------------------------------------------------------------------
// Normalization

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t d = 0) : running_mean(d, 0.0), running_var(d, 1.0) {}
};

/// Column-wise batch normalization. Training mode uses population statistics
/// of the batch and updates the running estimates (unbiased variance).
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training) {
  detail::require_2d(x, "batch_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.numel() != d || beta.numel() != d || state.running_mean.size() != d)
    throw DimensionError("batch_norm: parameter width does not match input " + shape_str(x.shape()));
  if (training && n == 0) throw ContractError("batch_norm: training mode needs at least one row");
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  if (training) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j];
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = x[i * d + j] - mean[j];
        var[j] += c * c;
      }
    for (std::size_t j = 0; j < d; ++j) {
      const double pop = var[j] / static_cast<double>(n);
      const double unbiased = n > 1 ? var[j] / static_cast<double>(n - 1) : pop;
      var[j] = pop;
      state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean[j];
      state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * unbiased;
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  std::vector<double> inv_std(d), xhat(n * d), out(n * d);
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + state.eps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (x[i * d + j] - mean[j]) * inv_std[j];
      out[i * d + j] = gamma[j] * xhat[i * d + j] + beta[j];
    }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::finish("batch_norm", {&x, &gamma, &beta}, Tensor::matrix(n, d, std::move(out)),
                        [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n, d, training](std::span<const double> g) {
                          if (auto* gg = detail::gbuf(gn))
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g[i * d + j] * xhat[i * d + j];
                          if (auto* gb = detail::gbuf(bn))
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g[i * d + j];
                          auto* gx = detail::gbuf(xn);
                          if (!gx) return;
                          if (!training) {
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < d; ++j) (*gx)[i * d + j] += g[i * d + j] * gn->value[j] * inv_std[j];
                            return;
                          }
                          // dx = gamma * inv_std / n * (n*g - sum(g) - xhat * sum(g*xhat))
                          std::vector<double> sg(d, 0.0), sgx(d, 0.0);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < d; ++j) {
                              sg[j] += g[i * d + j];
                              sgx[j] += g[i * d + j] * xhat[i * d + j];
                            }
                          const double nn = static_cast<double>(n);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < d; ++j)
                              (*gx)[i * d + j] += gn->value[j] * inv_std[j] / nn *
                                                  (nn * g[i * d + j] - sg[j] - xhat[i * d + j] * sgx[j]);
                        });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean softmax cross-entropy. With class_weights, row i is scaled by
/// class_weights[label_i] and the mean is taken over rows.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                                    std::span<const double> class_weights = {}) {
  detail::require_2d(logits, "softmax_cross_entropy");
  const std::size_t n = logits.rows(), C = logits.cols();
  if (labels.size() != n) throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  if (!class_weights.empty() && class_weights.size() != C) throw DimensionError("softmax_cross_entropy: class weight count differs from class count");
  if (n == 0) throw ContractError("softmax_cross_entropy of zero rows");
  std::vector<double> probs(n * C);
  std::vector<double> w(n, 1.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C)
      throw IndexError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(C) + ")");
    const double* z = logits.data().data() + i * C;
    double mx = z[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, z[c]);
    double se = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      probs[i * C + c] = std::exp(z[c] - mx);
      se += probs[i * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) probs[i * C + c] /= se;
    const double lse = mx + std::log(se);
    if (!class_weights.empty()) w[i] = class_weights[static_cast<std::size_t>(labels[i])];
    total += w[i] * (lse - z[labels[i]]);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto ln = logits.node();
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::finish("softmax_cross_entropy", {&logits}, Tensor::scalar(total * inv_n),
                        [ln, probs = std::move(probs), w = std::move(w), lab = std::move(lab), C, inv_n](std::span<const double> g) {
                          auto& gl = ln->grad_buffer();
                          for (std::size_t i = 0; i < lab.size(); ++i)
                            for (std::size_t c = 0; c < C; ++c) {
                              const double onehot = static_cast<int>(c) == lab[i] ? 1.0 : 0.0;
                              gl[i * C + c] += g[0] * inv_n * w[i] * (probs[i * C + c] - onehot);
                            }
                        });
}

/// Mean absolute error between pred (n or n x 1) and a constant target.
inline Tensor l1_loss(const Tensor& pred, std::span<const double> target) {
  if (pred.numel() != target.size()) throw DimensionError("l1_loss: " + std::to_string(pred.numel()) + " predictions for " + std::to_string(target.size()) + " targets");
  if (target.empty()) throw ContractError("l1_loss of zero elements");
  double s = 0.0;
  std::vector<double> sign(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double diff = pred[i] - target[i];
    detail::kink_probe.fold(diff > 0.0 ? 1 : (diff < 0.0 ? -1 : 0));
    sign[i] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    s += std::abs(diff);
  }
  const double inv_n = 1.0 / static_cast<double>(target.size());
  auto pn = pred.node();
  return detail::finish("l1_loss", {&pred}, Tensor::scalar(s * inv_n), [pn, sign = std::move(sign), inv_n](std::span<const double> g) {
    auto& gp = pn->grad_buffer();
    for (std::size_t i = 0; i < sign.size(); ++i) gp[i] += g[0] * inv_n * sign[i];
  });
}

inline Tensor l1_loss(const Tensor& pred, const Tensor& target) { return l1_loss(pred, target.data()); }

}  // namespace clfe
