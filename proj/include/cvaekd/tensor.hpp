// Dense 2-D tensors with a reverse-mode gradient tape, plus Adam and a
// central-difference gradient checker. Everything is 64-bit; vectors are
// represented as 1xN tensors so a single matmul kernel covers the model.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvaekd {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct TensorData {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;
  std::vector<double> g;  // empty until backward touches this node
  bool requires_grad = false;
};

inline void ensure_grad(TensorData& d) {
  if (d.g.size() != d.v.size()) d.g.assign(d.v.size(), 0.0);
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0,
         bool requires_grad = false)
      : d_(std::make_shared<detail::TensorData>()) {
    d_->rows = rows;
    d_->cols = cols;
    d_->v.assign(rows * cols, fill);
    d_->requires_grad = requires_grad;
  }

  static Tensor from(std::vector<double> values, std::size_t rows,
                     std::size_t cols, bool requires_grad = false) {
    if (values.size() != rows * cols)
      throw ShapeError("Tensor::from: value count does not match shape");
    Tensor t(rows, cols, 0.0, requires_grad);
    t.d_->v = std::move(values);
    return t;
  }

  static Tensor scalar(double x) { return from({x}, 1, 1); }

  static Tensor row_vector(std::vector<double> values,
                           bool requires_grad = false) {
    const std::size_t n = values.size();
    return from(std::move(values), 1, n, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  std::size_t rows() const { return d_->rows; }
  std::size_t cols() const { return d_->cols; }
  std::size_t size() const { return d_->v.size(); }
  std::vector<std::size_t> shape() const { return {d_->rows, d_->cols}; }

  double at(std::size_t r, std::size_t c) const {
    return d_->v[r * d_->cols + c];
  }
  double& at(std::size_t r, std::size_t c) { return d_->v[r * d_->cols + c]; }

  double value() const {
    if (size() != 1) throw ShapeError("Tensor::value: tensor is not scalar");
    return d_->v[0];
  }

  std::vector<double>& data() { return d_->v; }
  const std::vector<double>& data() const { return d_->v; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  std::vector<double>& grad() {
    detail::ensure_grad(*d_);
    return d_->g;
  }
  const std::vector<double>& grad() const {
    detail::ensure_grad(*d_);
    return d_->g;
  }
  bool has_grad() const { return !d_->g.empty(); }
  void zero_grad() {
    if (!d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), 0.0);
  }

  bool same_node(const Tensor& o) const { return d_ == o.d_; }
  const std::shared_ptr<detail::TensorData>& node() const { return d_; }

  bool all_finite() const {
    for (double x : d_->v)
      if (!std::isfinite(x)) return false;
    return true;
  }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

// Recorded operations, replayed strictly in reverse to accumulate exact
// gradients. One tape is one single-threaded computation context.
class Tape {
 public:
  struct Record {
    const char* kind;
    std::function<void()> backward;
  };

  static Tape* active() { return active_slot(); }

  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_slot()) { active_slot() = &t; }
    ~Scope() { active_slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  void push(const char* kind, std::function<void()> fn) {
    records_.push_back(Record{kind, std::move(fn)});
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }

  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar");
    if (records_.empty()) throw NumericError("backward: tape is empty");
    detail::ensure_grad(*loss.node());
    loss.node()->g[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it)
      it->backward();
  }

 private:
  static Tape*& active_slot() {
    thread_local Tape* t = nullptr;
    return t;
  }
  std::vector<Record> records_;
};

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

namespace detail {

using Node = std::shared_ptr<TensorData>;

inline bool want_grad(const Tensor& a) { return a.requires_grad(); }

inline bool record(Tensor& out, std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (!tape) return false;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (any) out.set_requires_grad(true);
  return any;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree (" +
                     std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out(m, n);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  double* ov = out.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv + p * n;
      double* orow = ov + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  if (detail::record(out, {&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->push("matmul", [an, bn, on, m, k, n]() {
      if (on->g.empty()) return;
      const std::vector<double>& go = on->g;
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j)
              s += go[i * n + j] * bn->v[p * n + j];
            an->g[i * k + p] += s;
          }
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t i = 0; i < m; ++i) {
            const double aip = an->v[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j)
              bn->g[p * n + j] += aip * go[i * n + j];
          }
      }
    });
  }
  return out;
}

// add: identical shapes, or b is a 1xN row broadcast over an MxN a.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.rows() == b.rows() && a.cols() == b.cols();
  const bool bcast = b.rows() == 1 && a.cols() == b.cols();
  if (!same && !bcast) throw ShapeError("add: incompatible shapes");
  Tensor out(a.rows(), a.cols());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.at(i, j) = a.at(i, j) + (same ? b.at(i, j) : b.at(0, j));
  if (detail::record(out, {&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->push("add", [an, bn, on, same]() {
      if (on->g.empty()) return;
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < an->g.size(); ++i) an->g[i] += on->g[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        if (same) {
          for (std::size_t i = 0; i < bn->g.size(); ++i) bn->g[i] += on->g[i];
        } else {
          const std::size_t rows = on->rows, cols = on->cols;
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
              bn->g[j] += on->g[i * cols + j];
        }
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("sub: shapes differ");
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::record(out, {&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->push("sub", [an, bn, on]() {
      if (on->g.empty()) return;
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < an->g.size(); ++i) an->g[i] += on->g[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < bn->g.size(); ++i) bn->g[i] -= on->g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mul: shapes differ");
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::record(out, {&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->push("mul", [an, bn, on]() {
      if (on->g.empty()) return;
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < an->g.size(); ++i)
          an->g[i] += on->g[i] * bn->v[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < bn->g.size(); ++i)
          bn->g[i] += on->g[i] * an->v[i];
      }
    });
  }
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("div: shapes differ");
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] / b.data()[i];
  if (detail::record(out, {&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->push("div", [an, bn, on]() {
      if (on->g.empty()) return;
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < an->g.size(); ++i)
          an->g[i] += on->g[i] / bn->v[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < bn->g.size(); ++i)
          bn->g[i] -= on->g[i] * an->v[i] / (bn->v[i] * bn->v[i]);
      }
    });
  }
  return out;
}

namespace detail {

template <class Fwd, class Dfn>
Tensor unary_op(const char* kind, const Tensor& a, Fwd fwd, Dfn dvalue) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = fwd(a.data()[i]);
  if (record(out, {&a})) {
    auto an = a.node();
    auto on = out.node();
    Tape::active()->push(kind, [an, on, dvalue]() {
      if (!an->requires_grad || on->g.empty()) return;
      ensure_grad(*an);
      for (std::size_t i = 0; i < an->g.size(); ++i)
        an->g[i] += on->g[i] * dvalue(an->v[i], on->v[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      "neg", a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      "sigmoid", a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      "mul_scalar", a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

// Gradient passes through where the input lies inside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary_op(
      "clamp", a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw ShapeError("concat_cols: row counts differ");
  const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor out(rows, ca + cb);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out.at(i, j) = a.at(i, j);
    for (std::size_t j = 0; j < cb; ++j) out.at(i, ca + j) = b.at(i, j);
  }
  if (detail::record(out, {&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->push("concat_cols", [an, bn, on, rows, ca, cb]() {
      if (on->g.empty()) return;
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < ca; ++j)
            an->g[i * ca + j] += on->g[i * (ca + cb) + j];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cb; ++j)
            bn->g[i * cb + j] += on->g[i * (ca + cb) + ca + j];
      }
    });
  }
  return out;
}

inline Tensor row(const Tensor& a, std::size_t i) {
  if (i >= a.rows()) throw ShapeError("row: index out of range");
  const std::size_t n = a.cols();
  Tensor out(1, n);
  for (std::size_t j = 0; j < n; ++j) out.at(0, j) = a.at(i, j);
  if (detail::record(out, {&a})) {
    auto an = a.node(), on = out.node();
    Tape::active()->push("row", [an, on, i, n]() {
      if (on->g.empty()) return;
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t j = 0; j < n; ++j) an->g[i * n + j] += on->g[j];
    });
  }
  return out;
}

inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: empty input");
  const std::size_t n = rows[0].cols();
  for (const Tensor& r : rows)
    if (r.rows() != 1 || r.cols() != n)
      throw ShapeError("stack_rows: rows must all be 1xN with equal N");
  Tensor out(rows.size(), n);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = rows[i].at(0, j);
  Tape* tape = Tape::active();
  bool any = false;
  for (const Tensor& r : rows) any = any || r.requires_grad();
  if (tape && any) {
    out.set_requires_grad(true);
    std::vector<detail::Node> nodes;
    nodes.reserve(rows.size());
    for (const Tensor& r : rows) nodes.push_back(r.node());
    auto on = out.node();
    tape->push("stack_rows", [nodes, on, n]() {
      if (on->g.empty()) return;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (!nodes[i]->requires_grad) continue;
        detail::ensure_grad(*nodes[i]);
        for (std::size_t j = 0; j < n; ++j)
          nodes[i]->g[j] += on->g[i * n + j];
      }
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor out = Tensor::scalar(s);
  if (detail::record(out, {&a})) {
    auto an = a.node(), on = out.node();
    Tape::active()->push("sum_all", [an, on]() {
      if (on->g.empty()) return;
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < an->g.size(); ++i) an->g[i] += on->g[0];
    });
  }
  return out;
}

// Row-wise softmax with max-subtraction; rows sum to 1 up to roundoff.
inline Tensor softmax_rows(const Tensor& a) {
  if (a.cols() == 0) throw ShapeError("softmax_rows: empty rows");
  Tensor out(a.rows(), a.cols());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mx = a.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(a.at(i, j) - mx);
      out.at(i, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  if (detail::record(out, {&a})) {
    auto an = a.node(), on = out.node();
    Tape::active()->push("softmax_rows", [an, on, n]() {
      if (on->g.empty()) return;
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < on->rows; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          dot += on->g[i * n + j] * on->v[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          an->g[i * n + j] += on->v[i * n + j] * (on->g[i * n + j] - dot);
      }
    });
  }
  return out;
}

inline Tensor log_softmax_rows(const Tensor& a) {
  if (a.cols() == 0) throw ShapeError("log_softmax_rows: empty rows");
  Tensor out(a.rows(), a.cols());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mx = a.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(a.at(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) - lse;
  }
  if (detail::record(out, {&a})) {
    auto an = a.node(), on = out.node();
    Tape::active()->push("log_softmax_rows", [an, on, n]() {
      if (on->g.empty()) return;
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < on->rows; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < n; ++j) gsum += on->g[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          an->g[i * n + j] +=
              on->g[i * n + j] - std::exp(on->v[i * n + j]) * gsum;
      }
    });
  }
  return out;
}

// sum_t weights[t] * m[t, ids[t]], as a scalar. The workhorse behind masked
// negative log-likelihood: pass log-probabilities and per-position weights.
inline Tensor pick_weighted_sum(const Tensor& m, const std::vector<int>& ids,
                                const std::vector<double>& weights) {
  if (ids.size() != m.rows() || weights.size() != m.rows())
    throw ShapeError("pick_weighted_sum: ids/weights must match row count");
  const std::size_t n = m.cols();
  double s = 0.0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= n)
      throw ShapeError("pick_weighted_sum: id out of range");
    s += weights[t] * m.at(t, static_cast<std::size_t>(ids[t]));
  }
  Tensor out = Tensor::scalar(s);
  if (detail::record(out, {&m})) {
    auto mn = m.node(), on = out.node();
    Tape::active()->push("pick_weighted_sum", [mn, on, ids, weights, n]() {
      if (on->g.empty()) return;
      if (!mn->requires_grad) return;
      detail::ensure_grad(*mn);
      for (std::size_t t = 0; t < ids.size(); ++t)
        mn->g[t * n + static_cast<std::size_t>(ids[t])] +=
            weights[t] * on->g[0];
    });
  }
  return out;
}

// sum_t weights[t] * <a[t,:], b[t,:]>, as a scalar.
inline Tensor rowdot_weighted_sum(const Tensor& a, const Tensor& b,
                                  const std::vector<double>& weights) {
  if (a.rows() != b.rows() || a.cols() != b.cols() ||
      weights.size() != a.rows())
    throw ShapeError("rowdot_weighted_sum: shape mismatch");
  const std::size_t n = a.cols();
  double s = 0.0;
  for (std::size_t t = 0; t < a.rows(); ++t) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += a.at(t, j) * b.at(t, j);
    s += weights[t] * d;
  }
  Tensor out = Tensor::scalar(s);
  if (detail::record(out, {&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->push("rowdot_weighted_sum", [an, bn, on, weights, n]() {
      if (on->g.empty()) return;
      const double g = on->g[0];
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t t = 0; t < weights.size(); ++t)
          for (std::size_t j = 0; j < n; ++j)
            an->g[t * n + j] += g * weights[t] * bn->v[t * n + j];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t t = 0; t < weights.size(); ++t)
          for (std::size_t j = 0; j < n; ++j)
            bn->g[t * n + j] += g * weights[t] * an->v[t * n + j];
      }
    });
  }
  return out;
}

// Row gather from an embedding matrix. Positions holding pad_id produce the
// pad row in the forward pass and contribute no gradient, which keeps the
// pad row frozen at its initial zeros.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                               int pad_id) {
  const std::size_t v = table.rows(), d = table.cols();
  Tensor out(ids.size(), d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v)
      throw ShapeError("embedding_lookup: id out of range");
    if (ids[t] == pad_id) continue;  // pad rows stay hard zeros
    for (std::size_t j = 0; j < d; ++j)
      out.at(t, j) = table.at(static_cast<std::size_t>(ids[t]), j);
  }
  if (detail::record(out, {&table})) {
    auto tn = table.node(), on = out.node();
    Tape::active()->push("embedding_lookup", [tn, on, ids, pad_id, d]() {
      if (on->g.empty()) return;
      if (!tn->requires_grad) return;
      detail::ensure_grad(*tn);
      for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] == pad_id) continue;
        for (std::size_t j = 0; j < d; ++j)
          tn->g[static_cast<std::size_t>(ids[t]) * d + j] += on->g[t * d + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// RNG, initializers
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(eng_);
  }
  double normal() {
    std::normal_distribution<double> d(0.0, 1.0);
    return d(eng_);
  }
  std::uint64_t integer(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(eng_);
  }
  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), eng_);
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

inline Tensor glorot_init(std::size_t rows, std::size_t cols, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor t(rows, cols, 0.0, true);
  for (double& x : t.data()) x = rng.uniform(-s, s);
  return t;
}

inline Tensor uniform_init(std::size_t rows, std::size_t cols, double scale,
                           Rng& rng) {
  Tensor t(rows, cols, 0.0, true);
  for (double& x : t.data()) x = rng.uniform(-scale, scale);
  return t;
}

inline Tensor zeros_param(std::size_t rows, std::size_t cols) {
  return Tensor(rows, cols, 0.0, true);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(const std::vector<Tensor>& params, AdamConfig cfg = {})
      : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  // Bias-corrected update. Validates gradients first: a non-finite gradient
  // aborts before any parameter is touched.
  void step(std::vector<Tensor>& params) {
    if (params.size() != m_.size())
      throw ShapeError("AdamState::step: parameter list changed size");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].size() != m_[i].size())
        throw ShapeError("AdamState::step: parameter shape changed");
      for (double g : params[i].grad())
        if (!std::isfinite(g))
          throw NumericError("AdamState::step: non-finite gradient");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::vector<double>& theta = params[i].data();
      const std::vector<double>& g = params[i].grad();
      for (std::size_t j = 0; j < theta.size(); ++j) {
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        theta[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::size_t t() const { return t_; }
  AdamConfig& config() { return cfg_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<std::vector<double>>& moments1() { return m_; }
  std::vector<std::vector<double>>& moments2() { return v_; }
  const std::vector<std::vector<double>>& moments1() const { return m_; }
  const std::vector<std::vector<double>>& moments2() const { return v_; }
  void restore(std::vector<std::vector<double>> m,
               std::vector<std::vector<double>> v, std::size_t t) {
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

inline void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (Tensor& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (Tensor& p : params)
      for (double& g : p.grad()) g *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Central finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t n_checked = 0;
};

// loss_builder must rebuild the identical loss from the current parameter
// values on every call (noise sources frozen by the caller). Analytic
// gradients come from one taped pass, numeric ones from (f(x+h)-f(x-h))/2h
// per coordinate. denom_floor bounds the relative-error denominator from
// below; coordinates whose gradients sit under it are effectively compared
// absolutely, since central differences cannot resolve them any finer.
inline GradCheckResult finite_difference_check(
    const std::function<Tensor()>& loss_builder, std::vector<Tensor> params,
    double h = 1e-5, double denom_floor = 1e-8) {
  if (h <= 0.0) throw NumericError("finite_difference_check: h must be > 0");
  zero_grads(params);
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = loss_builder();
    tape.backward(loss);
  }
  analytic.reserve(params.size());
  for (Tensor& p : params) analytic.push_back(p.grad());

  GradCheckResult res;
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double>& theta = params[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double saved = theta[j];
      theta[j] = saved + h;
      const double f1 = loss_builder().value();
      theta[j] = saved - h;
      const double f2 = loss_builder().value();
      theta[j] = saved;
      const double numeric = (f1 - f2) / (2.0 * h);
      const double a = analytic[i][j];
      const double abs_err = std::fabs(a - numeric);
      const double denom =
          std::max(std::fabs(a) + std::fabs(numeric), denom_floor);
      const double rel = (abs_err == 0.0) ? 0.0 : abs_err / denom;
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.n_checked;
    }
  }
  return res;
}

}  // namespace cvaekd
