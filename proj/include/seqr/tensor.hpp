// Copyright 2026 The seqr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Dense double-precision tensors with reverse-mode automatic differentiation.
// Every primitive checks its input shapes explicitly; the only broadcasting
// is scalar-with-tensor. Ops record themselves on the implicit tape (the
// expression graph) whenever any input requires gradients and recording is
// enabled for the current thread.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqr {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ")";
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand; leaves accumulate across backward calls
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::uint64_t mark = 0;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline bool& grad_recording_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::atomic<std::uint64_t>& visit_counter() {
  static std::atomic<std::uint64_t> c{1};
  return c;
}

[[noreturn]] inline void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + detail);
}

}  // namespace detail

// Disables tape recording for the current thread while alive. Decoding and
// validation wrap their forward passes in this so no graph is built.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_recording_flag()) { detail::grad_recording_flag() = false; }
  ~NoGradGuard() { detail::grad_recording_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(std::vector<double> data, Shape shape, bool requires_grad = false) {
    if (detail::numel(shape) != data.size())
      detail::shape_error("from", detail::shape_str(shape) + " for " + std::to_string(data.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = detail::numel(shape);
    return from(std::vector<double>(n, 0.0), std::move(shape), requires_grad);
  }

  static Tensor scalar(double v) { return from({v}, Shape{}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t size() const { return node_->value.size(); }
  bool is_scalar() const { return node_->value.size() == 1 && node_->shape.size() <= 1; }

  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double item() const {
    if (!is_scalar()) detail::shape_error("item", detail::shape_str(shape()));
    return node_->value[0];
  }
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t i, std::size_t j) const { return node_->value[i * node_->shape[1] + j]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (!node_->leaf) throw std::logic_error("set_requires_grad: only leaf tensors");
    node_->requires_grad = rg;
  }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  std::shared_ptr<detail::Node> node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

using NodePtr = std::shared_ptr<Node>;

inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                      std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool record = grad_recording_flag();
  if (record) {
    record = false;
    for (const auto& p : parents) record = record || p->requires_grad;
  }
  if (record) {
    n->requires_grad = true;
    n->leaf = false;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

inline bool wants_grad(const NodePtr& p) { return p->requires_grad; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& an = a.node();
  const auto& bn = b.node();
  if (a.ndim() == 2 && b.ndim() == 2) {
    std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) detail::shape_error("matmul", detail::shape_str(a.shape()) + "·" + detail::shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const double* A = an->value.data();
    const double* B = bn->value.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double av = A[i * k + p];
        if (av == 0.0) continue;
        const double* brow = B + p * n;
        double* orow = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    return detail::make_op({m, n}, std::move(out), {an, bn}, [m, k, n](detail::Node& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      const double* g = self.grad.data();
      if (detail::wants_grad(pa)) {
        pa->ensure_grad();
        const double* B = pb->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = g + i * n;
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            pa->grad[i * k + p] += acc;
          }
      }
      if (detail::wants_grad(pb)) {
        pb->ensure_grad();
        const double* A = pa->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double av = A[i * k + p];
            if (av == 0.0) continue;
            const double* grow = g + i * n;
            double* gbrow = pb->grad.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
      }
    });
  }
  if (a.ndim() == 2 && b.ndim() == 1) {
    std::size_t m = a.dim(0), k = a.dim(1);
    if (b.dim(0) != k) detail::shape_error("matmul", detail::shape_str(a.shape()) + "·" + detail::shape_str(b.shape()));
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      const double* arow = an->value.data() + i * k;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * bn->value[p];
      out[i] = acc;
    }
    return detail::make_op({m}, std::move(out), {an, bn}, [m, k](detail::Node& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (detail::wants_grad(pa)) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          double gi = self.grad[i];
          if (gi == 0.0) continue;
          double* garow = pa->grad.data() + i * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += gi * pb->value[p];
        }
      }
      if (detail::wants_grad(pb)) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          double gi = self.grad[i];
          if (gi == 0.0) continue;
          const double* arow = pa->value.data() + i * k;
          for (std::size_t p = 0; p < k; ++p) pb->grad[p] += gi * arow[p];
        }
      }
    });
  }
  detail::shape_error("matmul", detail::shape_str(a.shape()) + "·" + detail::shape_str(b.shape()));
}

namespace detail {

enum class Arith { Add, Sub, Mul };

inline Tensor arith(const char* name, Arith kind, const Tensor& a, const Tensor& b) {
  bool as = a.is_scalar(), bs = b.is_scalar();
  if (!(a.shape() == b.shape() || as || bs))
    shape_error(name, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Tensor& big = (!as || a.shape() == b.shape()) ? a : b;
  std::size_t n = big.size();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    double x = as && !(a.shape() == b.shape()) ? av[0] : av[i];
    double y = bs && !(a.shape() == b.shape()) ? bv[0] : bv[i];
    out[i] = kind == Arith::Add ? x + y : kind == Arith::Sub ? x - y : x * y;
  }
  bool a_bcast = as && !(a.shape() == b.shape());
  bool b_bcast = bs && !(a.shape() == b.shape());
  return make_op(big.shape(), std::move(out), {a.node(), b.node()},
                 [kind, a_bcast, b_bcast, n](Node& self) {
                   auto& pa = self.parents[0];
                   auto& pb = self.parents[1];
                   if (wants_grad(pa)) {
                     pa->ensure_grad();
                     for (std::size_t i = 0; i < n; ++i) {
                       double g = self.grad[i];
                       if (kind == Arith::Mul) g *= b_bcast ? pb->value[0] : pb->value[i];
                       pa->grad[a_bcast ? 0 : i] += g;
                     }
                   }
                   if (wants_grad(pb)) {
                     pb->ensure_grad();
                     for (std::size_t i = 0; i < n; ++i) {
                       double g = self.grad[i];
                       if (kind == Arith::Sub) g = -g;
                       if (kind == Arith::Mul) {
                         g = self.grad[i] * (a_bcast ? pa->value[0] : pa->value[i]);
                       }
                       pb->grad[b_bcast ? 0 : i] += g;
                     }
                   }
                 });
}

inline Tensor unary(const Tensor& x, double (*f)(double), double (*df)(double value, double out)) {
  std::size_t n = x.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x.values()[i]);
  return make_op(x.shape(), std::move(out), {x.node()}, [df, n](Node& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[i] * df(p->value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::arith("add", detail::Arith::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::arith("sub", detail::Arith::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::arith("mul", detail::Arith::Mul, a, b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& a, double c) {
  std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = c * a.values()[i];
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [c, n](detail::Node& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) p->grad[i] += c * self.grad[i];
  });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

namespace detail {

// rows == 1 treats the whole tensor as a single row (the 1-D case).
inline void softmax_rows(const std::vector<double>& in, std::vector<double>& out, std::size_t rows,
                         std::size_t cols, bool log_form) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    double m = x[0];
    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - m);
    double lz = std::log(z);
    for (std::size_t j = 0; j < cols; ++j)
      y[j] = log_form ? x[j] - m - lz : std::exp(x[j] - m) / z;
  }
}

inline Tensor softmax_impl(const Tensor& x, bool log_form, const char* name) {
  if (x.ndim() != 1 && x.ndim() != 2) shape_error(name, shape_str(x.shape()));
  std::size_t rows = x.ndim() == 2 ? x.dim(0) : 1;
  std::size_t cols = x.ndim() == 2 ? x.dim(1) : x.dim(0);
  if (cols == 0) shape_error(name, shape_str(x.shape()));
  std::vector<double> out(x.size());
  softmax_rows(x.values(), out, rows, cols, log_form);
  return make_op(x.shape(), std::move(out), {x.node()}, [rows, cols, log_form](Node& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double* gx = p->grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += log_form ? g[j] : g[j] * y[j];
      for (std::size_t j = 0; j < cols; ++j)
        gx[j] += log_form ? g[j] - std::exp(y[j]) * dot : y[j] * (g[j] - dot);
    }
  });
}

}  // namespace detail

inline Tensor softmax(const Tensor& x) { return detail::softmax_impl(x, false, "softmax"); }
inline Tensor log_softmax(const Tensor& x) { return detail::softmax_impl(x, true, "log_softmax"); }

inline Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 1 || b.ndim() != 1)
    detail::shape_error("concat", detail::shape_str(a.shape()) + " ++ " + detail::shape_str(b.shape()));
  std::size_t n1 = a.size(), n2 = b.size();
  std::vector<double> out;
  out.reserve(n1 + n2);
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return detail::make_op({n1 + n2}, std::move(out), {a.node(), b.node()}, [n1, n2](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (detail::wants_grad(pa)) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n1; ++i) pa->grad[i] += self.grad[i];
    }
    if (detail::wants_grad(pb)) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n2; ++i) pb->grad[i] += self.grad[n1 + i];
    }
  });
}

inline Tensor slice(const Tensor& x, std::size_t start, std::size_t len) {
  if (x.ndim() != 1 || start + len > x.size())
    detail::shape_error("slice", detail::shape_str(x.shape()) + " [" + std::to_string(start) + "," +
                                     std::to_string(start + len) + ")");
  std::vector<double> out(x.values().begin() + start, x.values().begin() + start + len);
  return detail::make_op({len}, std::move(out), {x.node()}, [start, len](detail::Node& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < len; ++i) p->grad[start + i] += self.grad[i];
  });
}

inline Tensor row(const Tensor& m, std::size_t i) {
  if (m.ndim() != 2 || i >= m.dim(0))
    detail::shape_error("row", detail::shape_str(m.shape()) + " row " + std::to_string(i));
  std::size_t cols = m.dim(1);
  std::vector<double> out(m.values().begin() + i * cols, m.values().begin() + (i + 1) * cols);
  return detail::make_op({cols}, std::move(out), {m.node()}, [i, cols](detail::Node& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t j = 0; j < cols; ++j) p->grad[i * cols + j] += self.grad[j];
  });
}

inline Tensor pick(const Tensor& m, std::size_t i, std::size_t j) {
  if (m.ndim() != 2 || i >= m.dim(0) || j >= m.dim(1))
    detail::shape_error("pick", detail::shape_str(m.shape()) + " at (" + std::to_string(i) + "," +
                                    std::to_string(j) + ")");
  std::size_t idx = i * m.dim(1) + j;
  return detail::make_op({}, {m.values()[idx]}, {m.node()}, [idx](detail::Node& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    p->grad[idx] += self.grad[0];
  });
}

inline Tensor transpose(const Tensor& m) {
  if (m.ndim() != 2) detail::shape_error("transpose", detail::shape_str(m.shape()));
  std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = m.values()[i * c + j];
  return detail::make_op({c, r}, std::move(out), {m.node()}, [r, c](detail::Node& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p->grad[i * c + j] += self.grad[j * r + i];
  });
}

inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) detail::shape_error("stack_rows", "no rows");
  std::size_t cols = rows[0].size();
  std::vector<double> out;
  out.reserve(rows.size() * cols);
  std::vector<detail::NodePtr> parents;
  parents.reserve(rows.size());
  for (const auto& rt : rows) {
    if (rt.ndim() != 1 || rt.size() != cols)
      detail::shape_error("stack_rows", detail::shape_str(rt.shape()) + " vs width " + std::to_string(cols));
    out.insert(out.end(), rt.values().begin(), rt.values().end());
    parents.push_back(rt.node());
  }
  return detail::make_op({rows.size(), cols}, std::move(out), std::move(parents), [cols](detail::Node& self) {
    for (std::size_t r = 0; r < self.parents.size(); ++r) {
      auto& p = self.parents[r];
      if (!detail::wants_grad(p)) continue;
      p->ensure_grad();
      for (std::size_t j = 0; j < cols; ++j) p->grad[j] += self.grad[r * cols + j];
    }
  });
}

inline Tensor add_rowwise(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.ndim() != 1 || m.dim(1) != v.dim(0))
    detail::shape_error("add_rowwise", detail::shape_str(m.shape()) + " + " + detail::shape_str(v.shape()));
  std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out(m.values());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += v.values()[j];
  return detail::make_op({r, c}, std::move(out), {m.node(), v.node()}, [r, c](detail::Node& self) {
    auto& pm = self.parents[0];
    auto& pv = self.parents[1];
    if (detail::wants_grad(pm)) {
      pm->ensure_grad();
      for (std::size_t i = 0; i < r * c; ++i) pm->grad[i] += self.grad[i];
    }
    if (detail::wants_grad(pv)) {
      pv->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) pv->grad[j] += self.grad[i * c + j];
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  std::size_t n = x.size();
  return detail::make_op({}, {acc}, {x.node()}, [n](detail::Node& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[0];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (detail::numel(shape) != x.size())
    detail::shape_error("reshape", detail::shape_str(x.shape()) + " -> " + detail::shape_str(shape));
  std::vector<double> out(x.values());
  std::size_t n = x.size();
  return detail::make_op(std::move(shape), std::move(out), {x.node()}, [n](detail::Node& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[i];
  });
}

// 1-D convolution over a length-T signal with F filters of width W and
// same-length zero padding; result is T x F.
inline Tensor conv1d_same(const Tensor& x, const Tensor& k) {
  if (x.ndim() != 1 || k.ndim() != 2)
    detail::shape_error("conv1d", detail::shape_str(x.shape()) + " * " + detail::shape_str(k.shape()));
  std::size_t t_len = x.dim(0), f = k.dim(0), w = k.dim(1);
  std::ptrdiff_t c0 = static_cast<std::ptrdiff_t>((w - 1) / 2);
  std::vector<double> out(t_len * f, 0.0);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < f; ++j) {
      double acc = 0.0;
      for (std::size_t u = 0; u < w; ++u) {
        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + u) - c0;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
        acc += k.values()[j * w + u] * x.values()[static_cast<std::size_t>(src)];
      }
      out[t * f + j] = acc;
    }
  return detail::make_op({t_len, f}, std::move(out), {x.node(), k.node()},
                         [t_len, f, w, c0](detail::Node& self) {
                           auto& px = self.parents[0];
                           auto& pk = self.parents[1];
                           bool gx = detail::wants_grad(px);
                           bool gk = detail::wants_grad(pk);
                           if (gx) px->ensure_grad();
                           if (gk) pk->ensure_grad();
                           for (std::size_t t = 0; t < t_len; ++t)
                             for (std::size_t j = 0; j < f; ++j) {
                               double g = self.grad[t * f + j];
                               if (g == 0.0) continue;
                               for (std::size_t u = 0; u < w; ++u) {
                                 std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + u) - c0;
                                 if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
                                 if (gx) px->grad[static_cast<std::size_t>(src)] += g * pk->value[j * w + u];
                                 if (gk) pk->grad[j * w + u] += g * px->value[static_cast<std::size_t>(src)];
                               }
                             }
                         });
}

// 2-D convolution, odd square kernels, stride 1, same padding.
// x: Cin x H x W, k: Cout x Cin x S x S, bias: Cout. Result Cout x H x W.
inline Tensor conv2d_same(const Tensor& x, const Tensor& k, const Tensor& bias) {
  if (x.ndim() != 3 || k.ndim() != 4 || bias.ndim() != 1 || k.dim(1) != x.dim(0) ||
      k.dim(2) != k.dim(3) || k.dim(2) % 2 == 0 || bias.dim(0) != k.dim(0))
    detail::shape_error("conv2d", detail::shape_str(x.shape()) + " * " + detail::shape_str(k.shape()));
  std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::size_t cout = k.dim(0), s = k.dim(2);
  std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(s / 2);
  std::vector<double> out(cout * h * w);
  for (std::size_t o = 0; o < cout; ++o) {
    double b = bias.values()[o];
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double acc = b;
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t di = 0; di < s; ++di) {
            std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - pad;
            if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t dj = 0; dj < s; ++dj) {
              std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - pad;
              if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
              acc += k.values()[((o * cin + c) * s + di) * s + dj] *
                     x.values()[(c * h + static_cast<std::size_t>(si)) * w + static_cast<std::size_t>(sj)];
            }
          }
        out[(o * h + i) * w + j] = acc;
      }
  }
  return detail::make_op(
      {cout, h, w}, std::move(out), {x.node(), k.node(), bias.node()},
      [cin, h, w, cout, s, pad](detail::Node& self) {
        auto& px = self.parents[0];
        auto& pk = self.parents[1];
        auto& pb = self.parents[2];
        bool gx = detail::wants_grad(px), gk = detail::wants_grad(pk), gb = detail::wants_grad(pb);
        if (gx) px->ensure_grad();
        if (gk) pk->ensure_grad();
        if (gb) pb->ensure_grad();
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
              double g = self.grad[(o * h + i) * w + j];
              if (g == 0.0) continue;
              if (gb) pb->grad[o] += g;
              for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t di = 0; di < s; ++di) {
                  std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - pad;
                  if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t dj = 0; dj < s; ++dj) {
                    std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - pad;
                    if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
                    std::size_t xi = (c * h + static_cast<std::size_t>(si)) * w + static_cast<std::size_t>(sj);
                    std::size_t ki = ((o * cin + c) * s + di) * s + dj;
                    if (gx) px->grad[xi] += g * pk->value[ki];
                    if (gk) pk->grad[ki] += g * px->value[xi];
                  }
                }
            }
      });
}

// 2x2 max pooling with stride 2 and ceil semantics: a trailing odd row or
// column is pooled over the cells that exist. x: C x H x W.
inline Tensor max_pool2d_ceil(const Tensor& x) {
  if (x.ndim() != 3) detail::shape_error("max_pool", detail::shape_str(x.shape()));
  std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  std::vector<double> out(c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t di = 0; di < 2; ++di) {
          std::size_t si = 2 * i + di;
          if (si >= h) continue;
          for (std::size_t dj = 0; dj < 2; ++dj) {
            std::size_t sj = 2 * j + dj;
            if (sj >= w) continue;
            std::size_t idx = (ch * h + si) * w + sj;
            if (x.values()[idx] > best) {
              best = x.values()[idx];
              best_idx = idx;
            }
          }
        }
        out[(ch * oh + i) * ow + j] = best;
        (*argmax)[(ch * oh + i) * ow + j] = best_idx;
      }
  return detail::make_op({c, oh, ow}, std::move(out), {x.node()}, [argmax](detail::Node& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) p->grad[(*argmax)[i]] += self.grad[i];
  });
}

// Rearranges C x H x W into H rows of (C*W) features: row i holds channel 0's
// row i, then channel 1's row i, and so on. Used to hand a convolutional
// front-end's output to a recurrent stack frame by frame.
inline Tensor channels_to_rows(const Tensor& x) {
  if (x.ndim() != 3) detail::shape_error("channels_to_rows", detail::shape_str(x.shape()));
  std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(c * h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < w; ++j) out[i * c * w + ch * w + j] = x.values()[(ch * h + i) * w + j];
  return detail::make_op({h, c * w}, std::move(out), {x.node()}, [c, h, w](detail::Node& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < w; ++j)
          p->grad[(ch * h + i) * w + j] += self.grad[i * c * w + ch * w + j];
  });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// `loss`. Interior gradients are scratch and reset per call; leaf gradients
// accumulate until zero_grad(), which is what shared-parameter recurrences
// need. `seed` is the incoming gradient of the loss itself (use 1/batch to
// average a batch without materializing the mean node).
inline void backward(const Tensor& loss, double seed = 1.0) {
  if (!loss.is_scalar()) detail::shape_error("backward", "loss must be scalar, got " + detail::shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->requires_grad)
    throw std::invalid_argument("backward: loss is not connected to any tensor requiring gradients");

  const std::uint64_t mark = detail::visit_counter().fetch_add(1);
  std::vector<detail::Node*> topo;
  // Iterative post-order DFS; recursion depth over long recurrences is unbounded.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  root->mark = mark;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && p->mark != mark) {
        p->mark = mark;
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  // topo is in post-order: parents precede children, so iterate backwards.
  for (detail::Node* n : topo) {
    if (n->leaf) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  root->grad[0] += seed;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->leaf) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

// Central-difference check of d f / d x. Returns the max over coordinates of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0, double step) {
  Tensor x = Tensor::from(x0.values(), x0.shape(), /*requires_grad=*/true);
  Tensor y = f(x);
  if (!y.is_scalar()) detail::shape_error("grad_check", "f must be scalar-valued");
  if (!std::isfinite(y.item())) throw std::invalid_argument("grad_check: f(x) is not finite");
  std::vector<double> analytic;
  if (y.requires_grad()) {
    backward(y);
    analytic = x.grad();
  } else {
    analytic.assign(x.size(), 0.0);  // f does not depend on x at all
  }

  double worst = 0.0;
  NoGradGuard ng;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double saved = x.values()[i];
    x.values()[i] = saved + step;
    double up = f(x).item();
    x.values()[i] = saved - step;
    double down = f(x).item();
    x.values()[i] = saved;
    double numeric = (up - down) / (2.0 * step);
    double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace seqr
