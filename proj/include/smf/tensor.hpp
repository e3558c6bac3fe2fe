// Copyright 2026 The SMF Authors.
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

// Dense f64 tensors with reverse-mode differentiation.
//
// Every op returns a new node that keeps its inputs alive only when one of
// them requires a gradient; graphs built purely from constants record
// nothing. A graph belongs to one thread. Feature maps are [C x H x W], row
// sets are [N x C].

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "smf/common.hpp"

namespace smf::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const std::string& detail) : Error(op + ": shape mismatch: " + detail) {}
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value.assign(ad::numel(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != ad::numel(shape))
      throw ShapeError("tensor", shape_str(shape) + " vs " + std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->value.size(); }

  std::vector<double>& values() { return n_->value; }
  const std::vector<double>& values() const { return n_->value; }
  const std::vector<double>& grad() const { return n_->grad; }
  std::vector<double>& mutable_grad() { return n_->grad; }
  double item() const {
    if (numel() != 1) throw ShapeError("item", "tensor " + shape_str(shape()) + " is not a scalar");
    return n_->value[0];
  }
  double operator[](std::size_t i) const { return n_->value[i]; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool r) { n_->requires_grad = r; }
  void zero_grad() { n_->grad.clear(); }
  const char* op() const { return n_->op; }

  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& ptr() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value, const char* op, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    for (const Tensor& t : inputs) n->parents.push_back(t.ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result_list(Shape shape, std::vector<double> value, const char* op, const std::vector<Tensor>& inputs,
                               std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (n->requires_grad) {
    for (const Tensor& t : inputs) n->parents.push_back(t.ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const char* op, const Tensor& a, std::size_t r) {
  if (a.rank() != r)
    throw ShapeError(op, "expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

/// Adds `g` into the parent's gradient when that parent tracks one.
inline std::vector<double>* grad_of(Node& self, std::size_t parent) {
  Node& p = *self.parents[parent];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return &p.grad;
}

// Row-major kernels. Accumulation order over k is ascending for every (i, j),
// which makes conv2d bit-identical to a naive nested loop.

/// c[m x n] += A b with A(i, p) = a[i * si + p * sp] and b stored [k x n].
inline void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t si,
                         std::size_t sp, const double* __restrict b, double* __restrict c) {
  std::size_t i = 0;
  // Four rows at a time so each row of b is loaded once per block.
  for (; i + 4 <= m; i += 4) {
    double* __restrict c0 = c + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + i * si + p * sp;
      const double a0 = ap[0], a1 = ap[si], a2 = ap[2 * si], a3 = ap[3 * si];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = bp[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* __restrict ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * si + p * sp];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  gemm_strided(m, n, k, a, k, 1, b, c);
}

// c[m x n] += a^T b with a stored [k x m].
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  gemm_strided(m, n, k, a, 1, m, b, c);
}

// c[m x n] += a b^T with b stored [n x k]. Transposes b once so the inner
// loop runs over j.
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_strided(m, n, k, a, k, 1, bt.data(), c);
}

struct AxisSplit {
  std::size_t outer, axis, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same("add", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(v), "add", {a, b}, [](Node& s) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = detail::grad_of(s, p))
        for (std::size_t i = 0; i < s.grad.size(); ++i) (*g)[i] += s.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same("sub", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(v), "sub", {a, b}, [](Node& s) {
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) (*g)[i] += s.grad[i];
    if (auto* g = detail::grad_of(s, 1))
      for (std::size_t i = 0; i < s.grad.size(); ++i) (*g)[i] -= s.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same("mul", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(v), "mul", {a, b}, [](Node& s) {
    const auto& av = s.parents[0]->value;
    const auto& bv = s.parents[1]->value;
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) (*g)[i] += s.grad[i] * bv[i];
    if (auto* g = detail::grad_of(s, 1))
      for (std::size_t i = 0; i < s.grad.size(); ++i) (*g)[i] += s.grad[i] * av[i];
  });
}

inline Tensor scale(const Tensor& a, double k) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * k;
  return detail::make_result(a.shape(), std::move(v), "scale", {a}, [k](Node& s) {
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) (*g)[i] += s.grad[i] * k;
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] > 0 ? a[i] : 0.0;
  return detail::make_result(a.shape(), std::move(v), "relu", {a}, [](Node& s) {
    const auto& x = s.parents[0]->value;
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i)
        if (x[i] > 0) (*g)[i] += s.grad[i];
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = sigmoid_scalar(a[i]);
  return detail::make_result(a.shape(), std::move(v), "sigmoid", {a}, [](Node& s) {
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) (*g)[i] += s.grad[i] * s.value[i] * (1.0 - s.value[i]);
  });
}

/// Same values, no gradient path. Used for stop-gradient weights.
inline Tensor detach(const Tensor& a) { return Tensor::from(a.shape(), a.values()); }

/// Elementwise smooth-L1: 0.5 x^2 / beta for |x| < beta, |x| - 0.5 beta otherwise.
inline Tensor smooth_l1(const Tensor& x, double beta = 1.0) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double ax = std::abs(x[i]);
    v[i] = ax < beta ? 0.5 * x[i] * x[i] / beta : ax - 0.5 * beta;
  }
  return detail::make_result(x.shape(), std::move(v), "smooth_l1", {x}, [beta](Node& s) {
    const auto& xv = s.parents[0]->value;
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) {
        const double d = std::abs(xv[i]) < beta ? xv[i] / beta : (xv[i] > 0 ? 1.0 : (xv[i] < 0 ? -1.0 : 0.0));
        (*g)[i] += s.grad[i] * d;
      }
  });
}

inline Tensor abs(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::abs(x[i]);
  return detail::make_result(x.shape(), std::move(v), "abs", {x}, [](Node& s) {
    const auto& xv = s.parents[0]->value;
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i)
        (*g)[i] += s.grad[i] * (xv[i] > 0 ? 1.0 : (xv[i] < 0 ? -1.0 : 0.0));
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& a) {
  double t = 0;
  for (double v : a.values()) t += v;
  return detail::make_result({1}, {t}, "sum", {a}, [](Node& s) {
    if (auto* g = detail::grad_of(s, 0))
      for (double& x : *g) x += s.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
  detail::require_same("mse_loss", a, b);
  const auto d = sub(a, b);
  return mean(mul(d, d));
}

inline Tensor smooth_l1_loss(const Tensor& a, const Tensor& b, double beta = 1.0) {
  detail::require_same("smooth_l1_loss", a, b);
  return mean(smooth_l1(sub(a, b), beta));
}

/// Sum over all elements of the squared entries (squared Frobenius norm).
inline Tensor sum_squares(const Tensor& a) { return sum(mul(a, a)); }

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) throw ShapeError("reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_result(std::move(shape), a.values(), "reshape", {a}, [](Node& s) {
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) (*g)[i] += s.grad[i];
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = a[i * c + j];
  return detail::make_result({c, r}, std::move(v), "transpose", {a}, [r, c](Node& s) {
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += s.grad[j * r + i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat", "axis out of range for " + shape_str(out_shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = out_shape;
    if (a.size() != b.size()) throw ShapeError("concat", shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat", shape_str(p.shape()) + " vs " + shape_str(out_shape));
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  const auto sp = detail::split_axis(out_shape, axis);
  std::vector<double> v(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  v.begin() + static_cast<std::ptrdiff_t>((o * sp.axis + off) * sp.inner));
    off += len;
  }
  return detail::make_result_list(out_shape, std::move(v), "concat", parts, [sp, offsets](Node& s) {
    for (std::size_t k = 0; k < s.parents.size(); ++k) {
      auto* g = detail::grad_of(s, k);
      if (!g) continue;
      const std::size_t len = s.parents[k]->value.size() / (sp.outer * sp.inner);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < len * sp.inner; ++i)
          (*g)[o * len * sp.inner + i] += s.grad[(o * sp.axis + offsets[k]) * sp.inner + i];
    }
  });
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin > end || end > a.dim(axis))
    throw ShapeError("slice", shape_str(a.shape()) + " axis " + std::to_string(axis) + " [" + std::to_string(begin) +
                                  ", " + std::to_string(end) + ")");
  const auto sp = detail::split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> v(numel(out_shape));
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>((o * sp.axis + begin) * sp.inner), len * sp.inner,
                v.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner));
  return detail::make_result(out_shape, std::move(v), "slice", {a}, [sp, begin, len](Node& s) {
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < len * sp.inner; ++i)
          (*g)[(o * sp.axis + begin) * sp.inner + i] += s.grad[o * len * sp.inner + i];
  });
}

/// Picks entries `idx` along `axis` (duplicates allowed).
inline Tensor index_select(const Tensor& a, std::size_t axis, std::vector<std::size_t> idx) {
  if (axis >= a.rank()) throw ShapeError("index_select", "axis out of range for " + shape_str(a.shape()));
  const auto sp = detail::split_axis(a.shape(), axis);
  for (std::size_t i : idx)
    if (i >= sp.axis) throw ShapeError("index_select", "index " + std::to_string(i) + " out of " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = idx.size();
  const std::size_t n = idx.size();
  std::vector<double> v(numel(out_shape));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>((o * sp.axis + idx[k]) * sp.inner), sp.inner,
                  v.begin() + static_cast<std::ptrdiff_t>((o * n + k) * sp.inner));
  return detail::make_result(out_shape, std::move(v), "index_select", {a}, [sp, idx = std::move(idx)](Node& s) {
    auto* g = detail::grad_of(s, 0);
    if (!g) return;
    const std::size_t n = idx.size();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i)
          (*g)[(o * sp.axis + idx[k]) * sp.inner + i] += s.grad[(o * n + k) * sp.inner + i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(m * n, 0.0);
  detail::gemm_nn(m, n, k, a.values().data(), b.values().data(), v.data());
  return detail::make_result({m, n}, std::move(v), "matmul", {a, b}, [m, k, n](Node& s) {
    const auto& av = s.parents[0]->value;
    const auto& bv = s.parents[1]->value;
    if (auto* g = detail::grad_of(s, 0)) detail::gemm_nt(m, k, n, s.grad.data(), bv.data(), g->data());
    if (auto* g = detail::grad_of(s, 1)) detail::gemm_tn(k, n, m, av.data(), s.grad.data(), g->data());
  });
}

/// x [N x C] + b [C], or x [C x H x W] + b [C] per channel.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  detail::require_rank("add_bias", b, 1);
  std::size_t channels, inner, rows;
  if (x.rank() == 2) {
    rows = x.dim(0), channels = x.dim(1), inner = 1;
  } else if (x.rank() == 3) {
    rows = 1, channels = x.dim(0), inner = x.dim(1) * x.dim(2);
  } else {
    throw ShapeError("add_bias", "unsupported input " + shape_str(x.shape()));
  }
  if (b.dim(0) != channels) throw ShapeError("add_bias", shape_str(x.shape()) + " + " + shape_str(b.shape()));
  std::vector<double> v = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) v[(r * channels + c) * inner + i] += b[c];
  return detail::make_result(x.shape(), std::move(v), "add_bias", {x, b}, [rows, channels, inner](Node& s) {
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) (*g)[i] += s.grad[i];
    if (auto* g = detail::grad_of(s, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t i = 0; i < inner; ++i) (*g)[c] += s.grad[(r * channels + c) * inner + i];
  });
}

/// Per-channel normalization over H x W followed by a learned scale,
/// y = gamma_c (x - mean_c) / sqrt(var_c + eps). There is no shift, so an
/// all-zero map stays zero.
inline Tensor channel_norm(const Tensor& x, const Tensor& gamma, double eps = 1e-5) {
  detail::require_rank("channel_norm", x, 3);
  detail::require_rank("channel_norm", gamma, 1);
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  if (gamma.dim(0) != c) throw ShapeError("channel_norm", shape_str(x.shape()) + " with " + shape_str(gamma.shape()));
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  std::vector<double> v(x.numel());
  const auto& xv = x.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xi = xv.data() + ch * n;
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += xi[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (xi[i] - mean) * (xi[i] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    for (std::size_t i = 0; i < n; ++i) {
      const double h = (xi[i] - mean) * is;
      (*xhat)[ch * n + i] = h;
      v[ch * n + i] = gamma[ch] * h;
    }
  }
  return detail::make_result(x.shape(), std::move(v), "channel_norm", {x, gamma}, [c, n, xhat, inv_std](Node& s) {
    const auto& gv = s.parents[1]->value;
    auto* gx = detail::grad_of(s, 0);
    auto* gg = detail::grad_of(s, 1);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* dy = s.grad.data() + ch * n;
      const double* h = xhat->data() + ch * n;
      double sum_dy = 0, sum_dy_h = 0;
      for (std::size_t i = 0; i < n; ++i) {
        sum_dy += dy[i];
        sum_dy_h += dy[i] * h[i];
      }
      if (gg) (*gg)[ch] += sum_dy_h;
      if (gx) {
        const double k = gv[ch] * (*inv_std)[ch] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          (*gx)[ch * n + i] += k * (static_cast<double>(n) * dy[i] - sum_dy - h[i] * sum_dy_h);
      }
    }
  });
}

/// x [C x H x W] scaled per position by w [1 x H x W].
inline Tensor mul_spatial(const Tensor& x, const Tensor& w) {
  detail::require_rank("mul_spatial", x, 3);
  detail::require_rank("mul_spatial", w, 3);
  if (w.dim(0) != 1 || w.dim(1) != x.dim(1) || w.dim(2) != x.dim(2))
    throw ShapeError("mul_spatial", shape_str(x.shape()) + " * " + shape_str(w.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<double> v(x.numel());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < hw; ++i) v[k * hw + i] = x[k * hw + i] * w[i];
  return detail::make_result(x.shape(), std::move(v), "mul_spatial", {x, w}, [c, hw](Node& s) {
    const auto& xv = s.parents[0]->value;
    const auto& wv = s.parents[1]->value;
    if (auto* g = detail::grad_of(s, 0))
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t i = 0; i < hw; ++i) (*g)[k * hw + i] += s.grad[k * hw + i] * wv[i];
    if (auto* g = detail::grad_of(s, 1))
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t i = 0; i < hw; ++i) (*g)[i] += s.grad[k * hw + i] * xv[k * hw + i];
  });
}

/// Numerically stable softmax along `axis`.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("softmax", "axis out of range for " + shape_str(a.shape()));
  const auto sp = detail::split_axis(a.shape(), axis);
  std::vector<double> v(a.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      auto at = [&](std::size_t k) { return (o * sp.axis + k) * sp.inner + in; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.axis; ++k) mx = std::max(mx, a[at(k)]);
      double z = 0;
      for (std::size_t k = 0; k < sp.axis; ++k) z += (v[at(k)] = std::exp(a[at(k)] - mx));
      for (std::size_t k = 0; k < sp.axis; ++k) v[at(k)] /= z;
    }
  return detail::make_result(a.shape(), std::move(v), "softmax", {a}, [sp](Node& s) {
    auto* g = detail::grad_of(s, 0);
    if (!g) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        auto at = [&](std::size_t k) { return (o * sp.axis + k) * sp.inner + in; };
        double dot = 0;
        for (std::size_t k = 0; k < sp.axis; ++k) dot += s.grad[at(k)] * s.value[at(k)];
        for (std::size_t k = 0; k < sp.axis; ++k) (*g)[at(k)] += s.value[at(k)] * (s.grad[at(k)] - dot);
      }
  });
}

// ---------------------------------------------------------------------------
// Convolutions over [C x H x W] maps

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
};

inline ConvGeometry conv_geometry(const Shape& x, std::size_t k, std::size_t stride, std::size_t pad) {
  ConvGeometry g{x[0], x[1], x[2], k, stride, pad, 0, 0};
  if (g.h + 2 * pad < k || g.w + 2 * pad < k) throw ShapeError("conv2d", "kernel larger than padded input");
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  return g;
}

namespace detail {

// col[(ci,ky,kx) x (oy,ox)]
inline std::vector<double> im2col(const double* x, const ConvGeometry& g) {
  const std::size_t kk = g.k * g.k, p = g.ho * g.wo;
  std::vector<double> col(g.cin * kk * p, 0.0);
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col.data() + ((ci * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            row[oy * g.wo + ox] = x[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)];
          }
        }
      }
  return col;
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((ci * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

/// x [Cin x H x W], weight [Cout x Cin x k x k]; no bias (see add_bias).
inline Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride = 1, std::size_t pad = 1) {
  detail::require_rank("conv2d", x, 3);
  detail::require_rank("conv2d", weight, 4);
  const std::size_t k = weight.dim(2);
  if (weight.dim(1) != x.dim(0) || weight.dim(3) != k || stride == 0)
    throw ShapeError("conv2d", "input " + shape_str(x.shape()) + " with weight " + shape_str(weight.shape()));
  const ConvGeometry g = conv_geometry(x.shape(), k, stride, pad);
  const std::size_t cout = weight.dim(0), kdim = g.cin * k * k, p = g.ho * g.wo;
  auto col = std::make_shared<std::vector<double>>(detail::im2col(x.values().data(), g));
  std::vector<double> v(cout * p, 0.0);
  detail::gemm_nn(cout, p, kdim, weight.values().data(), col->data(), v.data());
  return detail::make_result({cout, g.ho, g.wo}, std::move(v), "conv2d", {x, weight}, [g, cout, kdim, p, col](Node& s) {
    const auto& wv = s.parents[1]->value;
    if (auto* gw = detail::grad_of(s, 1)) detail::gemm_nt(cout, kdim, p, s.grad.data(), col->data(), gw->data());
    if (auto* gx = detail::grad_of(s, 0)) {
      std::vector<double> gcol(kdim * p, 0.0);
      detail::gemm_tn(kdim, p, cout, wv.data(), s.grad.data(), gcol.data());
      detail::col2im_add(gcol.data(), g, gx->data());
    }
  });
}

/// Transposed 3x3 convolution, stride 2, padding 1, output padding 1: maps
/// [Cin x H x W] to [Cout x 2H x 2W]. weight is [Cin x Cout x 3 x 3].
inline Tensor deconv2d(const Tensor& x, const Tensor& weight) {
  detail::require_rank("deconv2d", x, 3);
  detail::require_rank("deconv2d", weight, 4);
  if (weight.dim(0) != x.dim(0) || weight.dim(2) != 3 || weight.dim(3) != 3)
    throw ShapeError("deconv2d", "input " + shape_str(x.shape()) + " with weight " + shape_str(weight.shape()));
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = weight.dim(1);
  // The adjoint of a stride-2 conv over the 2H x 2W output.
  const ConvGeometry g{cout, 2 * h, 2 * w, 3, 2, 1, h, w};
  const std::size_t kdim = cout * 9, p = h * w;
  std::vector<double> col(kdim * p, 0.0);
  detail::gemm_tn(kdim, p, cin, weight.values().data(), x.values().data(), col.data());
  std::vector<double> v(cout * 4 * h * w, 0.0);
  detail::col2im_add(col.data(), g, v.data());
  return detail::make_result({cout, 2 * h, 2 * w}, std::move(v), "deconv2d", {x, weight},
                             [g, cin, kdim, p](Node& s) {
                               const auto gcol = detail::im2col(s.grad.data(), g);
                               const auto& xv = s.parents[0]->value;
                               const auto& wv = s.parents[1]->value;
                               if (auto* gx = detail::grad_of(s, 0))
                                 detail::gemm_nn(cin, p, kdim, wv.data(), gcol.data(), gx->data());
                               if (auto* gw = detail::grad_of(s, 1))
                                 detail::gemm_nt(cin, kdim, p, xv.data(), gcol.data(), gw->data());
                             });
}

/// Bilinear upsampling by an integer factor with half-pixel centres
/// (align_corners = false), clamping at the border.
inline Tensor bilinear_upsample(const Tensor& x, std::size_t factor) {
  detail::require_rank("bilinear_upsample", x, 3);
  if (factor == 0) throw ShapeError("bilinear_upsample", "factor must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h * factor, wo = w * factor;
  struct Tap {
    std::size_t i0, i1;
    double t;
  };
  auto taps = [factor](std::size_t n_out, std::size_t n_in) {
    std::vector<Tap> out(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
      if (src < 0) src = 0;
      auto i0 = static_cast<std::size_t>(src);
      if (i0 > n_in - 1) i0 = n_in - 1;
      const std::size_t i1 = std::min(i0 + 1, n_in - 1);
      out[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return out;
  };
  const auto ty = taps(ho, h), tx = taps(wo, w);
  std::vector<double> v(c * ho * wo);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto& a = ty[oy];
        const auto& b = tx[ox];
        const double* xk = x.values().data() + k * h * w;
        v[(k * ho + oy) * wo + ox] = (1 - a.t) * ((1 - b.t) * xk[a.i0 * w + b.i0] + b.t * xk[a.i0 * w + b.i1]) +
                                     a.t * ((1 - b.t) * xk[a.i1 * w + b.i0] + b.t * xk[a.i1 * w + b.i1]);
      }
  return detail::make_result({c, ho, wo}, std::move(v), "bilinear_upsample", {x}, [c, h, w, ho, wo, ty, tx](Node& s) {
    auto* g = detail::grad_of(s, 0);
    if (!g) return;
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const auto& a = ty[oy];
          const auto& b = tx[ox];
          const double go = s.grad[(k * ho + oy) * wo + ox];
          double* gk = g->data() + k * h * w;
          gk[a.i0 * w + b.i0] += go * (1 - a.t) * (1 - b.t);
          gk[a.i0 * w + b.i1] += go * (1 - a.t) * b.t;
          gk[a.i1 * w + b.i0] += go * a.t * (1 - b.t);
          gk[a.i1 * w + b.i1] += go * a.t * b.t;
        }
  });
}

// ---------------------------------------------------------------------------
// Sparse voxel helpers

/// Max over rows sharing a BEV cell: features [N x C], cell[i] in [0, H*W).
/// Output [C x H x W]; empty cells are zero. Ties go to the lowest row.
inline Tensor scatter_max(const Tensor& features, const std::vector<std::size_t>& cell, std::size_t h, std::size_t w) {
  detail::require_rank("scatter_max", features, 2);
  if (cell.size() != features.dim(0)) throw ShapeError("scatter_max", "cell index count vs " + shape_str(features.shape()));
  const std::size_t n = features.dim(0), c = features.dim(1), hw = h * w;
  std::vector<double> v(c * hw, 0.0);
  auto arg = std::make_shared<std::vector<std::ptrdiff_t>>(c * hw, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (cell[i] >= hw) throw ShapeError("scatter_max", "cell index out of range");
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t o = k * hw + cell[i];
      const double val = features[i * c + k];
      if ((*arg)[o] < 0 || val > v[o]) {
        v[o] = val;
        (*arg)[o] = static_cast<std::ptrdiff_t>(i);
      }
    }
  }
  return detail::make_result({c, h, w}, std::move(v), "scatter_max", {features}, [arg, c, hw](Node& s) {
    auto* g = detail::grad_of(s, 0);
    if (!g) return;
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t q = 0; q < hw; ++q) {
        const std::ptrdiff_t r = (*arg)[k * hw + q];
        if (r >= 0) (*g)[static_cast<std::size_t>(r) * c + k] += s.grad[k * hw + q];
      }
  });
}

/// Compressed neighbour lists: neighbours of row i are index[offset[i] .. offset[i+1]).
struct Adjacency {
  std::vector<std::size_t> offset{0};
  std::vector<std::size_t> index;
  std::size_t rows() const { return offset.size() - 1; }
};

/// Row i of the output is the mean of its neighbours' rows, or zero if it has none.
inline Tensor neighbor_mean(const Tensor& x, const Adjacency& adj) {
  detail::require_rank("neighbor_mean", x, 2);
  if (adj.rows() != x.dim(0)) throw ShapeError("neighbor_mean", "adjacency rows vs " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> v(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t deg = adj.offset[i + 1] - adj.offset[i];
    if (deg == 0) continue;
    const double inv = 1.0 / static_cast<double>(deg);
    for (std::size_t e = adj.offset[i]; e < adj.offset[i + 1]; ++e)
      for (std::size_t k = 0; k < c; ++k) v[i * c + k] += x[adj.index[e] * c + k] * inv;
  }
  return detail::make_result({n, c}, std::move(v), "neighbor_mean", {x}, [adj, n, c](Node& s) {
    auto* g = detail::grad_of(s, 0);
    if (!g) return;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t deg = adj.offset[i + 1] - adj.offset[i];
      if (deg == 0) continue;
      const double inv = 1.0 / static_cast<double>(deg);
      for (std::size_t e = adj.offset[i]; e < adj.offset[i + 1]; ++e)
        for (std::size_t k = 0; k < c; ++k) (*g)[adj.index[e] * c + k] += s.grad[i * c + k] * inv;
    }
  });
}

// ---------------------------------------------------------------------------

/// Penalty-reduced focal loss on logits, summed over all positions:
/// positives (target == 1): -(1-p)^a log p; others: -(1-t)^b p^a log(1-p).
inline Tensor focal_loss(const Tensor& logits, const Tensor& target, double alpha = 2.0, double beta = 4.0) {
  detail::require_same("focal_loss", logits, target);
  auto softplus = [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  double total = 0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double x = logits[i], t = target[i], p = sigmoid_scalar(x);
    if (t >= 1.0)
      total += std::pow(1 - p, alpha) * softplus(-x);
    else
      total += std::pow(1 - t, beta) * std::pow(p, alpha) * softplus(x);
  }
  return detail::make_result({1}, {total}, "focal_loss", {logits, target}, [alpha, beta, softplus](Node& s) {
    auto* g = detail::grad_of(s, 0);
    if (!g) return;
    const auto& xs = s.parents[0]->value;
    const auto& ts = s.parents[1]->value;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double x = xs[i], t = ts[i], p = sigmoid_scalar(x), q = 1 - p;
      double d;
      if (t >= 1.0) {
        // d/dx [ q^a * softplus(-x) ],  dq/dx = -p q,  d softplus(-x)/dx = -q
        d = alpha * std::pow(q, alpha - 1) * (-p * q) * softplus(-x) - std::pow(q, alpha) * q;
      } else {
        // d/dx [ (1-t)^b p^a softplus(x) ],  dp/dx = p q,  d softplus(x)/dx = p
        d = std::pow(1 - t, beta) * (alpha * std::pow(p, alpha - 1) * p * q * softplus(x) + std::pow(p, alpha) * p);
      }
      (*g)[i] += s.grad[0] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Nodes reachable from `root` that carry gradients, parents before children.
inline std::vector<Node*> build_tape(const Tensor& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Accumulates d(loss)/d(leaf) into every reachable leaf requiring a gradient.
/// A graph can be walked once; zero the leaves between independent losses.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw Error("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  Node* root = loss.node();
  if (root->backward_done) throw Error("backward: graph already differentiated; rebuild it or reset gradients");
  root->backward_done = true;
  if (!root->requires_grad) return;
  const auto tape = build_tape(loss);
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are not needed after the walk.
  for (Node* n : tape)
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
}

}  // namespace smf::ad
