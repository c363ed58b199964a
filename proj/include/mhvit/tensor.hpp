#pragma once

// Dense float64 tensors with reverse-mode differentiation.
//
// Storage is row-major with explicit shape metadata. Every op records its
// parents and a backward closure when gradient recording is enabled and at
// least one input requires a gradient. Gradients accumulate additively into
// leaf tensors; call zero_grad() before each step.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mhvit/error.hpp"

namespace mhvit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

// Disables graph recording for its lifetime (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) {
    detail::grad_mode_enabled = false;
  }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (std::find(shape.begin(), shape.end(), std::size_t{0}) != shape.end()) {
      throw ShapeError("tensor dimensions must be positive, got " +
                       shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value),
                  requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  // Negative indices count from the back.
  std::size_t dim(int axis) const {
    const int n = static_cast<int>(ndim());
    const int a = axis < 0 ? axis + n : axis;
    if (a < 0 || a >= n) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                       shape_str(shape()));
    }
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  double item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Copy of the values with no history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_mode_enabled) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (!needs) return out;
  Node* node = out.node();
  node->requires_grad = true;
  for (auto& t : inputs) node->parents.push_back(t.node_ptr());
  node->backward = std::move(backward);
  return out;
}

// Index of b's element paired with flat index i of a when b's shape is a
// suffix of a's shape.
inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <class Fwd, class GradA, class GradB>
Tensor binary_suffix(const Tensor& a, const Tensor& b, const char* name,
                     Fwd fwd, GradA grad_a, GradB grad_b) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(name) + ": shape " + shape_str(b.shape()) +
                     " does not broadcast onto " + shape_str(a.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t nb = b.numel();
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i % nb]);
  return make_result(
      a.shape(), std::move(out), {a, b},
      [grad_a, grad_b, n, nb](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        if (pa->requires_grad) {
          auto& ga = pa->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            ga[i] += grad_a(self.grad[i], pa->data[i], pb->data[i % nb]);
        }
        if (pb->requires_grad) {
          auto& gb = pb->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            gb[i % nb] += grad_b(self.grad[i], pa->data[i], pb->data[i % nb]);
        }
      });
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
inline void gemm_nt(const double* dc, const double* b, double* da,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* drow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
inline void gemm_tn(const double* a, const double* dc, double* db,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* drow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* dbrow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * drow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

// a + b, where b's shape equals a's shape or is a suffix of it.
inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_suffix(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_suffix(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_suffix(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [s](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += s * self.grad[i];
                             });
}

inline Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] * d[i];
  return detail::make_result(a.shape(), std::move(out), {a},
                             [](detail::Node& self) {
                               detail::Node* p = self.parents[0].get();
                               auto& g = p->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += 2.0 * p->data[i] * self.grad[i];
                             });
}

// Gaussian error linear unit, exact erf form.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(x.numel());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * d[i] * (1.0 + std::erf(d[i] * inv_sqrt2));
  return detail::make_result(
      x.shape(), std::move(out), {x}, [](detail::Node& self) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt_2pi = 0.39894228040143267794;
        detail::Node* p = self.parents[0].get();
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = p->data[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
          g[i] += self.grad[i] * (cdf + v * pdf);
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return detail::make_result({1}, {acc}, {a}, [](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a},
                             [](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += self.grad[i];
                             });
}

// Reorders axes: output axis i is input axis axes[i].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t nd = a.ndim();
  if (axes.size() != nd) throw ShapeError("permute: axis count mismatch");
  std::vector<bool> seen(nd, false);
  for (auto ax : axes) {
    if (ax >= nd || seen[ax]) throw ShapeError("permute: invalid axes");
    seen[ax] = true;
  }
  Shape out_shape(nd);
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t i = nd; i-- > 1;)
    in_strides[i - 1] = in_strides[i] * a.shape()[i];
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = a.shape()[axes[i]];

  // src[i] = input flat index feeding output flat index i.
  const std::size_t n = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < nd; ++d) off += idx[d] * in_strides[axes[d]];
    (*src)[i] = off;
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[(*src)[i]];
  return detail::make_result(std::move(out_shape), std::move(out), {a},
                             [src](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[(*src)[i]] += self.grad[i];
                             });
}

inline Tensor transpose_last2(const Tensor& a) {
  const std::size_t nd = a.ndim();
  if (nd < 2) throw ShapeError("transpose needs at least 2 dims");
  std::vector<std::size_t> axes(nd);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[nd - 1], axes[nd - 2]);
  return permute(a, axes);
}

// Columns [start, start+len) of the last dimension.
inline Tensor slice_lastdim(const Tensor& a, std::size_t start, std::size_t len) {
  const std::size_t width = a.dim(-1);
  if (len == 0 || start + len > width) {
    throw ShapeError("slice [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of range for " +
                     shape_str(a.shape()));
  }
  const std::size_t rows = a.numel() / width;
  Shape shape = a.shape();
  shape.back() = len;
  std::vector<double> out(rows * len);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(r * width + start),
                len, out.begin() + static_cast<std::ptrdiff_t>(r * len));
  return detail::make_result(
      std::move(shape), std::move(out), {a},
      [rows, width, start, len](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < len; ++j)
            g[r * width + start + j] += self.grad[r * len + j];
      });
}

// (B,T,D) with a (D) token prepended to every sequence -> (B,T+1,D).
inline Tensor prepend_token(const Tensor& x, const Tensor& token) {
  if (x.ndim() != 3 || token.numel() != x.dim(2)) {
    throw ShapeError("prepend_token: x " + shape_str(x.shape()) + ", token " +
                     shape_str(token.shape()));
  }
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<double> out(b * (t + 1) * d);
  const auto xd = x.data();
  const auto td = token.data();
  for (std::size_t i = 0; i < b; ++i) {
    double* dst = out.data() + i * (t + 1) * d;
    std::copy(td.begin(), td.end(), dst);
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(i * t * d), t * d,
                dst + d);
  }
  return detail::make_result(
      {b, t + 1, d}, std::move(out), {x, token},
      [b, t, d](detail::Node& self) {
        detail::Node* px = self.parents[0].get();
        detail::Node* pt = self.parents[1].get();
        for (std::size_t i = 0; i < b; ++i) {
          const double* src = self.grad.data() + i * (t + 1) * d;
          if (pt->requires_grad) {
            auto& gt = pt->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) gt[j] += src[j];
          }
          if (px->requires_grad) {
            auto& gx = px->ensure_grad();
            for (std::size_t j = 0; j < t * d; ++j) gx[i * t * d + j] += src[d + j];
          }
        }
      });
}

// Token `index` of every sequence: (B,T,D) -> (B,D).
inline Tensor select_token(const Tensor& x, std::size_t index) {
  if (x.ndim() != 3 || index >= x.dim(1)) {
    throw ShapeError("select_token " + std::to_string(index) + " from " +
                     shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<double> out(b * d);
  const auto xd = x.data();
  for (std::size_t i = 0; i < b; ++i)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((i * t + index) * d),
                d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  return detail::make_result({b, d}, std::move(out), {x},
                             [b, t, d, index](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                   g[(i * t + index) * d + j] += self.grad[i * d + j];
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

// Batched matrix product. a: (..., m, k), b: (..., k, n); leading batch
// dimensions broadcast with numpy rules.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  const std::size_t nd = std::max(abatch.size(), bbatch.size());
  Shape obatch(nd, 1);
  auto dim_at = [nd](const Shape& s, std::size_t i) -> std::size_t {
    const std::size_t pad = nd - s.size();
    return i < pad ? 1 : s[i - pad];
  };
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = dim_at(abatch, i), db = dim_at(bbatch, i);
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("matmul batch dims do not broadcast: " +
                       shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    }
    obatch[i] = std::max(da, db);
  }
  const std::size_t nbatch = shape_numel(obatch);
  auto offsets = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(nbatch);
  {
    std::vector<std::size_t> idx(nd, 0);
    for (std::size_t bi = 0; bi < nbatch; ++bi) {
      std::size_t ao = 0, bo = 0, as = 1, bs = 1;
      for (std::size_t d = nd; d-- > 0;) {
        const std::size_t da = dim_at(abatch, d), db = dim_at(bbatch, d);
        if (da != 1) ao += idx[d] * as;
        if (db != 1) bo += idx[d] * bs;
        as *= da;
        bs *= db;
      }
      (*offsets)[bi] = {ao * m * k, bo * k * n};
      for (std::size_t d = nd; d-- > 0;) {
        if (++idx[d] < obatch[d]) break;
        idx[d] = 0;
      }
    }
  }
  Shape out_shape = obatch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(nbatch * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t bi = 0; bi < nbatch; ++bi) {
    const auto [ao, bo] = (*offsets)[bi];
    detail::gemm_nn(ad + ao, bd + bo, out.data() + bi * m * n, m, k, n);
  }
  return detail::make_result(
      std::move(out_shape), std::move(out), {a, b},
      [offsets, m, k, n](detail::Node& self) {
        detail::Node* pa = self.parents[0].get();
        detail::Node* pb = self.parents[1].get();
        double* ga = pa->requires_grad ? pa->ensure_grad().data() : nullptr;
        double* gb = pb->requires_grad ? pb->ensure_grad().data() : nullptr;
        for (std::size_t bi = 0; bi < offsets->size(); ++bi) {
          const auto [ao, bo] = (*offsets)[bi];
          const double* dc = self.grad.data() + bi * m * n;
          if (ga) detail::gemm_nt(dc, pb->data.data() + bo, ga + ao, m, k, n);
          if (gb) detail::gemm_tn(pa->data.data() + ao, dc, gb + bo, m, k, n);
        }
      });
}

// x: (..., in) @ weight (in, out) + bias (out). bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.ndim() != 2 || x.dim(-1) != weight.dim(0) ||
      (bias.defined() && bias.numel() != weight.dim(1))) {
    throw ShapeError("linear shape mismatch: x " + shape_str(x.shape()) +
                     ", weight " + shape_str(weight.shape()) +
                     (bias.defined() ? ", bias " + shape_str(bias.shape()) : ""));
  }
  const std::size_t in = weight.dim(0), outd = weight.dim(1);
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = outd;
  std::vector<double> out(rows * outd, 0.0);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bd.begin(), bd.end(), out.begin() + static_cast<std::ptrdiff_t>(r * outd));
  }
  detail::gemm_nn(x.data().data(), weight.data().data(), out.data(), rows, in, outd);
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
      std::move(shape), std::move(out), std::move(inputs),
      [rows, in, outd](detail::Node& self) {
        detail::Node* px = self.parents[0].get();
        detail::Node* pw = self.parents[1].get();
        const double* dy = self.grad.data();
        if (px->requires_grad)
          detail::gemm_nt(dy, pw->data.data(), px->ensure_grad().data(), rows, in, outd);
        if (pw->requires_grad)
          detail::gemm_tn(px->data.data(), dy, pw->ensure_grad().data(), rows, in, outd);
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < outd; ++j) gb[j] += dy[r * outd + j];
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and masking

// Softmax over the last dimension. Negative-infinity entries map to exactly
// zero; a row made only of negative infinity is an error.
inline Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t width = x.dim(-1);
  const std::size_t rows = x.numel() / width;
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * width;
    double* o = out.data() + r * width;
    const double mx = *std::max_element(in, in + width);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw NumericError("softmax: row " + std::to_string(r) +
                         " is entirely masked");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < width; ++j) o[j] *= inv;
  }
  return detail::make_result(
      x.shape(), std::move(out), {x}, [rows, width](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = self.data.data() + r * width;
          const double* dy = self.grad.data() + r * width;
          double dot = 0.0;
          for (std::size_t j = 0; j < width; ++j) dot += dy[j] * y[j];
          for (std::size_t j = 0; j < width; ++j)
            g[r * width + j] += y[j] * (dy[j] - dot);
        }
      });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps) {
  const std::size_t width = x.dim(-1);
  if (gamma.numel() != width || beta.numel() != width) {
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) +
                     ", beta " + shape_str(beta.shape()) + " vs x " +
                     shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw ValidationError("layer_norm: eps must be > 0");
  const std::size_t rows = x.numel() / width;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += in[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(width);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (in[j] - mu) * rs;
      (*xhat)[r * width + j] = h;
      out[r * width + j] = h * gd[j] + bd[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [xhat, rstd, rows, width](detail::Node& self) {
        detail::Node* px = self.parents[0].get();
        detail::Node* pg = self.parents[1].get();
        detail::Node* pb = self.parents[2].get();
        const double* dy = self.grad.data();
        if (pg->requires_grad) {
          auto& gg = pg->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < width; ++j)
              gg[j] += dy[r * width + j] * (*xhat)[r * width + j];
        }
        if (pb->requires_grad) {
          auto& gb = pb->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < width; ++j) gb[j] += dy[r * width + j];
        }
        if (px->requires_grad) {
          auto& gx = px->ensure_grad();
          const double inv_w = 1.0 / static_cast<double>(width);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dh = 0.0;
            for (std::size_t j = 0; j < width; ++j) {
              const double dh = dy[r * width + j] * pg->data[j];
              mean_d += dh;
              mean_dh += dh * (*xhat)[r * width + j];
            }
            mean_d *= inv_w;
            mean_dh *= inv_w;
            for (std::size_t j = 0; j < width; ++j) {
              const double dh = dy[r * width + j] * pg->data[j];
              gx[r * width + j] +=
                  (*rstd)[r] * (dh - mean_d - (*xhat)[r * width + j] * mean_dh);
            }
          }
        }
      });
}

// Boolean mask with the same rank as the tensor it is applied to; every
// mask dimension is 1 (broadcast) or equal to the tensor dimension.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> bits;  // nonzero = fill
};

// Replaces entries selected by `mask` with `value`. Gradient is zero there.
inline Tensor masked_fill(const Tensor& x, const Mask& mask, double value) {
  if (mask.shape.size() != x.ndim() || shape_numel(mask.shape) != mask.bits.size()) {
    throw ShapeError("masked_fill: mask " + shape_str(mask.shape) + " vs x " +
                     shape_str(x.shape()));
  }
  const std::size_t nd = x.ndim();
  for (std::size_t d = 0; d < nd; ++d) {
    if (mask.shape[d] != 1 && mask.shape[d] != x.shape()[d]) {
      throw ShapeError("masked_fill: mask " + shape_str(mask.shape) +
                       " does not broadcast onto " + shape_str(x.shape()));
    }
  }
  std::vector<std::size_t> mstrides(nd, 0);
  {
    std::size_t s = 1;
    for (std::size_t d = nd; d-- > 0;) {
      mstrides[d] = mask.shape[d] == 1 ? 0 : s;
      s *= mask.shape[d];
    }
  }
  const std::size_t n = x.numel();
  auto filled = std::make_shared<std::vector<std::uint8_t>>(n);
  std::vector<double> out(x.data().begin(), x.data().end());
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t mo = 0;
    for (std::size_t d = 0; d < nd; ++d) mo += idx[d] * mstrides[d];
    if (mask.bits[mo]) {
      (*filled)[i] = 1;
      out[i] = value;
    }
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < x.shape()[d]) break;
      idx[d] = 0;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [filled](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (!(*filled)[i]) g[i] += self.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// Differentiation

// Populates grad on every reachable tensor that requires it. Leaf gradients
// accumulate; intermediate gradients are released after propagation so that
// a second forward/backward pair accumulates exactly once more.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->backward) continue;
    if (!node->grad.empty()) node->backward(*node);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

}  // namespace mhvit
