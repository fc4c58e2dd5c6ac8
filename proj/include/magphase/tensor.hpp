// Copyright 2026 The magphase Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major float64 tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Every op returns a new node
// that remembers its parents and a closure propagating its gradient back to
// them. The graph lives as long as the tensors referencing it. All reductions
// run in a fixed index order, so identical inputs give bit-identical outputs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace magphase {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b)) {}
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Mutable access is for leaves (parameters, inputs); editing an interior
  // node after the forward pass invalidates its backward closure.
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  void backward() const;

  // Internal plumbing used by ops.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     shape_str(shape()));
  }
  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad.size() == n->data.size()) n->backward(*n);
  }
}

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool rg = std::any_of(parents.begin(), parents.end(),
                        [](const Tensor& p) { return p.requires_grad(); });
  if (rg) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(n));
}

// Parent grad accessor; returns nullptr when the parent needs no gradient.
inline double* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

inline const double* pdata(Node& self, std::size_t i) {
  return self.parents[i]->data.data();
}

// Row-major kernels. All accumulate into C. Each output element is summed
// in a fixed order, so results do not depend on tiling.

constexpr std::size_t kGemmTile = 256;

// C[m,n] += A(i,p) * B[p,n] with A(i,p) = a[i * sa_i + p * sa_p]; columns
// are tiled and four output rows share each load of B.
inline void gemm_rows(const double* a, std::size_t sa_i, std::size_t sa_p, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t j0 = 0; j0 < n; j0 += kGemmTile) {
    const std::size_t jn = std::min(kGemmTile, n - j0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      double* __restrict c0 = c + i * n + j0;
      double* __restrict c1 = c0 + n;
      double* __restrict c2 = c1 + n;
      double* __restrict c3 = c2 + n;
      for (std::size_t p = 0; p < k; ++p) {
        const double a0 = a[i * sa_i + p * sa_p], a1 = a[(i + 1) * sa_i + p * sa_p];
        const double a2 = a[(i + 2) * sa_i + p * sa_p], a3 = a[(i + 3) * sa_i + p * sa_p];
        const double* __restrict bp = b + p * n + j0;
        for (std::size_t j = 0; j < jn; ++j) {
          const double bv = bp[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      double* __restrict ci = c + i * n + j0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * sa_i + p * sa_p];
        const double* __restrict bp = b + p * n + j0;
        for (std::size_t j = 0; j < jn; ++j) ci[j] += av * bp[j];
      }
    }
  }
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  gemm_rows(a, k, 1, b, c, m, k, n);
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  gemm_rows(a, 1, m, b, c, m, k, n);
}

// C[m,n] += A[m,k] * B[n,k]^T. The shared axis is cut into tiles; within a
// tile each dot product runs on eight independent lanes.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  constexpr std::size_t kLanes = 8;
  for (std::size_t p0 = 0; p0 < k; p0 += kGemmTile) {
    const std::size_t pn = std::min(kGemmTile, k - p0);
    const std::size_t pv = pn - pn % kLanes;
    for (std::size_t i = 0; i < m; ++i) {
      const double* __restrict ai = a + i * k + p0;
      for (std::size_t j = 0; j < n; ++j) {
        const double* __restrict bj = b + j * k + p0;
        double acc[kLanes] = {};
        for (std::size_t p = 0; p < pv; p += kLanes)
          for (std::size_t l = 0; l < kLanes; ++l) acc[l] += ai[p + l] * bj[p + l];
        double s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
        for (std::size_t p = pv; p < pn; ++p) s += ai[p] * bj[p];
        c[i * n + j] += s;
      }
    }
  }
}

// (outer, len, inner) decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("add", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::Node& self) {
                               const std::size_t n = self.data.size();
                               for (std::size_t k = 0; k < 2; ++k) {
                                 if (double* g = detail::pgrad(self, k)) {
                                   for (std::size_t i = 0; i < n; ++i)
                                     g[i] += self.grad[i];
                                 }
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::Node& self) {
                               const std::size_t n = self.data.size();
                               if (double* g = detail::pgrad(self, 0))
                                 for (std::size_t i = 0; i < n; ++i)
                                   g[i] += self.grad[i];
                               if (double* g = detail::pgrad(self, 1))
                                 for (std::size_t i = 0; i < n; ++i)
                                   g[i] -= self.grad[i];
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const std::size_t n = self.data.size();
        const double* x = detail::pdata(self, 0);
        const double* y = detail::pdata(self, 1);
        if (double* g = detail::pgrad(self, 0))
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * y[i];
        if (double* g = detail::pgrad(self, 1))
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * x[i];
      });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [s](detail::Node& self) {
                               double* g = detail::pgrad(self, 0);
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[i] += s * self.grad[i];
                             });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [](detail::Node& self) {
                               double* g = detail::pgrad(self, 0);
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[i] += self.grad[i];
                             });
}

namespace detail {

template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D dfdx) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result(a.shape(), std::move(out), {a},
                     [dfdx](Node& self) {
                       double* g = pgrad(self, 0);
                       const double* x = pdata(self, 0);
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         g[i] += self.grad[i] * dfdx(x[i], self.data[i]);
                     });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor cos(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::cos(x); },
      [](double x, double) { return -std::sin(x); });
}

// acos with its argument clamped to [-1+eps, 1-eps]; zero gradient outside.
inline Tensor arccos_clamped(const Tensor& a, double eps = 1e-7) {
  const double lo = -1.0 + eps, hi = 1.0 - eps;
  return detail::unary(
      a, [=](double x) { return std::acos(std::clamp(x, lo, hi)); },
      [=](double x, double) {
        if (x < lo || x > hi) return 0.0;
        return -1.0 / std::sqrt(1.0 - x * x);
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a},
                             [](detail::Node& self) {
                               double* g = detail::pgrad(self, 0);
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[i] += self.grad[i];
                             });
}

// Merges every axis from `start_axis` on into one.
inline Tensor flatten(const Tensor& a, std::size_t start_axis = 0) {
  if (start_axis > a.rank()) throw ShapeError("flatten: bad axis for " + shape_str(a.shape()));
  Shape s(a.shape().begin(), a.shape().begin() + static_cast<long>(start_axis));
  std::size_t rest = 1;
  for (std::size_t i = start_axis; i < a.rank(); ++i) rest *= a.dim(i);
  s.push_back(rest);
  return reshape(a, std::move(s));
}

// Swaps the last two axes.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(a.rank() - 2), n = a.dim(a.rank() - 1);
  const std::size_t batch = a.numel() / (m * n);
  Shape s = a.shape();
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[b * m * n + j * m + i] = x[b * m * n + i * n + j];
  return detail::make_result(std::move(s), std::move(out), {a},
                             [m, n, batch](detail::Node& self) {
                               double* g = detail::pgrad(self, 0);
                               for (std::size_t b = 0; b < batch; ++b)
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                     g[b * m * n + i * n + j] +=
                                         self.grad[b * m * n + j * m + i];
                             });
}

inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank()) {
    throw ShapeError("concat", a.shape(), b.shape());
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) throw ShapeError("concat", a.shape(), b.shape());
  }
  const auto sa = detail::split_axis(a.shape(), axis);
  const auto sb = detail::split_axis(b.shape(), axis);
  const std::size_t ca = sa.len * sa.inner, cb = sb.len * sb.inner;
  Shape s = a.shape();
  s[axis] += b.dim(axis);
  std::vector<double> out(a.numel() + b.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(x.begin() + static_cast<long>(o * ca), ca, out.begin() + static_cast<long>(o * (ca + cb)));
    std::copy_n(y.begin() + static_cast<long>(o * cb), cb, out.begin() + static_cast<long>(o * (ca + cb) + ca));
  }
  return detail::make_result(std::move(s), std::move(out), {a, b},
                             [outer = sa.outer, ca, cb](detail::Node& self) {
                               double* ga = detail::pgrad(self, 0);
                               double* gb = detail::pgrad(self, 1);
                               for (std::size_t o = 0; o < outer; ++o) {
                                 const double* src = self.grad.data() + o * (ca + cb);
                                 if (ga) for (std::size_t i = 0; i < ca; ++i) ga[o * ca + i] += src[i];
                                 if (gb) for (std::size_t i = 0; i < cb; ++i) gb[o * cb + i] += src[ca + i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result(Shape{}, {s}, {a}, [](detail::Node& self) {
    double* g = detail::pgrad(self, 0);
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// Mean over one axis; the axis is removed from the shape.
inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis);
  Shape s = a.shape();
  s.erase(s.begin() + static_cast<long>(axis));
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  auto x = a.data();
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += x[(o * sp.len + l) * sp.inner + i];
  for (double& v : out) v *= inv;
  return detail::make_result(std::move(s), std::move(out), {a},
                             [sp, inv](detail::Node& self) {
                               double* g = detail::pgrad(self, 0);
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t l = 0; l < sp.len; ++l)
                                   for (std::size_t i = 0; i < sp.inner; ++i)
                                     g[(o * sp.len + l) * sp.inner + i] +=
                                         inv * self.grad[o * sp.inner + i];
                             });
}

inline Tensor softmax_axis(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis);
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = -INFINITY;
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, x[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double e = std::exp(x[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
    }
  }
  return detail::make_result(a.shape(), std::move(out), {a},
                             [sp](detail::Node& self) {
                               double* g = detail::pgrad(self, 0);
                               const double* y = self.data.data();
                               const double* dy = self.grad.data();
                               for (std::size_t o = 0; o < sp.outer; ++o) {
                                 for (std::size_t i = 0; i < sp.inner; ++i) {
                                   const std::size_t base = o * sp.len * sp.inner + i;
                                   double dot = 0.0;
                                   for (std::size_t l = 0; l < sp.len; ++l) {
                                     const std::size_t k = base + l * sp.inner;
                                     dot += dy[k] * y[k];
                                   }
                                   for (std::size_t l = 0; l < sp.len; ++l) {
                                     const std::size_t k = base + l * sp.inner;
                                     g[k] += y[k] * (dy[k] - dot);
                                   }
                                 }
                               }
                             });
}

inline Tensor l2_normalize(const Tensor& a, std::size_t axis, double eps = 1e-12) {
  const auto sp = detail::split_axis(a.shape(), axis);
  std::vector<double> out(a.numel());
  std::vector<double> norms(sp.outer * sp.inner);
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double ss = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) ss += x[base + l * sp.inner] * x[base + l * sp.inner];
      const double nrm = std::max(std::sqrt(ss), eps);
      norms[o * sp.inner + i] = nrm;
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] = x[base + l * sp.inner] / nrm;
    }
  }
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [sp, norms = std::move(norms)](detail::Node& self) {
        double* g = detail::pgrad(self, 0);
        const double* y = self.data.data();
        const double* dy = self.grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t k = base + l * sp.inner;
              dot += y[k] * dy[k];
            }
            const double nrm = norms[o * sp.inner + i];
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t k = base + l * sp.inner;
              g[k] += (dy[k] - y[k] * dot) / nrm;
            }
          }
        }
      });
}

// Adaptive average pooling along one axis to `out_len` bins. Bin i covers
// [floor(i*len/out), ceil((i+1)*len/out)).
inline Tensor adaptive_avg_pool(const Tensor& a, std::size_t axis, std::size_t out_len) {
  const auto sp = detail::split_axis(a.shape(), axis);
  if (out_len == 0) throw ShapeError("adaptive_avg_pool: zero output length");
  std::vector<std::pair<std::size_t, std::size_t>> bins(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    bins[i].first = i * sp.len / out_len;
    bins[i].second = ((i + 1) * sp.len + out_len - 1) / out_len;
  }
  Shape s = a.shape();
  s[axis] = out_len;
  std::vector<double> out(sp.outer * out_len * sp.inner, 0.0);
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t b = 0; b < out_len; ++b) {
      const double inv = 1.0 / static_cast<double>(bins[b].second - bins[b].first);
      for (std::size_t l = bins[b].first; l < bins[b].second; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i)
          out[(o * out_len + b) * sp.inner + i] += inv * x[(o * sp.len + l) * sp.inner + i];
    }
  return detail::make_result(std::move(s), std::move(out), {a},
                             [sp, out_len, bins = std::move(bins)](detail::Node& self) {
                               double* g = detail::pgrad(self, 0);
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t b = 0; b < out_len; ++b) {
                                   const double inv = 1.0 / static_cast<double>(bins[b].second - bins[b].first);
                                   for (std::size_t l = bins[b].first; l < bins[b].second; ++l)
                                     for (std::size_t i = 0; i < sp.inner; ++i)
                                       g[(o * sp.len + l) * sp.inner + i] +=
                                           inv * self.grad[(o * out_len + b) * sp.inner + i];
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

// [m,k]x[k,n], [B,m,k]x[B,k,n], or [B,m,k]x[k,n] (b shared across the batch).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  std::size_t batch = 1, m, k, n;
  bool shared_b = false;
  if (a.rank() == 2 && b.rank() == 2) {
    m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul", a.shape(), b.shape());
  } else if (a.rank() == 3 && b.rank() == 3) {
    batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) throw ShapeError("matmul", a.shape(), b.shape());
  } else if (a.rank() == 3 && b.rank() == 2) {
    batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    shared_b = true;
    if (b.dim(0) != k) throw ShapeError("matmul", a.shape(), b.shape());
  } else {
    throw ShapeError("matmul", a.shape(), b.shape());
  }
  Shape s = a.rank() == 2 ? Shape{m, n} : Shape{batch, m, n};
  std::vector<double> out(batch * m * n, 0.0);
  const double* x = a.data().data();
  const double* y = b.data().data();
  for (std::size_t t = 0; t < batch; ++t)
    detail::gemm_nn(x + t * m * k, y + (shared_b ? 0 : t * k * n), out.data() + t * m * n, m, k, n);
  return detail::make_result(
      std::move(s), std::move(out), {a, b},
      [batch, m, k, n, shared_b](detail::Node& self) {
        const double* x = detail::pdata(self, 0);
        const double* y = detail::pdata(self, 1);
        double* ga = detail::pgrad(self, 0);
        double* gb = detail::pgrad(self, 1);
        for (std::size_t t = 0; t < batch; ++t) {
          const double* dc = self.grad.data() + t * m * n;
          const double* yt = y + (shared_b ? 0 : t * k * n);
          if (ga) detail::gemm_nt(dc, yt, ga + t * m * k, m, n, k);
          if (gb) detail::gemm_tn(x + t * m * k, dc, gb + (shared_b ? 0 : t * k * n), k, m, n);
        }
      });
}

// Adds a bias vector along the last axis.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rank() != 1 || a.rank() == 0 || a.dim(a.rank() - 1) != bias.dim(0)) {
    throw ShapeError("add_bias", a.shape(), bias.shape());
  }
  const std::size_t c = bias.dim(0);
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bv = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  return detail::make_result(a.shape(), std::move(out), {a, bias},
                             [c](detail::Node& self) {
                               if (double* g = detail::pgrad(self, 0))
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                               if (double* g = detail::pgrad(self, 1))
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
                             });
}

struct Conv2dGeometry {
  std::size_t stride_h = 1, stride_w = 1, pad_h = 0, pad_w = 0;
};

namespace detail {

struct ConvDims {
  std::size_t n, ci, h, w, co, kh, kw, ho, wo;
};

// Output columns [lo, hi) whose input column ow * stride + j - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_cols(const ConvDims& d, const Conv2dGeometry& g, std::size_t j) {
  std::size_t lo = 0;
  if (j < g.pad_w) lo = (g.pad_w - j + g.stride_w - 1) / g.stride_w;
  // largest ow with ow * stride + j - pad <= w - 1
  const std::size_t lim = d.w - 1 + g.pad_w;
  std::size_t hi = lim < j ? 0 : std::min(d.wo, (lim - j) / g.stride_w + 1);
  return {std::min(lo, hi), hi};
}

inline void im2col(const double* x, const ConvDims& d, const Conv2dGeometry& g, double* cols) {
  const std::size_t p = d.ho * d.wo;
  for (std::size_t c = 0; c < d.ci; ++c)
    for (std::size_t i = 0; i < d.kh; ++i)
      for (std::size_t j = 0; j < d.kw; ++j) {
        double* row = cols + ((c * d.kh + i) * d.kw + j) * p;
        const auto [lo, hi] = valid_cols(d, g, j);
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride_h + i) - static_cast<long>(g.pad_h);
          double* dst = row + oh * d.wo;
          if (ih < 0 || ih >= static_cast<long>(d.h)) {
            std::fill_n(dst, d.wo, 0.0);
            continue;
          }
          const double* src = x + (c * d.h + static_cast<std::size_t>(ih)) * d.w;
          std::fill_n(dst, lo, 0.0);
          if (lo < hi) {
            const std::size_t first = lo * g.stride_w + j - g.pad_w;
            if (g.stride_w == 1) {
              std::copy(src + first, src + first + (hi - lo), dst + lo);
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[first + (ow - lo) * g.stride_w];
            }
          }
          std::fill(dst + hi, dst + d.wo, 0.0);
        }
      }
}

inline void col2im(const double* cols, const ConvDims& d, const Conv2dGeometry& g, double* x) {
  const std::size_t p = d.ho * d.wo;
  for (std::size_t c = 0; c < d.ci; ++c)
    for (std::size_t i = 0; i < d.kh; ++i)
      for (std::size_t j = 0; j < d.kw; ++j) {
        const double* row = cols + ((c * d.kh + i) * d.kw + j) * p;
        const auto [lo, hi] = valid_cols(d, g, j);
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride_h + i) - static_cast<long>(g.pad_h);
          if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
          if (lo >= hi) continue;
          double* dst = x + (c * d.h + static_cast<std::size_t>(ih)) * d.w + lo * g.stride_w + j - g.pad_w;
          const double* src = row + oh * d.wo;
          for (std::size_t ow = lo; ow < hi; ++ow) dst[(ow - lo) * g.stride_w] += src[ow];
        }
      }
}

}  // namespace detail

// x: [C_in,H,W] or [N,C_in,H,W]; k: [C_out,C_in,kh,kw]. No bias.
inline Tensor conv2d(const Tensor& x, const Tensor& k, Conv2dGeometry g = {}) {
  const bool batched = x.rank() == 4;
  if ((x.rank() != 3 && !batched) || k.rank() != 4) throw ShapeError("conv2d", x.shape(), k.shape());
  detail::ConvDims d{};
  d.n = batched ? x.dim(0) : 1;
  d.ci = x.dim(batched ? 1 : 0);
  d.h = x.dim(batched ? 2 : 1);
  d.w = x.dim(batched ? 3 : 2);
  d.co = k.dim(0), d.kh = k.dim(2), d.kw = k.dim(3);
  if (k.dim(1) != d.ci || g.stride_h == 0 || g.stride_w == 0 || d.h + 2 * g.pad_h < d.kh ||
      d.w + 2 * g.pad_w < d.kw) {
    throw ShapeError("conv2d", x.shape(), k.shape());
  }
  d.ho = (d.h + 2 * g.pad_h - d.kh) / g.stride_h + 1;
  d.wo = (d.w + 2 * g.pad_w - d.kw) / g.stride_w + 1;
  const std::size_t kk = d.ci * d.kh * d.kw, p = d.ho * d.wo;
  const bool pointwise = d.kh == 1 && d.kw == 1 && g.stride_h == 1 && g.stride_w == 1 &&
                         g.pad_h == 0 && g.pad_w == 0;
  std::vector<double> out(d.n * d.co * p, 0.0);
  std::vector<double> cols(pointwise ? 0 : kk * p);
  const double* xd = x.data().data();
  const double* kd = k.data().data();
  for (std::size_t s = 0; s < d.n; ++s) {
    const double* xs = xd + s * d.ci * d.h * d.w;
    const double* src = xs;
    if (!pointwise) {
      detail::im2col(xs, d, g, cols.data());
      src = cols.data();
    }
    detail::gemm_nn(kd, src, out.data() + s * d.co * p, d.co, kk, p);
  }
  Shape s = batched ? Shape{d.n, d.co, d.ho, d.wo} : Shape{d.co, d.ho, d.wo};
  return detail::make_result(
      std::move(s), std::move(out), {x, k}, [d, g, kk, p, pointwise](detail::Node& self) {
        const double* xd = detail::pdata(self, 0);
        const double* kd = detail::pdata(self, 1);
        double* gx = detail::pgrad(self, 0);
        double* gk = detail::pgrad(self, 1);
        std::vector<double> cols(pointwise ? 0 : kk * p);
        std::vector<double> dcols(gx && !pointwise ? kk * p : 0);
        for (std::size_t s = 0; s < d.n; ++s) {
          const double* dy = self.grad.data() + s * d.co * p;
          const double* xs = xd + s * d.ci * d.h * d.w;
          if (gk) {
            const double* src = xs;
            if (!pointwise) {
              detail::im2col(xs, d, g, cols.data());
              src = cols.data();
            }
            detail::gemm_nt(dy, src, gk, d.co, p, kk);
          }
          if (gx) {
            double* gxs = gx + s * d.ci * d.h * d.w;
            if (pointwise) {
              detail::gemm_tn(kd, dy, gxs, kk, d.co, p);
            } else {
              std::fill(dcols.begin(), dcols.end(), 0.0);
              detail::gemm_tn(kd, dy, dcols.data(), kk, d.co, p);
              detail::col2im(dcols.data(), d, g, gxs);
            }
          }
        }
      });
}

// Per-channel batch normalization of [C,H,W] or [N,C,H,W]; statistics are
// taken over every axis but C. In training mode the running statistics are
// updated in place (unbiased variance, PyTorch convention).
inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          Tensor& running_mean, Tensor& running_var, bool training,
                          double momentum = 0.1, double eps = 1e-5) {
  const bool batched = x.rank() == 4;
  if (x.rank() != 3 && !batched) throw ShapeError("batchnorm2d: rank 3 or 4 required, got " + shape_str(x.shape()));
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t c = x.dim(batched ? 1 : 0);
  const std::size_t hw = x.numel() / (n * c);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c) {
    throw ShapeError("batchnorm2d", x.shape(), gamma.shape());
  }
  const std::size_t count = n * hw;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> mu(c), inv_std(c);
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += xd[(b * c + ch) * hw + i];
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double dlt = xd[(b * c + ch) * hw + i] - m;
          v += dlt * dlt;
        }
      const double var = v / static_cast<double>(count);
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
      rm[ch] = (1.0 - momentum) * rm[ch] + momentum * m;
      rv[ch] = (1.0 - momentum) * rv[ch] + momentum * unbiased;
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = rm[ch];
      inv_std[ch] = 1.0 / std::sqrt(rv[ch] + eps);
    }
  }
  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t k = (b * c + ch) * hw + i;
        xhat[k] = (xd[k] - mu[ch]) * inv_std[ch];
        out[k] = gd[ch] * xhat[k] + bd[ch];
      }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, c, hw, count, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const double* gd = detail::pdata(self, 1);
        double* gx = detail::pgrad(self, 0);
        double* gg = detail::pgrad(self, 1);
        double* gb = detail::pgrad(self, 2);
        const double* dy = self.grad.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sdy = 0.0, sdyx = 0.0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t k = (b * c + ch) * hw + i;
              sdy += dy[k];
              sdyx += dy[k] * xhat[k];
            }
          if (gg) gg[ch] += sdyx;
          if (gb) gb[ch] += sdy;
          if (!gx) continue;
          const double gsc = gd[ch] * inv_std[ch];
          const double inv_count = 1.0 / static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t k = (b * c + ch) * hw + i;
              if (training) {
                gx[k] += gsc * (dy[k] - inv_count * sdy - xhat[k] * inv_count * sdyx);
              } else {
                gx[k] += gsc * dy[k];
              }
            }
        }
      });
}

// Mean negative log-likelihood of softmax(logits) at the labelled class.
// logits: [N, C].
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  for (std::size_t y : labels) {
    if (y >= c) throw std::out_of_range("cross_entropy: label " + std::to_string(y) +
                                        " out of range for " + std::to_string(c) + " classes");
  }
  auto x = logits.data();
  std::vector<double> prob(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(row[j] - lz);
    loss += lz - row[labels[i]];
  }
  loss /= static_cast<double>(n);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return detail::make_result(Shape{}, {loss}, {logits},
                             [n, c, prob = std::move(prob), lab = std::move(lab)](detail::Node& self) {
                               double* g = detail::pgrad(self, 0);
                               const double s = self.grad[0] / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   g[i * c + j] += s * (prob[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
                             });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

// Central differences at step h on every element of `wrt`; returns the max of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). `f` must return a
// scalar and must read the current values of the tensors in `wrt`.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                         double h = 1e-5) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  f().backward();
  double worst = 0.0;
  for (auto& t : wrt) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto vals = t.mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f().item();
      vals[i] = orig - h;
      const double fm = f().item();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double h = 1e-5) {
  return grad_check([&] { return f(x); }, std::vector<Tensor>{x}, h);
}

// ---------------------------------------------------------------------------
// "MPCK" checkpoints: magic, u32 count, then per tensor: u16 name length,
// UTF-8 name, u8 rank, u32 dims, float64 data. Little-endian throughout.

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  std::uint64_t u = 0;
  if constexpr (std::is_floating_point_v<T>) {
    static_assert(sizeof(T) == 8);
    std::memcpy(&u, &v, 8);
  } else {
    u = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw std::runtime_error("unexpected end of file");
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  if constexpr (std::is_floating_point_v<T>) {
    T v;
    std::memcpy(&v, &u, 8);
    return v;
  } else {
    return static_cast<T>(u);
  }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write("MPCK", 4);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("checkpoint name too long: " + name);
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::put_le<double>(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "MPCK") {
    throw std::runtime_error(path + ": not an MPCK checkpoint");
  }
  const auto count = detail::get_le<std::uint32_t>(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint16_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error(path + ": truncated name");
    const auto rank = detail::get_le<std::uint8_t>(is);
    Shape s(rank);
    for (auto& d : s) d = detail::get_le<std::uint32_t>(is);
    std::vector<double> values(shape_numel(s));
    for (double& v : values) v = detail::get_le<double>(is);
    out.push_back({std::move(name), Tensor(std::move(s), std::move(values))});
  }
  return out;
}

}  // namespace magphase
