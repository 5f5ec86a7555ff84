#pragma once

// Differentiable primitives. Each op defines a forward value and an exact
// reverse-mode adjoint; every output element is reduced in a fixed order.

#include "sweepkey/kernels.hpp"
#include "sweepkey/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace sweepkey::ops {

using std::size_t;

namespace detail_ops {

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
}

template <class T>
void require_matrix(const char* op, const Tensor<T>& a) {
    if (a.shape().size() != 2)
        throw TensorError(std::string(op) + ": expected a matrix, got shape " +
                          shape_str(a.shape()));
}

template <class T>
bool wants_grad(const sweepkey::detail::Node<T>& n, size_t parent) {
    return n.parents[parent]->requires_grad;
}

template <class T>
std::vector<T>& pgrad(sweepkey::detail::Node<T>& n, size_t parent) {
    return n.parents[parent]->grad;
}

template <class T>
const std::vector<T>& pval(const sweepkey::detail::Node<T>& n, size_t parent) {
    return n.parents[parent]->value;
}

} // namespace detail_ops

using sweepkey::detail::make_op;
using detail_ops::pgrad;
using detail_ops::pval;
using detail_ops::wants_grad;

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail_ops::require_same_shape("add", a, b);
    std::vector<T> out(a.numel());
    kernels::map_binary(a.value().data(), b.value().data(), out.data(), out.size(),
                        [](T x, T y) { return x + y; });
    return make_op<T>("add", a.shape(), std::move(out), {a, b},
                      [](sweepkey::detail::Node<T>& n) {
                          for (size_t p = 0; p < 2; ++p) {
                              if (!wants_grad(n, p)) continue;
                              auto& g = pgrad(n, p);
                              for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
                          }
                      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail_ops::require_same_shape("sub", a, b);
    std::vector<T> out(a.numel());
    kernels::map_binary(a.value().data(), b.value().data(), out.data(), out.size(),
                        [](T x, T y) { return x - y; });
    return make_op<T>("sub", a.shape(), std::move(out), {a, b},
                      [](sweepkey::detail::Node<T>& n) {
                          if (wants_grad(n, 0)) {
                              auto& g = pgrad(n, 0);
                              for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
                          }
                          if (wants_grad(n, 1)) {
                              auto& g = pgrad(n, 1);
                              for (size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
                          }
                      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail_ops::require_same_shape("mul", a, b);
    std::vector<T> out(a.numel());
    kernels::map_binary(a.value().data(), b.value().data(), out.data(), out.size(),
                        [](T x, T y) { return x * y; });
    return make_op<T>("mul", a.shape(), std::move(out), {a, b},
                      [](sweepkey::detail::Node<T>& n) {
                          if (wants_grad(n, 0)) {
                              auto& g = pgrad(n, 0);
                              const auto& bv = pval(n, 1);
                              for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
                          }
                          if (wants_grad(n, 1)) {
                              auto& g = pgrad(n, 1);
                              const auto& av = pval(n, 0);
                              for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
                          }
                      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(), [c](T x) { return x * c; });
    return make_op<T>("scale", a.shape(), std::move(out), {a},
                      [c](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * c;
                      });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(), [c](T x) { return x + c; });
    return make_op<T>("add_scalar", a.shape(), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
                      });
}

// out[i,j] = x[i,j] + b[j]
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
    detail_ops::require_matrix("add_rowvec", x);
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    if (b.shape() != Shape{cols})
        throw TensorError("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(b.shape()));
    std::vector<T> out(x.numel());
    const T* xv = x.value().data();
    const T* bv = b.value().data();
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] + bv[j];
    return make_op<T>("add_rowvec", x.shape(), std::move(out), {x, b},
                      [rows, cols](sweepkey::detail::Node<T>& n) {
                          if (wants_grad(n, 0)) {
                              auto& g = pgrad(n, 0);
                              for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
                          }
                          if (wants_grad(n, 1)) {
                              auto& g = pgrad(n, 1);
                              std::vector<T> cs(cols);
                              kernels::colsum(n.grad.data(), cs.data(), rows, cols);
                              for (size_t j = 0; j < cols; ++j) g[j] += cs[j];
                          }
                      });
}

// Elementwise max; the gradient flows only to the selected branch, ties go
// to the first argument.
template <class T>
Tensor<T> cwise_max(const Tensor<T>& a, const Tensor<T>& b) {
    detail_ops::require_same_shape("cwise_max", a, b);
    std::vector<T> out(a.numel());
    kernels::map_binary(a.value().data(), b.value().data(), out.data(), out.size(),
                        [](T x, T y) { return x >= y ? x : y; });
    return make_op<T>("cwise_max", a.shape(), std::move(out), {a, b},
                      [](sweepkey::detail::Node<T>& n) {
                          const auto& av = pval(n, 0);
                          const auto& bv = pval(n, 1);
                          if (wants_grad(n, 0)) {
                              auto& g = pgrad(n, 0);
                              for (size_t i = 0; i < n.grad.size(); ++i)
                                  if (av[i] >= bv[i]) g[i] += n.grad[i];
                          }
                          if (wants_grad(n, 1)) {
                              auto& g = pgrad(n, 1);
                              for (size_t i = 0; i < n.grad.size(); ++i)
                                  if (av[i] < bv[i]) g[i] += n.grad[i];
                          }
                      });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <class T>
T sigmoid_val(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(),
                       [](T x) { return sigmoid_val(x); });
    return make_op<T>("sigmoid", a.shape(), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i) {
                              const T s = n.value[i];
                              g[i] += n.grad[i] * s * (T(1) - s);
                          }
                      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(),
                       [](T x) { return x > T(0) ? x : T(0); });
    return make_op<T>("relu", a.shape(), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          const auto& xv = pval(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i)
                              if (xv[i] > T(0)) g[i] += n.grad[i];
                      });
}

// Smooth tanh-approximation GELU; used as the MLP activation so the whole
// model stays differentiable for finite-difference checks.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(), [](T x) {
        const T u = T(kC) * (x + T(kA) * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(u));
    });
    return make_op<T>("gelu", a.shape(), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          const auto& xv = pval(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i) {
                              const T x = xv[i];
                              const T u = T(kC) * (x + T(kA) * x * x * x);
                              const T th = std::tanh(u);
                              const T du = T(kC) * (T(1) + T(3) * T(kA) * x * x);
                              const T d = T(0.5) * (T(1) + th) +
                                          T(0.5) * x * (T(1) - th * th) * du;
                              g[i] += n.grad[i] * d;
                          }
                      });
}

// Numerically stable log(1 + exp(x)).
template <class T>
T softplus_val(T x) {
    const T ax = x > T(0) ? x : -x;
    const T mx = x > T(0) ? x : T(0);
    return mx + std::log1p(std::exp(-ax));
}

template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(),
                       [](T x) { return softplus_val(x); });
    return make_op<T>("softplus", a.shape(), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          const auto& xv = pval(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i)
                              g[i] += n.grad[i] * sigmoid_val(xv[i]);
                      });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(),
                       [](T x) { return std::exp(x); });
    return make_op<T>("exp", a.shape(), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i)
                              g[i] += n.grad[i] * n.value[i];
                      });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(),
                       [](T x) { return std::log(x); });
    return make_op<T>("log", a.shape(), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          const auto& xv = pval(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i)
                              g[i] += n.grad[i] / xv[i];
                      });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(), [](T x) { return x * x; });
    return make_op<T>("square", a.shape(), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          const auto& xv = pval(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i)
                              g[i] += n.grad[i] * T(2) * xv[i];
                      });
}

// sqrt with the subgradient at 0 defined as 0 to keep backward finite.
template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    kernels::map_unary(a.value().data(), out.data(), out.size(),
                       [](T x) { return std::sqrt(x); });
    return make_op<T>("sqrt", a.shape(), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i) {
                              const T y = n.value[i];
                              if (y > T(0)) g[i] += n.grad[i] * (T(0.5) / y);
                          }
                      });
}

// ---------------------------------------------------------------------------
// Linear algebra / data movement
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail_ops::require_matrix("matmul", a);
    detail_ops::require_matrix("matmul", b);
    const size_t m = a.shape()[0], k = a.shape()[1];
    if (b.shape()[0] != k)
        throw TensorError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    const size_t n = b.shape()[1];
    std::vector<T> out(m * n);
    kernels::matmul_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
    return make_op<T>("matmul", {m, n}, std::move(out), {a, b},
                      [m, k, n](sweepkey::detail::Node<T>& n_) {
                          const auto& av = pval(n_, 0);
                          const auto& bv = pval(n_, 1);
                          if (wants_grad(n_, 0)) {
                              // dA = dC * B^T
                              std::vector<T> bt(k * n);
                              kernels::transpose(bv.data(), bt.data(), k, n);
                              std::vector<T> da(m * k);
                              kernels::matmul_nn(n_.grad.data(), bt.data(), da.data(), m, n, k);
                              auto& g = pgrad(n_, 0);
                              for (size_t i = 0; i < da.size(); ++i) g[i] += da[i];
                          }
                          if (wants_grad(n_, 1)) {
                              // dB = A^T * dC
                              std::vector<T> at(m * k);
                              kernels::transpose(av.data(), at.data(), m, k);
                              std::vector<T> db(k * n);
                              kernels::matmul_nn(at.data(), n_.grad.data(), db.data(), k, m, n);
                              auto& g = pgrad(n_, 1);
                              for (size_t i = 0; i < db.size(); ++i) g[i] += db[i];
                          }
                      });
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    detail_ops::require_matrix("transpose", a);
    const size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<T> out(r * c);
    kernels::transpose(a.value().data(), out.data(), r, c);
    return make_op<T>("transpose", {c, r}, std::move(out), {a},
                      [r, c](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          std::vector<T> gt(r * c);
                          kernels::transpose(n.grad.data(), gt.data(), c, r);
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < gt.size(); ++i) g[i] += gt[i];
                      });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw TensorError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                          shape_str(shape));
    std::vector<T> out = a.value();
    return make_op<T>("reshape", std::move(shape), std::move(out), {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
                      });
}

// Vertical concatenation of matrices with equal column counts.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw TensorError("concat_rows: empty input list");
    detail_ops::require_matrix("concat_rows", parts[0]);
    const size_t cols = parts[0].shape()[1];
    size_t rows = 0;
    for (const auto& p : parts) {
        detail_ops::require_matrix("concat_rows", p);
        if (p.shape()[1] != cols)
            throw TensorError("concat_rows: shape mismatch " + shape_str(parts[0].shape()) +
                              " vs " + shape_str(p.shape()));
        rows += p.shape()[0];
    }
    std::vector<T> out;
    out.reserve(rows * cols);
    for (const auto& p : parts)
        out.insert(out.end(), p.value().begin(), p.value().end());
    std::vector<size_t> row_counts;
    for (const auto& p : parts) row_counts.push_back(p.shape()[0]);
    return make_op<T>("concat_rows", {rows, cols}, std::move(out), parts,
                      [row_counts, cols](sweepkey::detail::Node<T>& n) {
                          size_t offset = 0;
                          for (size_t p = 0; p < row_counts.size(); ++p) {
                              const size_t cnt = row_counts[p] * cols;
                              if (wants_grad(n, p)) {
                                  auto& g = pgrad(n, p);
                                  for (size_t i = 0; i < cnt; ++i) g[i] += n.grad[offset + i];
                              }
                              offset += cnt;
                          }
                      });
}

// Horizontal concatenation of two matrices with equal row counts.
template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    detail_ops::require_matrix("concat_cols", a);
    detail_ops::require_matrix("concat_cols", b);
    const size_t rows = a.shape()[0];
    if (b.shape()[0] != rows)
        throw TensorError("concat_cols: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    const size_t ca = a.shape()[1], cb = b.shape()[1];
    std::vector<T> out(rows * (ca + cb));
    const T* av = a.value().data();
    const T* bv = b.value().data();
    for (size_t i = 0; i < rows; ++i) {
        std::copy(av + i * ca, av + (i + 1) * ca, out.begin() + i * (ca + cb));
        std::copy(bv + i * cb, bv + (i + 1) * cb, out.begin() + i * (ca + cb) + ca);
    }
    return make_op<T>("concat_cols", {rows, ca + cb}, std::move(out), {a, b},
                      [rows, ca, cb](sweepkey::detail::Node<T>& n) {
                          const size_t cc = ca + cb;
                          if (wants_grad(n, 0)) {
                              auto& g = pgrad(n, 0);
                              for (size_t i = 0; i < rows; ++i)
                                  for (size_t j = 0; j < ca; ++j)
                                      g[i * ca + j] += n.grad[i * cc + j];
                          }
                          if (wants_grad(n, 1)) {
                              auto& g = pgrad(n, 1);
                              for (size_t i = 0; i < rows; ++i)
                                  for (size_t j = 0; j < cb; ++j)
                                      g[i * cb + j] += n.grad[i * cc + ca + j];
                          }
                      });
}

// Rows [r0, r1).
template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, size_t r0, size_t r1) {
    detail_ops::require_matrix("slice_rows", a);
    const size_t rows = a.shape()[0], cols = a.shape()[1];
    if (r0 > r1 || r1 > rows)
        throw TensorError("slice_rows: range [" + std::to_string(r0) + "," +
                          std::to_string(r1) + ") out of bounds for shape " +
                          shape_str(a.shape()));
    std::vector<T> out(a.value().begin() + r0 * cols, a.value().begin() + r1 * cols);
    return make_op<T>("slice_rows", {r1 - r0, cols}, std::move(out), {a},
                      [r0, cols](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < n.grad.size(); ++i)
                              g[r0 * cols + i] += n.grad[i];
                      });
}

template <class T>
Tensor<T> flip_rows(const Tensor<T>& a) {
    detail_ops::require_matrix("flip_rows", a);
    const size_t rows = a.shape()[0], cols = a.shape()[1];
    std::vector<T> out(rows * cols);
    const T* av = a.value().data();
    for (size_t i = 0; i < rows; ++i)
        std::copy(av + i * cols, av + (i + 1) * cols, out.begin() + (rows - 1 - i) * cols);
    return make_op<T>("flip_rows", a.shape(), std::move(out), {a},
                      [rows, cols](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < rows; ++i)
                              for (size_t j = 0; j < cols; ++j)
                                  g[(rows - 1 - i) * cols + j] += n.grad[i * cols + j];
                      });
}

// Gather rows of `table` by index. Repeated indices accumulate gradient.
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<size_t>& idx) {
    detail_ops::require_matrix("embedding_lookup", table);
    const size_t n = table.shape()[0], d = table.shape()[1];
    for (size_t i : idx)
        if (i >= n)
            throw TensorError("embedding_lookup: index " + std::to_string(i) +
                              " out of range for table " + shape_str(table.shape()));
    std::vector<T> out(idx.size() * d);
    const T* tv = table.value().data();
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(tv + idx[i] * d, tv + (idx[i] + 1) * d, out.begin() + i * d);
    return make_op<T>("embedding_lookup", {idx.size(), d}, std::move(out), {table},
                      [idx, d](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < idx.size(); ++i)
                              for (size_t j = 0; j < d; ++j)
                                  g[idx[i] * d + j] += n.grad[i * d + j];
                      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = T(0);
    for (T v : a.value()) acc += v;
    return make_op<T>("sum", {}, {acc}, {a},
                      [](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          const T gv = n.grad[0];
                          for (size_t i = 0; i < g.size(); ++i) g[i] += gv;
                      });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    if (a.numel() == 0) throw TensorError("mean: empty tensor");
    T acc = T(0);
    for (T v : a.value()) acc += v;
    const T inv = T(1) / T(a.numel());
    return make_op<T>("mean", {}, {acc * inv}, {a},
                      [inv](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          const T gv = n.grad[0] * inv;
                          for (size_t i = 0; i < g.size(); ++i) g[i] += gv;
                      });
}

enum class Pool { Mean, First };

// (blocks*p) x d -> blocks x d, pooling each block of p consecutive rows.
template <class T>
Tensor<T> pool_blocks(const Tensor<T>& a, size_t blocks, size_t p, Pool mode) {
    detail_ops::require_matrix("pool_blocks", a);
    const size_t d = a.shape()[1];
    if (a.shape()[0] != blocks * p)
        throw TensorError("pool_blocks: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str({blocks * p, d}));
    std::vector<T> out(blocks * d);
    const T* av = a.value().data();
    if (mode == Pool::Mean) {
        const T inv = T(1) / T(p);
        for (size_t b = 0; b < blocks; ++b)
            for (size_t j = 0; j < d; ++j) {
                T acc = T(0);
                for (size_t r = 0; r < p; ++r) acc += av[(b * p + r) * d + j];
                out[b * d + j] = acc * inv;
            }
    } else {
        for (size_t b = 0; b < blocks; ++b)
            std::copy(av + b * p * d, av + (b * p + 1) * d, out.begin() + b * d);
    }
    return make_op<T>("pool_blocks", {blocks, d}, std::move(out), {a},
                      [blocks, p, d, mode](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          if (mode == Pool::Mean) {
                              const T inv = T(1) / T(p);
                              for (size_t b = 0; b < blocks; ++b)
                                  for (size_t r = 0; r < p; ++r)
                                      for (size_t j = 0; j < d; ++j)
                                          g[(b * p + r) * d + j] += n.grad[b * d + j] * inv;
                          } else {
                              for (size_t b = 0; b < blocks; ++b)
                                  for (size_t j = 0; j < d; ++j)
                                      g[b * p * d + j] += n.grad[b * d + j];
                          }
                      });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    detail_ops::require_matrix("softmax", a);
    const size_t rows = a.shape()[0], cols = a.shape()[1];
    std::vector<T> out(rows * cols);
    kernels::softmax_rows(a.value().data(), out.data(), rows, cols);
    return make_op<T>("softmax", a.shape(), std::move(out), {a},
                      [rows, cols](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < rows; ++i) {
                              const T* s = n.value.data() + i * cols;
                              const T* dy = n.grad.data() + i * cols;
                              T dot = T(0);
                              for (size_t j = 0; j < cols; ++j) dot += dy[j] * s[j];
                              for (size_t j = 0; j < cols; ++j)
                                  g[i * cols + j] += s[j] * (dy[j] - dot);
                          }
                      });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    detail_ops::require_matrix("layer_norm", x);
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols})
        throw TensorError("layer_norm: affine shape mismatch " + shape_str(x.shape()) +
                          " vs " + shape_str(gamma.shape()));
    std::vector<T> out(rows * cols);
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    kernels::layernorm_rows_fwd(x.value().data(), gamma.value().data(), beta.value().data(),
                                out.data(), inv_std->data(), rows, cols, eps);
    return make_op<T>(
        "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
        [rows, cols, inv_std](sweepkey::detail::Node<T>& n) {
            const auto& xv = pval(n, 0);
            const auto& gv = pval(n, 1);
            const auto& bv = pval(n, 2);
            // Recover xhat from the output: xhat = (y - beta) / gamma needs
            // gamma != 0; recompute from x and inv_std instead.
            std::vector<T> xhat(rows * cols);
            for (size_t i = 0; i < rows; ++i) {
                T mean = T(0);
                for (size_t j = 0; j < cols; ++j) mean += xv[i * cols + j];
                mean /= T(cols);
                for (size_t j = 0; j < cols; ++j)
                    xhat[i * cols + j] = (xv[i * cols + j] - mean) * (*inv_std)[i];
            }
            (void)bv;
            if (wants_grad(n, 2)) {
                auto& g = pgrad(n, 2);
                std::vector<T> cs(cols);
                kernels::colsum(n.grad.data(), cs.data(), rows, cols);
                for (size_t j = 0; j < cols; ++j) g[j] += cs[j];
            }
            if (wants_grad(n, 1)) {
                auto& g = pgrad(n, 1);
                std::vector<T> prod(rows * cols);
                for (size_t i = 0; i < prod.size(); ++i) prod[i] = n.grad[i] * xhat[i];
                std::vector<T> cs(cols);
                kernels::colsum(prod.data(), cs.data(), rows, cols);
                for (size_t j = 0; j < cols; ++j) g[j] += cs[j];
            }
            if (wants_grad(n, 0)) {
                auto& g = pgrad(n, 0);
                for (size_t i = 0; i < rows; ++i) {
                    T m1 = T(0), m2 = T(0);
                    for (size_t j = 0; j < cols; ++j) {
                        const T gg = n.grad[i * cols + j] * gv[j];
                        m1 += gg;
                        m2 += gg * xhat[i * cols + j];
                    }
                    m1 /= T(cols);
                    m2 /= T(cols);
                    for (size_t j = 0; j < cols; ++j) {
                        const T gg = n.grad[i * cols + j] * gv[j];
                        g[i * cols + j] += (gg - m1 - xhat[i * cols + j] * m2) * (*inv_std)[i];
                    }
                }
            }
        });
}

// Normalize each row to unit L2 norm; zero rows map to zero with zero grad.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    detail_ops::require_matrix("l2_normalize", x);
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    std::vector<T> out(rows * cols);
    auto norms = std::make_shared<std::vector<T>>(rows);
    const T* xv = x.value().data();
    for (size_t i = 0; i < rows; ++i) {
        T s = T(0);
        for (size_t j = 0; j < cols; ++j) s += xv[i * cols + j] * xv[i * cols + j];
        const T r = std::sqrt(s);
        (*norms)[i] = r;
        if (r > T(0)) {
            const T inv = T(1) / r;
            for (size_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] * inv;
        }
    }
    return make_op<T>("l2_normalize", x.shape(), std::move(out), {x},
                      [rows, cols, norms](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          for (size_t i = 0; i < rows; ++i) {
                              const T r = (*norms)[i];
                              if (r <= T(0)) continue;
                              const T* h = n.value.data() + i * cols;
                              const T* dy = n.grad.data() + i * cols;
                              T dot = T(0);
                              for (size_t j = 0; j < cols; ++j) dot += dy[j] * h[j];
                              for (size_t j = 0; j < cols; ++j)
                                  g[i * cols + j] += (dy[j] - h[j] * dot) / r;
                          }
                      });
}

// ---------------------------------------------------------------------------
// Temporal / attention primitives
// ---------------------------------------------------------------------------

// Depthwise causal 1-D convolution along time (rows). x: T x D, w: k x D or
// k x 1 (shared profile). Zero left padding only: out(t) depends on <= t.
template <class T>
Tensor<T> causal_depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& w) {
    detail_ops::require_matrix("causal_conv1d", x);
    detail_ops::require_matrix("causal_conv1d", w);
    const size_t tn = x.shape()[0], d = x.shape()[1];
    const size_t k = w.shape()[0], dw = w.shape()[1];
    if (dw != d && dw != 1)
        throw TensorError("causal_conv1d: shape mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(w.shape()));
    std::vector<T> out(tn * d);
    kernels::conv1d_causal_fwd(x.value().data(), w.value().data(), out.data(), tn, d, k, dw);
    return make_op<T>("causal_conv1d", x.shape(), std::move(out), {x, w},
                      [tn, d, k, dw](sweepkey::detail::Node<T>& n) {
                          const auto& xv = pval(n, 0);
                          const auto& wv = pval(n, 1);
                          if (wants_grad(n, 0)) {
                              std::vector<T> dx(tn * d);
                              kernels::conv1d_causal_bwd_input(n.grad.data(), wv.data(),
                                                               dx.data(), tn, d, k, dw);
                              auto& g = pgrad(n, 0);
                              for (size_t i = 0; i < dx.size(); ++i) g[i] += dx[i];
                          }
                          if (wants_grad(n, 1)) {
                              std::vector<T> dwg(k * dw);
                              kernels::conv1d_causal_bwd_weight(n.grad.data(), xv.data(),
                                                                dwg.data(), tn, d, k, dw);
                              auto& g = pgrad(n, 1);
                              for (size_t i = 0; i < dwg.size(); ++i) g[i] += dwg[i];
                          }
                      });
}

// Scaled dot-product attention over independent blocks of p rows, multi-head
// along the feature axis. q,k,v: (blocks*p) x dim, dim % heads == 0.
template <class T>
Tensor<T> block_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          size_t blocks, size_t heads) {
    detail_ops::require_same_shape("block_attention", q, k);
    detail_ops::require_same_shape("block_attention", q, v);
    detail_ops::require_matrix("block_attention", q);
    const size_t rows = q.shape()[0], dim = q.shape()[1];
    if (blocks == 0 || rows % blocks != 0)
        throw TensorError("block_attention: rows " + std::to_string(rows) +
                          " not divisible into " + std::to_string(blocks) + " blocks");
    if (heads == 0 || dim % heads != 0)
        throw TensorError("block_attention: dim " + std::to_string(dim) +
                          " not divisible by heads " + std::to_string(heads));
    const size_t p = rows / blocks, hd = dim / heads;
    std::vector<T> out(rows * dim);
    auto probs = std::make_shared<std::vector<T>>(blocks * heads * p * p);
    kernels::attention_fwd(q.value().data(), k.value().data(), v.value().data(),
                           out.data(), probs->data(), blocks, p, heads, hd);
    return make_op<T>("block_attention", q.shape(), std::move(out), {q, k, v},
                      [blocks, p, heads, hd, dim, probs](sweepkey::detail::Node<T>& n) {
                          const auto& qv = pval(n, 0);
                          const auto& kv = pval(n, 1);
                          const auto& vv = pval(n, 2);
                          const size_t sz = blocks * p * dim;
                          std::vector<T> dq(sz, T(0)), dk(sz, T(0)), dv(sz, T(0));
                          kernels::attention_bwd(qv.data(), kv.data(), vv.data(),
                                                 probs->data(), n.grad.data(), dq.data(),
                                                 dk.data(), dv.data(), blocks, p, heads, hd);
                          if (wants_grad(n, 0)) {
                              auto& g = pgrad(n, 0);
                              for (size_t i = 0; i < sz; ++i) g[i] += dq[i];
                          }
                          if (wants_grad(n, 1)) {
                              auto& g = pgrad(n, 1);
                              for (size_t i = 0; i < sz; ++i) g[i] += dk[i];
                          }
                          if (wants_grad(n, 2)) {
                              auto& g = pgrad(n, 2);
                              for (size_t i = 0; i < sz; ++i) g[i] += dv[i];
                          }
                      });
}

// ---------------------------------------------------------------------------
// Loss primitives
// ---------------------------------------------------------------------------

// Mean over elements of the stable weighted binary cross entropy on logits:
//   pw * y * softplus(-z) + (1 - y) * softplus(z)
// y is a plain target vector (not differentiated).
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& z, const std::vector<T>& y, T pos_weight) {
    if (z.numel() != y.size())
        throw TensorError("bce_with_logits: logit count " + std::to_string(z.numel()) +
                          " vs target count " + std::to_string(y.size()));
    if (z.numel() == 0) throw TensorError("bce_with_logits: empty input");
    const T* zv = z.value().data();
    T acc = T(0);
    for (size_t i = 0; i < y.size(); ++i)
        acc += pos_weight * y[i] * softplus_val(-zv[i]) + (T(1) - y[i]) * softplus_val(zv[i]);
    const T inv = T(1) / T(y.size());
    auto yv = std::make_shared<std::vector<T>>(y);
    return make_op<T>("bce_with_logits", {}, {acc * inv}, {z},
                      [yv, pos_weight, inv](sweepkey::detail::Node<T>& n) {
                          if (!wants_grad(n, 0)) return;
                          auto& g = pgrad(n, 0);
                          const auto& zv2 = pval(n, 0);
                          const T gv = n.grad[0] * inv;
                          for (size_t i = 0; i < g.size(); ++i) {
                              const T s = sigmoid_val(zv2[i]);
                              g[i] += gv * (pos_weight * (*yv)[i] * (s - T(1)) +
                                            (T(1) - (*yv)[i]) * s);
                          }
                      });
}

// Pairwise margin contrastive loss over all unordered row pairs of h
// (rows are expected to be L2-normalized upstream):
//   mean over pairs of [same-label] d^2 + [diff-label] max(m - d, 0)^2.
// Returns 0 when there are fewer than two rows.
template <class T>
Tensor<T> contrastive_pairs(const Tensor<T>& h, const std::vector<int>& labels, T margin) {
    detail_ops::require_matrix("contrastive_pairs", h);
    const size_t rows = h.shape()[0], d = h.shape()[1];
    if (labels.size() != rows)
        throw TensorError("contrastive_pairs: row count " + std::to_string(rows) +
                          " vs label count " + std::to_string(labels.size()));
    if (rows < 2) {
        return make_op<T>("contrastive_pairs", {}, {T(0)}, {h},
                          [](sweepkey::detail::Node<T>&) {});
    }
    const size_t pair_count = rows * (rows - 1) / 2;
    const T inv = T(1) / T(pair_count);
    const T* hv = h.value().data();
    // Fixed-order accumulation: per-i partials combined in ascending i.
    std::vector<T> partial(rows, T(0));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows); ++i) {
        const size_t ii = static_cast<size_t>(i);
        T acc = T(0);
        for (size_t j = ii + 1; j < rows; ++j) {
            T d2 = T(0);
            for (size_t e = 0; e < d; ++e) {
                const T dv = hv[ii * d + e] - hv[j * d + e];
                d2 += dv * dv;
            }
            if (labels[ii] == labels[j]) {
                acc += d2;
            } else {
                const T dist = std::sqrt(d2);
                if (dist < margin) {
                    const T t = margin - dist;
                    acc += t * t;
                }
            }
        }
        partial[ii] = acc;
    }
    T total = T(0);
    for (size_t i = 0; i < rows; ++i) total += partial[i];
    auto lab = std::make_shared<std::vector<int>>(labels);
    return make_op<T>(
        "contrastive_pairs", {}, {total * inv}, {h},
        [rows, d, inv, margin, lab](sweepkey::detail::Node<T>& n) {
            if (!wants_grad(n, 0)) return;
            auto& g = pgrad(n, 0);
            const auto& hv2 = pval(n, 0);
            const T gv = n.grad[0] * inv;
            // d/dh_i of d^2 is 2(h_i - h_j); of (m - d)^2 is -2(m-d)/d (h_i - h_j),
            // with subgradient 0 at d == 0.
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows); ++i) {
                const size_t ii = static_cast<size_t>(i);
                for (size_t j = 0; j < rows; ++j) {
                    if (j == ii) continue;
                    T d2 = T(0);
                    for (size_t e = 0; e < d; ++e) {
                        const T dv = hv2[ii * d + e] - hv2[j * d + e];
                        d2 += dv * dv;
                    }
                    T coef = T(0);
                    if ((*lab)[ii] == (*lab)[j]) {
                        coef = T(2);
                    } else {
                        const T dist = std::sqrt(d2);
                        if (dist < margin && dist > T(0)) coef = -T(2) * (margin - dist) / dist;
                    }
                    if (coef != T(0)) {
                        for (size_t e = 0; e < d; ++e)
                            g[ii * d + e] += gv * coef * (hv2[ii * d + e] - hv2[j * d + e]);
                    }
                }
            }
        });
}

} // namespace sweepkey::ops
