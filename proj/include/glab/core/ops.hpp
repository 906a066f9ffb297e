// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "glab/core/random.hpp"
#include "glab/core/tensor.hpp"

namespace glab {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline MapMat as_mat(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline CMapMat as_cmat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return CMapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline std::size_t node_rows(const Node& n) { return n.shape.size() == 2 ? n.shape[0] : 1; }
inline std::size_t node_cols(const Node& n) {
  if (n.shape.size() == 2) return n.shape[1];
  return n.shape.size() == 1 ? n.shape[0] : 1;
}

// Creates the result node and wires it into the graph when any input tracks
// gradients and recording is enabled.
inline Tensor record(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                     std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (const auto& t : inputs) n->parents.push_back(t.node_ptr());
      n->backward = std::move(bw);
    }
  }
  return Tensor(std::move(n));
}

// Returns the parent's grad buffer, or nullptr when it needs no gradient.
inline double* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

enum class Bcast { kSame, kRow, kCol, kScalar };

inline Bcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (b.numel() == 1) return Bcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows() && b.rank() == 2) return Bcast::kCol;
  if (a.numel() == b.numel() && a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::kSame;
  shape_fail(op, a.shape(), b.shape());
}

inline std::size_t bindex(Bcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Bcast::kSame: return i;
    case Bcast::kRow: return i % cols;
    case Bcast::kCol: return i / cols;
    case Bcast::kScalar: return 0;
  }
  return 0;
}

// Elementwise binary op; b broadcasts into a's shape.
template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const Bcast kind = broadcast_kind(name, a, b);
  const std::size_t n = a.numel(), c = a.cols();
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[bindex(kind, i, c)]);
  return record(a.shape(), std::move(out), {a, b}, [kind, c, da, db](Node& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    double* ga = grad_of(self, 0);
    double* gb = grad_of(self, 1);
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const std::size_t j = bindex(kind, i, c);
      const double g = self.grad[i];
      if (ga) ga[i] += g * da(av[i], bv[j], self.data[i]);
      if (gb) gb[j] += g * db(av[i], bv[j], self.data[i]);
    }
  });
}

// Elementwise unary op; df receives (input, output).
template <class F, class DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i]);
  return record(a.shape(), std::move(out), {a}, [df](Node& self) {
    double* ga = grad_of(self, 0);
    if (!ga) return;
    const auto& av = self.parents[0]->data;
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      ga[i] += self.grad[i] * df(av[i], self.data[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (b.numel() > a.numel()) return add(b, a);
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (b.numel() > a.numel()) return mul(b, a);
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}

inline Tensor pow(const Tensor& a, double p) {
  return detail::unary_op(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::sqrt(x); },
                          [](double, double y) { return 0.5 / y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

// log(1 + e^x), stable for large |x|.
inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::tanh(x); },
                          [](double, double y) { return 1.0 - y * y; });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

inline Tensor silu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) detail::shape_fail("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::record(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    double* ga = detail::grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  return detail::record({c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
    double* ga = detail::grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t c = a.cols();
  if (begin > end || end > a.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for shape " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return detail::record({end - begin, c}, std::move(out), {a}, [begin, c](detail::Node& self) {
    double* ga = detail::grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[begin * c + i] += self.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  if (begin > end || end > c) {
    throw ShapeError("slice_cols: range out of bounds for shape " + shape_str(a.shape()));
  }
  std::vector<double> out(r * w);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = ad[i * c + begin + j];
  return detail::record({r, w}, std::move(out), {a}, [r, c, w, begin](detail::Node& self) {
    double* ga = detail::grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += self.grad[i * w + j];
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) detail::shape_fail("concat_rows", parts[0].shape(), p.shape());
    r += p.rows();
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::record({r, c}, std::move(out), parts, [](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t n = self.parents[k]->data.size();
      if (double* g = detail::grad_of(self, k)) {
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) detail::shape_fail("concat_cols", parts[0].shape(), p.shape());
    c += p.cols();
  }
  std::vector<double> out(r * c);
  std::size_t off = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * c + off + j] = p.data()[i * w + j];
    off += w;
    widths.push_back(w);
  }
  return detail::record({r, c}, std::move(out), parts, [r, c, widths](detail::Node& self) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (double* g = detail::grad_of(self, k)) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * c + o + j];
      }
      o += w;
    }
  });
}

// Rows of `table` selected by index (embedding lookup).
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx) {
  const std::size_t c = table.cols(), r = table.rows();
  std::vector<double> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= r) throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " >= " +
                                      std::to_string(r));
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return detail::record({idx.size(), c}, std::move(out), {table}, [idx, c](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
  });
}

// Replaces the rows of `base` flagged in `mask` with consecutive rows of `src`.
inline Tensor scatter_rows(const Tensor& base, const Tensor& src, const std::vector<bool>& mask) {
  if (mask.size() != base.rows()) {
    throw ShapeError("scatter_rows: mask length " + std::to_string(mask.size()) +
                     " != rows " + std::to_string(base.rows()));
  }
  const auto count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (count != src.rows() || (count > 0 && src.cols() != base.cols())) {
    detail::shape_fail("scatter_rows", base.shape(), src.shape());
  }
  const std::size_t c = base.cols();
  std::vector<double> out(base.data().begin(), base.data().end());
  std::vector<std::size_t> src_of(mask.size(), SIZE_MAX);
  for (std::size_t i = 0, k = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    src_of[i] = k;
    std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(k * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
    ++k;
  }
  return detail::record(base.shape(), std::move(out), {base, src}, [src_of, c](detail::Node& self) {
    double* gb = detail::grad_of(self, 0);
    double* gs = detail::grad_of(self, 1);
    for (std::size_t i = 0; i < src_of.size(); ++i) {
      double* dst = src_of[i] == SIZE_MAX ? gb : (gs ? gs + src_of[i] * c : nullptr);
      if (!dst) continue;
      const std::size_t row = src_of[i] == SIZE_MAX ? i * c : 0;
      for (std::size_t j = 0; j < c; ++j) dst[row + j] += self.grad[i * c + j];
    }
  });
}

// Sets entries with mask[i] != 0 to `value`; those entries pass no gradient.
inline Tensor masked_fill(const Tensor& a, const std::vector<uint8_t>& mask, double value) {
  if (mask.size() != a.numel()) {
    throw ShapeError("masked_fill: mask length " + std::to_string(mask.size()) + " vs shape " +
                     shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  return detail::record(a.shape(), std::move(out), {a}, [mask](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (!mask[i]) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) detail::shape_fail("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n);
  {
    auto& ad = a.node()->data;
    auto& bd = b.node()->data;
    detail::as_mat(out, m, n).noalias() = detail::as_cmat(ad, m, k) * detail::as_cmat(bd, k, n);
  }
  return detail::record({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto G = detail::as_cmat(self.grad, m, n);
    if (double* ga = detail::grad_of(self, 0)) {
      detail::MapMat(ga, m, k).noalias() += G * detail::as_cmat(self.parents[1]->data, k, n).transpose();
    }
    if (double* gb = detail::grad_of(self, 1)) {
      detail::MapMat(gb, k, n).noalias() += detail::as_cmat(self.parents[0]->data, m, k).transpose() * G;
    }
  });
}

// a · bᵀ with b stored as (n × k); the shape used by weights of linear maps.
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) detail::shape_fail("matmul_bt", a.shape(), b.shape());
  std::vector<double> out(m * n);
  detail::as_mat(out, m, n).noalias() =
      detail::as_cmat(a.node()->data, m, k) * detail::as_cmat(b.node()->data, n, k).transpose();
  return detail::record({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto G = detail::as_cmat(self.grad, m, n);
    if (double* ga = detail::grad_of(self, 0)) {
      detail::MapMat(ga, m, k).noalias() += G * detail::as_cmat(self.parents[1]->data, n, k);
    }
    if (double* gb = detail::grad_of(self, 1)) {
      detail::MapMat(gb, n, k).noalias() += G.transpose() * detail::as_cmat(self.parents[0]->data, m, k);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::record({}, {s}, {a}, [](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// Column sums: (r × c) -> (1 × c).
inline Tensor sum_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(c, 0.0);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += ad[i * c + j];
  return detail::record({1, c}, std::move(out), {a}, [r, c](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j];
  });
}

inline Tensor mean_rows(const Tensor& a) {
  if (a.rows() == 0) throw ShapeError("mean_rows of empty tensor");
  return scale(sum_rows(a), 1.0 / static_cast<double>(a.rows()));
}

// Row sums: (r × c) -> (r × 1).
inline Tensor sum_cols(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r, 0.0);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += ad[i * c + j];
  return detail::record({r, 1}, std::move(out), {a}, [r, c](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i];
  });
}

// Column-wise max over rows: (r × c) -> (1 × c). Gradient goes to the first
// argmax of each column.
inline Tensor max_over_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  if (r == 0) throw ShapeError("max_over_rows of empty tensor");
  std::vector<double> out(c);
  std::vector<std::size_t> arg(c, 0);
  const auto ad = a.data();
  for (std::size_t j = 0; j < c; ++j) {
    out[j] = ad[j];
    for (std::size_t i = 1; i < r; ++i) {
      if (ad[i * c + j] > out[j]) {
        out[j] = ad[i * c + j];
        arg[j] = i;
      }
    }
  }
  return detail::record({1, c}, std::move(out), {a}, [arg, c](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t j = 0; j < c; ++j) g[arg[j] * c + j] += self.grad[j];
  });
}

inline Tensor max_all(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("max_all of empty tensor");
  const auto ad = a.data();
  const std::size_t arg = static_cast<std::size_t>(std::max_element(ad.begin(), ad.end()) - ad.begin());
  return detail::record({}, {ad[arg]}, {a}, [arg](detail::Node& self) {
    if (double* g = detail::grad_of(self, 0)) g[arg] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Normalisation and activations over rows

inline Tensor softmax_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, ad[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(ad[i * c + j] - m));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return detail::record(a.shape(), std::move(out), {a}, [r, c](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.data[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += self.data[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

inline Tensor softmax(const Tensor& a, int axis) {
  if (axis == 1 || axis == -1) return softmax_rows(a);
  if (axis == 0) return transpose(softmax_rows(transpose(a)));
  throw ShapeError("softmax: axis must be 0 or 1");
}

inline Tensor log_softmax_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, ad[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(ad[i * c + j] - m);
    const double lz = m + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = ad[i * c + j] - lz;
  }
  return detail::record(a.shape(), std::move(out), {a}, [r, c](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += self.grad[i * c + j] - std::exp(self.data[i * c + j]) * gs;
    }
  });
}

// Row-wise layer norm with optional affine (gamma, beta of length cols).
// A constant row normalises to zeros because eps sits inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma = {}, const Tensor& beta = {},
                         double eps = 1e-5) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.defined() && gamma.numel() != c) detail::shape_fail("layer_norm", x.shape(), gamma.shape());
  if (beta.defined() && beta.numel() != c) detail::shape_fail("layer_norm", x.shape(), beta.shape());
  std::vector<double> xhat(r * c), out(r * c), rstd(r);
  const auto xd = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xd[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xd[i * c + j] - mu) * (xd[i * c + j] - mu);
    var /= static_cast<double>(c);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xd[i * c + j] - mu) * rstd[i];
      xhat[i * c + j] = h;
      double o = h;
      if (gamma.defined()) o *= gamma.data()[j];
      if (beta.defined()) o += beta.data()[j];
      out[i * c + j] = o;
    }
  }
  std::vector<Tensor> inputs{x};
  const bool has_g = gamma.defined(), has_b = beta.defined();
  if (has_g) inputs.push_back(gamma);
  if (has_b) inputs.push_back(beta);
  return detail::record(x.shape(), std::move(out), std::move(inputs),
                        [r, c, has_g, has_b, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
    double* gx = detail::grad_of(self, 0);
    double* gg = has_g ? detail::grad_of(self, 1) : nullptr;
    double* gb = has_b ? detail::grad_of(self, has_g ? 2 : 1) : nullptr;
    const double* gam = has_g ? self.parents[1]->data.data() : nullptr;
    std::vector<double> dh(c);
    for (std::size_t i = 0; i < r; ++i) {
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double g = self.grad[i * c + j];
        if (gg) gg[j] += g * xhat[i * c + j];
        if (gb) gb[j] += g;
        dh[j] = gam ? g * gam[j] : g;
        m1 += dh[j];
        m2 += dh[j] * xhat[i * c + j];
      }
      if (!gx) continue;
      m1 /= static_cast<double>(c);
      m2 /= static_cast<double>(c);
      for (std::size_t j = 0; j < c; ++j)
        gx[i * c + j] += rstd[i] * (dh[j] - m1 - xhat[i * c + j] * m2);
    }
  });
}

// Inverted dropout with a counter-based mask; identity when not training.
inline Tensor dropout(const Tensor& x, double p, bool training, uint64_t seed, uint64_t counter) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: p must be < 1");
  const std::size_t n = x.numel();
  std::vector<double> keep(n);
  const double s = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < n; ++i) keep[i] = counter_uniform(seed, counter, i) >= p ? s : 0.0;
  std::vector<double> out(n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[i] * keep[i];
  return detail::record(x.shape(), std::move(out), {x}, [keep = std::move(keep)](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < keep.size(); ++i) g[i] += self.grad[i] * keep[i];
  });
}

// ---------------------------------------------------------------------------
// Pairwise similarity

// Cosine similarity between every row of a (n × d) and every row of b (m × d).
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  if (b.cols() != d) detail::shape_fail("cosine_similarity", a.shape(), b.shape());
  static constexpr double kEps = 1e-12;
  std::vector<double> an(n * d), bn(m * d), na(n), nb(m);
  auto normalise = [d](std::span<const double> src, std::vector<double>& dst, std::vector<double>& norms) {
    for (std::size_t i = 0; i < norms.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += src[i * d + j] * src[i * d + j];
      norms[i] = std::max(std::sqrt(s), kEps);
      for (std::size_t j = 0; j < d; ++j) dst[i * d + j] = src[i * d + j] / norms[i];
    }
  };
  normalise(a.data(), an, na);
  normalise(b.data(), bn, nb);
  std::vector<double> out(n * m);
  detail::as_mat(out, n, m).noalias() = detail::as_cmat(an, n, d) * detail::as_cmat(bn, m, d).transpose();
  return detail::record({n, m}, std::move(out), {a, b},
                        [n, m, d, an = std::move(an), bn = std::move(bn), na = std::move(na),
                         nb = std::move(nb)](detail::Node& self) {
    auto G = detail::as_cmat(self.grad, n, m);
    auto project = [d](const detail::RowMat& dU, const std::vector<double>& U,
                       const std::vector<double>& norms, double* out_grad) {
      for (std::size_t i = 0; i < norms.size(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += dU(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * U[i * d + j];
        for (std::size_t j = 0; j < d; ++j)
          out_grad[i * d + j] += (dU(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - dot * U[i * d + j]) / norms[i];
      }
    };
    if (double* ga = detail::grad_of(self, 0)) {
      detail::RowMat dA = G * detail::as_cmat(bn, m, d);
      project(dA, an, na, ga);
    }
    if (double* gb = detail::grad_of(self, 1)) {
      detail::RowMat dB = G.transpose() * detail::as_cmat(an, n, d);
      project(dB, bn, nb, gb);
    }
  });
}

// Squared Euclidean distance between every row of a and every row of b.
inline Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  if (b.cols() != d) detail::shape_fail("pairwise_sqdist", a.shape(), b.shape());
  std::vector<double> out(n * m);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double t = ad[i * d + j] - bd[k * d + j];
        s += t * t;
      }
      out[i * m + k] = s;
    }
  return detail::record({n, m}, std::move(out), {a, b}, [n, m, d](detail::Node& self) {
    double* ga = detail::grad_of(self, 0);
    double* gb = detail::grad_of(self, 1);
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < m; ++k) {
        const double g = 2.0 * self.grad[i * m + k];
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) {
          const double t = g * (av[i * d + j] - bv[k * d + j]);
          if (ga) ga[i * d + j] += t;
          if (gb) gb[k * d + j] -= t;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Attention

// Which keys each query may read. kCausal allows key j for query i when
// j <= i + offset; kExplicit reads a row-major Tq × Tk allow-list.
// kSegmented stacks independent sequences: query rows [q_off[s], q_off[s+1])
// read key rows [k_off[s], k_off[s+1]), optionally causally by local index.
struct AttnMask {
  enum class Kind { kNone, kCausal, kExplicit, kSegmented };
  Kind kind = Kind::kNone;
  std::size_t offset = 0;
  std::vector<uint8_t> allowed;
  std::vector<std::size_t> q_off, k_off;
  bool seg_causal = false;

  static AttnMask none() { return {}; }
  static AttnMask causal(std::size_t offs) { return {Kind::kCausal, offs, {}, {}, {}, false}; }
  static AttnMask explicit_mask(std::vector<uint8_t> a) { return {Kind::kExplicit, 0, std::move(a), {}, {}, false}; }
  static AttnMask segmented(std::vector<std::size_t> q, std::vector<std::size_t> k, bool causal) {
    if (q.size() != k.size() || q.empty()) throw ShapeError("attention: segment offset lists differ");
    return {Kind::kSegmented, 0, {}, std::move(q), std::move(k), causal};
  }

  bool allows(std::size_t i, std::size_t j, std::size_t tk) const {
    switch (kind) {
      case Kind::kNone: return true;
      case Kind::kCausal: return j <= i + offset;
      case Kind::kExplicit: return allowed[i * tk + j] != 0;
      case Kind::kSegmented: {
        const auto [lo, hi] = key_range(i, tk);
        return j >= lo && j < hi;
      }
    }
    return true;
  }

  // Contiguous key span that may contain readable keys for query i.
  std::pair<std::size_t, std::size_t> key_range(std::size_t i, std::size_t tk) const {
    switch (kind) {
      case Kind::kNone:
      case Kind::kExplicit: return {0, tk};
      case Kind::kCausal: return {0, std::min(tk, i + offset + 1)};
      case Kind::kSegmented: {
        const auto it = std::upper_bound(q_off.begin(), q_off.end(), i);
        const auto s = static_cast<std::size_t>(it - q_off.begin()) - 1;
        const std::size_t lo = k_off[s];
        std::size_t hi = k_off[s + 1];
        if (seg_causal) hi = std::min(hi, lo + (i - q_off[s]) + 1);
        return {lo, hi};
      }
    }
    return {0, tk};
  }
};

// Scaled dot-product attention over `heads` equal column blocks of already
// projected q (Tq × d), k (Tk × d), v (Tk × d). A query row with no readable
// key yields a zero readout.
namespace detail {

// One dense attention block: query rows [q0, q1) against key rows [k0, k1).
struct AttnBlock {
  std::size_t q0, q1, k0, k1;
};

inline std::vector<AttnBlock> attention_blocks(const AttnMask& mask, std::size_t tq, std::size_t tk) {
  if (mask.kind != AttnMask::Kind::kSegmented) return {{0, tq, 0, tk}};
  std::vector<AttnBlock> out;
  for (std::size_t s = 0; s + 1 < mask.q_off.size(); ++s)
    out.push_back({mask.q_off[s], mask.q_off[s + 1], mask.k_off[s], mask.k_off[s + 1]});
  return out;
}

}  // namespace detail

inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t heads, const AttnMask& mask = {}) {
  using detail::RowMat;
  const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != tk) detail::shape_fail("attention", q.shape(), k.shape());
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: heads " + std::to_string(heads) + " must divide width " + std::to_string(d));
  }
  if (mask.kind == AttnMask::Kind::kExplicit && mask.allowed.size() != tq * tk) {
    throw ShapeError("attention: mask size mismatch");
  }
  if (mask.kind == AttnMask::Kind::kSegmented && (mask.q_off.back() != tq || mask.k_off.back() != tk)) {
    throw ShapeError("attention: segment offsets do not cover the inputs");
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto blocks = detail::attention_blocks(mask, tq, tk);
  const auto Q = detail::as_cmat(q.node()->data, tq, d);
  const auto K = detail::as_cmat(k.node()->data, tk, d);
  const auto V = detail::as_cmat(v.node()->data, tk, d);
  std::vector<double> out(tq * d, 0.0);
  auto O = detail::as_mat(out, tq, d);
  // probs[block * heads + h] holds that block's (rows × keys) probabilities.
  std::vector<RowMat> probs;
  probs.reserve(blocks.size() * heads);
  const auto ninf = -std::numeric_limits<double>::infinity();
  for (const auto& bl : blocks) {
    const auto nq = static_cast<Eigen::Index>(bl.q1 - bl.q0), nk = static_cast<Eigen::Index>(bl.k1 - bl.k0);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto o = static_cast<Eigen::Index>(h * dh), w = static_cast<Eigen::Index>(dh);
      RowMat S(nq, nk);
      if (nq > 0 && nk > 0) {
        S.noalias() = Q.block(static_cast<Eigen::Index>(bl.q0), o, nq, w) *
                      K.block(static_cast<Eigen::Index>(bl.k0), o, nk, w).transpose();
        S *= sc;
      }
      for (Eigen::Index i = 0; i < nq; ++i) {
        const std::size_t gi = bl.q0 + static_cast<std::size_t>(i);
        double mx = ninf;
        const auto [lo, hi] = mask.key_range(gi, tk);
        for (Eigen::Index j = 0; j < nk; ++j) {
          const std::size_t gj = bl.k0 + static_cast<std::size_t>(j);
          const bool ok = gj >= lo && gj < hi && (mask.kind != AttnMask::Kind::kExplicit || mask.allows(gi, gj, tk));
          if (!ok) {
            S(i, j) = ninf;
          } else {
            mx = std::max(mx, S(i, j));
          }
        }
        if (mx == ninf) {
          S.row(i).setZero();
          continue;
        }
        double z = 0.0;
        for (Eigen::Index j = 0; j < nk; ++j) {
          const double e = S(i, j) == ninf ? 0.0 : std::exp(S(i, j) - mx);
          S(i, j) = e;
          z += e;
        }
        S.row(i) /= z;
      }
      if (nq > 0 && nk > 0) {
        O.block(static_cast<Eigen::Index>(bl.q0), o, nq, w).noalias() =
            S * V.block(static_cast<Eigen::Index>(bl.k0), o, nk, w);
      }
      probs.push_back(std::move(S));
    }
  }
  return detail::record({tq, d}, std::move(out), {q, k, v},
                        [tq, tk, d, dh, heads, sc, blocks, probs = std::move(probs)](detail::Node& self) {
    double* gq = detail::grad_of(self, 0);
    double* gk = detail::grad_of(self, 1);
    double* gv = detail::grad_of(self, 2);
    const auto Q = detail::as_cmat(self.parents[0]->data, tq, d);
    const auto K = detail::as_cmat(self.parents[1]->data, tk, d);
    const auto V = detail::as_cmat(self.parents[2]->data, tk, d);
    const auto G = detail::as_cmat(self.grad, tq, d);
    std::size_t pi = 0;
    for (const auto& bl : blocks) {
      const auto q0 = static_cast<Eigen::Index>(bl.q0), k0 = static_cast<Eigen::Index>(bl.k0);
      const auto nq = static_cast<Eigen::Index>(bl.q1 - bl.q0), nk = static_cast<Eigen::Index>(bl.k1 - bl.k0);
      for (std::size_t h = 0; h < heads; ++h, ++pi) {
        if (nq == 0 || nk == 0) continue;
        const RowMat& P = probs[pi];
        const auto o = static_cast<Eigen::Index>(h * dh), w = static_cast<Eigen::Index>(dh);
        const auto Gb = G.block(q0, o, nq, w);
        if (gv) detail::MapMat(gv, tk, d).block(k0, o, nk, w).noalias() += P.transpose() * Gb;
        if (!gq && !gk) continue;
        RowMat dP = Gb * V.block(k0, o, nk, w).transpose();
        const Eigen::VectorXd dot = (dP.array() * P.array()).rowwise().sum();
        RowMat dS = (P.array() * (dP.colwise() - dot).array()) * sc;
        if (gq) detail::MapMat(gq, tq, d).block(q0, o, nq, w).noalias() += dS * K.block(k0, o, nk, w);
        if (gk) detail::MapMat(gk, tk, d).block(k0, o, nk, w).noalias() += dS.transpose() * Q.block(q0, o, nq, w);
      }
    }
  });
}

// Rotary position embedding applied per head; row r sits at positions[r].
inline Tensor rope_at(const Tensor& x, std::size_t heads, const std::vector<std::size_t>& positions,
                      double base = 10000.0) {
  const std::size_t t = x.rows(), d = x.cols();
  if (heads == 0 || d % heads != 0 || (d / heads) % 2 != 0) {
    throw ShapeError("rope: head width must be even and divide " + std::to_string(d));
  }
  if (positions.size() != t) throw ShapeError("rope: one position per row required");
  const std::size_t dh = d / heads;
  std::vector<double> inv(dh / 2);
  for (std::size_t i = 0; i < dh / 2; ++i)
    inv[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
  std::vector<double> cs(t * dh / 2), sn(t * dh / 2);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t i = 0; i < dh / 2; ++i) {
      const double ang = static_cast<double>(positions[r]) * inv[i];
      cs[r * dh / 2 + i] = std::cos(ang);
      sn[r * dh / 2 + i] = std::sin(ang);
    }
  std::vector<double> out(t * d);
  const auto xd = x.data();
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < dh / 2; ++i) {
        const std::size_t a = r * d + h * dh + 2 * i;
        const double c = cs[r * dh / 2 + i], s = sn[r * dh / 2 + i];
        out[a] = xd[a] * c - xd[a + 1] * s;
        out[a + 1] = xd[a] * s + xd[a + 1] * c;
      }
  return detail::record(x.shape(), std::move(out), {x},
                        [t, d, dh, heads, cs = std::move(cs), sn = std::move(sn)](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < dh / 2; ++i) {
          const std::size_t a = r * d + h * dh + 2 * i;
          const double c = cs[r * dh / 2 + i], s = sn[r * dh / 2 + i];
          g[a] += self.grad[a] * c + self.grad[a + 1] * s;
          g[a + 1] += -self.grad[a] * s + self.grad[a + 1] * c;
        }
  });
}

// Rows at consecutive positions first_pos, first_pos + 1, ...
inline Tensor rope(const Tensor& x, std::size_t heads, std::size_t first_pos, double base = 10000.0) {
  std::vector<std::size_t> pos(x.rows());
  for (std::size_t r = 0; r < pos.size(); ++r) pos[r] = first_pos + r;
  return rope_at(x, heads, pos, base);
}

// Σ_t w_t · (−log softmax(logits_t)[target_t]).
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                                    const std::vector<double>& weights) {
  const std::size_t t = logits.rows(), v = logits.cols();
  if (targets.size() != t || weights.size() != t) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(t) + " rows");
  }
  std::vector<double> prob(t * v);
  double loss = 0.0;
  const auto ld = logits.data();
  for (std::size_t r = 0; r < t; ++r) {
    if (targets[r] >= v) throw ShapeError("softmax_cross_entropy: target out of range");
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) m = std::max(m, ld[r * v + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += (prob[r * v + j] = std::exp(ld[r * v + j] - m));
    for (std::size_t j = 0; j < v; ++j) prob[r * v + j] /= z;
    if (weights[r] != 0.0) loss += weights[r] * (m + std::log(z) - ld[r * v + targets[r]]);
  }
  return detail::record({}, {loss}, {logits},
                        [t, v, targets, weights, prob = std::move(prob)](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    if (!g) return;
    const double go = self.grad[0];
    for (std::size_t r = 0; r < t; ++r) {
      if (weights[r] == 0.0) continue;
      const double w = go * weights[r];
      for (std::size_t j = 0; j < v; ++j) g[r * v + j] += w * prob[r * v + j];
      g[r * v + targets[r]] -= w;
    }
  });
}

}  // namespace glab
