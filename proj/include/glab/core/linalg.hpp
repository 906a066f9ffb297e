// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "glab/core/ops.hpp"
#include "glab/core/tensor.hpp"

namespace glab {

struct ThinSvd {
  Tensor u;   // rows × k, orthonormal columns
  Tensor s;   // k, descending, nonnegative
  Tensor vt;  // k × cols, orthonormal rows
};

struct SymmetricEigen {
  std::vector<double> values;  // descending
  detail::RowMat vectors;      // column i pairs with values[i]
};

namespace detail {

// Hestenes one-sided Jacobi on a tall matrix (m >= n). On return the columns
// of `a` are U·diag(S) and `v` holds right singular vectors as columns.
inline void one_sided_jacobi(RowMat& a, RowMat& v) {
  const Eigen::Index n = a.cols();
  v = RowMat::Identity(n, n);
  constexpr double kTol = 1e-15;
  for (int sweep = 0; sweep < 80; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = a.col(p).squaredNorm();
        const double beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (off < 1e-14) break;
  }
}

// Fills zero columns of `u` with unit vectors orthogonal to the others.
inline void complete_orthonormal(RowMat& u, const std::vector<bool>& filled) {
  const Eigen::Index m = u.rows();
  Eigen::Index probe = 0;
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    if (filled[static_cast<std::size_t>(j)]) continue;
    while (probe < m) {
      Eigen::VectorXd e = Eigen::VectorXd::Unit(m, probe++);
      for (Eigen::Index o = 0; o < u.cols(); ++o) {
        if (o == j || (!filled[static_cast<std::size_t>(o)] && o > j)) continue;
        e -= u.col(o).dot(e) * u.col(o);
      }
      if (e.norm() > 1e-6) {
        u.col(j) = e.normalized();
        break;
      }
    }
  }
}

}  // namespace detail

// Rank-k truncated SVD, M ≈ U·diag(S)·Vt.
inline ThinSvd svd_thin(const Tensor& m, std::size_t k) {
  const std::size_t rows = m.rows(), cols = m.cols();
  if (k == 0 || k > std::min(rows, cols)) {
    throw ContractError("svd_thin: rank " + std::to_string(k) + " exceeds min dimension of " +
                        shape_str(m.shape()));
  }
  const bool tall = rows >= cols;
  detail::RowMat a = detail::as_cmat(m.node()->data, rows, cols);
  if (!tall) a.transposeInPlace();
  detail::RowMat v;
  detail::one_sided_jacobi(a, v);
  const Eigen::Index n = a.cols();
  std::vector<double> sv(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j) sv[static_cast<std::size_t>(j)] = a.col(j).norm();
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sv[x] > sv[y]; });

  // Left/right factors of the (possibly transposed) working matrix.
  detail::RowMat left(a.rows(), static_cast<Eigen::Index>(k));
  detail::RowMat right(n, static_cast<Eigen::Index>(k));
  std::vector<double> s(k);
  std::vector<bool> filled(k, true);
  const double smax = sv[order[0]];
  for (std::size_t j = 0; j < k; ++j) {
    const auto src = static_cast<Eigen::Index>(order[j]);
    s[j] = sv[order[j]];
    right.col(static_cast<Eigen::Index>(j)) = v.col(src);
    if (s[j] > 1e-13 * std::max(smax, 1.0)) {
      left.col(static_cast<Eigen::Index>(j)) = a.col(src) / s[j];
    } else {
      left.col(static_cast<Eigen::Index>(j)).setZero();
      filled[j] = false;
    }
  }
  detail::complete_orthonormal(left, filled);

  const detail::RowMat& uu = tall ? left : right;
  const detail::RowMat& vv = tall ? right : left;
  std::vector<double> ud(rows * k), vtd(k * cols);
  detail::as_mat(ud, rows, k) = uu;
  detail::as_mat(vtd, k, cols) = vv.transpose();
  return {Tensor::from({rows, k}, std::move(ud)), Tensor::from({k}, std::move(s)),
          Tensor::from({k, cols}, std::move(vtd))};
}

// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
inline SymmetricEigen symmetric_eigen(const detail::RowMat& sym) {
  const Eigen::Index n = sym.rows();
  if (sym.cols() != n) throw ShapeError("symmetric_eigen: matrix is not square");
  detail::RowMat a = sym;
  detail::RowMat v = detail::RowMat::Identity(n, n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (Eigen::Index p = 0; p < n; ++p) {
      diag += a(p, p) * a(p, p);
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    if (off <= 1e-30 * std::max(diag, 1e-300)) break;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return a(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(x)) >
           a(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(y));
  });
  SymmetricEigen out;
  out.vectors.resize(n, n);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto src = static_cast<Eigen::Index>(order[i]);
    out.values.push_back(a(src, src));
    out.vectors.col(static_cast<Eigen::Index>(i)) = v.col(src);
  }
  return out;
}

}  // namespace glab
