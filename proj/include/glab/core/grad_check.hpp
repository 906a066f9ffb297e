// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "glab/core/parameter_store.hpp"
#include "glab/core/tensor.hpp"

namespace glab {

struct GradCheckItem {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

struct CheckReport {
  std::vector<GradCheckItem> items;
  double max_rel_err = 0.0;
  bool passed = true;
  std::string failure;  // set when f was non-finite somewhere
};

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-3;
  // Denominator floor, so gradients near zero compare absolutely.
  double floor = 1e-6;
  // Coordinates checked per tensor, spread evenly; 0 checks all.
  std::size_t max_per_tensor = 0;
};

// Compares analytic gradients of the scalar f against central differences
// for every trainable tensor in `params`.
inline CheckReport grad_check(const std::function<Tensor()>& f, ParameterStore& params,
                              const GradCheckOptions& opt = {}) {
  if (!(opt.h > 0.0)) throw ContractError("grad_check: step h must be positive");
  CheckReport report;
  params.zero_grad();
  const Tensor root = f();
  if (!std::isfinite(root.item())) {
    report.passed = false;
    report.failure = "non-finite value at unperturbed parameters";
    return report;
  }
  root.backward();
  for (auto& e : params.entries()) {
    if (e.frozen) continue;
    GradCheckItem item;
    item.name = e.name;
    const std::vector<double> analytic = e.tensor.grad_or_zeros();
    auto values = e.tensor.mutable_data();
    const std::size_t n = values.size();
    const std::size_t stride =
        opt.max_per_tensor == 0 || n <= opt.max_per_tensor ? 1 : (n + opt.max_per_tensor - 1) / opt.max_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = values[i];
      double fp, fm;
      {
        NoGradGuard ng;
        values[i] = orig + opt.h;
        fp = f().item();
        values[i] = orig - opt.h;
        fm = f().item();
        values[i] = orig;
      }
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.passed = false;
        report.failure = "non-finite value perturbing " + e.name + "[" + std::to_string(i) + "]";
        return report;
      }
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), opt.floor});
      const double rel = std::abs(numeric - analytic[i]) / denom;
      if (rel > item.max_rel_err) {
        item.max_rel_err = rel;
        item.worst_index = i;
      }
      ++item.checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, item.max_rel_err);
    report.items.push_back(std::move(item));
  }
  report.passed = report.max_rel_err < opt.tol;
  params.zero_grad();
  return report;
}

}  // namespace glab
