// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "glab/core/parameter_store.hpp"

namespace glab {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
};

// Adaptive moments with decoupled weight decay on matrices. Moments are
// keyed by parameter name; frozen entries are skipped.
class AdamW {
 public:
  struct Moments {
    std::vector<double> m, v;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  AdamWConfig& config() { return cfg_; }
  const AdamWConfig& config() const { return cfg_; }
  uint64_t steps() const { return t_; }
  void set_steps(uint64_t t) { t_ = t; }
  std::map<std::string, Moments>& moments() { return mom_; }
  const std::map<std::string, Moments>& moments() const { return mom_; }

  // Per-group learning-rate multipliers (default 1).
  void set_group_scale(const std::string& group, double s) { group_scale_[group] = s; }
  double group_scale(const std::string& group) const {
    auto it = group_scale_.find(group);
    return it == group_scale_.end() ? 1.0 : it->second;
  }

  static double global_grad_norm(const ParameterStore& store) {
    double s = 0.0;
    for (const auto& e : store.entries()) {
      if (e.frozen || !e.tensor.has_grad()) continue;
      for (double g : e.tensor.grad()) s += g * g;
    }
    return std::sqrt(s);
  }

  // One update at learning rate `lr`; returns the pre-clip gradient norm.
  double step(ParameterStore& store, double lr) {
    ++t_;
    const double gnorm = global_grad_norm(store);
    const double clip = cfg_.grad_clip > 0.0 && gnorm > cfg_.grad_clip ? cfg_.grad_clip / gnorm : 1.0;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& e : store.entries()) {
      if (e.frozen || !e.tensor.has_grad()) continue;
      auto& mo = mom_[e.name];
      const std::size_t n = e.tensor.numel();
      if (mo.m.size() != n) {
        mo.m.assign(n, 0.0);
        mo.v.assign(n, 0.0);
      }
      const double a = lr * group_scale(e.group);
      const double wd = e.tensor.rank() == 2 ? cfg_.weight_decay : 0.0;  // no decay on vectors and scalars
      auto w = e.tensor.mutable_data();
      const auto g = e.tensor.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g[i] * clip;
        mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * gi;
        mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mh = mo.m[i] / bc1, vh = mo.v[i] / bc2;
        w[i] -= a * (mh / (std::sqrt(vh) + cfg_.eps) + wd * w[i]);
      }
    }
    return gnorm;
  }

 private:
  AdamWConfig cfg_;
  uint64_t t_ = 0;
  std::map<std::string, Moments> mom_;
  std::map<std::string, double> group_scale_;
};

// Trust-ratio multiplier clamp(weight_norm / (grad_norm + eps), lo, hi).
inline double projector_lr_scale(double grad_norm, double weight_norm, double lo = 1.0, double hi = 30.0,
                                 double eps = 1e-8) {
  if (grad_norm < 0.0 || weight_norm < 0.0) throw ContractError("projector_lr_scale: norms must be >= 0");
  return std::clamp(weight_norm / (grad_norm + eps), lo, hi);
}

enum class LrPolicy { kConstant, kCosine, kPlateau };

inline LrPolicy parse_lr_policy(const std::string& s) {
  if (s == "constant") return LrPolicy::kConstant;
  if (s == "cosine") return LrPolicy::kCosine;
  if (s == "plateau") return LrPolicy::kPlateau;
  throw ConfigError("unknown lr_policy '" + s + "'");
}

inline std::string to_string(LrPolicy p) {
  switch (p) {
    case LrPolicy::kConstant: return "constant";
    case LrPolicy::kCosine: return "cosine";
    case LrPolicy::kPlateau: return "plateau";
  }
  return "constant";
}

// Epoch-level learning-rate schedule. The plateau rule multiplies the rate
// by `factor` once `patience` consecutive epochs fail to beat the best metric.
class LrSchedule {
 public:
  LrSchedule(LrPolicy policy, double base_lr, std::size_t total_epochs, std::size_t patience = 3,
             double factor = 0.5, double min_lr_ratio = 0.05)
      : policy_(policy), base_(base_lr), lr_(base_lr), total_(std::max<std::size_t>(total_epochs, 1)),
        patience_(patience), factor_(factor), min_ratio_(min_lr_ratio) {}

  double lr() const { return lr_; }
  std::size_t bad_epochs() const { return bad_; }

  // Rate for epoch e (0-based) under the cosine policy; other policies keep
  // their current rate.
  double at_epoch(std::size_t e) {
    if (policy_ == LrPolicy::kCosine) {
      const double t = static_cast<double>(e) / static_cast<double>(total_);
      lr_ = base_ * (min_ratio_ + (1.0 - min_ratio_) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
    }
    return lr_;
  }

  // Reports the epoch's selection metric (higher is better).
  void observe(double metric) {
    if (policy_ != LrPolicy::kPlateau) return;
    if (!seen_ || metric > best_) {
      best_ = metric;
      seen_ = true;
      bad_ = 0;
      return;
    }
    if (++bad_ >= patience_) {
      lr_ *= factor_;
      bad_ = 0;
    }
  }

 private:
  LrPolicy policy_;
  double base_, lr_;
  std::size_t total_, patience_;
  double factor_, min_ratio_;
  double best_ = 0.0;
  bool seen_ = false;
  std::size_t bad_ = 0;
};

}  // namespace glab
