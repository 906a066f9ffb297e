// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "glab/core/random.hpp"
#include "glab/losses.hpp"

namespace glab {

struct ClassMetrics {
  std::string name;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t support = 0;
  double threshold = 0.5;
  double auc = std::numeric_limits<double>::quiet_NaN();
};

struct MetricReport {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  double macro_auc = std::numeric_limits<double>::quiet_NaN();
  bool leaky = false;
};

inline double f1_score(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline double safe_ratio(std::size_t a, std::size_t b) {
  return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
}

inline std::vector<std::string> default_class_names(std::size_t c) {
  std::vector<std::string> n;
  for (std::size_t i = 0; i < c; ++i) n.push_back("class_" + std::to_string(i));
  return n;
}

// Per-class and macro P/R/F1 with 0/0 taken as 0.
inline MetricReport macro_metrics(const std::vector<LabelVector>& preds, const std::vector<LabelVector>& labels,
                                  std::vector<std::string> names = {}) {
  if (preds.size() != labels.size()) throw ShapeError("macro_metrics: prediction/label count mismatch");
  const std::size_t c = labels.empty() ? names.size() : labels.front().size();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != c || labels[i].size() != c) throw ShapeError("macro_metrics: class count mismatch");
  }
  if (names.empty()) names = default_class_names(c);
  if (names.size() != c) throw ShapeError("macro_metrics: class name count mismatch");
  MetricReport r;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i].values[k], y = labels[i].values[k];
      tp += p && y;
      fp += p && !y;
      fn += !p && y;
    }
    ClassMetrics m;
    m.name = names[k];
    m.precision = safe_ratio(tp, tp + fp);
    m.recall = safe_ratio(tp, tp + fn);
    m.f1 = f1_score(m.precision, m.recall);
    m.support = tp + fn;
    r.per_class.push_back(m);
  }
  if (c > 0) {
    for (const auto& m : r.per_class) {
      r.macro_precision += m.precision;
      r.macro_recall += m.recall;
      r.macro_f1 += m.f1;
    }
    r.macro_precision /= static_cast<double>(c);
    r.macro_recall /= static_cast<double>(c);
    r.macro_f1 /= static_cast<double>(c);
  }
  return r;
}

// Area under the ROC curve by the trapezoidal rule over distinct score
// levels (ties contribute half). NaN when only one class is present.
inline double auc_trapezoid(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: score/label count mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto npos = static_cast<double>(std::count(labels.begin(), labels.end(), true));
  const double nneg = static_cast<double>(labels.size()) - npos;
  if (npos == 0.0 || nneg == 0.0) return std::numeric_limits<double>::quiet_NaN();
  double tp = 0.0, fp = 0.0, area = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    double dtp = 0.0, dfp = 0.0;
    std::size_t j = i;
    for (; j < idx.size() && scores[idx[j]] == scores[idx[i]]; ++j) (labels[idx[j]] ? dtp : dfp) += 1.0;
    area += dfp * (tp + 0.5 * dtp);
    tp += dtp;
    fp += dfp;
    i = j;
  }
  return area / (npos * nneg);
}

inline std::vector<LabelVector> threshold_scores(const std::vector<std::vector<double>>& scores,
                                                 const std::vector<double>& thresholds) {
  std::vector<LabelVector> out;
  out.reserve(scores.size());
  for (const auto& row : scores) {
    if (row.size() != thresholds.size()) throw ShapeError("threshold_scores: class count mismatch");
    LabelVector y;
    for (std::size_t k = 0; k < row.size(); ++k) y.values.push_back(row[k] >= thresholds[k]);
    out.push_back(std::move(y));
  }
  return out;
}

// Metrics at fixed per-class thresholds, with per-class AUC attached.
inline MetricReport score_metrics(const std::vector<std::vector<double>>& scores,
                                  const std::vector<LabelVector>& labels, const std::vector<double>& thresholds,
                                  std::vector<std::string> names = {}) {
  MetricReport r = macro_metrics(threshold_scores(scores, thresholds), labels, std::move(names));
  double auc_sum = 0.0;
  std::size_t auc_n = 0;
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    std::vector<double> s;
    std::vector<bool> y;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      s.push_back(scores[i][k]);
      y.push_back(labels[i].values[k]);
    }
    r.per_class[k].threshold = thresholds[k];
    r.per_class[k].auc = auc_trapezoid(s, y);
    if (!std::isnan(r.per_class[k].auc)) {
      auc_sum += r.per_class[k].auc;
      ++auc_n;
    }
  }
  if (auc_n) r.macro_auc = auc_sum / static_cast<double>(auc_n);
  return r;
}

struct ThresholdResult {
  std::vector<double> thresholds;
  MetricReport report;
};

// Per-class threshold maximising F1 over the unique score values, predicting
// positive when score >= threshold. Uses the labels being scored, so the
// report is flagged leaky.
inline ThresholdResult optimize_thresholds(const std::vector<std::vector<double>>& scores,
                                           const std::vector<LabelVector>& labels,
                                           std::vector<std::string> names = {}) {
  if (scores.size() != labels.size()) throw ShapeError("optimize_thresholds: score/label count mismatch");
  const std::size_t c = labels.empty() ? 0 : labels.front().size();
  ThresholdResult out;
  out.thresholds.assign(c, 0.5);
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a][k] > scores[b][k]; });
    std::size_t npos = 0;
    for (const auto& y : labels) npos += y.values[k];
    std::size_t tp = 0, fp = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < idx.size();) {
      const double level = scores[idx[i]][k];
      for (; i < idx.size() && scores[idx[i]][k] == level; ++i) (labels[idx[i]].values[k] ? tp : fp) += 1;
      const double f = f1_score(safe_ratio(tp, tp + fp), safe_ratio(tp, npos));
      if (f > best) {
        best = f;
        out.thresholds[k] = level;
      }
    }
  }
  out.report = score_metrics(scores, labels, out.thresholds, std::move(names));
  out.report.leaky = true;
  return out;
}

struct ProbeResult {
  double macro_f1 = 0.0;
  std::vector<double> fold_f1;
  std::vector<std::string> notes;  // skipped (fold, class) pairs
};

struct ProbeOptions {
  std::size_t folds = 5;
  std::size_t iterations = 300;
  double lr = 0.5;
  double l2 = 1e-4;
  uint64_t seed = 0;
};

// One-vs-rest logistic regression by full-batch gradient descent on
// standardised features, under stratified k-fold cross-validation. Samples
// are stratified by their full label pattern.
inline ProbeResult linear_probe(const std::vector<std::vector<double>>& features,
                                const std::vector<LabelVector>& labels, ProbeOptions opt = {}) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t m = features.size();
  if (m != labels.size()) throw ShapeError("linear_probe: feature/label count mismatch");
  if (opt.folds < 2 || m < opt.folds) throw ContractError("linear_probe: need at least `folds` samples and folds >= 2");
  const std::size_t d = features.front().size(), c = labels.front().size();

  std::vector<std::pair<std::string, std::size_t>> keyed;
  for (std::size_t i = 0; i < m; ++i) {
    std::string key;
    for (bool v : labels[i].values) key.push_back(v ? '1' : '0');
    keyed.emplace_back(std::move(key), i);
  }
  Rng rng(opt.seed ^ 0x9D0BEull);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return keyed[a].first < keyed[b].first; });
  std::vector<std::size_t> fold_of(m);
  for (std::size_t i = 0; i < m; ++i) fold_of[order[i]] = i % opt.folds;

  ProbeResult res;
  for (std::size_t f = 0; f < opt.folds; ++f) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < m; ++i) (fold_of[i] == f ? te : tr).push_back(i);
    if (te.empty()) continue;
    Mat xtr(tr.size(), d), xte(te.size(), d);
    for (std::size_t i = 0; i < tr.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) xtr(i, j) = features[tr[i]][j];
    for (std::size_t i = 0; i < te.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) xte(i, j) = features[te[i]][j];
    const Eigen::RowVectorXd mu = xtr.colwise().mean();
    Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt();
    for (Eigen::Index j = 0; j < sd.size(); ++j)
      if (!(sd(j) > 1e-12)) sd(j) = 1.0;
    xtr = ((xtr.rowwise() - mu).array().rowwise() / sd.array()).matrix();
    xte = ((xte.rowwise() - mu).array().rowwise() / sd.array()).matrix();

    double f1_sum = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < c; ++k) {
      Eigen::VectorXd y(tr.size());
      for (std::size_t i = 0; i < tr.size(); ++i) y(i) = labels[tr[i]].values[k] ? 1.0 : 0.0;
      const double npos = y.sum();
      if (npos == 0.0 || npos == static_cast<double>(tr.size())) {
        res.notes.push_back("fold " + std::to_string(f) + ": class " + std::to_string(k) +
                            " skipped (single-class training labels)");
        continue;
      }
      Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
      double b = 0.0;
      const double inv_n = 1.0 / static_cast<double>(tr.size());
      for (std::size_t it = 0; it < opt.iterations; ++it) {
        const Eigen::VectorXd z = (xtr * w).array() + b;
        const Eigen::VectorXd p = (1.0 / (1.0 + (-z.array()).exp())).matrix();
        const Eigen::VectorXd g = p - y;
        w -= opt.lr * (inv_n * (xtr.transpose() * g) + opt.l2 * w);
        b -= opt.lr * inv_n * g.sum();
      }
      const Eigen::VectorXd zt = (xte * w).array() + b;
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < te.size(); ++i) {
        const bool pr = zt(static_cast<Eigen::Index>(i)) >= 0.0, yt = labels[te[i]].values[k];
        tp += pr && yt;
        fp += pr && !yt;
        fn += !pr && yt;
      }
      f1_sum += f1_score(safe_ratio(tp, tp + fp), safe_ratio(tp, tp + fn));
      ++used;
    }
    if (used) res.fold_f1.push_back(f1_sum / static_cast<double>(used));
  }
  if (!res.fold_f1.empty()) {
    res.macro_f1 = std::accumulate(res.fold_f1.begin(), res.fold_f1.end(), 0.0) /
                   static_cast<double>(res.fold_f1.size());
  }
  return res;
}

// ---------------------------------------------------------------------------
// Report files.

inline constexpr int kMetricsSchemaVersion = 1;

inline std::string metrics_csv(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "class,precision,recall,f1,support,threshold\n";
  double thr_mean = 0.0;
  std::size_t support = 0;
  for (const auto& m : r.per_class) {
    os << m.name << ',' << m.precision << ',' << m.recall << ',' << m.f1 << ',' << m.support << ',' << m.threshold
       << '\n';
    thr_mean += m.threshold;
    support += m.support;
  }
  if (!r.per_class.empty()) thr_mean /= static_cast<double>(r.per_class.size());
  os << "MACRO," << r.macro_precision << ',' << r.macro_recall << ',' << r.macro_f1 << ',' << support << ','
     << thr_mean << '\n';
  return os.str();
}

struct ReportContext {
  int phase = 0;
  std::string checkpoint;
  uint64_t seed = 0;
  std::string condition = "normal";
};

inline nlohmann::json metrics_json(const MetricReport& r, const ReportContext& ctx) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json pc = nlohmann::json::array();
  for (const auto& m : r.per_class) {
    pc.push_back({{"class", m.name},
                  {"precision", m.precision},
                  {"recall", m.recall},
                  {"f1", m.f1},
                  {"support", m.support},
                  {"threshold", m.threshold},
                  {"auc", num(m.auc)}});
  }
  return {{"schema_version", kMetricsSchemaVersion},
          {"phase", ctx.phase},
          {"checkpoint", ctx.checkpoint},
          {"seed", ctx.seed},
          {"condition", ctx.condition},
          {"per_class", pc},
          {"macro",
           {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}, {"auc", num(r.macro_auc)}}},
          {"leaky", r.leaky}};
}

inline std::string metrics_summary(const MetricReport& r, const std::string& title) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << title << (r.leaky ? " (leaky thresholds)" : "") << '\n';
  for (const auto& m : r.per_class) {
    os << "  " << std::left << std::setw(32) << m.name << std::right << " P " << m.precision << "  R " << m.recall
       << "  F1 " << m.f1 << "  n " << m.support << '\n';
  }
  os << "  " << std::left << std::setw(32) << "MACRO" << std::right << " P " << r.macro_precision << "  R "
     << r.macro_recall << "  F1 " << r.macro_f1;
  if (std::isfinite(r.macro_auc)) os << "  AUC " << r.macro_auc;
  os << '\n';
  return os.str();
}

}  // namespace glab
