#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "medmix/dataset.hpp"
#include "medmix/error.hpp"
#include "medmix/tensor.hpp"

namespace medmix {

/// Mann-Whitney AUROC with midranks for ties. nullopt when the labels
/// contain no positive or no negative.
inline std::optional<double> auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const std::size_t n = scores.size();
  if (n == 0 || labels.size() != n) throw Error("auroc: scores and labels must be non-empty and aligned");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]]) {
        rank_sum_pos += midrank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double u = rank_sum_pos - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

/// Average precision without interpolation. Tied scores form one
/// threshold: every positive in a tie group is credited the precision at
/// the end of its group. nullopt when there is no positive.
inline std::optional<double> auprc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const std::size_t n = scores.size();
  if (n == 0 || labels.size() != n) throw Error("auprc: scores and labels must be non-empty and aligned");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t total_pos = 0;
  for (std::size_t i = 0; i < n; ++i) total_pos += labels[i] ? 1 : 0;
  if (total_pos == 0) return std::nullopt;
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t group_pos = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      group_pos += labels[order[j]] ? 1 : 0;
      ++j;
    }
    tp += group_pos;
    if (group_pos) ap += static_cast<double>(group_pos) * static_cast<double>(tp) / static_cast<double>(j);
    i = j;
  }
  return ap / static_cast<double>(total_pos);
}

struct BinaryCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

/// F1 = 2TP / (2TP + FP + FN); nullopt when the label is absent from both
/// truth and prediction (0/0).
inline std::optional<double> f1_score(const BinaryCounts& c) {
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return std::nullopt;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

struct MetricsReport {
  double auroc = 0.0;
  double auprc = 0.0;
  double mf1 = 0.0;
  double acc = 0.0;
  std::vector<std::optional<double>> per_label_auroc;
  std::vector<std::optional<double>> per_label_auprc;
  std::vector<std::optional<double>> per_label_f1;
  std::vector<double> thresholds;
  std::size_t n_evaluated = 0;
  std::vector<std::size_t> skipped_labels;  // degenerate for AUROC

  double perf() const { return (auroc + auprc + mf1 + acc) / 4.0; }
};

namespace detail {

inline std::vector<std::uint8_t> binary_column(const Matrix<float>& labels, TaskKind kind, std::size_t c) {
  std::vector<std::uint8_t> y(labels.rows());
  for (std::size_t i = 0; i < labels.rows(); ++i)
    y[i] = kind == TaskKind::multi_class ? (static_cast<std::size_t>(labels(i, 0)) == c) : (labels(i, c) > 0.5f);
  return y;
}

inline std::vector<double> score_column(const Matrix<double>& scores, std::size_t c) {
  std::vector<double> s(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) s[i] = scores(i, c);
  return s;
}

inline double mean_of(const std::vector<std::optional<double>>& v) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& x : v)
    if (x) {
      sum += *x;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

inline std::size_t argmax_row(const Matrix<double>& scores, std::size_t i) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < scores.cols(); ++c)
    if (scores(i, c) > scores(i, best)) best = c;
  return best;
}

}  // namespace detail

/// Macro F1 and accuracy. Multi-label: per-label thresholds, accuracy is
/// the mean per-label binary accuracy. Multi-class: argmax predictions.
inline std::pair<double, double> f1_and_acc(const Matrix<double>& scores, const Matrix<float>& labels, TaskKind kind,
                                            std::span<const double> thresholds,
                                            std::vector<std::optional<double>>* per_label = nullptr) {
  const std::size_t n = scores.rows();
  const std::size_t C = scores.cols();
  if (n == 0) throw Error("f1_and_acc: empty input");
  std::vector<BinaryCounts> counts(C);
  std::size_t correct = 0;
  if (kind == TaskKind::multi_label) {
    if (thresholds.size() != C) throw Error("f1_and_acc: one threshold per label required");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const bool pred = scores(i, c) >= thresholds[c];
        const bool truth = labels(i, c) > 0.5f;
        auto& k = counts[c];
        if (pred && truth) ++k.tp;
        else if (pred) ++k.fp;
        else if (truth) ++k.fn;
        else ++k.tn;
        correct += pred == truth ? 1 : 0;
      }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t pred = detail::argmax_row(scores, i);
      const auto truth = static_cast<std::size_t>(labels(i, 0));
      correct += pred == truth ? 1 : 0;
      for (std::size_t c = 0; c < C; ++c) {
        auto& k = counts[c];
        const bool p = pred == c, t = truth == c;
        if (p && t) ++k.tp;
        else if (p) ++k.fp;
        else if (t) ++k.fn;
        else ++k.tn;
      }
    }
  }
  std::vector<std::optional<double>> f1(C);
  for (std::size_t c = 0; c < C; ++c) f1[c] = f1_score(counts[c]);
  if (per_label) *per_label = f1;
  const double denom = kind == TaskKind::multi_label ? static_cast<double>(n * C) : static_cast<double>(n);
  return {detail::mean_of(f1), static_cast<double>(correct) / denom};
}

/// Per-label threshold maximizing validation F1 over the midpoints of the
/// sorted unique scores plus 0.5. Ties go to the candidate nearest 0.5
/// (then the smaller one). Degenerate labels keep 0.5. Multi-class tasks
/// predict by argmax and return 0.5 everywhere.
inline std::vector<double> tune_thresholds(const Matrix<double>& scores, const Matrix<float>& labels, TaskKind kind) {
  const std::size_t C = scores.cols();
  std::vector<double> th(C, 0.5);
  if (kind == TaskKind::multi_class || scores.rows() == 0) return th;
  for (std::size_t c = 0; c < C; ++c) {
    const auto s = detail::score_column(scores, c);
    const auto y = detail::binary_column(labels, kind, c);
    const std::size_t pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
    if (pos == 0 || pos == y.size()) continue;
    std::vector<double> uniq = s;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    std::vector<double> cand{0.5};
    for (std::size_t i = 0; i + 1 < uniq.size(); ++i) cand.push_back(0.5 * (uniq[i] + uniq[i + 1]));
    double best_f1 = -1.0, best_t = 0.5;
    for (double t : cand) {
      BinaryCounts k;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const bool p = s[i] >= t;
        if (p && y[i]) ++k.tp;
        else if (p) ++k.fp;
        else if (y[i]) ++k.fn;
        else ++k.tn;
      }
      const double f = f1_score(k).value_or(0.0);
      const double dist = std::abs(t - 0.5), best_dist = std::abs(best_t - 0.5);
      if (f > best_f1 || (f == best_f1 && (dist < best_dist || (dist == best_dist && t < best_t)))) {
        best_f1 = f;
        best_t = t;
      }
    }
    th[c] = best_t;
  }
  return th;
}

/// Full report: macro AUROC/AUPRC over non-degenerate labels (one-vs-rest
/// for multi-class), macro-F1 and accuracy at the given thresholds.
inline MetricsReport evaluate_metrics(const Matrix<double>& scores, const Matrix<float>& labels, TaskKind kind,
                                      std::vector<double> thresholds = {}) {
  const std::size_t C = scores.cols();
  if (thresholds.empty()) thresholds.assign(C, 0.5);
  MetricsReport r;
  r.n_evaluated = scores.rows();
  r.thresholds = thresholds;
  r.per_label_auroc.resize(C);
  r.per_label_auprc.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    const auto s = detail::score_column(scores, c);
    const auto y = detail::binary_column(labels, kind, c);
    r.per_label_auroc[c] = auroc(s, y);
    r.per_label_auprc[c] = r.per_label_auroc[c] ? auprc(s, y) : std::nullopt;
    if (!r.per_label_auroc[c]) r.skipped_labels.push_back(c);
  }
  r.auroc = detail::mean_of(r.per_label_auroc);
  r.auprc = detail::mean_of(r.per_label_auprc);
  auto [f1, acc] = f1_and_acc(scores, labels, kind, thresholds, &r.per_label_f1);
  r.mf1 = f1;
  r.acc = acc;
  return r;
}

struct CostProfile {
  double params = 0.0;
  double flops = 0.0;
  double peak_memory = 0.0;
};

struct EfficiencyScore {
  double perf = 0.0;
  double cost = 0.0;
  double effscore = 0.0;
};

inline double perf_of(double auroc_v, double auprc_v, double mf1_v, double acc_v) {
  return (auroc_v + auprc_v + mf1_v + acc_v) / 4.0;
}

/// Perf = mean of the four metrics; cost = geometric mean of the three
/// cost ratios against the reference; effscore = (perf / ref_perf) / cost.
inline EfficiencyScore perf_and_effscore(double perf, const CostProfile& cost, double ref_perf,
                                         const CostProfile& ref) {
  if (ref.params <= 0.0 || ref.flops <= 0.0 || ref.peak_memory <= 0.0 || ref_perf <= 0.0)
    throw ValidationError("reference", "reference perf and costs must be positive");
  if (cost.params <= 0.0 || cost.flops <= 0.0 || cost.peak_memory <= 0.0)
    throw ValidationError("cost", "costs must be positive");
  EfficiencyScore e;
  e.perf = perf;
  e.cost = std::cbrt((cost.params / ref.params) * (cost.flops / ref.flops) * (cost.peak_memory / ref.peak_memory));
  e.effscore = (perf / ref_perf) / e.cost;
  return e;
}

inline EfficiencyScore perf_and_effscore(const MetricsReport& report, const CostProfile& cost,
                                         const MetricsReport& ref_report, const CostProfile& ref) {
  return perf_and_effscore(report.perf(), cost, ref_report.perf(), ref);
}

}  // namespace medmix
