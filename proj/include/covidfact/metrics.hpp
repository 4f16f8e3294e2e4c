#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "covidfact/tensor.hpp"

namespace covidfact {

class MetricError : public Error {
 public:
  using Error::Error;
};

// COVID is the positive class.
struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct BasicMetrics {
  double accuracy = 0.0, sensitivity = 0.0, specificity = 0.0;
};

inline BasicMetrics basic_metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw MetricError("accuracy undefined: no samples");
  if (c.tp + c.fn == 0) throw MetricError("sensitivity undefined: no positive samples");
  if (c.tn + c.fp == 0) throw MetricError("specificity undefined: no negative samples");
  return {static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total()),
          static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn),
          static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp)};
}

// Standard normal quantile: Acklam's rational approximation refined by one
// Halley step against erfc, accurate to ~1e-15.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw MetricError("normal_quantile: p must be in (0,1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01, -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

// Two-sided critical value for a confidence level, e.g. 1.95996... for 0.95.
inline double z_for_level(double level) {
  if (!(level > 0.0 && level < 1.0)) throw MetricError("confidence level must be in (0,1)");
  return normal_quantile(0.5 + level / 2.0);
}

struct Interval {
  double lo = 0.0, hi = 0.0;
};

enum class ProportionInterval { wilson, agresti_coull };

inline void check_counts(std::size_t successes, std::size_t n) {
  if (n == 0) throw MetricError("interval: n must be positive");
  if (successes > n) throw MetricError("interval: successes exceed n");
}

// Wilson score interval. The bounds at 0 and n successes are exactly 0 and 1.
inline Interval wilson_ci(std::size_t successes, std::size_t n, double level = 0.95) {
  check_counts(successes, n);
  const double z = z_for_level(level), nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double denom = 1.0 + z * z / nn;
  const double center = (p + z * z / (2 * nn)) / denom;
  const double half = z / denom * std::sqrt(p * (1 - p) / nn + z * z / (4 * nn * nn));
  Interval r{std::max(0.0, center - half), std::min(1.0, center + half)};
  if (successes == 0) r.lo = 0.0;
  if (successes == n) r.hi = 1.0;
  return r;
}

// Agresti-Coull: Wald interval around the Wilson centre with n + z^2 trials.
inline Interval agresti_coull_ci(std::size_t successes, std::size_t n, double level = 0.95) {
  check_counts(successes, n);
  const double z = z_for_level(level);
  const double nt = static_cast<double>(n) + z * z;
  const double pt = (static_cast<double>(successes) + z * z / 2) / nt;
  const double half = z * std::sqrt(pt * (1 - pt) / nt);
  return {std::max(0.0, pt - half), std::min(1.0, pt + half)};
}

inline Interval proportion_ci(std::size_t successes, std::size_t n, double level, ProportionInterval kind) {
  return kind == ProportionInterval::wilson ? wilson_ci(successes, n, level) : agresti_coull_ci(successes, n, level);
}

// ---------------------------------------------------------------------------

struct ScoredLabel {
  double score = 0.0;
  bool positive = false;
};

struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
  double threshold = 0.0;  // predicted positive iff score >= threshold
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0,0) to (1,1)
  double auc = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
};

// Thresholds sweep the distinct scores from high to low; tied scores move
// together, so the trapezoid over each step gives ties half credit.
inline RocCurve roc_curve(std::span<const ScoredLabel> data) {
  RocCurve roc;
  for (const auto& d : data) {
    if (!std::isfinite(d.score)) throw MetricError("roc_curve: non-finite score");
    (d.positive ? roc.n_pos : roc.n_neg)++;
  }
  if (roc.n_pos == 0 || roc.n_neg == 0) throw MetricError("roc_curve: both classes must be present");
  std::vector<ScoredLabel> sorted(data.begin(), data.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  const double P = static_cast<double>(roc.n_pos), N = static_cast<double>(roc.n_neg);
  roc.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double s = sorted[i].score;
    for (; i < sorted.size() && sorted[i].score == s; ++i) (sorted[i].positive ? tp : fp)++;
    const RocPoint pt{static_cast<double>(fp) / N, static_cast<double>(tp) / P, s};
    const RocPoint& prev = roc.points.back();
    roc.auc += (pt.fpr - prev.fpr) * (pt.tpr + prev.tpr) / 2.0;
    roc.points.push_back(pt);
  }
  return roc;
}

// Hanley & McNeil standard error with Q1 = A/(2-A), Q2 = 2A^2/(1+A); the
// interval A +- z*SE is clamped to [0,1].
inline double hanley_mcneil_se(double auc, std::size_t n_pos, std::size_t n_neg) {
  if (!(auc >= 0.0 && auc <= 1.0)) throw MetricError("hanley_mcneil: auc must be in [0,1]");
  if (n_pos == 0 || n_neg == 0) throw MetricError("hanley_mcneil: both class counts must be positive");
  const double q1 = auc / (2.0 - auc), q2 = 2.0 * auc * auc / (1.0 + auc);
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  const double var = (auc * (1 - auc) + (np - 1) * (q1 - auc * auc) + (nn - 1) * (q2 - auc * auc)) / (np * nn);
  return std::sqrt(std::max(0.0, var));
}

inline Interval hanley_mcneil_ci(double auc, std::size_t n_pos, std::size_t n_neg, double level = 0.95) {
  const double se = hanley_mcneil_se(auc, n_pos, n_neg);
  const double z = z_for_level(level);
  return {std::clamp(auc - z * se, 0.0, 1.0), std::clamp(auc + z * se, 0.0, 1.0)};
}

// Predicted positive iff score > cutoff, matching the pipeline's decision.
inline ConfusionCounts confusion_at(std::span<const ScoredLabel> data, double cutoff) {
  ConfusionCounts c;
  for (const auto& d : data) {
    const bool pred = d.score > cutoff;
    if (d.positive) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  return c;
}

struct CutoffRow {
  double cutoff = 0.5;
  ConfusionCounts counts;
  BasicMetrics metrics;
};

inline std::vector<CutoffRow> cutoff_sweep(std::span<const ScoredLabel> data, std::span<const double> cutoffs) {
  std::vector<CutoffRow> rows;
  for (double c : cutoffs) {
    const auto counts = confusion_at(data, c);
    rows.push_back({c, counts, basic_metrics(counts)});
  }
  return rows;
}

inline constexpr double kDefaultSweep[] = {0.5, 0.6, 0.7, 0.75, 0.8};

// fpr,tpr,threshold with 17 significant digits; the opening threshold is "inf".
inline std::string roc_csv(const RocCurve& roc) {
  std::ostringstream os;
  os.precision(17);
  os << "fpr,tpr,threshold\n";
  for (const auto& p : roc.points) {
    os << p.fpr << ',' << p.tpr << ',';
    if (std::isinf(p.threshold)) os << "inf";
    else os << p.threshold;
    os << '\n';
  }
  return os.str();
}

}  // namespace covidfact
