#pragma once

// Segmentation metrics.
//
// mask-IoU is the foreground IoU only; mean-IoU averages foreground and
// background IoU. Both are always reported so the two are never confused.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "semconmf/errors.hpp"
#include "semconmf/matrix.hpp"

namespace semconmf {

inline constexpr double kDefaultBetaSq = 0.3;

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
};

inline ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
  require_shape(pred.rows() == gt.rows() && pred.cols() == gt.cols(), "prediction and ground truth differ in shape");
  ConfusionCounts c;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const bool p = pred.data()[i] != 0;
    const bool g = gt.data()[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

namespace detail {

inline double ratio_or(std::uint64_t num, std::uint64_t den, double empty) {
  return den == 0 ? empty : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

/// tp / (tp + fp + fn); 1 when both masks are empty.
inline double mask_iou(const ConfusionCounts& c) { return detail::ratio_or(c.tp, c.tp + c.fp + c.fn, 1.0); }
inline double mask_iou(const BinaryMask& pred, const BinaryMask& gt) { return mask_iou(confusion(pred, gt)); }

/// (IoU(foreground) + IoU(background)) / 2
inline double mean_iou_binary(const ConfusionCounts& c) {
  return 0.5 * (mask_iou(c) + detail::ratio_or(c.tn, c.tn + c.fp + c.fn, 1.0));
}
inline double mean_iou_binary(const BinaryMask& pred, const BinaryMask& gt) { return mean_iou_binary(confusion(pred, gt)); }

/// (1 + b^2) P R / (b^2 P + R). 0 when the denominator vanishes, 1 when both masks are empty.
inline double f_score(const ConfusionCounts& c, double beta_sq = kDefaultBetaSq) {
  if (c.tp + c.fp + c.fn == 0) return 1.0;
  const double p = detail::ratio_or(c.tp, c.tp + c.fp, 0.0);
  const double r = detail::ratio_or(c.tp, c.tp + c.fn, 0.0);
  const double den = beta_sq * p + r;
  return den == 0.0 ? 0.0 : (1.0 + beta_sq) * p * r / den;
}
inline double f_score(const BinaryMask& pred, const BinaryMask& gt, double beta_sq = kDefaultBetaSq) {
  return f_score(confusion(pred, gt), beta_sq);
}

/// All-points average precision of a soft ranking. Pixels with equal scores
/// form one group and precision is taken at group ends only, so a constant
/// mask scores the prevalence. Returns 0 when the ground truth is empty.
inline double average_precision(const Matrix& scores, const BinaryMask& gt) {
  require_shape(scores.rows() == gt.rows() && scores.cols() == gt.cols(), "scores and ground truth differ in shape");
  const auto n = static_cast<std::size_t>(scores.size());
  std::uint64_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) positives += gt.data()[i] != 0;
  if (positives == 0) return 0.0;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores.data()[a] > scores.data()[b]; });
  double ap = 0.0;
  std::uint64_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::uint64_t group_tp = 0;
    while (j < n && scores.data()[order[j]] == scores.data()[order[i]]) group_tp += gt.data()[order[j++]] != 0;
    tp += group_tp;
    seen += j - i;
    ap += static_cast<double>(group_tp) / static_cast<double>(positives) * static_cast<double>(tp) /
          static_cast<double>(seen);
    i = j;
  }
  return ap;
}

struct SampleMetrics {
  std::string sample_id;
  double mask_iou = 0.0;
  double mean_iou = 0.0;
  double f_score = 0.0;
  double ap = 0.0;
};

inline SampleMetrics score_sample(std::string id, const Matrix& soft, const BinaryMask& pred, const BinaryMask& gt,
                                  double beta_sq = kDefaultBetaSq) {
  const auto c = confusion(pred, gt);
  return {std::move(id), mask_iou(c), mean_iou_binary(c), f_score(c, beta_sq), average_precision(soft, gt)};
}

/// Dataset-level binary metrics; m_ap is the mean of per-sample AP.
struct MetricReport {
  double mask_iou = 0.0;
  double mean_iou = 0.0;
  double f_score = 0.0;
  double m_ap = 0.0;
  std::vector<SampleMetrics> per_sample;
};

inline MetricReport aggregate(std::vector<SampleMetrics> samples) {
  MetricReport r;
  if (!samples.empty()) {
    for (const auto& s : samples) {
      r.mask_iou += s.mask_iou;
      r.mean_iou += s.mean_iou;
      r.f_score += s.f_score;
      r.m_ap += s.ap;
    }
    const auto n = static_cast<double>(samples.size());
    r.mask_iou /= n;
    r.mean_iou /= n;
    r.f_score /= n;
    r.m_ap /= n;
  }
  r.per_sample = std::move(samples);
  return r;
}

// ---------------------------------------------------------------------------
// Semantic (labelled) segmentation

struct ClassCounts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
};

struct SemanticReport {
  std::map<std::string, double> class_iou;  // classes with non-empty union
  double mean_iou = 0.0;                    // mean over class_iou
};

/// Accumulates per-class intersection and union over samples. A predicted
/// mask counts toward its predicted label only; the ground truth toward its
/// own label.
class SemanticAccumulator {
 public:
  explicit SemanticAccumulator(std::vector<std::string> class_set = {}) : class_set_(std::move(class_set)) {}

  void add(const BinaryMask& pred, const std::string& pred_label, const BinaryMask& gt, const std::string& gt_label) {
    require_shape(pred.rows() == gt.rows() && pred.cols() == gt.cols(), "prediction and ground truth differ in shape");
    check_known(pred_label);
    check_known(gt_label);
    if (pred_label == gt_label) {
      const auto c = confusion(pred, gt);
      auto& cc = counts_[gt_label];
      cc.intersection += c.tp;
      cc.union_ += c.tp + c.fp + c.fn;
    } else {
      counts_[pred_label].union_ += count(pred);
      counts_[gt_label].union_ += count(gt);
    }
  }

  SemanticReport report() const {
    SemanticReport r;
    for (const auto& [label, c] : counts_) {
      if (c.union_ == 0) continue;
      r.class_iou[label] = static_cast<double>(c.intersection) / static_cast<double>(c.union_);
    }
    if (!r.class_iou.empty()) {
      double s = 0.0;
      for (const auto& [_, v] : r.class_iou) s += v;
      r.mean_iou = s / static_cast<double>(r.class_iou.size());
    }
    return r;
  }

  const std::map<std::string, ClassCounts>& counts() const { return counts_; }

 private:
  static std::uint64_t count(const BinaryMask& m) { return static_cast<std::uint64_t>((m != 0).count()); }

  void check_known(const std::string& label) const {
    if (class_set_.empty()) return;
    if (std::find(class_set_.begin(), class_set_.end(), label) == class_set_.end())
      throw InvalidInput("label '" + label + "' is not in the class set");
  }

  std::vector<std::string> class_set_;
  std::map<std::string, ClassCounts> counts_;
};

/// Single-sample semantic report.
inline SemanticReport semantic_report(const BinaryMask& pred, const std::string& pred_label, const BinaryMask& gt,
                                      const std::string& gt_label, const std::vector<std::string>& class_set = {}) {
  SemanticAccumulator acc(class_set);
  acc.add(pred, pred_label, gt, gt_label);
  return acc.report();
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation; 0 for a single run
};

inline MeanStd mean_std(const std::vector<double>& values) {
  MeanStd m;
  if (values.empty()) return m;
  for (double v : values) m.mean += v;
  m.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - m.mean) * (v - m.mean);
  m.stddev = std::sqrt(ss / static_cast<double>(values.size()));
  return m;
}

}  // namespace semconmf
