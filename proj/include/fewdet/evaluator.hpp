#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fewdet/dataset.hpp"
#include "fewdet/detection.hpp"

namespace fewdet {

struct AreaRange {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();  // [lo, hi)

  bool contains(double area) const { return area >= lo && area < hi; }
};

struct EvalConfig {
  std::vector<double> iou_thresholds;  // default 0.50:0.05:0.95
  int recall_points = 101;
  int max_dets_per_image = 100;
  AreaRange small_range{0.0, 32.0 * 32.0};
  AreaRange medium_range{32.0 * 32.0, 96.0 * 96.0};
  AreaRange large_range{96.0 * 96.0, std::numeric_limits<double>::infinity()};

  EvalConfig();
};

struct ClassMetrics {
  std::optional<double> ap;    // mean over the IoU sweep
  std::optional<double> ap50;  // at IoU 0.50
  std::optional<double> ap75;  // at IoU 0.75
};

/// Aggregates are arithmetic means over the per-class values of the classes
/// that have ground truth; a mean over no classes is absent rather than 0.
struct MetricsReport {
  std::optional<double> ap, ap50, ap75;
  std::optional<double> bap, bap50, bap75;
  std::optional<double> nap, nap50, nap75;
  std::optional<double> ap_small, ap_medium, ap_large;
  std::optional<double> ap_rare, ap_common, ap_frequent;
  std::map<int, ClassMetrics> per_class;

  /// Named metrics in report order: AP, AP50, AP75, bAP, ..., APf.
  std::vector<std::pair<std::string, std::optional<double>>> named() const;
};

/// Jaccard overlap of two boxes; 0 when disjoint.
double iou(const BBox& a, const BBox& b);

/// Greedy matching for one image and one category: detections in descending
/// score order (ties by ascending input index) claim the unmatched ground
/// truth with the highest IoU, provided IoU >= iou_thresh (inclusive).
/// Returns a TP flag per detection, in input order.
std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Annotation>& gts, double iou_thresh);

/// 101-point interpolated AP over the pooled, score-sorted flags: precision
/// envelope sampled at evenly spaced recall points. Absent when n_gt == 0.
/// Each entry is (score, tie_break_index, is_tp).
struct ScoredFlag {
  double score = 0.0;
  std::size_t index = 0;  // pooled input order, breaks score ties
  bool tp = false;
};
std::optional<double> average_precision(std::vector<ScoredFlag> flags, int n_gt,
                                        int recall_points);

/// Full COCO-style report: per-class AP over the IoU sweep (after a
/// per-image top-max_dets cut), AP50/AP75, base/novel splits, size buckets
/// restricted by ground-truth area, and rare/common/frequent buckets.
MetricsReport evaluate(const DetectionSet& dets, const Dataset& d, const EvalConfig& cfg);

MetricsReport load_metrics(const std::filesystem::path& path);
void save_metrics(const MetricsReport& m, const std::filesystem::path& path);

}  // namespace fewdet
