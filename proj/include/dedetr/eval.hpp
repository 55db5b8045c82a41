#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dedetr/geometry.hpp"
#include "dedetr/supervision.hpp"

namespace dedetr {

struct PRPoint {
  double precision = 0.0;
  double recall = 0.0;
};

struct EvalResult {
  double ap = 0.0;    // mean over classes and IoU thresholds 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::vector<double> per_class_ap;  // indexed by class; -1 when the class has no ground truth
  int64_t num_images = 0;
  int64_t num_gt = 0;
  int64_t num_dets = 0;
};

// Score-descending greedy matching of one class at one IoU threshold, one
// cumulative (precision, recall) point per detection. Detections tie-break by
// scene index then input order; a detection takes the highest-IoU unmatched
// ground truth (ties to the lower index).
std::vector<PRPoint> compute_pr(const std::vector<std::vector<Detection>>& dets,
                                const std::vector<LabelSet>& labels, double iou_threshold,
                                int64_t class_id);

// Area under the curve via 101-point interpolation (max precision at
// recall >= r for r in 0.00, 0.01, ..., 1.00).
double compute_ap(const std::vector<PRPoint>& points);

EvalResult evaluate(const std::vector<std::vector<Detection>>& dets,
                    const std::vector<LabelSet>& labels, int64_t num_classes);

struct AblationRow {
  std::string config_id;
  int64_t runs = 0;
  double ap_mean = 0.0, ap_std = 0.0;
  double ap50_mean = 0.0, ap50_std = 0.0;
  double ap75_mean = 0.0, ap75_std = 0.0;
};

// Mean and population standard deviation per config, rows ordered by config_id.
std::vector<AblationRow> ablation_report(const std::map<std::string, std::vector<EvalResult>>& results);

std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace dedetr
