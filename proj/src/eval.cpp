#include "dedetr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace dedetr {

std::vector<PRPoint> compute_pr(const std::vector<std::vector<Detection>>& dets,
                                const std::vector<LabelSet>& labels, double iou_threshold,
                                int64_t class_id) {
  if (dets.size() != labels.size())
    throw ContractError("compute_pr: detection/label scene counts differ");
  if (!(iou_threshold > 0.0) || !(iou_threshold <= 1.0))
    throw ContractError("compute_pr: threshold outside (0, 1]");

  struct Cand {
    size_t scene;
    size_t index;  // position within the scene's detection list
    double score;
  };
  std::vector<Cand> cands;
  int64_t npos = 0;
  std::vector<std::vector<const Box*>> gt(labels.size());
  for (size_t s = 0; s < labels.size(); ++s) {
    for (const LabelEntry& le : labels[s].foreground)
      if (le.class_id == class_id) {
        gt[s].push_back(&le.box);
        ++npos;
      }
    for (size_t i = 0; i < dets[s].size(); ++i)
      if (dets[s][i].class_id == class_id) cands.push_back(Cand{s, i, dets[s][i].score});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    return a.score > b.score;  // stable: ties keep scene order then input order
  });

  std::vector<PRPoint> out;
  if (npos == 0) return out;
  std::vector<std::vector<char>> taken(labels.size());
  for (size_t s = 0; s < labels.size(); ++s) taken[s].assign(gt[s].size(), 0);

  int64_t tp = 0, fp = 0;
  for (const Cand& c : cands) {
    const Box& db = dets[c.scene][c.index].box;
    int64_t best = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < gt[c.scene].size(); ++g) {
      if (taken[c.scene][g]) continue;
      const double v = iou(db, *gt[c.scene][g]);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = static_cast<int64_t>(g);
      }
    }
    if (best >= 0) {
      taken[c.scene][best] = 1;
      ++tp;
    } else {
      ++fp;
    }
    out.push_back(PRPoint{static_cast<double>(tp) / static_cast<double>(tp + fp),
                          static_cast<double>(tp) / static_cast<double>(npos)});
  }
  return out;
}

double compute_ap(const std::vector<PRPoint>& points) {
  double total = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double recall = static_cast<double>(r) / 100.0;
    double best = 0.0;
    for (const PRPoint& p : points)
      if (p.recall >= recall - 1e-12) best = std::max(best, p.precision);
    total += best;
  }
  return total / 101.0;
}

EvalResult evaluate(const std::vector<std::vector<Detection>>& dets,
                    const std::vector<LabelSet>& labels, int64_t num_classes) {
  if (dets.size() != labels.size())
    throw ContractError("evaluate: " + std::to_string(dets.size()) + " detection sets vs " +
                        std::to_string(labels.size()) + " labelled scenes");
  EvalResult res;
  res.num_images = static_cast<int64_t>(labels.size());
  for (const auto& l : labels) res.num_gt += static_cast<int64_t>(l.foreground.size());
  for (const auto& d : dets) res.num_dets += static_cast<int64_t>(d.size());
  res.per_class_ap.assign(num_classes, -1.0);

  std::vector<double> thresholds;
  for (int t = 0; t < 10; ++t) thresholds.push_back(0.5 + 0.05 * t);

  double ap_sum = 0.0, ap50_sum = 0.0, ap75_sum = 0.0;
  int64_t with_gt = 0;
  for (int64_t c = 0; c < num_classes; ++c) {
    bool any = false;
    for (const auto& l : labels)
      for (const LabelEntry& le : l.foreground)
        if (le.class_id == c) any = true;
    if (!any) continue;
    ++with_gt;
    double cls_sum = 0.0;
    for (double thr : thresholds) {
      const double ap = compute_ap(compute_pr(dets, labels, thr, c));
      cls_sum += ap;
      if (thr == 0.5) ap50_sum += ap;
      if (thr == 0.75) ap75_sum += ap;
    }
    res.per_class_ap[c] = cls_sum / static_cast<double>(thresholds.size());
    ap_sum += res.per_class_ap[c];
  }
  if (with_gt > 0) {
    res.ap = ap_sum / static_cast<double>(with_gt);
    res.ap50 = ap50_sum / static_cast<double>(with_gt);
    res.ap75 = ap75_sum / static_cast<double>(with_gt);
  }
  return res;
}

std::vector<AblationRow> ablation_report(
    const std::map<std::string, std::vector<EvalResult>>& results) {
  auto mean_std = [](const std::vector<double>& xs, double& mean, double& sd) {
    mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    sd = std::sqrt(var / static_cast<double>(xs.size()));  // population std
  };
  std::vector<AblationRow> rows;
  for (const auto& [id, runs] : results) {
    if (runs.empty()) continue;
    AblationRow row;
    row.config_id = id;
    row.runs = static_cast<int64_t>(runs.size());
    std::vector<double> ap, ap50, ap75;
    for (const EvalResult& r : runs) {
      ap.push_back(r.ap);
      ap50.push_back(r.ap50);
      ap75.push_back(r.ap75);
    }
    mean_std(ap, row.ap_mean, row.ap_std);
    mean_std(ap50, row.ap50_mean, row.ap50_std);
    mean_std(ap75, row.ap75_mean, row.ap75_std);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  size_t width = 9;
  for (const AblationRow& r : rows) width = std::max(width, r.config_id.size());
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "%-*s  runs  %-15s %-15s %-15s\n",
                static_cast<int>(width), "config_id", "ap", "ap50", "ap75");
  out += buf;
  for (const AblationRow& r : rows) {
    std::snprintf(buf, sizeof(buf),
                  "%-*s  %4lld  %.4f +- %.4f  %.4f +- %.4f  %.4f +- %.4f\n",
                  static_cast<int>(width), r.config_id.c_str(),
                  static_cast<long long>(r.runs), r.ap_mean, r.ap_std, r.ap50_mean, r.ap50_std,
                  r.ap75_mean, r.ap75_std);
    out += buf;
  }
  return out;
}

}  // namespace dedetr
