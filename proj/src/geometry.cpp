#include "dedetr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dedetr {

namespace {

constexpr double kLogitEps = 1e-6;

void check_valid(const Box& b) {
  if (b.format == BoxFormat::CxCyWhNorm) {
    const double w = b.v[2], h = b.v[3];
    if (!(w > 0.0) || !(h > 0.0)) throw GeometryError("degenerate box: w or h <= 0");
  } else {
    if (!(b.v[2] > b.v[0]) || !(b.v[3] > b.v[1]))
      throw GeometryError("degenerate box: x2 <= x1 or y2 <= y1");
  }
}

// Corners in the box's own scale (normalized for CxCyWhNorm, absolute otherwise).
void corners(const Box& b, double out[4]) {
  if (b.format == BoxFormat::XyxyAbs) {
    out[0] = b.v[0];
    out[1] = b.v[1];
    out[2] = b.v[2];
    out[3] = b.v[3];
  } else {
    out[0] = b.v[0] - b.v[2] * 0.5;
    out[1] = b.v[1] - b.v[3] * 0.5;
    out[2] = b.v[0] + b.v[2] * 0.5;
    out[3] = b.v[1] + b.v[3] * 0.5;
  }
}

}  // namespace

Box convert(const Box& box, BoxFormat target, double image_w, double image_h) {
  check_valid(box);
  if (box.format == target) return box;
  if (!(image_w > 0.0) || !(image_h > 0.0)) throw GeometryError("non-positive image size");
  if (target == BoxFormat::XyxyAbs) {
    const double cx = box.v[0], cy = box.v[1], w = box.v[2], h = box.v[3];
    return Box::xyxy((cx - w * 0.5) * image_w, (cy - h * 0.5) * image_h,
                     (cx + w * 0.5) * image_w, (cy + h * 0.5) * image_h);
  }
  const double x1 = box.v[0] / image_w, y1 = box.v[1] / image_h;
  const double x2 = box.v[2] / image_w, y2 = box.v[3] / image_h;
  return Box::cxcywh((x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1);
}

double iou(const Box& a, const Box& b) {
  check_valid(a);
  check_valid(b);
  if (a.format != b.format) throw GeometryError("iou: mixed box representations");
  double ca[4], cb[4];
  corners(a, ca);
  corners(b, cb);
  const double iw = std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]);
  const double ih = std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double area_a = (ca[2] - ca[0]) * (ca[3] - ca[1]);
  const double area_b = (cb[2] - cb[0]) * (cb[3] - cb[1]);
  return inter / (area_a + area_b - inter);
}

double giou(const Box& a, const Box& b) {
  check_valid(a);
  check_valid(b);
  if (a.format != b.format) throw GeometryError("giou: mixed box representations");
  double ca[4], cb[4];
  corners(a, ca);
  corners(b, cb);
  const double iw = std::max(0.0, std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]));
  const double ih = std::max(0.0, std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]));
  const double inter = iw * ih;
  const double area_a = (ca[2] - ca[0]) * (ca[3] - ca[1]);
  const double area_b = (cb[2] - cb[0]) * (cb[3] - cb[1]);
  const double uni = area_a + area_b - inter;
  const double hull = (std::max(ca[2], cb[2]) - std::min(ca[0], cb[0])) *
                      (std::max(ca[3], cb[3]) - std::min(ca[1], cb[1]));
  return inter / uni - (hull - uni) / hull;
}

Box refine_box(const Box& reference, const double delta[4]) {
  if (reference.format != BoxFormat::CxCyWhNorm)
    throw GeometryError("refine_box expects a normalized cxcywh reference");
  check_valid(reference);
  Box out;
  out.format = BoxFormat::CxCyWhNorm;
  for (int i = 0; i < 4; ++i) {
    const double p = std::clamp(reference.v[i], kLogitEps, 1.0 - kLogitEps);
    const double logit = std::log(p / (1.0 - p));
    out.v[i] = 1.0 / (1.0 + std::exp(-(logit + delta[i])));
  }
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  if (!(iou_threshold > 0.0) || !(iou_threshold <= 1.0))
    throw GeometryError("nms threshold must lie in (0, 1]");
  std::vector<int64_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t i, int64_t j) {
    return dets[i].score > dets[j].score;  // stable: equal scores keep input order
  });
  std::vector<Detection> kept;
  for (int64_t idx : order) {
    const Detection& cand = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id != cand.class_id) continue;
      if (iou(k.box, cand.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

double l1_distance(const Box& a, const Box& b) {
  if (a.format != b.format) throw GeometryError("l1_distance: mixed box representations");
  double s = 0.0;
  for (int i = 0; i < 4; ++i) s += std::abs(a.v[i] - b.v[i]);
  return s;
}

}  // namespace dedetr
