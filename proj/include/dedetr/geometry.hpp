#pragma once

#include <cstdint>
#include <vector>

#include "dedetr/error.hpp"

namespace dedetr {

enum class BoxFormat { CxCyWhNorm, XyxyAbs };

// Four box coordinates plus a representation tag. CxCyWhNorm stores
// (cx, cy, w, h) normalized to [0, 1]; XyxyAbs stores (x1, y1, x2, y2).
struct Box {
  BoxFormat format = BoxFormat::CxCyWhNorm;
  double v[4] = {0, 0, 0, 0};

  static Box cxcywh(double cx, double cy, double w, double h) {
    return Box{BoxFormat::CxCyWhNorm, {cx, cy, w, h}};
  }
  static Box xyxy(double x1, double y1, double x2, double y2) {
    return Box{BoxFormat::XyxyAbs, {x1, y1, x2, y2}};
  }
};

using BoxSet = std::vector<Box>;

struct Detection {
  Box box;
  int64_t class_id = 0;
  double score = 0.0;
};

Box convert(const Box& box, BoxFormat target, double image_w, double image_h);

// Intersection over union; both boxes must share a representation.
double iou(const Box& a, const Box& b);

// Generalized IoU in (-1, 1]: iou minus the hull area not covered by the union,
// normalized by the hull area.
double giou(const Box& a, const Box& b);

// sigmoid(inverse_sigmoid(reference) + delta), componentwise, with the same
// 1e-6 clamp the tensor op uses.
Box refine_box(const Box& reference, const double delta[4]);

// Greedy class-wise NMS. Candidates are visited in score-descending order
// (ties keep the lower input index first); a candidate survives iff its IoU
// with every kept same-class box is <= threshold. Output order is keep order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

double l1_distance(const Box& a, const Box& b);  // componentwise, same representation

}  // namespace dedetr
