#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dedetr/geometry.hpp"
#include "dedetr/tensor.hpp"

namespace dedetr {

struct LabelEntry {
  int64_t class_id = 0;
  Box box;  // normalized cxcywh
};

// Ground truth for one scene: M foreground objects, padded with "no object"
// up to pad_to (the query count) at supervision time.
struct LabelSet {
  std::vector<LabelEntry> foreground;
  int64_t pad_to = 0;
};

struct AugmentedEntry {
  int64_t source_index = 0;  // original label this copy came from
  int64_t class_id = 0;
  Box box;
};

struct AugmentConfig {
  enum class Mode { None, FixedRepeat, FixedRatio };
  Mode mode = Mode::FixedRepeat;
  int repeat = 2;
  double ratio = 0.5;
};

struct AugmentedLabelSet {
  std::vector<AugmentedEntry> entries;  // grouped by source, sources ascending
  int64_t pad_to = 0;
  AugmentConfig::Mode strategy = AugmentConfig::Mode::None;
  double param = 0.0;  // R for fixed repeat, r for fixed ratio
};

// Per-layer decoder outputs as tensors on the tape.
struct LayerOutput {
  Tensor class_logits;  // [N, C+1]; index C is "no object"
  Tensor class_probs;   // [N, C+1]
  Tensor boxes;         // [N, 4] normalized cxcywh

  BoxSet box_set() const;  // plain-value copy of boxes
};

struct MatchWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
};

// One-to-one assignment of augmented entries to predictions: pairs[i] maps
// entry i to a query index. total_cost is under the matching cost.
struct Assignment {
  std::vector<int64_t> entry_to_query;
  double total_cost = 0.0;
};

// Row-major [entries x queries] cost:
//   cls * (-prob[class]) + l1 * |b - b_gt|_1 + giou * (1 - giou(b, b_gt))
// built from plain values (never on the tape).
std::vector<double> match_cost_matrix(const std::vector<AugmentedEntry>& entries,
                                      const LayerOutput& preds, const MatchWeights& weights);

// Exact min-cost assignment of rows (entries) to distinct columns (queries),
// rows <= cols. Among equally cheap optima the column scan order (ascending)
// decides, so the result is deterministic.
Assignment hungarian(const std::vector<double>& cost, int64_t entries, int64_t queries);

// Every label repeated `repeat` times; total repeat*M must fit in pad_to.
AugmentedLabelSet augment_fixed_repeat(const LabelSet& labels, int repeat);

// Grow the label set to max(floor(pad_to * ratio), M) entries: each label
// floor(F/M) times, remainder spread over F mod M distinct labels drawn
// without replacement from `seed`.
AugmentedLabelSet augment_fixed_ratio(const LabelSet& labels, double ratio, uint64_t seed);

AugmentedLabelSet augment_none(const LabelSet& labels);

Assignment assign_labels(const AugmentedLabelSet& labels, const LayerOutput& preds,
                         const MatchWeights& weights);

AugmentedLabelSet apply_augment(const LabelSet& labels, const AugmentConfig& cfg, uint64_t seed);

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
};

// Matching-based loss summed over decoder layers. Each layer is matched
// independently against the same augmented label set; unmatched queries train
// toward "no object" with weight eos_coef. Box terms are averaged over the
// augmented foreground count.
Tensor set_loss(const std::vector<LayerOutput>& outputs, const AugmentedLabelSet& labels,
                const MatchWeights& weights, double eos_coef, LossBreakdown* breakdown);

}  // namespace dedetr
