#include "dedetr/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dedetr/rng.hpp"

namespace dedetr {

BoxSet LayerOutput::box_set() const {
  const Shape& d = boxes.dims();
  if (d.size() != 2 || d[1] != 4) throw ShapeError("layer boxes must be [N, 4]");
  BoxSet out;
  out.reserve(d[0]);
  const double* p = boxes.data();
  for (int64_t i = 0; i < d[0]; ++i)
    out.push_back(Box::cxcywh(p[4 * i], p[4 * i + 1], p[4 * i + 2], p[4 * i + 3]));
  return out;
}

std::vector<double> match_cost_matrix(const std::vector<AugmentedEntry>& entries,
                                      const LayerOutput& preds, const MatchWeights& weights) {
  const Shape& pd = preds.class_probs.dims();
  const Shape& bd = preds.boxes.dims();
  if (pd.size() != 2 || bd.size() != 2 || bd[1] != 4 || pd[0] != bd[0])
    throw ShapeError("predictions must be probs [N, C+1] and boxes [N, 4]");
  const int64_t n = pd[0];
  const int64_t num_fg = pd[1] - 1;
  const double* probs = preds.class_probs.data();
  const double* boxes = preds.boxes.data();
  std::vector<double> cost(entries.size() * n);
  for (size_t e = 0; e < entries.size(); ++e) {
    const AugmentedEntry& ent = entries[e];
    if (ent.class_id < 0 || ent.class_id >= num_fg)
      throw ContractError("label class id outside foreground range");
    for (int64_t q = 0; q < n; ++q) {
      const Box pb = Box::cxcywh(boxes[4 * q], boxes[4 * q + 1], boxes[4 * q + 2],
                                 boxes[4 * q + 3]);
      const double c = weights.cls * (-probs[q * pd[1] + ent.class_id]) +
                       weights.l1 * l1_distance(pb, ent.box) +
                       weights.giou * (1.0 - giou(pb, ent.box));
      cost[e * n + q] = c;
    }
  }
  return cost;
}

Assignment hungarian(const std::vector<double>& cost, int64_t entries, int64_t queries) {
  if (entries < 0 || queries < 0 || cost.size() != static_cast<size_t>(entries * queries))
    throw ShapeError("cost matrix size disagrees with entries x queries");
  if (entries > queries) throw ContractError("hungarian: more rows than columns");
  for (double c : cost)
    if (!std::isfinite(c)) throw NumericError("hungarian: non-finite cost");
  Assignment out;
  out.entry_to_query.assign(entries, -1);
  if (entries == 0) return out;

  const double inf = std::numeric_limits<double>::infinity();
  const int64_t n = entries, m = queries;
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<int64_t> p(m + 1, 0), way(m + 1, 0);
  for (int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int64_t i0 = p[j0];
      int64_t j1 = -1;
      double delta = inf;
      for (int64_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int64_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int64_t j = 1; j <= m; ++j)
    if (p[j] != 0) out.entry_to_query[p[j] - 1] = j - 1;
  for (int64_t i = 0; i < n; ++i) {
    if (out.entry_to_query[i] < 0) throw ContractError("hungarian left a row unassigned");
    out.total_cost += cost[i * m + out.entry_to_query[i]];
  }
  return out;
}

namespace {

AugmentedLabelSet from_counts(const LabelSet& labels, const std::vector<int64_t>& counts) {
  AugmentedLabelSet out;
  out.pad_to = labels.pad_to;
  for (size_t i = 0; i < labels.foreground.size(); ++i)
    for (int64_t r = 0; r < counts[i]; ++r)
      out.entries.push_back(AugmentedEntry{static_cast<int64_t>(i),
                                           labels.foreground[i].class_id,
                                           labels.foreground[i].box});
  if (out.pad_to < static_cast<int64_t>(out.entries.size()))
    throw AugmentationError("augmented label count " + std::to_string(out.entries.size()) +
                            " exceeds query count " + std::to_string(out.pad_to));
  return out;
}

}  // namespace

AugmentedLabelSet augment_fixed_repeat(const LabelSet& labels, int repeat) {
  if (repeat < 1) throw ConfigError("repeat factor must be >= 1");
  std::vector<int64_t> counts(labels.foreground.size(), repeat);
  AugmentedLabelSet out = from_counts(labels, counts);
  out.strategy = AugmentConfig::Mode::FixedRepeat;
  out.param = repeat;
  return out;
}

AugmentedLabelSet augment_fixed_ratio(const LabelSet& labels, double ratio, uint64_t seed) {
  if (!(ratio > 0.0) || !(ratio <= 1.0)) throw ConfigError("ratio must lie in (0, 1]");
  const int64_t m = static_cast<int64_t>(labels.foreground.size());
  std::vector<int64_t> counts(m, 0);
  if (m > 0) {
    const int64_t budget = static_cast<int64_t>(std::floor(labels.pad_to * ratio));
    const int64_t target = std::max(budget, m);
    const int64_t base = target / m;
    int64_t rem = target % m;
    std::fill(counts.begin(), counts.end(), base);
    // rem distinct labels get one extra copy, chosen without replacement
    std::vector<int64_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (int64_t i = 0; i < rem; ++i) {
      const int64_t j = i + static_cast<int64_t>(rng.uniform_index(m - i));
      std::swap(order[i], order[j]);
      counts[order[i]] += 1;
    }
  }
  AugmentedLabelSet out = from_counts(labels, counts);
  out.strategy = AugmentConfig::Mode::FixedRatio;
  out.param = ratio;
  return out;
}

AugmentedLabelSet augment_none(const LabelSet& labels) {
  std::vector<int64_t> counts(labels.foreground.size(), 1);
  return from_counts(labels, counts);
}

AugmentedLabelSet apply_augment(const LabelSet& labels, const AugmentConfig& cfg, uint64_t seed) {
  switch (cfg.mode) {
    case AugmentConfig::Mode::None:
      return augment_none(labels);
    case AugmentConfig::Mode::FixedRepeat:
      return augment_fixed_repeat(labels, cfg.repeat);
    case AugmentConfig::Mode::FixedRatio:
      return augment_fixed_ratio(labels, cfg.ratio, seed);
  }
  throw ConfigError("unknown augmentation mode");
}

Assignment assign_labels(const AugmentedLabelSet& labels, const LayerOutput& preds,
                         const MatchWeights& weights) {
  const int64_t n = preds.class_probs.dims()[0];
  if (labels.pad_to != n)
    throw ShapeError("label pad_to " + std::to_string(labels.pad_to) +
                     " disagrees with query count " + std::to_string(n));
  if (static_cast<int64_t>(labels.entries.size()) > n)
    throw AugmentationError("more augmented labels than queries");
  const std::vector<double> cost = match_cost_matrix(labels.entries, preds, weights);
  return hungarian(cost, static_cast<int64_t>(labels.entries.size()), n);
}

namespace {

Tensor column(const Tensor& m, int64_t i) { return slice(m, 1, i, 1); }

// 1 - giou between matched predictions g [M,4] and constant label boxes,
// averaged over M. Built from elementwise ops so it stays differentiable.
Tensor giou_loss_term(const Tensor& g, const std::vector<AugmentedEntry>& entries) {
  const int64_t m = g.dims()[0];
  std::vector<double> x1(m), y1(m), x2(m), y2(m), area(m);
  for (int64_t i = 0; i < m; ++i) {
    const Box& b = entries[i].box;
    x1[i] = b.v[0] - b.v[2] * 0.5;
    y1[i] = b.v[1] - b.v[3] * 0.5;
    x2[i] = b.v[0] + b.v[2] * 0.5;
    y2[i] = b.v[1] + b.v[3] * 0.5;
    area[i] = b.v[2] * b.v[3];
  }
  const Shape col{m, 1};
  Tensor lx1 = Tensor::from_data(col, x1), ly1 = Tensor::from_data(col, y1);
  Tensor lx2 = Tensor::from_data(col, x2), ly2 = Tensor::from_data(col, y2);
  Tensor larea = Tensor::from_data(col, area);

  Tensor gw = column(g, 2), gh = column(g, 3);
  Tensor gx1 = sub(column(g, 0), scale(gw, 0.5));
  Tensor gx2 = add(column(g, 0), scale(gw, 0.5));
  Tensor gy1 = sub(column(g, 1), scale(gh, 0.5));
  Tensor gy2 = add(column(g, 1), scale(gh, 0.5));

  Tensor iw = relu(sub(emin(gx2, lx2), emax(gx1, lx1)));
  Tensor ih = relu(sub(emin(gy2, ly2), emax(gy1, ly1)));
  Tensor inter = mul(iw, ih);
  Tensor uni = sub(add(mul(gw, gh), larea), inter);
  Tensor hull = mul(sub(emax(gx2, lx2), emin(gx1, lx1)),
                    sub(emax(gy2, ly2), emin(gy1, ly1)));
  Tensor g_iou = sub(div(inter, uni), div(sub(hull, uni), hull));
  Tensor ones = Tensor::constant(col, 1.0);
  return scale(sum_all(sub(ones, g_iou)), 1.0 / static_cast<double>(m));
}

}  // namespace

Tensor set_loss(const std::vector<LayerOutput>& outputs, const AugmentedLabelSet& labels,
                const MatchWeights& weights, double eos_coef, LossBreakdown* breakdown) {
  if (outputs.empty()) throw ContractError("set_loss: no decoder outputs");
  const Shape& ld = outputs.front().class_logits.dims();
  if (ld.size() != 2 || ld[1] < 2) throw ShapeError("class logits must be [N, C+1]");
  const int64_t n = ld[0];
  const int64_t width = ld[1];
  const int64_t no_object = width - 1;
  const int64_t m = static_cast<int64_t>(labels.entries.size());

  LossBreakdown acc;
  Tensor total;
  for (const LayerOutput& layer : outputs) {
    if (layer.class_logits.dims() != ld || layer.boxes.dims() != Shape{n, 4})
      throw ShapeError("decoder layers disagree on output shapes");
    const Assignment asg = assign_labels(labels, layer, weights);

    // Classification: weighted CE against matched classes, "no object" elsewhere.
    std::vector<double> mask(n * width, 0.0);
    std::vector<int64_t> matched_query(m);
    std::vector<char> is_matched(n, 0);
    for (int64_t e = 0; e < m; ++e) {
      const int64_t q = asg.entry_to_query[e];
      matched_query[e] = q;
      is_matched[q] = 1;
      mask[q * width + labels.entries[e].class_id] = 1.0;
    }
    double weight_sum = 0.0;
    for (int64_t q = 0; q < n; ++q) {
      if (!is_matched[q]) mask[q * width + no_object] = eos_coef;
      weight_sum += is_matched[q] ? 1.0 : eos_coef;
    }
    Tensor logp = log_softmax(layer.class_logits);
    Tensor ce = scale(sum_all(mul(logp, Tensor::from_data({n, width}, mask))),
                      -1.0 / weight_sum);
    Tensor layer_loss = scale(ce, weights.cls);
    acc.cls += layer_loss.scalar();

    if (m > 0) {
      Tensor g = gather_rows(layer.boxes, matched_query);
      std::vector<double> gtv(m * 4);
      for (int64_t e = 0; e < m; ++e)
        for (int k = 0; k < 4; ++k) gtv[e * 4 + k] = labels.entries[e].box.v[k];
      Tensor l1 = scale(sum_all(abs(sub(g, Tensor::from_data({m, 4}, gtv)))),
                        weights.l1 / static_cast<double>(m));
      Tensor gi = scale(giou_loss_term(g, labels.entries), weights.giou);
      acc.l1 += l1.scalar();
      acc.giou += gi.scalar();
      layer_loss = add(add(layer_loss, l1), gi);
    }
    total = total.defined() ? add(total, layer_loss) : layer_loss;
  }
  acc.total = acc.cls + acc.l1 + acc.giou;
  if (breakdown) *breakdown = acc;
  return total;
}

}  // namespace dedetr
