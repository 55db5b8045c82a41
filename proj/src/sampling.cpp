#include "dedetr/sampling.hpp"

#include <utility>

#include "dedetr/kernels.hpp"

namespace dedetr {

namespace {

void check_map(const FeatureMap& map) {
  if (!map.values.defined()) throw ContractError("feature map has no values");
  const Shape& d = map.values.dims();
  if (d.size() != 3 || d[0] != map.height || d[1] != map.width || d[2] != map.channels)
    throw ShapeError("feature map values " + shape_str(d) + " disagree with declared " +
                     shape_str({map.height, map.width, map.channels}));
}

}  // namespace

Tensor sine_pos_embed(const std::vector<double>& xs, const std::vector<double>& ys,
                      int64_t dim, double temperature) {
  if (xs.size() != ys.size()) throw ContractError("sine_pos_embed: xs/ys length mismatch");
  if (dim <= 0 || dim % 4 != 0) throw ConfigError("sine_pos_embed dim must be divisible by 4");
  const int64_t p = static_cast<int64_t>(xs.size());
  std::vector<double> coords(2 * p);
  for (int64_t i = 0; i < p; ++i) {
    coords[2 * i] = xs[i];
    coords[2 * i + 1] = ys[i];
  }
  Tensor out = make_tensor({p, dim}, false);
  kernels::sine_pos_embed_rows(coords.data(), p, dim, temperature, out.data());
  return out;
}

std::vector<double> bilinear_sample(const FeatureMap& map, double x, double y) {
  check_map(map);
  std::vector<double> out(map.channels);
  const double xy[2] = {x, y};
  kernels::ref::bilinear_gather(map.values.data(), map.height, map.width, map.channels, xy, 1,
                                out.data());
  return out;
}

void roi_sample_points(const Box& box, int64_t grid_h, int64_t grid_w, int resolution,
                       std::vector<double>& xs, std::vector<double>& ys) {
  if (box.format != BoxFormat::CxCyWhNorm)
    throw GeometryError("roi sampling expects normalized cxcywh boxes");
  if (!(box.v[2] > 0.0) || !(box.v[3] > 0.0)) throw GeometryError("degenerate roi box");
  const double x1 = (box.v[0] - box.v[2] * 0.5) * static_cast<double>(grid_w);
  const double y1 = (box.v[1] - box.v[3] * 0.5) * static_cast<double>(grid_h);
  const double bw = box.v[2] * static_cast<double>(grid_w) / resolution;
  const double bh = box.v[3] * static_cast<double>(grid_h) / resolution;
  for (int bi = 0; bi < resolution; ++bi)
    for (int bj = 0; bj < resolution; ++bj) {
      xs.push_back(x1 + (bj + 0.5) * bw);
      ys.push_back(y1 + (bi + 0.5) * bh);
    }
}

Tensor roi_align(const FeatureMap& map, const BoxSet& boxes, int resolution) {
  check_map(map);
  if (resolution < 1) throw ConfigError("roi resolution must be >= 1");
  if (boxes.empty()) throw ContractError("roi_align: empty box set");
  const int64_t n = static_cast<int64_t>(boxes.size());
  const int64_t bins = static_cast<int64_t>(resolution) * resolution;
  std::vector<double> xy;
  xy.reserve(2 * n * bins);
  {
    std::vector<double> xs, ys;
    for (const Box& b : boxes) {
      xs.clear();
      ys.clear();
      roi_sample_points(b, map.height, map.width, resolution, xs, ys);
      for (int64_t i = 0; i < bins; ++i) {
        xy.push_back(xs[i]);
        xy.push_back(ys[i]);
      }
    }
  }
  const int64_t p = n * bins;
  Tensor out = make_tensor({n, bins, map.channels}, map.values.requires_grad());
  kernels::bilinear_gather(map.values.data(), map.height, map.width, map.channels, xy.data(), p,
                           out.data());
  if (out.requires_grad()) {
    auto src = map.values.node();
    auto on = out.node();
    const int64_t h = map.height, w = map.width, c = map.channels;
    record_op([src, on, xy = std::move(xy), h, w, c, p]() {
      src->ensure_grad();
      on->ensure_grad();
      kernels::bilinear_scatter(src->grad.data(), h, w, c, xy.data(), p, on->grad.data());
    });
  }
  return out;
}

Tensor flatten_embed(const FeatureMap& map, Tensor w, Tensor b) {
  check_map(map);
  Tensor flat = reshape(map.values, {map.height * map.width, map.channels});
  return linear(flat, w, b);
}

SparseKV build_multiscale_kv(const FeaturePyramid& pyramid, const BoxSet& boxes,
                             int resolution, const std::vector<int>& levels_used) {
  if (levels_used.empty()) throw ConfigError("build_multiscale_kv: no levels requested");
  const int num_levels = static_cast<int>(pyramid.levels.size());
  for (size_t i = 0; i < levels_used.size(); ++i) {
    if (levels_used[i] < 0 || levels_used[i] >= num_levels)
      throw ConfigError("build_multiscale_kv: level index out of range");
    if (i > 0 && levels_used[i] <= levels_used[i - 1])
      throw ConfigError("build_multiscale_kv: levels must be strictly ascending (fine to coarse)");
  }
  const int64_t n = static_cast<int64_t>(boxes.size());
  const int64_t bins = static_cast<int64_t>(resolution) * resolution;

  std::vector<Tensor> parts;
  int64_t dim = -1;
  for (int l : levels_used) {
    const FeatureMap& lv = pyramid.levels[l];
    FeatureMap src = lv;
    if (l == num_levels - 1 && pyramid.encoded_top.defined()) {
      const Shape& ed = pyramid.encoded_top.dims();
      if (ed.size() != 2 || ed[0] != lv.height * lv.width)
        throw ShapeError("encoded_top " + shape_str(ed) + " does not cover the coarsest level");
      src.channels = ed[1];
      src.values = reshape(pyramid.encoded_top, {lv.height, lv.width, ed[1]});
    }
    if (dim < 0) dim = src.channels;
    if (src.channels != dim)
      throw ShapeError("build_multiscale_kv: level channel widths differ");
    parts.push_back(roi_align(src, boxes, resolution));
  }
  Tensor kv = parts.size() == 1 ? parts[0] : concat(parts, 1);

  // Sample positions normalized to the image; identical on every level, so a
  // unit grid gives them directly.
  std::vector<double> xs, ys;
  xs.reserve(n * bins);
  ys.reserve(n * bins);
  for (const Box& b : boxes) roi_sample_points(b, 1, 1, resolution, xs, ys);
  Tensor pos_block = reshape(sine_pos_embed(xs, ys, dim), {n, bins, dim});
  Tensor pos = pos_block;
  if (levels_used.size() > 1) {
    std::vector<Tensor> copies(levels_used.size(), pos_block);
    pos = concat(copies, 1);
  }
  return SparseKV{kv, pos};
}

}  // namespace dedetr
