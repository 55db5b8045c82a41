#pragma once

#include <cstdint>
#include <vector>

#include "dedetr/geometry.hpp"
#include "dedetr/tensor.hpp"

namespace dedetr {

// One feature level. `values` is [height, width, channels] row-major, and
// `stride` ties cell (i, j) to the image patch of size stride x stride whose
// top-left pixel is (j*stride, i*stride).
struct FeatureMap {
  int64_t height = 0;
  int64_t width = 0;
  int64_t channels = 0;
  int stride = 1;
  Tensor values;
};

// Levels ordered fine -> coarse (ascending stride). `encoded_top`, when set,
// holds the coarsest level after the encoder, flattened to [H*W, D]; sampling
// reads the coarsest level from it instead of levels.back().values.
struct FeaturePyramid {
  std::vector<FeatureMap> levels;
  Tensor encoded_top;
  Tensor pos_top;  // [H*W, D] positional embedding for the coarsest level
};

// Per-query keys/values for sparse cross-attention: both [N, S, D] where
// S = levels * resolution^2.
struct SparseKV {
  Tensor keys_values;
  Tensor pos;
};

// Sine/cosine embedding of 2D points. Column layout: the first dim/2 channels
// encode x, the rest encode y; within each half, channel pairs (sin, cos) use
// frequencies temperature^(-2k / (dim/2)) applied to coord * 2*pi.
// dim must be divisible by 4. Output [points, dim], no gradient.
Tensor sine_pos_embed(const std::vector<double>& xs, const std::vector<double>& ys,
                      int64_t dim, double temperature = 1e4);

// Bilinear read of one point in cell coordinates (half-pixel convention:
// cell (i, j) has center (j + 0.5, i + 0.5)). Out-of-bounds neighbors
// contribute zero. Plain values, no tape.
std::vector<double> bilinear_sample(const FeatureMap& map, double x, double y);

// Cell-coordinate sample points roi_align uses for `box` (normalized cxcywh)
// on a grid_h x grid_w map: resolution^2 bin centers, row-major over bins.
void roi_sample_points(const Box& box, int64_t grid_h, int64_t grid_w, int resolution,
                       std::vector<double>& xs, std::vector<double>& ys);

// RoIAlign with one sample per bin center. Boxes are normalized cxcywh; the
// box is mapped onto the cell grid, split into resolution^2 bins, and each bin
// center is read bilinearly. Returns [boxes, resolution^2, channels],
// differentiable with respect to map.values.
Tensor roi_align(const FeatureMap& map, const BoxSet& boxes, int resolution);

// Flatten [H, W, C] -> [H*W, C] and apply a linear embedding to width(w) = D.
Tensor flatten_embed(const FeatureMap& map, Tensor w, Tensor b);

// Assemble sparse cross-attention keys/values for every query box: RoIAlign on
// each requested level (already D-channel; the coarsest level is read from
// encoded_top), concatenated level by level in the order given, plus sine
// embeddings of the absolute normalized sample positions.
SparseKV build_multiscale_kv(const FeaturePyramid& pyramid, const BoxSet& boxes,
                             int resolution, const std::vector<int>& levels_used);

}  // namespace dedetr
