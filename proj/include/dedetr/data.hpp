#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dedetr/sampling.hpp"
#include "dedetr/supervision.hpp"

namespace dedetr {

struct SceneSpec {
  int image_size = 256;
  std::vector<int> strides = {8, 16, 32};
  int64_t channels = 16;
  int64_t num_classes = 6;
  int max_objects = 8;
  double scale_min = 0.04;   // object side, fraction of the image
  double scale_max = 0.4;
  double noise_std = 0.05;
  uint64_t seed = 7;

  void validate() const;  // throws ConfigError
};

// One synthetic scene: raw feature pyramid plus its ground truth. Features
// are synthesized directly (no renderer): each object paints its class
// signature over the cells its box covers on one pyramid level, weighted by
// the covered area fraction so box edges stay localizable below the stride,
// then i.i.d. Gaussian noise is added everywhere.
struct Scene {
  FeaturePyramid pyramid;
  LabelSet labels;
};

// Unit-norm signature for class c; fixed (independent of the scene seed), and
// orthonormal across classes when num_classes <= channels.
std::vector<double> class_signature(int64_t class_id, int64_t channels, int64_t num_classes);

// Level whose stride is log-nearest to sqrt(w*h)*image_size / 2, ties to the
// finer level, so an object covers roughly two cells per side on its level.
// Small objects land on the finest stride only.
int level_for_box(const Box& box, const SceneSpec& spec);

// Deterministic in (spec.seed, index).
Scene gen_scene(const SceneSpec& spec, int64_t index);

std::vector<Scene> gen_dataset(const SceneSpec& spec, int64_t count);

// Uniform sample without replacement of ceil(count*ratio) scenes, kept in
// their original order.
std::vector<Scene> subsample(const std::vector<Scene>& scenes, double ratio, uint64_t seed);

// Scenes round-trip through a JSON manifest plus one binary blob of f32
// tensors (same record layout checkpoints use).
void save_scenes(const std::string& dir, const std::vector<Scene>& scenes);
std::vector<Scene> load_scenes(const std::string& dir);

}  // namespace dedetr
