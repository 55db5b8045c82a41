#include <cmath>
#include <cstring>
#include <filesystem>
#include <vector>

#include "doctest.h"

#include "dedetr/data.hpp"
#include "dedetr/error.hpp"

using namespace dedetr;

namespace {
SceneSpec small_spec() {
  SceneSpec spec;
  spec.image_size = 64;
  spec.strides = {16, 32};
  spec.channels = 8;
  spec.num_classes = 3;
  spec.max_objects = 3;
  spec.scale_min = 0.3;
  spec.scale_max = 0.7;
  spec.noise_std = 0.05;
  spec.seed = 11;
  return spec;
}
}  // namespace

TEST_CASE("scene generation is deterministic in (seed, index)") {
  const SceneSpec spec = small_spec();
  const Scene a = gen_scene(spec, 4);
  const Scene b = gen_scene(spec, 4);
  const Scene c = gen_scene(spec, 5);
  REQUIRE(a.labels.foreground.size() == b.labels.foreground.size());
  for (size_t i = 0; i < a.labels.foreground.size(); ++i) {
    CHECK(a.labels.foreground[i].class_id == b.labels.foreground[i].class_id);
    for (int k = 0; k < 4; ++k)
      CHECK(a.labels.foreground[i].box.v[k] == b.labels.foreground[i].box.v[k]);
  }
  for (size_t l = 0; l < a.pyramid.levels.size(); ++l)
    CHECK(std::memcmp(a.pyramid.levels[l].values.data(), b.pyramid.levels[l].values.data(),
                      sizeof(double) * a.pyramid.levels[l].values.numel()) == 0);
  bool differs = false;
  for (int64_t i = 0; i < a.pyramid.levels[0].values.numel(); ++i)
    differs = differs ||
              a.pyramid.levels[0].values.data()[i] != c.pyramid.levels[0].values.data()[i];
  CHECK(differs);
}

TEST_CASE("scenes respect the configured bounds") {
  const SceneSpec spec = small_spec();
  for (int64_t idx = 0; idx < 10; ++idx) {
    const Scene s = gen_scene(spec, idx);
    REQUIRE(s.pyramid.levels.size() == 2);
    CHECK(s.pyramid.levels[0].height == 4);  // 64 / 16
    CHECK(s.pyramid.levels[1].height == 2);  // 64 / 32
    CHECK(s.labels.foreground.size() >= 1);
    CHECK(s.labels.foreground.size() <= static_cast<size_t>(spec.max_objects));
    for (const LabelEntry& e : s.labels.foreground) {
      CHECK(e.class_id >= 0);
      CHECK(e.class_id < spec.num_classes);
      CHECK(e.box.v[2] >= spec.scale_min - 1e-12);
      CHECK(e.box.v[2] <= spec.scale_max + 1e-12);
      CHECK(e.box.v[0] - e.box.v[2] / 2 >= -1e-12);
      CHECK(e.box.v[0] + e.box.v[2] / 2 <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("class signatures are unit-norm and orthogonal when they fit") {
  const int64_t channels = 8, classes = 4;
  for (int64_t a = 0; a < classes; ++a) {
    const std::vector<double> sa = class_signature(a, channels, classes);
    double norm = 0.0;
    for (double v : sa) norm += v * v;
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-9));
    for (int64_t b = 0; b < a; ++b) {
      const std::vector<double> sb = class_signature(b, channels, classes);
      double dot = 0.0;
      for (int64_t i = 0; i < channels; ++i) dot += sa[i] * sb[i];
      CHECK(dot == doctest::Approx(0.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("level selection follows object size") {
  SceneSpec spec = small_spec();  // strides 16, 32, image 64
  // size 32 px -> source ~ 16 cells/side target -> log-nearest stride 16
  CHECK(level_for_box(Box::cxcywh(0.5, 0.5, 0.5, 0.5), spec) == 0);
  // size 64 px -> stride 32
  CHECK(level_for_box(Box::cxcywh(0.5, 0.5, 1.0, 1.0), spec) == 1);
}

TEST_CASE("painted signatures are recoverable without noise") {
  SceneSpec spec = small_spec();
  spec.noise_std = 0.0;
  spec.max_objects = 1;  // a single object: its level holds only its signature
  for (int64_t idx = 0; idx < 8; ++idx) {
    const Scene s = gen_scene(spec, idx);
    REQUIRE(s.labels.foreground.size() == 1);
    const LabelEntry& gt = s.labels.foreground[0];
    const int level = level_for_box(gt.box, spec);
    const FeatureMap& map = s.pyramid.levels[level];
    // average the painted cells and classify by signature dot product
    std::vector<double> mean(spec.channels, 0.0);
    int64_t painted = 0;
    for (int64_t i = 0; i < map.height; ++i)
      for (int64_t j = 0; j < map.width; ++j) {
        double mag = 0.0;
        for (int64_t c = 0; c < spec.channels; ++c)
          mag += std::abs(map.values.data()[(i * map.width + j) * spec.channels + c]);
        if (mag > 1e-12) {
          ++painted;
          for (int64_t c = 0; c < spec.channels; ++c)
            mean[c] += map.values.data()[(i * map.width + j) * spec.channels + c];
        }
      }
    REQUIRE(painted > 0);
    int64_t best = -1;
    double best_dot = -1e30;
    for (int64_t cls = 0; cls < spec.num_classes; ++cls) {
      const std::vector<double> sig = class_signature(cls, spec.channels, spec.num_classes);
      double dot = 0.0;
      for (int64_t c = 0; c < spec.channels; ++c) dot += mean[c] * sig[c];
      if (dot > best_dot) {
        best_dot = dot;
        best = cls;
      }
    }
    CHECK(best == gt.class_id);
    // the other level stays empty
    const FeatureMap& other = s.pyramid.levels[1 - level];
    double other_mag = 0.0;
    for (int64_t i = 0; i < other.values.numel(); ++i)
      other_mag += std::abs(other.values.data()[i]);
    CHECK(other_mag == doctest::Approx(0.0));
  }
}

TEST_CASE("subsample keeps order and is deterministic") {
  const SceneSpec spec = small_spec();
  const std::vector<Scene> scenes = gen_dataset(spec, 10);
  const std::vector<Scene> half = subsample(scenes, 0.5, 3);
  CHECK(half.size() == 5);
  const std::vector<Scene> again = subsample(scenes, 0.5, 3);
  for (size_t i = 0; i < half.size(); ++i)
    CHECK(half[i].labels.foreground.size() == again[i].labels.foreground.size());
  CHECK(subsample(scenes, 1.0, 3).size() == 10);
  CHECK(subsample(scenes, 0.01, 3).size() == 1);  // ceil
  CHECK_THROWS_AS(subsample(scenes, 0.0, 3), ConfigError);
}

TEST_CASE("scenes survive a save/load round trip") {
  namespace fs = std::filesystem;
  const SceneSpec spec = small_spec();
  const std::vector<Scene> scenes = gen_dataset(spec, 3);
  const fs::path dir = fs::temp_directory_path() / "dedetr_scene_io_test";
  fs::create_directories(dir);
  save_scenes(dir.string(), scenes);
  const std::vector<Scene> back = load_scenes(dir.string());
  REQUIRE(back.size() == scenes.size());
  for (size_t i = 0; i < scenes.size(); ++i) {
    REQUIRE(back[i].labels.foreground.size() == scenes[i].labels.foreground.size());
    for (size_t k = 0; k < scenes[i].labels.foreground.size(); ++k)
      CHECK(back[i].labels.foreground[k].class_id == scenes[i].labels.foreground[k].class_id);
    REQUIRE(back[i].pyramid.levels.size() == scenes[i].pyramid.levels.size());
    for (size_t l = 0; l < scenes[i].pyramid.levels.size(); ++l) {
      const Tensor& got = back[i].pyramid.levels[l].values;
      const Tensor& want = scenes[i].pyramid.levels[l].values;
      REQUIRE(got.dims() == want.dims());
      for (int64_t n = 0; n < got.numel(); ++n)
        CHECK(got.data()[n] == static_cast<double>(static_cast<float>(want.data()[n])));
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("spec validation rejects inconsistent settings") {
  SceneSpec spec = small_spec();
  spec.strides = {16, 12};  // not ascending, 12 does not divide 64
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = small_spec();
  spec.scale_min = 0.9;
  spec.scale_max = 0.5;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = small_spec();
  spec.max_objects = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}
