#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"

#include "dedetr/error.hpp"
#include "dedetr/sampling.hpp"

using namespace dedetr;

namespace {
FeatureMap make_map(int64_t h, int64_t w, int64_t c, int stride, uint64_t seed) {
  return FeatureMap{h, w, c, stride, Tensor::uniform({h, w, c}, -1.0, 1.0, seed)};
}
}  // namespace

TEST_CASE("bilinear_sample matches the 2x2 example") {
  FeatureMap map{2, 2, 1, 1, Tensor::from_data({2, 2, 1}, {1, 2, 3, 4})};
  CHECK(bilinear_sample(map, 1.0, 1.0)[0] == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(bilinear_sample(map, 0.5, 0.5)[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bilinear_sample(map, -3.0, 0.5)[0] == doctest::Approx(0.0));
}

TEST_CASE("roi sample points cover bin centers row-major") {
  std::vector<double> xs, ys;
  roi_sample_points(Box::cxcywh(0.5, 0.5, 1.0, 1.0), 4, 4, 2, xs, ys);
  REQUIRE(xs.size() == 4);
  const std::vector<double> wx = {1.0, 3.0, 1.0, 3.0};
  const std::vector<double> wy = {1.0, 1.0, 3.0, 3.0};
  for (int i = 0; i < 4; ++i) {
    CHECK(xs[i] == doctest::Approx(wx[i]).epsilon(1e-12));
    CHECK(ys[i] == doctest::Approx(wy[i]).epsilon(1e-12));
  }
}

TEST_CASE("roi_align output shape is [boxes, bins, channels]") {
  FeatureMap map = make_map(8, 8, 8, 8, 3);
  BoxSet boxes = {Box::cxcywh(0.5, 0.5, 0.4, 0.4), Box::cxcywh(0.3, 0.3, 0.2, 0.5),
                  Box::cxcywh(0.7, 0.6, 0.3, 0.3)};
  Tensor out = roi_align(map, boxes, 4);
  CHECK(out.dims() == Shape{3, 16, 8});
  CHECK(all_finite(out));
  Tape::current().clear();
}

TEST_CASE("roi_align on whole-cell-aligned boxes is exact") {
  FeatureMap map = make_map(6, 6, 2, 8, 5);
  // cells x in [1,4), y in [2,5): K=3 bins sit exactly on cell centers
  BoxSet boxes = {Box::cxcywh(2.5 / 6.0, 3.5 / 6.0, 0.5, 0.5)};
  Tensor out = roi_align(map, boxes, 3);
  for (int by = 0; by < 3; ++by)
    for (int bx = 0; bx < 3; ++bx)
      for (int c = 0; c < 2; ++c)
        CHECK(out.data()[(by * 3 + bx) * 2 + c] ==
              map.values.data()[((2 + by) * 6 + (1 + bx)) * 2 + c]);
  Tape::current().clear();
}

TEST_CASE("roi_align translation property") {
  // shifting a fully interior box by one cell on a map whose content shifted
  // the same way yields identical samples
  Tensor base = Tensor::uniform({6, 6, 3}, -1.0, 1.0, 7);
  Tensor shifted = Tensor::zeros({6, 6, 3});
  for (int i = 0; i < 6; ++i)
    for (int j = 1; j < 6; ++j)
      for (int c = 0; c < 3; ++c)
        shifted.values()[(i * 6 + j) * 3 + c] = base.values()[(i * 6 + j - 1) * 3 + c];
  FeatureMap a{6, 6, 3, 8, base}, b{6, 6, 3, 8, shifted};
  BoxSet box_a = {Box::cxcywh(0.4, 0.5, 0.3, 0.3)};
  BoxSet box_b = {Box::cxcywh(0.4 + 1.0 / 6.0, 0.5, 0.3, 0.3)};
  Tensor ra = roi_align(a, box_a, 4);
  Tensor rb = roi_align(b, box_b, 4);
  for (int64_t i = 0; i < ra.numel(); ++i)
    CHECK(ra.data()[i] == doctest::Approx(rb.data()[i]).epsilon(1e-9));
  Tape::current().clear();
}

TEST_CASE("roi_align rejects an empty box set") {
  FeatureMap map = make_map(4, 4, 2, 8, 9);
  CHECK_THROWS_AS(roi_align(map, {}, 2), ContractError);
  Tape::current().clear();
}

TEST_CASE("roi_align gradients reach the feature map") {
  FeatureMap map = make_map(5, 6, 3, 8, 11);
  map.values.set_requires_grad(true);
  BoxSet boxes = {Box::cxcywh(0.45, 0.5, 0.5, 0.6)};
  backward(sum_all(roi_align(map, boxes, 3)));
  double total = 0.0;
  for (int64_t i = 0; i < map.values.numel(); ++i) total += std::abs(map.values.grad()[i]);
  CHECK(total > 0.0);
}

TEST_CASE("sine_pos_embed validates the dimension") {
  CHECK_THROWS_AS(sine_pos_embed({0.5}, {0.5}, 10), ConfigError);
  Tensor e = sine_pos_embed({0.5, 0.25}, {0.5, 0.75}, 8);
  CHECK(e.dims() == Shape{2, 8});
  CHECK_FALSE(e.requires_grad());
}

TEST_CASE("flatten_embed reshapes then projects") {
  FeatureMap map{2, 2, 3, 8, Tensor::uniform({2, 2, 3}, -1.0, 1.0, 13)};
  Tensor w = Tensor::uniform({3, 4}, -1.0, 1.0, 14);
  Tensor b = Tensor::uniform({4}, -1.0, 1.0, 15);
  Tensor z = flatten_embed(map, w, b);
  CHECK(z.dims() == Shape{4, 4});
  Tensor direct = linear(reshape(map.values, {4, 3}), w, b);
  for (int64_t i = 0; i < z.numel(); ++i)
    CHECK(z.data()[i] == doctest::Approx(direct.data()[i]).epsilon(1e-12));
  Tape::current().clear();
}

TEST_CASE("build_multiscale_kv concatenates fine to coarse with tiled positions") {
  const int64_t d = 8;
  FeaturePyramid pyr;
  pyr.levels.push_back(make_map(8, 8, d, 8, 21));
  pyr.levels.push_back(make_map(4, 4, d, 16, 22));
  pyr.levels.push_back(make_map(2, 2, d, 32, 23));
  BoxSet boxes = {Box::cxcywh(0.5, 0.5, 0.5, 0.5), Box::cxcywh(0.25, 0.25, 0.3, 0.3)};
  const SparseKV kv = build_multiscale_kv(pyr, boxes, 4, {0, 1, 2});
  CHECK(kv.keys_values.dims() == Shape{2, 48, d});
  CHECK(kv.pos.dims() == Shape{2, 48, d});
  // the same normalized sample positions repeat on every level
  for (int64_t q = 0; q < 2; ++q)
    for (int64_t s = 0; s < 16; ++s)
      for (int64_t c = 0; c < d; ++c) {
        const double first = kv.pos.data()[(q * 48 + s) * d + c];
        CHECK(kv.pos.data()[(q * 48 + 16 + s) * d + c] == first);
        CHECK(kv.pos.data()[(q * 48 + 32 + s) * d + c] == first);
      }
  Tape::current().clear();
}

TEST_CASE("build_multiscale_kv requires strictly ascending levels") {
  const int64_t d = 8;
  FeaturePyramid pyr;
  pyr.levels.push_back(make_map(4, 4, d, 8, 31));
  pyr.levels.push_back(make_map(2, 2, d, 16, 32));
  BoxSet boxes = {Box::cxcywh(0.5, 0.5, 0.5, 0.5)};
  CHECK_THROWS_AS(build_multiscale_kv(pyr, boxes, 2, {1, 0}), ConfigError);
  CHECK_THROWS_AS(build_multiscale_kv(pyr, boxes, 2, {0, 0}), ConfigError);
  CHECK_THROWS_AS(build_multiscale_kv(pyr, boxes, 2, {0, 5}), ConfigError);
  Tape::current().clear();
}

TEST_CASE("build_multiscale_kv reads the coarsest level from encoded_top") {
  const int64_t d = 4;
  FeaturePyramid pyr;
  pyr.levels.push_back(make_map(2, 2, d, 32, 41));
  pyr.encoded_top = Tensor::constant({4, d}, 3.5);
  BoxSet boxes = {Box::cxcywh(0.5, 0.5, 1.0, 1.0)};
  const SparseKV kv = build_multiscale_kv(pyr, boxes, 2, {0});
  // whole-image box, 2x2 grid, K=2: samples sit on the four cell centers
  for (int64_t i = 0; i < kv.keys_values.numel(); ++i)
    CHECK(kv.keys_values.data()[i] == doctest::Approx(3.5).epsilon(1e-12));
  Tape::current().clear();
}
