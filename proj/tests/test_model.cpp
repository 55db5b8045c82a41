#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"

#include "dedetr/data.hpp"
#include "dedetr/error.hpp"
#include "dedetr/model.hpp"
#include "dedetr/selftest.hpp"

using namespace dedetr;

namespace {

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.hidden_dim = 16;
  mc.num_heads = 2;
  mc.num_queries = 4;
  mc.enc_layers = 1;
  mc.dec_layers = 2;
  mc.ffn_dim = 32;
  mc.roi_resolution = 2;
  mc.num_levels = 2;
  mc.in_channels = 8;
  mc.num_classes = 3;
  return mc;
}

FeaturePyramid tiny_pyramid(uint64_t seed) {
  FeaturePyramid pyr;
  pyr.levels.push_back(FeatureMap{4, 4, 8, 16, Tensor::uniform({4, 4, 8}, -1.0, 1.0, seed)});
  pyr.levels.push_back(
      FeatureMap{2, 2, 8, 32, Tensor::uniform({2, 2, 8}, -1.0, 1.0, seed + 1)});
  return pyr;
}

}  // namespace

TEST_CASE("single-head attention with identity projections matches the closed form") {
  const int64_t n = 3, s = 5, d = 4;
  AttentionParams p;
  Tensor eye = Tensor::zeros({d, d});
  for (int64_t i = 0; i < d; ++i) eye.values()[i * d + i] = 1.0;
  p.wq = p.wk = p.wv = p.wo = eye;
  p.bq = p.bk = p.bv = p.bo = Tensor::zeros({d});

  Tensor q = Tensor::uniform({n, d}, -1.0, 1.0, 3);
  Tensor k = Tensor::uniform({s, d}, -1.0, 1.0, 4);
  Tensor v = Tensor::uniform({s, d}, -1.0, 1.0, 5);
  Tensor q_pos = Tensor::uniform({n, d}, -1.0, 1.0, 6);
  Tensor k_pos = Tensor::uniform({s, d}, -1.0, 1.0, 7);
  Tensor out = multi_head_attention(p, 1, q, k, v, q_pos, k_pos);
  REQUIRE(out.dims() == Shape{n, d});

  std::vector<int64_t> all(s);
  for (int64_t i = 0; i < s; ++i) all[i] = i;
  for (int64_t row = 0; row < n; ++row) {
    std::vector<double> qr(q.data() + row * d, q.data() + (row + 1) * d);
    std::vector<double> qp(q_pos.data() + row * d, q_pos.data() + (row + 1) * d);
    const std::vector<double> want = selftest::reference_masked_attention(
        qr, k.values(), v.values(), qp, k_pos.values(), all, d);
    for (int64_t c = 0; c < d; ++c)
      CHECK(out.data()[row * d + c] == doctest::Approx(want[c]).epsilon(1e-9));
  }
  Tape::current().clear();
}

TEST_CASE("attention accepts batched rank-3 inputs") {
  const int64_t d = 8;
  AttentionParams p;
  p.wq = Tensor::uniform({d, d}, -0.3, 0.3, 11);
  p.wk = Tensor::uniform({d, d}, -0.3, 0.3, 12);
  p.wv = Tensor::uniform({d, d}, -0.3, 0.3, 13);
  p.wo = Tensor::uniform({d, d}, -0.3, 0.3, 14);
  p.bq = p.bk = p.bv = p.bo = Tensor::zeros({d});
  Tensor q = Tensor::uniform({3, 1, d}, -1.0, 1.0, 15);
  Tensor kv = Tensor::uniform({3, 6, d}, -1.0, 1.0, 16);
  Tensor out = multi_head_attention(p, 2, q, kv, kv, Tensor{}, Tensor{});
  CHECK(out.dims() == Shape{3, 1, d});
  CHECK(all_finite(out));
  Tape::current().clear();
}

TEST_CASE("identical kv rows give identical attention outputs per query") {
  const int64_t d = 8;
  AttentionParams p;
  p.wq = Tensor::uniform({d, d}, -0.3, 0.3, 21);
  p.wk = Tensor::uniform({d, d}, -0.3, 0.3, 22);
  p.wv = Tensor::uniform({d, d}, -0.3, 0.3, 23);
  p.wo = Tensor::uniform({d, d}, -0.3, 0.3, 24);
  p.bq = p.bk = p.bv = p.bo = Tensor::zeros({d});
  Tensor one_q = Tensor::uniform({1, d}, -1.0, 1.0, 25);
  Tensor q = concat({one_q, one_q}, 0);  // two identical queries
  Tensor kv_row = Tensor::uniform({1, 4 * d}, -1.0, 1.0, 26);
  Tensor kv = reshape(concat({kv_row, kv_row}, 0), {2, 4, d});
  Tensor out = multi_head_attention(p, 2, reshape(q, {2, 1, d}), kv, kv, Tensor{}, Tensor{});
  for (int64_t c = 0; c < d; ++c)
    CHECK(out.data()[c] == doctest::Approx(out.data()[d + c]).epsilon(1e-12));
  Tape::current().clear();
}

TEST_CASE("forward produces one output per decoder layer with valid shapes") {
  Model model(tiny_config(), 7);
  const auto outs = model.forward(tiny_pyramid(31));
  REQUIRE(outs.size() == 2);
  for (const LayerOutput& out : outs) {
    CHECK(out.class_logits.dims() == Shape{4, 4});  // C + 1 columns
    CHECK(out.boxes.dims() == Shape{4, 4});
    for (int64_t i = 0; i < out.boxes.numel(); ++i) {
      CHECK(out.boxes.data()[i] > 0.0);
      CHECK(out.boxes.data()[i] < 1.0);
    }
    for (int64_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int64_t c = 0; c < 4; ++c) s += out.class_probs.data()[r * 4 + c];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  Tape::current().clear();
}

TEST_CASE("forward is deterministic in the seed") {
  Model a(tiny_config(), 7), b(tiny_config(), 7), c(tiny_config(), 8);
  const auto oa = a.forward(tiny_pyramid(31));
  const auto ob = b.forward(tiny_pyramid(31));
  const auto oc = c.forward(tiny_pyramid(31));
  Tape::current().clear();
  CHECK(std::memcmp(oa.back().class_logits.data(), ob.back().class_logits.data(),
                    sizeof(double) * oa.back().class_logits.numel()) == 0);
  bool differs = false;
  for (int64_t i = 0; i < oa.back().class_logits.numel(); ++i)
    differs = differs || oa.back().class_logits.data()[i] != oc.back().class_logits.data()[i];
  CHECK(differs);
}

TEST_CASE("one-layer decoders ignore the sparse toggle") {
  // layer 1 always attends densely over the encoded sequence
  ModelConfig cfg = tiny_config();
  cfg.dec_layers = 1;
  ModelConfig dense = cfg;
  dense.sparse_sampling = false;
  Model a(cfg, 9), b(dense, 9);
  const auto oa = a.forward(tiny_pyramid(33));
  const auto ob = b.forward(tiny_pyramid(33));
  Tape::current().clear();
  for (int64_t i = 0; i < oa[0].class_logits.numel(); ++i)
    CHECK(oa[0].class_logits.data()[i] == ob[0].class_logits.data()[i]);
  for (int64_t i = 0; i < oa[0].boxes.numel(); ++i)
    CHECK(oa[0].boxes.data()[i] == ob[0].boxes.data()[i]);
}

TEST_CASE("box refinement changes the boxes but keeps them in range") {
  ModelConfig cfg = tiny_config();
  ModelConfig off = cfg;
  off.box_refine = false;
  Model a(cfg, 11), b(off, 11);
  const auto oa = a.forward(tiny_pyramid(35));
  const auto ob = b.forward(tiny_pyramid(35));
  Tape::current().clear();
  bool differs = false;
  for (int64_t i = 0; i < oa.back().boxes.numel(); ++i) {
    differs = differs || oa.back().boxes.data()[i] != ob.back().boxes.data()[i];
    CHECK(ob.back().boxes.data()[i] > 0.0);
    CHECK(ob.back().boxes.data()[i] < 1.0);
  }
  CHECK(differs);
}

TEST_CASE("gradients flow back to the query embeddings") {
  Model model(tiny_config(), 13);
  model.zero_grads();
  const auto outs = model.forward(tiny_pyramid(37));
  backward(sum_all(outs.back().class_logits));
  Tensor qp = model.param("query_pos");
  double total = 0.0;
  for (int64_t i = 0; i < qp.numel(); ++i) total += std::abs(qp.grad()[i]);
  CHECK(total > 0.0);
}

TEST_CASE("model validates its configuration and inputs") {
  ModelConfig bad = tiny_config();
  bad.hidden_dim = 15;  // not divisible by num_heads (or 4)
  CHECK_THROWS_AS(Model(bad, 1).forward(tiny_pyramid(1)), ConfigError);

  Model model(tiny_config(), 1);
  FeaturePyramid wrong;
  wrong.levels.push_back(FeatureMap{4, 4, 8, 16, Tensor::uniform({4, 4, 8}, -1, 1, 2)});
  CHECK_THROWS_AS(model.forward(wrong), ShapeError);  // expects 2 levels
  Tape::current().clear();
}

TEST_CASE("multiscale toggle controls which levels feed the sampler") {
  ModelConfig cfg = tiny_config();
  CHECK(cfg.sample_levels() == std::vector<int>{0, 1});
  cfg.multiscale = false;
  CHECK(cfg.sample_levels() == std::vector<int>{1});
}

TEST_CASE("enc_layers zero leaves no encoder parameters") {
  ModelConfig cfg = tiny_config();
  cfg.enc_layers = 0;
  Model model(cfg, 3);
  for (const auto& [name, t] : model.parameters()) CHECK(name.rfind("enc.", 0) != 0);
  const auto outs = model.forward(tiny_pyramid(39));
  CHECK(all_finite(outs.back().class_logits));
  Tape::current().clear();
}
