#include <cmath>
#include <vector>

#include "doctest.h"

#include "dedetr/config.hpp"
#include "dedetr/error.hpp"
#include "dedetr/train.hpp"

using namespace dedetr;
using nlohmann::json;

namespace {

json tiny_config_json(uint64_t seed) {
  return json{
      {"config_id", "tiny"},
      {"seed", seed},
      {"model",
       {{"hidden_dim", 16},
        {"num_heads", 2},
        {"num_queries", 4},
        {"enc_layers", 1},
        {"dec_layers", 2},
        {"ffn_dim", 32},
        {"roi_resolution", 2}}},
      {"data",
       {{"image_size", 64},
        {"strides", {16, 32}},
        {"channels", 8},
        {"num_classes", 3},
        {"max_objects", 2},
        {"scale_min", 0.3},
        {"scale_max", 0.6},
        {"noise_std", 0.05},
        {"train_scenes", 20},
        {"eval_scenes", 5}}},
      {"train", {{"epochs", 3}, {"batch_size", 4}}},
  };
}

std::pair<std::vector<Scene>, std::vector<Scene>> scenes_for(const RunConfig& cfg) {
  std::vector<Scene> train, heldout;
  for (int64_t i = 0; i < cfg.train_scenes; ++i) train.push_back(gen_scene(cfg.data, i));
  for (int64_t i = 0; i < cfg.eval_scenes; ++i)
    heldout.push_back(gen_scene(cfg.data, cfg.train_scenes + i));
  return {train, heldout};
}

}  // namespace

TEST_CASE("adam takes the textbook first step") {
  Tensor x = Tensor::from_data({1}, {1.0});
  x.set_requires_grad(true);
  x.grad()[0] = 0.5;
  std::vector<std::pair<std::string, Tensor>> params = {{"x", x}};
  Adam opt(0.1);
  opt.step(params, 1.0);
  // m_hat = 0.5, v_hat = 0.25 after bias correction
  CHECK(x.data()[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam rejects rebinding to a different parameter list") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  std::vector<std::pair<std::string, Tensor>> params = {{"x", x}};
  Adam opt(0.1);
  opt.step(params, 1.0);
  Tensor y = Tensor::from_data({3}, {1.0, 2.0, 3.0});
  y.set_requires_grad(true);
  std::vector<std::pair<std::string, Tensor>> other = {{"y", y}};
  CHECK_THROWS_AS(opt.step(other, 1.0), ContractError);
}

TEST_CASE("weight decay shrinks matrices but leaves vectors alone") {
  Tensor w = Tensor::from_data({1, 1}, {1.0});
  Tensor b = Tensor::from_data({1}, {1.0});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  w.grad()[0] = 0.5;
  b.grad()[0] = 0.5;
  std::vector<std::pair<std::string, Tensor>> params = {{"w", w}, {"b", b}};
  Adam opt(0.1, 0.2);
  opt.step(params, 1.0);
  const double adam_step = 0.1 * 0.5 / (0.5 + 1e-8);
  CHECK(b.data()[0] == doctest::Approx(1.0 - adam_step).epsilon(1e-12));
  CHECK(w.data()[0] == doctest::Approx(1.0 - adam_step - 0.1 * 0.2 * 1.0).epsilon(1e-12));
}

TEST_CASE("the learning-rate factor scales the update") {
  Tensor x = Tensor::from_data({1}, {1.0});
  x.set_requires_grad(true);
  x.grad()[0] = 0.5;
  std::vector<std::pair<std::string, Tensor>> params = {{"x", x}};
  Adam opt(0.1);
  opt.step(params, 0.1);
  CHECK(x.data()[0] == doctest::Approx(1.0 - 0.01 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("detections_from keeps every query with its best foreground class") {
  LayerOutput out;
  // 2 queries, 2 classes + no-object column
  out.class_logits = Tensor::from_data({2, 3}, {3.0, 0.0, 0.0, 0.0, 1.0, 5.0});
  out.class_probs = softmax(out.class_logits, -1);
  out.boxes = Tensor::from_data({2, 4}, {0.3, 0.3, 0.2, 0.2, 0.7, 0.7, 0.2, 0.2});
  const std::vector<Detection> dets = detections_from(out);
  Tape::current().clear();
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].class_id == 0);
  CHECK(dets[0].score == doctest::Approx(out.class_probs.data()[0]));
  CHECK(dets[1].class_id == 1);  // best foreground even though no-object wins overall
  CHECK(dets[1].score == doctest::Approx(out.class_probs.data()[4]));
  CHECK(dets[1].box.v[0] == doctest::Approx(0.7));
}

TEST_CASE("a tiny training run produces finite decreasing losses") {
  const RunConfig cfg = parse_run_config(tiny_config_json(1));
  auto [train, heldout] = scenes_for(cfg);
  Model model(cfg.model, cfg.seed);
  std::vector<std::pair<std::string, Tensor>> best;
  const TrainResult result = train_model(model, cfg, train, heldout, nullptr, &best);
  REQUIRE(result.epochs.size() == 3);
  for (const EpochRow& row : result.epochs) {
    CHECK(std::isfinite(row.loss.total));
    CHECK(row.eval.ap >= 0.0);
    CHECK(row.eval.ap <= 1.0);
  }
  CHECK(result.best_epoch >= 0);
  CHECK(result.best_epoch < 3);
  CHECK_FALSE(best.empty());
}

TEST_CASE("training is deterministic under the same seed") {
  const RunConfig cfg = parse_run_config(tiny_config_json(4));
  auto [train, heldout] = scenes_for(cfg);
  Model a(cfg.model, cfg.seed), b(cfg.model, cfg.seed);
  const TrainResult ra = train_model(a, cfg, train, heldout, nullptr, nullptr);
  const TrainResult rb = train_model(b, cfg, train, heldout, nullptr, nullptr);
  REQUIRE(ra.epochs.size() == rb.epochs.size());
  for (size_t e = 0; e < ra.epochs.size(); ++e) {
    CHECK(ra.epochs[e].loss.total == rb.epochs[e].loss.total);
    CHECK(ra.epochs[e].eval.ap == rb.epochs[e].eval.ap);
  }
}

TEST_CASE("three epochs of training usually lower the loss") {
  int improved = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    const RunConfig cfg = parse_run_config(tiny_config_json(seed));
    auto [train, heldout] = scenes_for(cfg);
    Model model(cfg.model, cfg.seed);
    const TrainResult result = train_model(model, cfg, train, heldout, nullptr, nullptr);
    if (result.epochs.front().loss.total > result.epochs.back().loss.total) ++improved;
  }
  CHECK(improved >= 4);
}

TEST_CASE("one epoch produces one row") {
  json j = tiny_config_json(2);
  j["train"]["epochs"] = 1;
  const RunConfig cfg = parse_run_config(j);
  auto [train, heldout] = scenes_for(cfg);
  Model model(cfg.model, cfg.seed);
  const TrainResult result = train_model(model, cfg, train, heldout, nullptr, nullptr);
  CHECK(result.epochs.size() == 1);
}
