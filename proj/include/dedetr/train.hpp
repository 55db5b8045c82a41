#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "dedetr/config.hpp"
#include "dedetr/data.hpp"
#include "dedetr/eval.hpp"
#include "dedetr/model.hpp"

namespace dedetr {

// Adaptive-moment optimizer with bias correction and decoupled weight decay.
// Decay applies only to weight matrices (rank-2 parameters); biases, norm
// scales, and the learned query/anchor embeddings are left alone. State is
// keyed by parameter index, so one instance must stay with one parameter list.
class Adam {
 public:
  explicit Adam(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(std::vector<std::pair<std::string, Tensor>>& params, double lr_factor);

 private:
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct EpochRow {
  int epoch = 0;
  LossBreakdown loss;
  EvalResult eval;
};

struct TrainResult {
  std::vector<EpochRow> epochs;
  int best_epoch = -1;
  double best_ap = -1.0;
};

// All queries as detections: per query the best foreground class (ties to the
// lower id) with its probability as score.
std::vector<Detection> detections_from(const LayerOutput& out);

// Final-layer detections for every scene; NMS applied when requested.
std::vector<std::vector<Detection>> predict(Model& model, const std::vector<Scene>& scenes,
                                            bool apply_nms, double nms_threshold);

// NMS iff the model trained with label augmentation.
EvalResult eval_model(Model& model, const std::vector<Scene>& scenes, double nms_threshold);

// cfg.epochs passes over `train`, evaluating on `eval_scenes` each epoch.
// The model is updated in place; `save_best_into`, when non-null, receives a
// snapshot of the parameters at the best-AP epoch.
TrainResult train_model(Model& model, const RunConfig& cfg, const std::vector<Scene>& train,
                        const std::vector<Scene>& eval_scenes, std::ostream* log,
                        std::vector<std::pair<std::string, Tensor>>* save_best_into);

}  // namespace dedetr
