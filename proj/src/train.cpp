#include "dedetr/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "dedetr/rng.hpp"

namespace dedetr {

namespace {
constexpr uint64_t kShuffleStream = 0x53484646ULL;  // "SHFF"
constexpr uint64_t kAugmentStream = 0x4155474dULL;  // "AUGM"
}  // namespace

Adam::Adam(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::vector<std::pair<std::string, Tensor>>& params, double lr_factor) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].second.numel(), 0.0);
      v_[i].assign(params[i].second.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ContractError("optimizer bound to a different model");
  for (size_t i = 0; i < params.size(); ++i)
    if (static_cast<int64_t>(m_[i].size()) != params[i].second.numel())
      throw ContractError("optimizer bound to a different model");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double lr = lr_ * lr_factor;
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    const std::vector<double>& g = p.grad();
    double* x = p.data();
    const double decay = p.rank() == 2 ? lr * weight_decay_ : 0.0;
    for (int64_t k = 0; k < p.numel(); ++k) {
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
      x[k] -= lr * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + eps_) + decay * x[k];
    }
  }
}

std::vector<Detection> detections_from(const LayerOutput& out) {
  const Shape& pd = out.class_probs.dims();
  if (pd.size() != 2 || pd[1] < 2) throw ShapeError("class probs must be [N, C+1]");
  const int64_t n = pd[0];
  const int64_t num_fg = pd[1] - 1;
  const double* probs = out.class_probs.data();
  const double* boxes = out.boxes.data();
  std::vector<Detection> dets;
  dets.reserve(n);
  for (int64_t q = 0; q < n; ++q) {
    int64_t best = 0;
    for (int64_t c = 1; c < num_fg; ++c)
      if (probs[q * pd[1] + c] > probs[q * pd[1] + best]) best = c;
    Detection d;
    d.box = Box::cxcywh(boxes[4 * q], boxes[4 * q + 1], boxes[4 * q + 2], boxes[4 * q + 3]);
    d.class_id = best;
    d.score = probs[q * pd[1] + best];
    dets.push_back(d);
  }
  return dets;
}

std::vector<std::vector<Detection>> predict(Model& model, const std::vector<Scene>& scenes,
                                            bool apply_nms, double nms_threshold) {
  std::vector<std::vector<Detection>> out;
  out.reserve(scenes.size());
  for (const Scene& s : scenes) {
    std::vector<LayerOutput> layers = model.forward(s.pyramid);
    std::vector<Detection> dets = detections_from(layers.back());
    if (apply_nms) dets = nms(dets, nms_threshold);
    out.push_back(std::move(dets));
    Tape::current().clear();  // forward-only pass; drop the recorded closures
  }
  return out;
}

EvalResult eval_model(Model& model, const std::vector<Scene>& scenes, double nms_threshold) {
  std::vector<std::vector<Detection>> dets =
      predict(model, scenes, model.config().label_aug, nms_threshold);
  std::vector<LabelSet> labels;
  labels.reserve(scenes.size());
  for (const Scene& s : scenes) labels.push_back(s.labels);
  return evaluate(dets, labels, model.config().num_classes);
}

TrainResult train_model(Model& model, const RunConfig& cfg, const std::vector<Scene>& train,
                        const std::vector<Scene>& eval_scenes, std::ostream* log,
                        std::vector<std::pair<std::string, Tensor>>* save_best_into) {
  if (train.empty()) throw ContractError("empty training set");
  Adam opt(cfg.lr, cfg.weight_decay);
  // handle copies share the parameter storage, so updates reach the model
  auto params = model.parameters();
  const int64_t n_queries = cfg.model.num_queries;
  const int lr_drop = cfg.effective_lr_drop();

  TrainResult result;
  std::vector<int64_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(mix_seed(cfg.seed, kShuffleStream), static_cast<uint64_t>(epoch)));
    for (size_t i = 0; i + 1 < order.size(); ++i) {
      const size_t j = i + shuffle_rng.uniform_index(order.size() - i);
      std::swap(order[i], order[j]);
    }
    const double lr_factor = epoch >= lr_drop ? cfg.lr_drop_factor : 1.0;

    LossBreakdown epoch_loss;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      model.zero_grads();
      for (size_t k = start; k < stop; ++k) {
        const Scene& scene = train[order[k]];
        LabelSet labels = scene.labels;
        labels.pad_to = n_queries;
        const uint64_t aug_seed =
            mix_seed(mix_seed(cfg.seed, kAugmentStream),
                     static_cast<uint64_t>(epoch) * train.size() + static_cast<uint64_t>(order[k]));
        AugmentedLabelSet aug = apply_augment(labels, cfg.augment, aug_seed);

        std::vector<LayerOutput> outputs = model.forward(scene.pyramid);
        LossBreakdown scene_loss;
        Tensor loss = set_loss(outputs, aug, cfg.match, cfg.eos_coef, &scene_loss);
        if (!std::isfinite(loss.scalar()))
          throw NumericError("loss is not finite at epoch " + std::to_string(epoch));
        epoch_loss.total += scene_loss.total;
        epoch_loss.cls += scene_loss.cls;
        epoch_loss.l1 += scene_loss.l1;
        epoch_loss.giou += scene_loss.giou;
        backward(scale(loss, 1.0 / static_cast<double>(stop - start)));
      }
      opt.step(params, lr_factor);
    }
    const double inv = 1.0 / static_cast<double>(order.size());
    epoch_loss.total *= inv;
    epoch_loss.cls *= inv;
    epoch_loss.l1 *= inv;
    epoch_loss.giou *= inv;

    EpochRow row;
    row.epoch = epoch;
    row.loss = epoch_loss;
    row.eval = eval_model(model, eval_scenes, cfg.nms_threshold);
    if (row.eval.ap > result.best_ap) {
      result.best_ap = row.eval.ap;
      result.best_epoch = epoch;
      if (save_best_into) {
        save_best_into->clear();
        for (const auto& [name, t] : params) save_best_into->emplace_back(name, t.detached());
      }
    }
    if (log)
      (*log) << "epoch " << epoch << " loss " << epoch_loss.total << " ap " << row.eval.ap
             << " ap50 " << row.eval.ap50 << std::endl;
    result.epochs.push_back(std::move(row));
  }
  return result;
}

}  // namespace dedetr
