#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dedetr/data.hpp"
#include "dedetr/model.hpp"
#include "dedetr/supervision.hpp"

namespace dedetr {

struct AblateCell {
  std::string config_id;
  nlohmann::json overrides;  // merge-patched onto the base config
};

struct RunConfig {
  std::string config_id = "default";
  uint64_t seed = 1;
  std::string out_dir = "runs/default";

  ModelConfig model;   // num_levels/in_channels/num_classes/label_aug derived below
  SceneSpec data;
  int64_t train_scenes = 200;
  int64_t eval_scenes = 50;
  double subsample_ratio = 1.0;

  int epochs = 50;
  int64_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  int lr_drop_epoch = -1;  // -1: defaults to floor(0.8 * epochs)
  double lr_drop_factor = 0.1;

  MatchWeights match;
  double eos_coef = 0.1;
  AugmentConfig augment;
  double nms_threshold = 0.7;

  std::vector<uint64_t> ablate_seeds;
  std::vector<AblateCell> ablate_grid;

  nlohmann::json raw;  // the fully-defaulted JSON this config was parsed from

  int effective_lr_drop() const;
  void validate() const;  // throws ConfigError
};

// Complete default tree; user configs may give any subset of its keys.
nlohmann::json default_config_json();

// Merge onto defaults, reject unknown keys, validate. Throws ConfigError.
RunConfig parse_run_config(const nlohmann::json& user);

RunConfig load_run_config(const std::string& path);

// Cell config for the ablation grid: base JSON merge-patched with overrides.
RunConfig derive_cell_config(const RunConfig& base, const AblateCell& cell, uint64_t seed);

}  // namespace dedetr
