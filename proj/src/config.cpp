#include "dedetr/config.hpp"

#include <cmath>
#include <fstream>

namespace dedetr {

using nlohmann::json;

json default_config_json() {
  return json{
      {"config_id", "default"},
      {"seed", 1},
      {"out_dir", "runs/default"},
      {"model",
       {{"hidden_dim", 64},
        {"num_heads", 4},
        {"num_queries", 25},
        {"enc_layers", 2},
        {"dec_layers", 3},
        {"ffn_dim", 256},
        {"roi_resolution", 4},
        {"sparse_sampling", true},
        {"multiscale", true},
        {"box_refine", true}}},
      {"data",
       {{"image_size", 256},
        {"strides", {8, 16, 32}},
        {"channels", 16},
        {"num_classes", 6},
        {"max_objects", 8},
        {"scale_min", 0.04},
        {"scale_max", 0.4},
        {"noise_std", 0.05},
        {"seed", 7},
        {"train_scenes", 200},
        {"eval_scenes", 50},
        {"subsample_ratio", 1.0}}},
      {"train",
       {{"epochs", 50},
        {"batch_size", 8},
        {"lr", 1e-3},
        {"weight_decay", 0.0},
        {"lr_drop_epoch", -1},
        {"lr_drop_factor", 0.1}}},
      {"loss", {{"cls", 1.0}, {"l1", 5.0}, {"giou", 2.0}, {"eos_coef", 0.1}}},
      {"augment", {{"mode", "repeat"}, {"repeat", 2}, {"ratio", 0.5}}},
      {"eval", {{"nms_threshold", 0.7}}},
      {"ablate", {{"seeds", {1, 2, 3, 4, 5}}, {"grid", json::array()}}},
  };
}

namespace {

// Any user key absent from the default tree at the same path is a typo.
void check_keys(const json& user, const json& defaults, const std::string& path) {
  if (!user.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string here = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.is_object() || !defaults.contains(it.key()))
      throw ConfigError("unknown config key: " + here);
    // grid cells are free-form (validated after merging), seeds/strides are arrays
    if (here == "ablate.grid") continue;
    check_keys(it.value(), defaults.at(it.key()), here);
  }
}

}  // namespace

int RunConfig::effective_lr_drop() const {
  if (lr_drop_epoch >= 0) return lr_drop_epoch;
  return static_cast<int>(std::floor(0.8 * static_cast<double>(epochs)));
}

void RunConfig::validate() const {
  model.validate();
  data.validate();
  if (config_id.empty()) throw ConfigError("config_id must not be empty");
  if (train_scenes < 1 || eval_scenes < 1)
    throw ConfigError("train_scenes and eval_scenes must be >= 1");
  if (!(subsample_ratio > 0.0) || !(subsample_ratio <= 1.0))
    throw ConfigError("subsample_ratio must lie in (0, 1]");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_drop_factor > 0.0)) throw ConfigError("lr_drop_factor must be > 0");
  if (!(eos_coef > 0.0)) throw ConfigError("eos_coef must be > 0");
  if (!(nms_threshold > 0.0) || !(nms_threshold <= 1.0))
    throw ConfigError("nms_threshold must lie in (0, 1]");
  if (match.cls < 0.0 || match.l1 < 0.0 || match.giou < 0.0)
    throw ConfigError("loss weights must be >= 0");
  if (augment.mode == AugmentConfig::Mode::FixedRepeat &&
      static_cast<int64_t>(augment.repeat) * data.max_objects > model.num_queries)
    throw ConfigError("repeat * max_objects exceeds num_queries; lower repeat or raise queries");
  if (data.max_objects > model.num_queries)
    throw ConfigError("max_objects exceeds num_queries");
}

RunConfig parse_run_config(const json& user) {
  if (!user.is_object()) throw ConfigError("config root must be a JSON object");
  const json defaults = default_config_json();
  check_keys(user, defaults, "");
  json j = defaults;
  j.merge_patch(user);

  RunConfig cfg;
  try {
    cfg.config_id = j.at("config_id").get<std::string>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.out_dir = j.at("out_dir").get<std::string>();

    const json& jm = j.at("model");
    cfg.model.hidden_dim = jm.at("hidden_dim").get<int64_t>();
    cfg.model.num_heads = jm.at("num_heads").get<int>();
    cfg.model.num_queries = jm.at("num_queries").get<int64_t>();
    cfg.model.enc_layers = jm.at("enc_layers").get<int>();
    cfg.model.dec_layers = jm.at("dec_layers").get<int>();
    cfg.model.ffn_dim = jm.at("ffn_dim").get<int64_t>();
    cfg.model.roi_resolution = jm.at("roi_resolution").get<int>();
    cfg.model.sparse_sampling = jm.at("sparse_sampling").get<bool>();
    cfg.model.multiscale = jm.at("multiscale").get<bool>();
    cfg.model.box_refine = jm.at("box_refine").get<bool>();

    const json& jd = j.at("data");
    cfg.data.image_size = jd.at("image_size").get<int>();
    cfg.data.strides = jd.at("strides").get<std::vector<int>>();
    cfg.data.channels = jd.at("channels").get<int64_t>();
    cfg.data.num_classes = jd.at("num_classes").get<int64_t>();
    cfg.data.max_objects = jd.at("max_objects").get<int>();
    cfg.data.scale_min = jd.at("scale_min").get<double>();
    cfg.data.scale_max = jd.at("scale_max").get<double>();
    cfg.data.noise_std = jd.at("noise_std").get<double>();
    cfg.data.seed = jd.at("seed").get<uint64_t>();
    cfg.train_scenes = jd.at("train_scenes").get<int64_t>();
    cfg.eval_scenes = jd.at("eval_scenes").get<int64_t>();
    cfg.subsample_ratio = jd.at("subsample_ratio").get<double>();

    const json& jt = j.at("train");
    cfg.epochs = jt.at("epochs").get<int>();
    cfg.batch_size = jt.at("batch_size").get<int64_t>();
    cfg.lr = jt.at("lr").get<double>();
    cfg.weight_decay = jt.at("weight_decay").get<double>();
    cfg.lr_drop_epoch = jt.at("lr_drop_epoch").get<int>();
    cfg.lr_drop_factor = jt.at("lr_drop_factor").get<double>();

    const json& jl = j.at("loss");
    cfg.match.cls = jl.at("cls").get<double>();
    cfg.match.l1 = jl.at("l1").get<double>();
    cfg.match.giou = jl.at("giou").get<double>();
    cfg.eos_coef = jl.at("eos_coef").get<double>();

    const json& ja = j.at("augment");
    const std::string mode = ja.at("mode").get<std::string>();
    if (mode == "none")
      cfg.augment.mode = AugmentConfig::Mode::None;
    else if (mode == "repeat")
      cfg.augment.mode = AugmentConfig::Mode::FixedRepeat;
    else if (mode == "ratio")
      cfg.augment.mode = AugmentConfig::Mode::FixedRatio;
    else
      throw ConfigError("augment.mode must be one of none|repeat|ratio");
    cfg.augment.repeat = ja.at("repeat").get<int>();
    cfg.augment.ratio = ja.at("ratio").get<double>();

    cfg.nms_threshold = j.at("eval").at("nms_threshold").get<double>();

    const json& jab = j.at("ablate");
    cfg.ablate_seeds = jab.at("seeds").get<std::vector<uint64_t>>();
    for (const json& cell : jab.at("grid")) {
      for (auto it = cell.begin(); it != cell.end(); ++it)
        if (it.key() != "config_id" && it.key() != "overrides")
          throw ConfigError("unknown key in ablate.grid cell: " + it.key());
      AblateCell c;
      c.config_id = cell.at("config_id").get<std::string>();
      c.overrides = cell.value("overrides", json::object());
      if (c.overrides.contains("ablate"))
        throw ConfigError("ablation overrides must not nest another ablate section");
      cfg.ablate_grid.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse: ") + e.what());
  }

  // derived model fields
  cfg.model.num_levels = static_cast<int>(cfg.data.strides.size());
  cfg.model.in_channels = cfg.data.channels;
  cfg.model.num_classes = cfg.data.num_classes;
  cfg.model.label_aug = cfg.augment.mode != AugmentConfig::Mode::None;

  cfg.raw = j;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + " is not valid JSON");
  return parse_run_config(j);
}

RunConfig derive_cell_config(const RunConfig& base, const AblateCell& cell, uint64_t seed) {
  json j = base.raw;
  j.erase("ablate");  // cells never recurse
  j.merge_patch(cell.overrides);
  j["config_id"] = cell.config_id;
  j["seed"] = seed;
  RunConfig cfg = parse_run_config(j);
  return cfg;
}

}  // namespace dedetr
