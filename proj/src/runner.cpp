#include "dedetr/runner.hpp"

#include <omp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "dedetr/checkpoint.hpp"
#include "dedetr/config.hpp"
#include "dedetr/error.hpp"
#include "dedetr/rng.hpp"
#include "dedetr/selftest.hpp"
#include "dedetr/train.hpp"

namespace dedetr {

namespace {

namespace fs = std::filesystem;

constexpr uint64_t kSubsampleStream = 0x53554253;  // "SUBS"

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

RunConfig load_or_default(const CliOptions& opt) {
  RunConfig cfg = opt.config_path.empty() ? parse_run_config(nlohmann::json::object())
                                          : load_run_config(opt.config_path);
  if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
  return cfg;
}

std::vector<Scene> make_scenes(const SceneSpec& spec, int64_t first, int64_t count) {
  std::vector<Scene> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) out.push_back(gen_scene(spec, first + i));
  return out;
}

std::vector<Scene> training_scenes(const RunConfig& cfg) {
  std::vector<Scene> train = make_scenes(cfg.data, 0, cfg.train_scenes);
  if (cfg.subsample_ratio < 1.0)
    train = subsample(train, cfg.subsample_ratio, mix_seed(cfg.seed, kSubsampleStream));
  return train;
}

std::vector<Scene> heldout_scenes(const RunConfig& cfg) {
  return make_scenes(cfg.data, cfg.train_scenes, cfg.eval_scenes);
}

void write_metrics_csv(const std::string& path, const RunConfig& cfg, const TrainResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "config_id,seed,epoch,loss_total,loss_cls,loss_l1,loss_giou,ap,ap50,ap75\n";
  for (const EpochRow& row : result.epochs)
    out << cfg.config_id << ',' << cfg.seed << ',' << row.epoch << ',' << num(row.loss.total)
        << ',' << num(row.loss.cls) << ',' << num(row.loss.l1) << ',' << num(row.loss.giou)
        << ',' << num(row.eval.ap) << ',' << num(row.eval.ap50) << ',' << num(row.eval.ap75)
        << '\n';
}

nlohmann::json eval_to_json(const EvalResult& r) {
  return {{"ap", r.ap},
          {"ap50", r.ap50},
          {"ap75", r.ap75},
          {"per_class_ap", r.per_class_ap},
          {"num_images", r.num_images},
          {"num_gt", r.num_gt},
          {"num_dets", r.num_dets}};
}

int worker_count(size_t jobs) {
  int cap = omp_get_max_threads();
  if (const char* env = std::getenv("DEDETR_THREADS")) {
    const int parsed = std::atoi(env);
    if (parsed >= 1) cap = parsed;
  }
  return static_cast<int>(std::min<size_t>(jobs, static_cast<size_t>(cap)));
}

}  // namespace

// The canonical four-cell grid: baseline dense decoder, then sparse sampling,
// multi-scale sampling, and label augmentation added one at a time.
std::vector<AblateCell> default_ablation_grid() {
  auto cell = [](const char* id, bool sf, bool ms, const char* aug) {
    AblateCell c;
    c.config_id = id;
    c.overrides = {{"model", {{"sparse_sampling", sf}, {"multiscale", ms}}},
                   {"augment", {{"mode", aug}}}};
    return c;
  };
  return {cell("baseline", false, false, "none"), cell("sf", true, false, "none"),
          cell("sf_ms", true, true, "none"), cell("sf_ms_la", true, true, "repeat")};
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  if (!text.empty() && text.back() == ',') throw ConfigError("seed list ends with a comma");
  std::vector<uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    size_t used = 0;
    uint64_t value = 0;
    try {
      value = std::stoull(part, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad seed list entry: '" + part + "'");
    }
    if (used != part.size()) throw ConfigError("bad seed list entry: '" + part + "'");
    seeds.push_back(value);
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  return seeds;
}

std::vector<double> parse_sweep(const std::string& text) {
  double lo = 0, hi = 0, step = 0;
  char tail = 0;
  if (std::sscanf(text.c_str(), "%lf:%lf:%lf%c", &lo, &hi, &step, &tail) != 3)
    throw ConfigError("sweep must be lo:hi:step, got '" + text + "'");
  if (!(lo > 0.0) || lo > 1.0 || hi < lo || !(step > 0.0))
    throw ConfigError("sweep bounds must satisfy 0 < lo <= hi <= 1 with step > 0");
  std::vector<double> out;
  for (double t = lo; t <= hi + 1e-9; t += step) out.push_back(std::min(t, 1.0));
  return out;
}

int cmd_train(const CliOptions& opt) {
  RunConfig cfg = load_or_default(opt);
  fs::create_directories(cfg.out_dir);

  std::cout << "config " << cfg.config_id << " seed " << cfg.seed << ": " << cfg.train_scenes
            << " train scenes, " << cfg.eval_scenes << " eval scenes, " << cfg.epochs
            << " epochs\n";
  const std::vector<Scene> train = training_scenes(cfg);
  const std::vector<Scene> heldout = heldout_scenes(cfg);

  Model model(cfg.model, cfg.seed);
  std::vector<std::pair<std::string, Tensor>> best;
  const TrainResult result = train_model(model, cfg, train, heldout, &std::cout, &best);

  write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), cfg, result);
  save_checkpoint((fs::path(cfg.out_dir) / "final.ckpt").string(), cfg.raw, model.parameters());
  if (!best.empty())
    save_checkpoint((fs::path(cfg.out_dir) / "best.ckpt").string(), cfg.raw, best);

  if (!result.epochs.empty()) {
    const EpochRow& last = result.epochs.back();
    std::cout << "final loss " << num(last.loss.total) << " ap " << num(last.eval.ap) << " ap50 "
              << num(last.eval.ap50) << "; best epoch " << result.best_epoch << " ap "
              << num(result.best_ap) << "\n";
  }
  std::cout << "wrote " << cfg.out_dir << "/metrics.csv, final.ckpt"
            << (best.empty() ? "" : ", best.ckpt") << "\n";
  return 0;
}

int cmd_eval(const CliOptions& opt) {
  if (opt.checkpoint_path.empty()) throw ConfigError("eval needs --checkpoint");
  const Checkpoint ck = load_checkpoint(opt.checkpoint_path);
  RunConfig cfg = opt.config_path.empty() ? parse_run_config(ck.config)
                                          : load_run_config(opt.config_path);
  if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
  fs::create_directories(cfg.out_dir);

  Model model(cfg.model, cfg.seed);
  auto params = model.parameters();
  restore_params(ck, params);

  const std::vector<Scene> heldout = heldout_scenes(cfg);
  const EvalResult result = eval_model(model, heldout, cfg.nms_threshold);
  nlohmann::json report = eval_to_json(result);
  report["config_id"] = cfg.config_id;
  report["seed"] = cfg.seed;
  {
    std::ofstream out(fs::path(cfg.out_dir) / "eval.json", std::ios::binary);
    if (!out) throw IoError("cannot write eval.json under " + cfg.out_dir);
    out << report.dump(2) << "\n";
  }
  std::cout << "ap " << num(result.ap) << " ap50 " << num(result.ap50) << " ap75 "
            << num(result.ap75) << " over " << result.num_images << " scenes\n";

  if (!opt.nms_sweep.empty()) {
    std::vector<LabelSet> labels;
    for (const Scene& s : heldout) labels.push_back(s.labels);
    std::ofstream out(fs::path(cfg.out_dir) / "nms_sweep.csv", std::ios::binary);
    if (!out) throw IoError("cannot write nms_sweep.csv under " + cfg.out_dir);
    out << "threshold,ap,ap50,ap75\n";
    for (double thr : parse_sweep(opt.nms_sweep)) {
      const auto dets = predict(model, heldout, true, thr);
      const EvalResult r = evaluate(dets, labels, cfg.model.num_classes);
      out << num(thr) << ',' << num(r.ap) << ',' << num(r.ap50) << ',' << num(r.ap75) << '\n';
    }
    std::cout << "wrote " << cfg.out_dir << "/nms_sweep.csv\n";
  }
  return 0;
}

int cmd_ablate(const CliOptions& opt) {
  const RunConfig base = load_or_default(opt);
  fs::create_directories(base.out_dir);

  const std::vector<AblateCell> grid =
      base.ablate_grid.empty() ? default_ablation_grid() : base.ablate_grid;
  const std::vector<uint64_t> seeds = !opt.seeds.empty()       ? opt.seeds
                                      : !base.ablate_seeds.empty() ? base.ablate_seeds
                                                                   : std::vector<uint64_t>{1};

  struct Job {
    size_t cell;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (size_t c = 0; c < grid.size(); ++c)
    for (uint64_t s : seeds) jobs.push_back({c, s});

  // Per-cell flags for the report, read once from the derived configs.
  struct Flags {
    int sf, ms, la;
  };
  std::vector<Flags> flags(grid.size());
  for (size_t c = 0; c < grid.size(); ++c) {
    const RunConfig cc = derive_cell_config(base, grid[c], seeds.front());
    flags[c] = {cc.model.sparse_sampling ? 1 : 0, cc.model.multiscale ? 1 : 0,
                cc.model.label_aug ? 1 : 0};
  }

  const int workers = worker_count(jobs.size());
  std::cout << grid.size() << " configs x " << seeds.size() << " seeds = " << jobs.size()
            << " runs on " << workers << (workers == 1 ? " worker\n" : " workers\n");

  std::vector<EvalResult> results(jobs.size());
  std::string first_error;
#pragma omp parallel for num_threads(workers) schedule(dynamic, 1)
  for (int64_t j = 0; j < static_cast<int64_t>(jobs.size()); ++j) {
    try {
      const Job& job = jobs[static_cast<size_t>(j)];
      const RunConfig cc = derive_cell_config(base, grid[job.cell], job.seed);
      const std::vector<Scene> train = training_scenes(cc);
      const std::vector<Scene> heldout = heldout_scenes(cc);
      Model model(cc.model, cc.seed);
      const TrainResult tr = train_model(model, cc, train, heldout, nullptr, nullptr);
      results[static_cast<size_t>(j)] = tr.epochs.back().eval;
#pragma omp critical
      std::cout << cc.config_id << " seed " << job.seed << ": ap " << num(tr.epochs.back().eval.ap)
                << " ap50 " << num(tr.epochs.back().eval.ap50) << "\n";
    } catch (const std::exception& e) {
#pragma omp critical
      if (first_error.empty()) first_error = e.what();
    }
  }
  if (!first_error.empty()) throw NumericError("ablation run failed: " + first_error);

  std::ofstream out(fs::path(base.out_dir) / "ablation.csv", std::ios::binary);
  if (!out) throw IoError("cannot write ablation.csv under " + base.out_dir);
  out << "config_id,sf,ms,la,seed,ap,ap50,ap75\n";
  std::map<std::string, std::vector<EvalResult>> by_config;
  for (size_t j = 0; j < jobs.size(); ++j) {
    const Job& job = jobs[j];
    const std::string& id = grid[job.cell].config_id;
    const Flags& f = flags[job.cell];
    const EvalResult& r = results[j];
    out << id << ',' << f.sf << ',' << f.ms << ',' << f.la << ',' << job.seed << ',' << num(r.ap)
        << ',' << num(r.ap50) << ',' << num(r.ap75) << '\n';
    by_config[id].push_back(r);
  }
  out.close();

  const std::vector<AblationRow> rows = ablation_report(by_config);
  nlohmann::json summary = nlohmann::json::array();
  for (const AblationRow& r : rows)
    summary.push_back({{"config_id", r.config_id},
                       {"runs", r.runs},
                       {"ap_mean", r.ap_mean},
                       {"ap_std", r.ap_std},
                       {"ap50_mean", r.ap50_mean},
                       {"ap50_std", r.ap50_std},
                       {"ap75_mean", r.ap75_mean},
                       {"ap75_std", r.ap75_std}});
  {
    std::ofstream sf(fs::path(base.out_dir) / "ablation_summary.json", std::ios::binary);
    if (!sf) throw IoError("cannot write ablation_summary.json under " + base.out_dir);
    sf << summary.dump(2) << "\n";
  }
  std::cout << format_ablation_table(rows);
  std::cout << "wrote " << base.out_dir << "/ablation.csv, ablation_summary.json\n";
  return 0;
}

int cmd_selftest(const CliOptions&) { return selftest::run_selftest(std::cout); }

int run_command(const std::string& verb, const CliOptions& opt) {
  try {
    if (verb == "train") return cmd_train(opt);
    if (verb == "eval") return cmd_eval(opt);
    if (verb == "ablate") return cmd_ablate(opt);
    if (verb == "selftest") return cmd_selftest(opt);
    std::cerr << "unknown command: " << verb << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace dedetr
