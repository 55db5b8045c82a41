#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "dedetr/error.hpp"
#include "dedetr/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"detection transformer with sparse RoI sampling and label augmentation,\n"
               "trained end to end on procedurally generated scenes"};
  app.require_subcommand(1);

  dedetr::CliOptions opt;
  std::string seeds_text, sweep_text;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON run configuration (defaults when omitted)");
    sub->add_option("--out", opt.out_dir, "output directory (default: the config's out_dir)");
  };

  CLI::App* train = app.add_subcommand("train", "train a model; writes metrics.csv and checkpoints");
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out scenes");
  add_common(eval);
  eval->add_option("--checkpoint", opt.checkpoint_path, "checkpoint to evaluate")->required();
  eval->add_option("--nms-sweep", sweep_text, "also sweep NMS thresholds, lo:hi:step");

  CLI::App* ablate = app.add_subcommand("ablate", "train every grid cell across seeds");
  add_common(ablate);
  ablate->add_option("--seeds", seeds_text, "comma-separated seeds (default: the config's list)");

  app.add_subcommand("selftest", "run the internal consistency checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!seeds_text.empty()) opt.seeds = dedetr::parse_seed_list(seeds_text);
  } catch (const dedetr::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  }
  opt.nms_sweep = sweep_text;

  const std::string verb = app.get_subcommands().front()->get_name();
  return dedetr::run_command(verb, opt);
}
