#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dedetr/config.hpp"

namespace dedetr {

struct CliOptions {
  std::string config_path;      // empty: built-in defaults
  std::string checkpoint_path;  // required by eval
  std::string out_dir;          // empty: the config's out_dir
  std::vector<uint64_t> seeds;  // ablate only; empty: the config's seed list
  std::string nms_sweep;        // "lo:hi:step", empty for none
};

// The four-cell grid used when a config supplies none: baseline, then sparse
// sampling, multi-scale sampling, and label augmentation added one at a time.
std::vector<AblateCell> default_ablation_grid();

// "1,2,3" -> {1, 2, 3}; throws ConfigError on anything else.
std::vector<uint64_t> parse_seed_list(const std::string& text);

// "0.3:0.9:0.1" -> {0.3, 0.4, ..., 0.9}; throws ConfigError on anything else.
std::vector<double> parse_sweep(const std::string& text);

int cmd_train(const CliOptions& opt);
int cmd_eval(const CliOptions& opt);
int cmd_ablate(const CliOptions& opt);
int cmd_selftest(const CliOptions& opt);

// Dispatches a verb and maps library exceptions to process exit codes:
// 2 invalid configuration, 3 numeric failure while training, 4 shape or
// contract violation, 5 unreadable checkpoint. Self-test failures return 1.
int run_command(const std::string& verb, const CliOptions& opt);

}  // namespace dedetr
