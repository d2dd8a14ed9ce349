#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ov3d/config.hpp"

namespace ov3d {

/// Exit codes shared by every command.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitDivergence = 3;

/// Dataset for a config: generated from (scene, data, train.seed).
Dataset make_dataset(const Config& cfg);

struct RatioRow {
  double ratio = 1.0;
  std::uint64_t seed = 0;
  double ar25 = 0.0;
  double map25 = 0.0;
};

/// Phase-1 training at each label ratio, seen-class metrics on the test
/// scenes. Phase-1 epochs are scaled by 1/ratio so every ratio gets the same
/// number of optimizer steps.
std::vector<RatioRow> study_label_ratio(const Config& cfg, const std::vector<double>& ratios,
                                        const std::vector<std::uint64_t>& seeds);
/// Header: ratio,seed,ar25,map25
std::string ratio_csv(const std::vector<RatioRow>& rows);

struct IterationRow {
  int refreshes = 0;
  int epoch = 0;
  double map25 = 0.0;
  double ar25 = 0.0;
};

/// Unseen-class metrics on the test scenes after phase 1 (zero refreshes)
/// and at the end of every pseudo-label period of phase 2.
std::vector<IterationRow> study_pseudo_iterations(const Config& cfg, const Dataset& data);
/// Header: refreshes,epoch,map25,ar25
std::string iteration_csv(const std::vector<IterationRow>& rows);

/// Entry point of the `ov3d` executable.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ov3d
