// Copyright 2026 The lidarcal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef LIDARCAL_CLI_HPP
#define LIDARCAL_CLI_HPP

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "lidarcal/harness.hpp"

namespace lidarcal::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfigError = 1,
  kExitPipelineFailure = 2,
  kExitThresholdViolation = 3,
};

/// Name of the environment variable holding the default output directory.
inline constexpr const char* kOutputDirEnv = "LIDARCAL_OUT";
inline constexpr const char* kDefaultOutputDir = "lidarcal_out";

/// One upper bound on a report statistic. `metric` is either a metric name
/// such as "s2s_dphi" (with `statistic` one of count, mean, median, std,
/// min, max, q1, q3, whisker_low, whisker_high) or "campaign" (with
/// `statistic` one of trials, converged, non_converged).
struct Threshold {
  std::string metric;
  std::string statistic;
  double max{0.0};
};

/// Parses a JSON array of {"metric", "statistic", "max"} objects. Throws
/// Error(kInvalidConfig) on malformed input.
std::vector<Threshold> parse_thresholds(const std::string& json_text);
std::vector<Threshold> load_thresholds(const std::filesystem::path& path);

/// Human-readable descriptions of every violated threshold; empty when all
/// hold. Unknown metrics or statistics throw Error(kInvalidConfig).
std::vector<std::string> check_thresholds(const CampaignReport& report, const std::vector<Threshold>& thresholds);

/// Files describing one simulated run, readable back by read_dataset.
struct Dataset {
  TrialConfig config;
  std::map<std::string, RigidTransform> initial_mounts;
  std::map<std::string, RigidTransform> true_mounts;  // empty when unknown
  VehiclePoseTrack track;
  std::vector<LidarScan> scans;  // sensor frame
};

/// Writes config.json, extrinsics.csv, poses.csv, ground_truth_poses.csv,
/// the measurement streams under streams/ and one xyz file per scan under
/// scans/. Scans are cropped to the points that land within `crop_radius`
/// of the target axis under the initial extrinsics.
void write_dataset(const std::filesystem::path& dir, const TrialConfig& config, const SimulatedData& data,
                   double crop_radius);
Dataset read_dataset(const std::filesystem::path& dir);

/// Entry point of the `lidarcal` executable.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lidarcal::cli

#endif  // LIDARCAL_CLI_HPP
