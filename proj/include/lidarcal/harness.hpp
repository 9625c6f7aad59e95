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

#ifndef LIDARCAL_HARNESS_HPP
#define LIDARCAL_HARNESS_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lidarcal/error.hpp"
#include "lidarcal/geometry.hpp"
#include "lidarcal/optimizer.hpp"
#include "lidarcal/preprocess.hpp"
#include "lidarcal/registration.hpp"
#include "lidarcal/scene.hpp"
#include "lidarcal/ukf.hpp"

namespace lidarcal {

enum class PoseSource { kUkf, kGroundTruth };

const char* to_string(PoseSource s);
PoseSource pose_source_from_string(const std::string& s);

struct TrajectoryConfig {
  double wheelbase{2.9};
  double speed{2.0};
  double steering_deg{17.0};
  double duration{15.0};
};

struct SensorConfig {
  std::string id;
  Eigen::Vector3d translation{Eigen::Vector3d::Zero()};
  Eigen::Vector3d rpy_deg{Eigen::Vector3d::Zero()};
  LidarConfig lidar;

  RigidTransform mount() const;
};

struct TargetConfig {
  Eigen::Vector3d position{15.0, 5.0, 0.0};
  double yaw_deg{300.0};
  double recline_deg{20.0};
};

struct PreprocessConfig {
  double roi_radius{1.5};
  int ransac_iterations{200};
  double ransac_threshold{0.05};
  double ransac_max_tilt_deg{30.0};
  double voxel_leaf{0.05};
  int sor_k{8};
  double sor_multiplier{2.0};
};

struct TrialConfig {
  std::uint64_t seed{0};
  TrajectoryConfig trajectory;
  double scan_rate{10.0};
  std::vector<SensorConfig> sensors;
  std::string reference_sensor{"L2"};
  TargetConfig target;
  MeasurementNoise noise;
  InjectionRanges injection;
  PoseSource pose_source{PoseSource::kUkf};
  PreprocessConfig preprocess;
  RegistrationParams registration;
  StageOptions optimizer;
  /// Also runs the S2V stage with the translation free, for the
  /// observability check.
  bool evaluate_unpinned{false};

  /// The bundled two-sensor setup.
  static TrialConfig defaults();

  /// Throws Error(kInvalidConfig) when a value is out of range.
  void validate() const;
  int frame_count() const;
  std::vector<double> scan_times() const;
  const SensorConfig& reference() const;
  const SensorConfig& other() const;
};

/// JSON round trip. Missing keys keep their defaults; unknown keys and
/// malformed values throw Error(kInvalidConfig).
TrialConfig parse_config(const std::string& json_text);
std::string config_to_json(const TrialConfig& config);
TrialConfig load_config(const std::filesystem::path& path);
/// 64-bit FNV-1a of the canonical JSON form.
std::uint64_t config_digest(const TrialConfig& config);

/// Ground truth and vehicle poses generated for one trial. Scans are
/// produced on demand by simulate_scan to keep memory flat.
struct SimulatedData {
  std::vector<std::string> sensor_ids;
  std::map<std::string, RigidTransform> true_mounts;
  std::map<std::string, RigidTransform> initial_mounts;
  std::map<std::string, RigidTransform> injected;
  std::vector<TimedPose> true_poses;  // one per frame
  VehiclePoseTrack track;             // poses handed to the pipeline
  MeasurementStreams streams;         // what the pose filter consumes
  SceneGeometry scene;
};

SimulatedData simulate(const TrialConfig& config);

/// Ray-cast scan of sensor `sensor` (index into config.sensors) at `frame`.
LidarScan simulate_scan(const TrialConfig& config, const SimulatedData& data, int frame, std::size_t sensor);

/// Scan in the reference frame after region cropping, ground removal,
/// downsampling and outlier removal. Returns an empty cloud when the scan
/// does not survive.
PointCloud preprocess_scan(const PrealignedCloud& cloud, const TrialConfig& config);

/// Prealigns and preprocesses one scan; std::nullopt when fewer than the
/// membership minimum of points remain.
std::optional<PrealignedCloud> condition_scan(const TrialConfig& config, const LidarScan& scan,
                                              const VehiclePoseTrack& track,
                                              const std::map<std::string, RigidTransform>& initial_mounts);

/// A pipeline error tagged with the stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.code(), stage + ": " + cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct CalibrationOutcome {
  RegistrationResult registration;
  S2SResult s2s;
  S2VResult s2v;
  std::optional<S2VResult> s2v_unpinned;
};

/// Joint registration and both optimization stages on conditioned clouds.
/// Failures are rethrown as Error with the stage name prefixed.
CalibrationOutcome calibrate_clouds(const TrialConfig& config, const std::vector<PrealignedCloud>& clouds,
                                    const VehiclePoseTrack& track,
                                    const std::map<std::string, RigidTransform>& initial_mounts);

struct TrialResult {
  std::uint64_t seed{0};
  std::map<std::string, RigidTransform> injected;  // perturbation per sensor
  RigidTransform s2s_estimate;                     // L1 -> L2
  RigidTransform reference_estimate;               // L2 -> V
  RigidTransform other_estimate;                   // L1 -> V
  TransformResidual s2s;
  TransformResidual s2v_reference;
  TransformResidual s2v_other;
  std::optional<TransformResidual> unpinned_reference;
  std::optional<TransformResidual> unpinned_other;
  std::size_t members{0};
  bool registration_converged{false};
  bool s2s_converged{false};
  bool s2v_converged{false};
  bool converged{false};
  std::string failed_stage;  // empty on success
  std::string message;
  double wall_time{0.0};     // seconds, informational only
};

TrialResult run_trial(const TrialConfig& config);

struct MetricStats {
  std::string metric;
  std::size_t count{0};
  double mean{0.0};
  double median{0.0};
  double std{0.0};
  double min{0.0};
  double max{0.0};
  double q1{0.0};
  double q3{0.0};
  double whisker_low{0.0};
  double whisker_high{0.0};
};

/// Statistics of |values|; quartiles by linear interpolation, whiskers at
/// the most extreme samples within 1.5 IQR of the box.
MetricStats compute_stats(const std::string& metric, std::vector<double> values);

struct CampaignReport {
  std::size_t trials{0};
  std::size_t converged{0};
  std::size_t non_converged{0};
  std::uint64_t config_digest{0};
  std::vector<MetricStats> metrics;

  const MetricStats* find(const std::string& metric) const;
};

struct CampaignResult {
  CampaignReport report;
  std::vector<TrialResult> trials;
};

/// Metric names in reporting order: s2s_*, s2v_<other>_*, s2v_<reference>_*
/// with suffixes dx dy dz dphi dtheta dpsi.
std::vector<std::string> metric_names(const TrialConfig& config);
/// Per-trial values of every metric, in metric_names order.
std::vector<double> metric_values(const TrialResult& trial);

CampaignReport summarize(const TrialConfig& base, const std::vector<TrialResult>& trials);
using TrialCallback = std::function<void(int index, const TrialResult& trial)>;

/// Runs `n` trials with seeds derive_seed(seed, index). `on_trial` is
/// called after each trial finishes.
CampaignResult run_campaign(const TrialConfig& base, int n, std::uint64_t seed, const TrialCallback& on_trial = {});

/// Writes `metric,statistic,value` rows to `path`, the box-plot file next to
/// it (stem + "_box.csv"), and returns the written paths.
std::vector<std::filesystem::path> export_report(const CampaignReport& report, const std::filesystem::path& path);
CampaignReport parse_report(const std::string& csv_text);
CampaignReport read_report(const std::filesystem::path& path);
/// Mean table with columns dx dy dz dphi dtheta dpsi, one row per group.
std::string format_table(const CampaignReport& report);
void write_trials_csv(const std::vector<TrialResult>& trials, const std::filesystem::path& path);

}  // namespace lidarcal

#endif  // LIDARCAL_HARNESS_HPP
