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

#include "lidarcal/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lidarcal/rng.hpp"

namespace lidarcal {

using nlohmann::json;

namespace {

// Seed stream identifiers. Streams are disjoint ranges so that adding
// frames or sensors never shifts another stream.
constexpr std::uint64_t kStreamMeasurements = 1;
constexpr std::uint64_t kStreamRegistration = 2;
constexpr std::uint64_t kStreamInjection = 100;
constexpr std::uint64_t kStreamScan = 1'000'000;
constexpr std::uint64_t kStreamRansac = 2'000'000;

std::uint64_t scan_stream(int frame, std::size_t sensor) {
  return static_cast<std::uint64_t>(frame) * 64 + sensor;
}

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); }

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) config_error(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& item : j.items())
    if (!ok.count(item.key())) config_error("unknown key '" + item.key() + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    config_error("bad value for '" + std::string(key) + "' in " + where);
  }
}

void read_vec3(const json& j, const char* key, Eigen::Vector3d& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 3) config_error("'" + std::string(key) + "' in " + where + " must be a 3-array");
  for (int i = 0; i < 3; ++i) {
    if (!v[static_cast<std::size_t>(i)].is_number()) config_error("'" + std::string(key) + "' must hold numbers");
    out[i] = v[static_cast<std::size_t>(i)].get<double>();
  }
}

json vec3(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

json lidar_to_json(const LidarConfig& l) {
  return {{"horizontal_fov_deg", l.horizontal_fov_deg}, {"vertical_fov_deg", l.vertical_fov_deg},
          {"max_range", l.max_range},                   {"channels", l.channels},
          {"azimuth_resolution_deg", l.azimuth_resolution_deg}, {"range_noise_sigma", l.range_noise_sigma},
          {"scan_rate", l.scan_rate}};
}

LidarConfig lidar_from_json(const json& j, LidarConfig l) {
  const std::string w = "lidar";
  check_keys(j, w, {"horizontal_fov_deg", "vertical_fov_deg", "max_range", "channels", "azimuth_resolution_deg",
                    "range_noise_sigma", "scan_rate"});
  read(j, "horizontal_fov_deg", l.horizontal_fov_deg, w);
  read(j, "vertical_fov_deg", l.vertical_fov_deg, w);
  read(j, "max_range", l.max_range, w);
  read(j, "channels", l.channels, w);
  read(j, "azimuth_resolution_deg", l.azimuth_resolution_deg, w);
  read(j, "range_noise_sigma", l.range_noise_sigma, w);
  read(j, "scan_rate", l.scan_rate, w);
  return l;
}

json to_json_value(const TrialConfig& c) {
  json sensors = json::array();
  for (const auto& s : c.sensors)
    sensors.push_back({{"id", s.id}, {"translation", vec3(s.translation)}, {"rpy_deg", vec3(s.rpy_deg)},
                       {"lidar", lidar_to_json(s.lidar)}});
  const auto& n = c.noise;
  const auto& r = c.registration;
  const auto& p = c.preprocess;
  return {
      {"seed", c.seed},
      {"trajectory",
       {{"wheelbase", c.trajectory.wheelbase},
        {"speed", c.trajectory.speed},
        {"steering_deg", c.trajectory.steering_deg},
        {"duration", c.trajectory.duration}}},
      {"scan_rate", c.scan_rate},
      {"reference_sensor", c.reference_sensor},
      {"sensors", sensors},
      {"target",
       {{"position", vec3(c.target.position)},
        {"yaw_deg", c.target.yaw_deg},
        {"recline_deg", c.target.recline_deg}}},
      {"noise",
       {{"accel_sigma", n.accel_sigma},
        {"gyro_sigma", n.gyro_sigma},
        {"gps_latlon_sigma_deg", n.gps_latlon_sigma_deg},
        {"gps_alt_sigma", n.gps_alt_sigma},
        {"orientation_sigma", n.orientation_sigma},
        {"velocity_sigma", n.velocity_sigma},
        {"imu_rate", n.imu_rate},
        {"gps_rate", n.gps_rate},
        {"orientation_rate", n.orientation_rate},
        {"velocity_rate", n.velocity_rate},
        {"origin", json::array({n.frame.origin_lat_deg, n.frame.origin_lon_deg, n.frame.origin_alt})}}},
      {"injection", {{"translation", c.injection.translation}, {"rotation_deg", rad2deg(c.injection.rotation)}}},
      {"pose_source", to_string(c.pose_source)},
      {"preprocess",
       {{"roi_radius", p.roi_radius},
        {"ransac_iterations", p.ransac_iterations},
        {"ransac_threshold", p.ransac_threshold},
        {"ransac_max_tilt_deg", p.ransac_max_tilt_deg},
        {"voxel_leaf", p.voxel_leaf},
        {"sor_k", p.sor_k},
        {"sor_multiplier", p.sor_multiplier}}},
      {"registration",
       {{"components", r.joint.components},
        {"max_iterations", r.joint.max_iterations},
        {"tolerance", r.joint.tolerance},
        {"outlier_weight", r.joint.outlier_weight},
        {"initial_sigma", r.joint.initial_sigma},
        {"initial_sigma_scale", r.joint.initial_sigma_scale},
        {"min_variance", r.joint.min_variance},
        {"anneal_rate", r.joint.anneal_rate},
        {"refine_components", r.joint.refine_components},
        {"refine_initial_sigma", r.joint.refine_initial_sigma},
        {"coarse_translation_only", r.joint.coarse_translation_only},
        {"full_covariance", r.joint.full_covariance},
        {"min_points", r.min_points},
        {"shape_weight_fraction", r.shape_weight_fraction}}},
      {"optimizer",
       {{"k", c.optimizer.k},
        {"xtol", c.optimizer.powell.xtol},
        {"ftol", c.optimizer.powell.ftol},
        {"max_iterations", c.optimizer.powell.max_iterations},
        {"initial_step", c.optimizer.powell.initial_step}}},
      {"evaluate_unpinned", c.evaluate_unpinned},
  };
}

TrialConfig from_json_value(const json& j) {
  TrialConfig c = TrialConfig::defaults();
  check_keys(j, "config",
             {"seed", "trajectory", "scan_rate", "reference_sensor", "sensors", "target", "noise", "injection",
              "pose_source", "preprocess", "registration", "optimizer", "evaluate_unpinned"});
  read(j, "seed", c.seed, "config");
  read(j, "scan_rate", c.scan_rate, "config");
  read(j, "reference_sensor", c.reference_sensor, "config");
  read(j, "evaluate_unpinned", c.evaluate_unpinned, "config");
  if (j.contains("trajectory")) {
    const json& t = j.at("trajectory");
    check_keys(t, "trajectory", {"wheelbase", "speed", "steering_deg", "duration"});
    read(t, "wheelbase", c.trajectory.wheelbase, "trajectory");
    read(t, "speed", c.trajectory.speed, "trajectory");
    read(t, "steering_deg", c.trajectory.steering_deg, "trajectory");
    read(t, "duration", c.trajectory.duration, "trajectory");
  }
  if (j.contains("sensors")) {
    const json& arr = j.at("sensors");
    if (!arr.is_array()) config_error("'sensors' must be an array");
    c.sensors.clear();
    for (const auto& s : arr) {
      check_keys(s, "sensor", {"id", "translation", "rpy_deg", "lidar"});
      SensorConfig sc;
      read(s, "id", sc.id, "sensor");
      read_vec3(s, "translation", sc.translation, "sensor");
      read_vec3(s, "rpy_deg", sc.rpy_deg, "sensor");
      if (s.contains("lidar")) sc.lidar = lidar_from_json(s.at("lidar"), sc.lidar);
      c.sensors.push_back(sc);
    }
  }
  if (j.contains("target")) {
    const json& t = j.at("target");
    check_keys(t, "target", {"position", "yaw_deg", "recline_deg"});
    read_vec3(t, "position", c.target.position, "target");
    read(t, "yaw_deg", c.target.yaw_deg, "target");
    read(t, "recline_deg", c.target.recline_deg, "target");
  }
  if (j.contains("noise")) {
    const json& n = j.at("noise");
    const std::string w = "noise";
    check_keys(n, w, {"accel_sigma", "gyro_sigma", "gps_latlon_sigma_deg", "gps_alt_sigma", "orientation_sigma",
                      "velocity_sigma", "imu_rate", "gps_rate", "orientation_rate", "velocity_rate", "origin"});
    read(n, "accel_sigma", c.noise.accel_sigma, w);
    read(n, "gyro_sigma", c.noise.gyro_sigma, w);
    read(n, "gps_latlon_sigma_deg", c.noise.gps_latlon_sigma_deg, w);
    read(n, "gps_alt_sigma", c.noise.gps_alt_sigma, w);
    read(n, "orientation_sigma", c.noise.orientation_sigma, w);
    read(n, "velocity_sigma", c.noise.velocity_sigma, w);
    read(n, "imu_rate", c.noise.imu_rate, w);
    read(n, "gps_rate", c.noise.gps_rate, w);
    read(n, "orientation_rate", c.noise.orientation_rate, w);
    read(n, "velocity_rate", c.noise.velocity_rate, w);
    Eigen::Vector3d origin(c.noise.frame.origin_lat_deg, c.noise.frame.origin_lon_deg, c.noise.frame.origin_alt);
    read_vec3(n, "origin", origin, w);
    c.noise.frame.origin_lat_deg = origin.x();
    c.noise.frame.origin_lon_deg = origin.y();
    c.noise.frame.origin_alt = origin.z();
  }
  if (j.contains("injection")) {
    const json& in = j.at("injection");
    check_keys(in, "injection", {"translation", "rotation_deg"});
    read(in, "translation", c.injection.translation, "injection");
    double rot = rad2deg(c.injection.rotation);
    read(in, "rotation_deg", rot, "injection");
    c.injection.rotation = deg2rad(rot);
  }
  if (j.contains("pose_source")) {
    std::string s;
    read(j, "pose_source", s, "config");
    c.pose_source = pose_source_from_string(s);
  }
  if (j.contains("preprocess")) {
    const json& p = j.at("preprocess");
    const std::string w = "preprocess";
    check_keys(p, w, {"roi_radius", "ransac_iterations", "ransac_threshold", "ransac_max_tilt_deg", "voxel_leaf",
                      "sor_k", "sor_multiplier"});
    read(p, "roi_radius", c.preprocess.roi_radius, w);
    read(p, "ransac_iterations", c.preprocess.ransac_iterations, w);
    read(p, "ransac_threshold", c.preprocess.ransac_threshold, w);
    read(p, "ransac_max_tilt_deg", c.preprocess.ransac_max_tilt_deg, w);
    read(p, "voxel_leaf", c.preprocess.voxel_leaf, w);
    read(p, "sor_k", c.preprocess.sor_k, w);
    read(p, "sor_multiplier", c.preprocess.sor_multiplier, w);
  }
  if (j.contains("registration")) {
    const json& r = j.at("registration");
    const std::string w = "registration";
    check_keys(r, w, {"components", "max_iterations", "tolerance", "outlier_weight", "initial_sigma",
                      "initial_sigma_scale", "min_variance", "anneal_rate", "refine_components",
                      "refine_initial_sigma", "coarse_translation_only", "full_covariance", "min_points", "shape_weight_fraction"});
    read(r, "components", c.registration.joint.components, w);
    read(r, "max_iterations", c.registration.joint.max_iterations, w);
    read(r, "tolerance", c.registration.joint.tolerance, w);
    read(r, "outlier_weight", c.registration.joint.outlier_weight, w);
    read(r, "initial_sigma", c.registration.joint.initial_sigma, w);
    read(r, "initial_sigma_scale", c.registration.joint.initial_sigma_scale, w);
    read(r, "min_variance", c.registration.joint.min_variance, w);
    read(r, "anneal_rate", c.registration.joint.anneal_rate, w);
    read(r, "refine_components", c.registration.joint.refine_components, w);
    read(r, "refine_initial_sigma", c.registration.joint.refine_initial_sigma, w);
    read(r, "coarse_translation_only", c.registration.joint.coarse_translation_only, w);
    read(r, "full_covariance", c.registration.joint.full_covariance, w);
    read(r, "min_points", c.registration.min_points, w);
    read(r, "shape_weight_fraction", c.registration.shape_weight_fraction, w);
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    const std::string w = "optimizer";
    check_keys(o, w, {"k", "xtol", "ftol", "max_iterations", "initial_step"});
    read(o, "k", c.optimizer.k, w);
    read(o, "xtol", c.optimizer.powell.xtol, w);
    read(o, "ftol", c.optimizer.powell.ftol, w);
    read(o, "max_iterations", c.optimizer.powell.max_iterations, w);
    read(o, "initial_step", c.optimizer.powell.initial_step, w);
  }
  c.validate();
  return c;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

const char* to_string(PoseSource s) { return s == PoseSource::kUkf ? "ukf" : "ground-truth"; }

PoseSource pose_source_from_string(const std::string& s) {
  if (s == "ukf") return PoseSource::kUkf;
  if (s == "ground-truth") return PoseSource::kGroundTruth;
  throw Error(ErrorCode::kInvalidConfig, "pose source must be 'ukf' or 'ground-truth', got '" + s + "'");
}

RigidTransform SensorConfig::mount() const {
  return RigidTransform::FromEuler({deg2rad(rpy_deg.x()), deg2rad(rpy_deg.y()), deg2rad(rpy_deg.z())}, translation);
}

TrialConfig TrialConfig::defaults() {
  TrialConfig c;
  // Both sensors tilt 10 degrees towards the ground; the rear one also
  // faces backwards.
  SensorConfig front{"L1", {2.0, 0.0, 2.0}, {0.0, 10.0, 0.0}, {}};
  SensorConfig rear{"L2", {-0.4, 0.0, 2.0}, {0.0, 10.0, 180.0}, {}};
  c.sensors = {front, rear};
  // A translation-only pass with a few wide components pulls the clouds
  // together before a dense rigid pass refines them.
  auto& j = c.registration.joint;
  j.components = 100;
  j.max_iterations = 150;
  j.initial_sigma = 0.5;
  j.anneal_rate = 0.85;
  j.coarse_translation_only = true;
  j.refine_components = 1000;
  j.refine_initial_sigma = 0.02;
  // Pose noise leaves a slightly rough cost floor; a tighter tolerance
  // only spends iterations there.
  c.optimizer.powell.ftol = 1e-7;
  return c;
}

void TrialConfig::validate() const {
  if (!(trajectory.wheelbase > 0.0)) config_error("trajectory.wheelbase must be > 0");
  if (!(trajectory.speed > 0.0)) config_error("trajectory.speed must be > 0");
  if (!(std::abs(trajectory.steering_deg) < 80.0)) config_error("trajectory.steering_deg must be within +-80");
  if (!(trajectory.duration > 0.0)) config_error("trajectory.duration must be > 0");
  if (!(scan_rate > 0.0)) config_error("scan_rate must be > 0");
  if (frame_count() < 4) config_error("at least 4 frames are required");
  if (sensors.size() != 2) config_error("exactly two sensors are supported");
  if (sensors[0].id == sensors[1].id) config_error("sensor ids must be unique");
  for (const auto& s : sensors) {
    if (s.id.empty()) config_error("sensor id must not be empty");
    try {
      s.lidar.validate();
    } catch (const Error& e) {
      config_error("sensor '" + s.id + "': " + e.what());
    }
  }
  if (sensors[0].id != reference_sensor && sensors[1].id != reference_sensor)
    config_error("reference_sensor '" + reference_sensor + "' is not a configured sensor");
  if (!(injection.translation >= 0.0) || !(injection.rotation >= 0.0))
    config_error("injection ranges must be non-negative");
  const auto& n = noise;
  for (double v : {n.accel_sigma, n.gyro_sigma, n.gps_latlon_sigma_deg, n.gps_alt_sigma, n.orientation_sigma,
                   n.velocity_sigma})
    if (!(v >= 0.0)) config_error("noise sigmas must be non-negative");
  for (double v : {n.imu_rate, n.gps_rate, n.orientation_rate, n.velocity_rate})
    if (!(v > 0.0)) config_error("measurement rates must be > 0");
  const auto& p = preprocess;
  if (!(p.roi_radius > 0.0)) config_error("preprocess.roi_radius must be > 0");
  if (p.ransac_iterations < 1) config_error("preprocess.ransac_iterations must be >= 1");
  if (!(p.ransac_threshold > 0.0)) config_error("preprocess.ransac_threshold must be > 0");
  if (!(p.voxel_leaf > 0.0)) config_error("preprocess.voxel_leaf must be > 0");
  if (p.sor_k < 1) config_error("preprocess.sor_k must be >= 1");
  const auto& r = registration;
  if (r.joint.components < 1) config_error("registration.components must be >= 1");
  if (r.joint.max_iterations < 1) config_error("registration.max_iterations must be >= 1");
  if (!(r.joint.outlier_weight >= 0.0 && r.joint.outlier_weight < 1.0))
    config_error("registration.outlier_weight must be in [0, 1)");
  if (!(r.joint.min_variance > 0.0)) config_error("registration.min_variance must be > 0");
  if (!(r.joint.anneal_rate >= 0.0 && r.joint.anneal_rate < 1.0))
    config_error("registration.anneal_rate must be in [0, 1)");
  if (r.joint.refine_components < 0) config_error("registration.refine_components must be >= 0");
  if (r.joint.coarse_translation_only && r.joint.refine_components == 0)
    config_error("registration.coarse_translation_only needs refine_components > 0");
  if (r.min_points < 4) config_error("registration.min_points must be >= 4");
  if (!(optimizer.k >= 0.0 && optimizer.k < 50.0)) config_error("optimizer.k must be in [0, 50)");
  if (optimizer.powell.max_iterations < 1) config_error("optimizer.max_iterations must be >= 1");
  if (!(optimizer.powell.initial_step > 0.0)) config_error("optimizer.initial_step must be > 0");
}

int TrialConfig::frame_count() const {
  return static_cast<int>(std::floor(trajectory.duration * scan_rate + 1e-9));
}

std::vector<double> TrialConfig::scan_times() const {
  std::vector<double> t(static_cast<std::size_t>(frame_count()));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i) / scan_rate;
  return t;
}

const SensorConfig& TrialConfig::reference() const {
  return sensors[0].id == reference_sensor ? sensors[0] : sensors[1];
}

const SensorConfig& TrialConfig::other() const {
  return sensors[0].id == reference_sensor ? sensors[1] : sensors[0];
}

TrialConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("config is not valid JSON: ") + e.what());
  }
  return from_json_value(j);
}

std::string config_to_json(const TrialConfig& config) { return to_json_value(config).dump(2) + "\n"; }

TrialConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kInvalidConfig, "cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::uint64_t config_digest(const TrialConfig& config) {
  const std::string text = to_json_value(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SimulatedData simulate(const TrialConfig& config) {
  config.validate();
  SimulatedData d;
  for (std::size_t s = 0; s < config.sensors.size(); ++s) {
    const auto& sc = config.sensors[s];
    const RigidTransform truth = sc.mount();
    const RigidTransform err = inject_calibration_error(derive_seed(config.seed, kStreamInjection + s), config.injection);
    d.sensor_ids.push_back(sc.id);
    d.true_mounts[sc.id] = truth;
    d.injected[sc.id] = err;
    d.initial_mounts[sc.id] = truth * err;
  }

  const Trajectory traj(config.trajectory.wheelbase, config.trajectory.speed,
                        deg2rad(config.trajectory.steering_deg));
  const std::vector<double> times = config.scan_times();
  for (double t : times) d.true_poses.push_back({t, traj.pose_at(t)});

  d.streams = simulate_measurements(traj, config.trajectory.duration, config.noise,
                                    derive_seed(config.seed, kStreamMeasurements));
  if (config.pose_source == PoseSource::kGroundTruth) {
    for (const auto& p : d.true_poses) d.track.poses.push_back({p.time, p.pose, StateCovariance::Zero()});
  } else {
    d.track = estimate_poses(d.streams, times, UkfParams::from_noise(config.noise));
  }

  d.scene.target = make_l_target(RigidTransform::FromEuler({0.0, 0.0, deg2rad(config.target.yaw_deg)},
                                                           config.target.position),
                                 deg2rad(config.target.recline_deg));
  return d;
}

LidarScan simulate_scan(const TrialConfig& config, const SimulatedData& data, int frame, std::size_t sensor) {
  const auto& sc = config.sensors.at(sensor);
  const auto& pose = data.true_poses.at(static_cast<std::size_t>(frame));
  LidarScan scan = raycast_scan(pose.pose * data.true_mounts.at(sc.id), sc.lidar, data.scene,
                                derive_seed(config.seed, kStreamScan + scan_stream(frame, sensor)));
  scan.sensor_id = sc.id;
  scan.frame_index = frame;
  scan.timestamp = pose.time;
  return scan;
}

PointCloud preprocess_scan(const PrealignedCloud& cloud, const TrialConfig& config) {
  const auto& p = config.preprocess;
  const std::size_t sensor = config.sensors[0].id == cloud.sensor_id ? 0 : 1;
  PointCloud pts = crop_cylinder(cloud.points, config.target.position.head<2>(), p.roi_radius);
  if (pts.cols() < config.registration.min_points) return {};
  RansacParams rp;
  rp.iterations = p.ransac_iterations;
  rp.inlier_threshold = p.ransac_threshold;
  rp.max_normal_tilt = p.ransac_max_tilt_deg >= 0.0 ? deg2rad(p.ransac_max_tilt_deg) : -1.0;
  rp.seed = derive_seed(config.seed, kStreamRansac + scan_stream(cloud.frame_index, sensor));
  try {
    pts = ransac_ground_removal(pts, rp).filtered;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNoPlaneFound) throw;
    return {};
  }
  if (pts.cols() < config.registration.min_points) return {};
  pts = voxel_downsample(pts, p.voxel_leaf);
  if (pts.cols() <= p.sor_k) return {};
  pts = statistical_outlier_removal(pts, p.sor_k, p.sor_multiplier);
  if (pts.cols() < config.registration.min_points) return {};
  return pts;
}

std::optional<PrealignedCloud> condition_scan(const TrialConfig& config, const LidarScan& scan,
                                              const VehiclePoseTrack& track,
                                              const std::map<std::string, RigidTransform>& initial_mounts) {
  auto clouds = prealign({scan}, initial_mounts, track);
  PrealignedCloud& c = clouds.front();
  c.points = preprocess_scan(c, config);
  if (c.points.cols() < config.registration.min_points) return std::nullopt;
  return std::move(c);
}

CalibrationOutcome calibrate_clouds(const TrialConfig& config, const std::vector<PrealignedCloud>& clouds,
                                    const VehiclePoseTrack& track,
                                    const std::map<std::string, RigidTransform>& initial_mounts) {
  const std::string ref = config.reference().id;
  const std::string oth = config.other().id;
  CalibrationOutcome out;
  RegistrationParams rp = config.registration;
  rp.joint.seed = derive_seed(config.seed, kStreamRegistration);
  try {
    out.registration = register_targets(clouds, rp);
  } catch (const Error& e) {
    throw StageError("registration", e);
  }
  CalibrationProblem problem;
  try {
    problem = make_problem(out.registration, track, ref, initial_mounts.at(ref), oth, initial_mounts.at(oth));
  } catch (const Error& e) {
    throw StageError("registration", e);
  }
  try {
    out.s2s = calibrate_s2s(problem, config.optimizer);
  } catch (const Error& e) {
    throw StageError("s2s", e);
  }
  try {
    out.s2v = calibrate_s2v(problem, out.s2s.other_to_reference, config.optimizer, true);
    if (config.evaluate_unpinned)
      out.s2v_unpinned = calibrate_s2v(problem, out.s2s.other_to_reference, config.optimizer, false);
  } catch (const Error& e) {
    throw StageError("s2v", e);
  }
  return out;
}

TrialResult run_trial(const TrialConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  TrialResult r;
  r.seed = config.seed;
  std::string stage = "simulation";
  try {
    const SimulatedData data = simulate(config);
    r.injected = data.injected;
    stage = "preprocess";
    std::vector<PrealignedCloud> clouds;
    const int frames = config.frame_count();
    for (int i = 0; i < frames; ++i) {
      for (std::size_t s = 0; s < config.sensors.size(); ++s) {
        const LidarScan scan = simulate_scan(config, data, i, s);
        if (auto c = condition_scan(config, scan, data.track, data.initial_mounts)) clouds.push_back(std::move(*c));
      }
    }
    stage = "calibration";
    const CalibrationOutcome out = calibrate_clouds(config, clouds, data.track, data.initial_mounts);
    const std::string ref = config.reference().id;
    const std::string oth = config.other().id;
    const RigidTransform true_s2s = data.true_mounts.at(ref).inverse() * data.true_mounts.at(oth);
    r.members = out.registration.members.size();
    r.registration_converged = out.registration.joint.converged;
    r.s2s_converged = out.s2s.powell.converged;
    r.s2v_converged = out.s2v.powell.converged;
    r.s2s_estimate = out.s2s.other_to_reference;
    r.reference_estimate = out.s2v.reference_to_vehicle;
    r.other_estimate = out.s2v.other_to_vehicle;
    r.s2s = s2s_residual(r.other_estimate, r.reference_estimate, true_s2s);
    r.s2v_reference = residual(r.reference_estimate, data.true_mounts.at(ref));
    r.s2v_other = residual(r.other_estimate, data.true_mounts.at(oth));
    if (out.s2v_unpinned) {
      r.unpinned_reference = residual(out.s2v_unpinned->reference_to_vehicle, data.true_mounts.at(ref));
      r.unpinned_other = residual(out.s2v_unpinned->other_to_vehicle, data.true_mounts.at(oth));
    }
    r.converged = r.s2s_converged && r.s2v_converged && r.s2s.vector().allFinite() &&
                  r.s2v_reference.vector().allFinite() && r.s2v_other.vector().allFinite();
    if (!r.converged) {
      r.failed_stage = !r.s2s_converged ? "s2s" : "s2v";
      r.message = "optimizer reached its iteration limit";
    }
  } catch (const StageError& e) {
    r.failed_stage = e.stage();
    r.message = e.what();
  } catch (const std::exception& e) {
    r.failed_stage = stage;
    r.message = e.what();
  }
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

namespace {

constexpr const char* kAxes[6] = {"dx", "dy", "dz", "dphi", "dtheta", "dpsi"};

double interp_quantile(const std::vector<double>& sorted, double q) { return percentile_sorted(sorted, 100.0 * q); }

}  // namespace

MetricStats compute_stats(const std::string& metric, std::vector<double> values) {
  MetricStats s;
  s.metric = metric;
  s.count = values.size();
  if (values.empty()) return s;
  for (double& v : values) v = std::abs(v);
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / n;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  s.min = values.front();
  s.max = values.back();
  s.median = interp_quantile(values, 0.5);
  s.q1 = interp_quantile(values, 0.25);
  s.q3 = interp_quantile(values, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo_fence = s.q1 - 1.5 * iqr;
  const double hi_fence = s.q3 + 1.5 * iqr;
  s.whisker_low = *std::find_if(values.begin(), values.end(), [&](double v) { return v >= lo_fence; });
  s.whisker_high = *std::find_if(values.rbegin(), values.rend(), [&](double v) { return v <= hi_fence; });
  return s;
}

const MetricStats* CampaignReport::find(const std::string& metric) const {
  for (const auto& m : metrics)
    if (m.metric == metric) return &m;
  return nullptr;
}

std::vector<std::string> metric_names(const TrialConfig& config) {
  std::vector<std::string> names;
  const std::string groups[3] = {"s2s", "s2v_" + config.other().id, "s2v_" + config.reference().id};
  for (const auto& g : groups)
    for (const char* a : kAxes) names.push_back(g + "_" + a);
  return names;
}

std::vector<double> metric_values(const TrialResult& trial) {
  std::vector<double> v;
  for (const TransformResidual* r : {&trial.s2s, &trial.s2v_other, &trial.s2v_reference}) {
    const auto x = r->vector();
    v.insert(v.end(), x.data(), x.data() + 6);
  }
  return v;
}

CampaignReport summarize(const TrialConfig& base, const std::vector<TrialResult>& trials) {
  CampaignReport rep;
  rep.trials = trials.size();
  rep.config_digest = config_digest(base);
  const auto names = metric_names(base);
  std::vector<std::vector<double>> cols(names.size());
  for (const auto& t : trials) {
    if (!t.converged) {
      ++rep.non_converged;
      continue;
    }
    ++rep.converged;
    const auto v = metric_values(t);
    for (std::size_t i = 0; i < names.size(); ++i) cols[i].push_back(v[i]);
  }
  if (rep.converged > 0)
    for (std::size_t i = 0; i < names.size(); ++i) rep.metrics.push_back(compute_stats(names[i], cols[i]));
  return rep;
}

CampaignResult run_campaign(const TrialConfig& base, int n, std::uint64_t seed, const TrialCallback& on_trial) {
  if (n < 1) throw Error(ErrorCode::kInvalidArgument, "campaign needs at least one trial");
  base.validate();
  CampaignResult out;
  TrialConfig c = base;
  c.seed = seed;
  for (int i = 0; i < n; ++i) {
    TrialConfig tc = base;
    tc.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    out.trials.push_back(run_trial(tc));
    if (on_trial) on_trial(i, out.trials.back());
  }
  out.report = summarize(c, out.trials);
  return out;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "write failed for '" + path.string() + "'");
}

std::string digest_hex(std::uint64_t d) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
  return buf;
}

}  // namespace

std::vector<std::filesystem::path> export_report(const CampaignReport& report, const std::filesystem::path& path) {
  std::ostringstream csv;
  csv << "metric,statistic,value\n";
  csv << "campaign,trials," << report.trials << "\n";
  csv << "campaign,converged," << report.converged << "\n";
  csv << "campaign,non_converged," << report.non_converged << "\n";
  csv << "campaign,config_digest," << digest_hex(report.config_digest) << "\n";
  for (const auto& m : report.metrics) {
    const std::pair<const char*, double> rows[] = {
        {"count", static_cast<double>(m.count)}, {"mean", m.mean}, {"median", m.median}, {"std", m.std},
        {"min", m.min}, {"max", m.max}, {"q1", m.q1}, {"q3", m.q3},
        {"whisker_low", m.whisker_low}, {"whisker_high", m.whisker_high}};
    for (const auto& [name, value] : rows) csv << m.metric << "," << name << "," << format_double(value) << "\n";
  }
  write_file(path, csv.str());

  std::ostringstream box;
  box << "metric,whisker_low,q1,median,q3,whisker_high,min,max\n";
  for (const auto& m : report.metrics)
    box << m.metric << "," << format_double(m.whisker_low) << "," << format_double(m.q1) << ","
        << format_double(m.median) << "," << format_double(m.q3) << "," << format_double(m.whisker_high) << ","
        << format_double(m.min) << "," << format_double(m.max) << "\n";
  std::filesystem::path box_path = path;
  box_path.replace_filename(path.stem().string() + "_box.csv");
  write_file(box_path, box.str());
  return {path, box_path};
}

CampaignReport parse_report(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line;
  if (!std::getline(in, line) || line != "metric,statistic,value")
    throw Error(ErrorCode::kIo, "report does not start with the 'metric,statistic,value' header");
  CampaignReport rep;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw Error(ErrorCode::kIo, "malformed report line " + std::to_string(lineno));
    const std::string metric = line.substr(0, c1);
    const std::string stat = line.substr(c1 + 1, c2 - c1 - 1);
    const std::string value = line.substr(c2 + 1);
    try {
      if (metric == "campaign") {
        if (stat == "trials") rep.trials = std::stoull(value);
        else if (stat == "converged") rep.converged = std::stoull(value);
        else if (stat == "non_converged") rep.non_converged = std::stoull(value);
        else if (stat == "config_digest") rep.config_digest = std::stoull(value, nullptr, 16);
        else throw Error(ErrorCode::kIo, "unknown campaign field '" + stat + "'");
        continue;
      }
      if (rep.metrics.empty() || rep.metrics.back().metric != metric) {
        rep.metrics.push_back({});
        rep.metrics.back().metric = metric;
      }
      MetricStats& m = rep.metrics.back();
      const double v = std::stod(value);
      if (stat == "count") m.count = static_cast<std::size_t>(v);
      else if (stat == "mean") m.mean = v;
      else if (stat == "median") m.median = v;
      else if (stat == "std") m.std = v;
      else if (stat == "min") m.min = v;
      else if (stat == "max") m.max = v;
      else if (stat == "q1") m.q1 = v;
      else if (stat == "q3") m.q3 = v;
      else if (stat == "whisker_low") m.whisker_low = v;
      else if (stat == "whisker_high") m.whisker_high = v;
      else throw Error(ErrorCode::kIo, "unknown statistic '" + stat + "'");
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kIo, "bad number on report line " + std::to_string(lineno));
    }
  }
  return rep;
}

CampaignReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open report '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_report(ss.str());
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::string format_table(const CampaignReport& report) {
  std::ostringstream out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-14s %10s %10s %10s %10s %10s %10s\n", "mean |error|", "dx [m]", "dy [m]",
                "dz [m]", "dphi [rad]", "dtheta[rad]", "dpsi [rad]");
  out << buf;
  std::vector<std::string> groups;
  for (const auto& m : report.metrics) {
    const auto cut = m.metric.rfind('_');
    const std::string g = m.metric.substr(0, cut);
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  for (const auto& g : groups) {
    std::snprintf(buf, sizeof buf, "%-14s", g.c_str());
    out << buf;
    for (const char* a : kAxes) {
      const MetricStats* m = report.find(g + "_" + a);
      if (m) std::snprintf(buf, sizeof buf, " %10.4f", m->mean);
      else std::snprintf(buf, sizeof buf, " %10s", "-");
      out << buf;
    }
    out << "\n";
  }
  out << "trials " << report.trials << ", converged " << report.converged << ", non-converged "
      << report.non_converged << "\n";
  return out.str();
}

void write_trials_csv(const std::vector<TrialResult>& trials, const std::filesystem::path& path) {
  std::ostringstream csv;
  csv << "trial,seed,converged,members,failed_stage";
  const char* groups[3] = {"s2s", "s2v_other", "s2v_reference"};
  for (const char* g : groups)
    for (const char* a : kAxes) csv << "," << g << "_" << a;
  csv << "\n";
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto& t = trials[i];
    csv << i << "," << t.seed << "," << (t.converged ? 1 : 0) << "," << t.members << "," << t.failed_stage;
    for (double v : metric_values(t)) csv << "," << format_double(v);
    csv << "\n";
  }
  write_file(path, csv.str());
}

}  // namespace lidarcal
