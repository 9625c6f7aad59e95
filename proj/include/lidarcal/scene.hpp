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

#ifndef LIDARCAL_SCENE_HPP
#define LIDARCAL_SCENE_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lidarcal/geometry.hpp"

namespace lidarcal {

struct LidarConfig {
  double horizontal_fov_deg{120.0};
  double vertical_fov_deg{25.0};
  double max_range{500.0};
  int channels{152};
  double azimuth_resolution_deg{0.2};
  double range_noise_sigma{0.01};
  double scan_rate{10.0};

  /// Throws Error(kInvalidConfig) when a field is out of range.
  void validate() const;
  int azimuth_steps() const;
};

struct SensorMount {
  std::string id;
  RigidTransform mount;          // ground-truth sensor -> vehicle
  RigidTransform initial_mount;  // erroneous prior used by the calibration
  LidarConfig lidar;
};

struct SensorRig {
  std::vector<SensorMount> sensors;

  void validate() const;
  std::size_t index_of(const std::string& id) const;
};

/// Box in the target's local frame, rotated about its own center.
struct Box {
  Eigen::Vector3d center{Eigen::Vector3d::Zero()};
  Eigen::Vector3d size{Eigen::Vector3d::Ones()};
  Eigen::Matrix3d rotation{Eigen::Matrix3d::Identity()};

  /// Maps a point given in box axes (origin at the center) into the target frame.
  Eigen::Vector3d to_target(const Eigen::Vector3d& p) const { return center + rotation * p; }
};

struct Triangle {
  Eigen::Vector3d a, b, c;
};

/// Rigid composite of boxes placed in the world.
struct TargetShape {
  std::vector<Box> boxes;
  RigidTransform pose;  // target local -> world

  /// Watertight triangle mesh of every box, in world coordinates.
  std::vector<Triangle> mesh() const;
  /// Points sampled on the box surfaces with the given spacing, world frame.
  PointCloud sample_surface(double spacing) const;
  /// Unsigned distance from a world point to the composite surface.
  double surface_distance(const Eigen::Vector3d& p) const;
};

/// The chair stand-in: a seat block with a backrest along its +x edge. A
/// positive recline (radians) tips the backrest top away from the seat.
TargetShape make_l_target(const RigidTransform& pose, double backrest_recline = 0.0);

struct SceneGeometry {
  double ground_height{0.0};
  bool has_ground{true};
  TargetShape target;
};

struct TimedPose {
  double time{0.0};
  RigidTransform pose;
};

/// Planar kinematic bicycle with constant speed and steering; the vehicle
/// frame origin is the rear axle center.
class Trajectory {
 public:
  Trajectory(double wheelbase, double speed, double steering, RigidTransform start = {});

  double speed() const { return speed_; }
  double yaw_rate() const { return yaw_rate_; }
  double wheelbase() const { return wheelbase_; }
  /// Turn radius; infinity for straight driving.
  double turn_radius() const;

  RigidTransform pose_at(double t) const;
  double yaw_at(double t) const;

 private:
  double wheelbase_;
  double speed_;
  double steering_;
  double yaw_rate_;
  RigidTransform start_;
};

std::vector<TimedPose> simulate_trajectory(double wheelbase, double speed, double steering, double duration,
                                           double step);

struct LidarScan {
  std::string sensor_id;
  int frame_index{0};
  double timestamp{0.0};
  PointCloud points;  // sensor frame
};

LidarScan raycast_scan(const RigidTransform& lidar_world_pose, const LidarConfig& config,
                       const SceneGeometry& scene, std::uint64_t seed);

/// Fixed local tangent plane used to map local x/y/z (east, north, up) to
/// geodetic coordinates and back.
struct LocalTangentPlane {
  double origin_lat_deg{48.2626};
  double origin_lon_deg{11.6684};
  double origin_alt{500.0};
  static constexpr double kEarthRadius = 6378137.0;

  Eigen::Vector3d to_geodetic(const Eigen::Vector3d& local) const;
  Eigen::Vector3d to_local(const Eigen::Vector3d& geodetic) const;
  /// Meters per degree of latitude.
  double meters_per_deg_lat() const;
  double meters_per_deg_lon() const;
};

struct MeasurementNoise {
  double accel_sigma{0.05};
  double gyro_sigma{0.005};
  double gps_latlon_sigma_deg{1.5e-7};
  double gps_alt_sigma{0.02};
  double orientation_sigma{0.005};
  double velocity_sigma{0.1};

  double imu_rate{100.0};
  double gps_rate{10.0};
  double orientation_rate{20.0};
  double velocity_rate{20.0};

  LocalTangentPlane frame;

  static MeasurementNoise noiseless();
};

struct Vector3Sample {
  double time{0.0};
  Eigen::Vector3d value{Eigen::Vector3d::Zero()};
};

struct MeasurementStreams {
  std::vector<Vector3Sample> accel;        // body frame, gravity removed, m/s^2
  std::vector<Vector3Sample> gyro;         // body frame, rad/s
  std::vector<Vector3Sample> gps;          // lat deg, lon deg, alt m
  std::vector<Vector3Sample> orientation;  // roll, pitch, yaw rad
  std::vector<Vector3Sample> velocity;     // world frame, m/s
  MeasurementNoise noise;

  double start_time() const;
  double end_time() const;
};

MeasurementStreams simulate_measurements(const Trajectory& trajectory, double duration,
                                         const MeasurementNoise& noise, std::uint64_t seed);

struct InjectionRanges {
  double translation{0.1};               // m, symmetric bound
  double rotation{deg2rad(3.0)};         // rad, symmetric bound
};

/// Random perturbation with i.i.d. uniform xyz and roll/pitch/yaw components.
RigidTransform inject_calibration_error(std::uint64_t seed, const InjectionRanges& ranges = {});

/// Writes one "x y z" line per point with round-trip precision.
void write_xyz(const std::filesystem::path& path, const PointCloud& points);
PointCloud read_xyz(const std::filesystem::path& path);

}  // namespace lidarcal

#endif  // LIDARCAL_SCENE_HPP
