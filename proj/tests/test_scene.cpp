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

#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "lidarcal/error.hpp"
#include "lidarcal/rng.hpp"
#include "lidarcal/scene.hpp"

namespace lidarcal {
namespace {

SceneGeometry cube_scene(const Eigen::Vector3d& center) {
  SceneGeometry scene;
  scene.has_ground = false;
  scene.target.boxes.push_back({Eigen::Vector3d::Zero(), Eigen::Vector3d::Ones(), Eigen::Matrix3d::Identity()});
  scene.target.pose = RigidTransform::FromTranslation(center);
  return scene;
}

LidarConfig odd_grid_lidar() {
  LidarConfig c;
  c.channels = 151;  // puts one channel exactly on the horizon
  c.range_noise_sigma = 0.0;
  return c;
}

TEST(Trajectory, StraightLine) {
  const Trajectory traj(2.9, 2.0, 0.0);
  const RigidTransform p = traj.pose_at(1.0);
  EXPECT_NEAR((p.translation() - Eigen::Vector3d(2, 0, 0)).norm(), 0.0, 1e-12);
  EXPECT_NEAR(rotation_angle(p), 0.0, 1e-12);
  EXPECT_TRUE(std::isinf(traj.turn_radius()));
}

TEST(Trajectory, CircleClosesAfterOnePeriod) {
  const double steer = deg2rad(17.0);
  const Trajectory traj(2.9, 2.0, steer);
  EXPECT_NEAR(traj.turn_radius(), 2.9 / std::tan(steer), 1e-12);
  EXPECT_NEAR(traj.turn_radius(), 9.486, 1e-3);
  const double period = 2.0 * std::numbers::pi / traj.yaw_rate();
  EXPECT_NEAR(traj.pose_at(period).translation().head<2>().norm(), 0.0, 1e-6);
  // Every pose lies on the circle about (0, R).
  for (double t = 0.0; t < period; t += 0.37) {
    const Eigen::Vector2d p = traj.pose_at(t).translation().head<2>();
    EXPECT_NEAR((p - Eigen::Vector2d(0, traj.turn_radius())).norm(), traj.turn_radius(), 1e-9);
  }
}

TEST(Trajectory, StepSizeDoesNotChangeSharedPoses) {
  const auto coarse = simulate_trajectory(2.9, 2.0, deg2rad(17.0), 15.0, 0.1);
  const auto fine = simulate_trajectory(2.9, 2.0, deg2rad(17.0), 15.0, 0.05);
  ASSERT_EQ(fine.size(), 2 * coarse.size() - 1);
  for (std::size_t i = 0; i < coarse.size(); ++i) {
    EXPECT_NEAR(fine[2 * i].time, coarse[i].time, 1e-12);
    EXPECT_NEAR((fine[2 * i].pose.translation() - coarse[i].pose.translation()).norm(), 0.0, 1e-6);
  }
}

TEST(Raycast, CentralRayHitsCubeFace) {
  const LidarScan scan = raycast_scan(RigidTransform(), odd_grid_lidar(), cube_scene({10, 0, 0}), 1);
  ASSERT_GT(scan.points.cols(), 0);
  double best = 1e9;
  for (Eigen::Index i = 0; i < scan.points.cols(); ++i)
    best = std::min(best, (scan.points.col(i) - Eigen::Vector3d(9.5, 0, 0)).norm());
  EXPECT_LE(best, 1e-9);
  // All hits lie on the front face.
  for (Eigen::Index i = 0; i < scan.points.cols(); ++i) EXPECT_NEAR(scan.points(0, i), 9.5, 1e-9);
}

TEST(Raycast, TargetBehindSensorIsInvisible) {
  const LidarScan scan = raycast_scan(RigidTransform(), odd_grid_lidar(), cube_scene({-10, 0, 0}), 1);
  EXPECT_EQ(scan.points.cols(), 0);
}

TEST(Raycast, SameSeedSameScan) {
  LidarConfig c = odd_grid_lidar();
  c.range_noise_sigma = 0.01;
  SceneGeometry scene = cube_scene({8, 1, 0});
  scene.has_ground = true;
  scene.ground_height = -1.5;
  const RigidTransform pose = RigidTransform::FromEuler({0.0, 0.05, 0.1});
  const LidarScan a = raycast_scan(pose, c, scene, 99);
  const LidarScan b = raycast_scan(pose, c, scene, 99);
  ASSERT_EQ(a.points.cols(), b.points.cols());
  EXPECT_EQ(a.points, b.points);
  const LidarScan other = raycast_scan(pose, c, scene, 100);
  EXPECT_NE(a.points, other.points);
}

TEST(Raycast, HitsLieOnTheSurface) {
  TargetShape target = make_l_target(RigidTransform::FromEuler({0, 0, 0.4}, {12, 3, 0}), deg2rad(20.0));
  SceneGeometry scene;
  scene.target = target;
  const RigidTransform pose = RigidTransform::FromEuler({0.0, deg2rad(10.0), 0.2}, {0, 0, 2});
  LidarConfig c;
  c.range_noise_sigma = 0.0;
  const LidarScan scan = raycast_scan(pose, c, scene, 3);
  const PointCloud world = apply(pose, scan.points);
  int on_target = 0;
  for (Eigen::Index i = 0; i < world.cols(); ++i) {
    if (world(2, i) < 1e-6) continue;  // ground
    EXPECT_LE(target.surface_distance(world.col(i)), 1e-9);
    ++on_target;
  }
  EXPECT_GE(on_target, 300);
}

TEST(TargetShape, SurfaceSamplesAreOnSurface) {
  const TargetShape t = make_l_target(RigidTransform::FromEuler({0, 0, 1.0}, {1, 2, 0}), deg2rad(15.0));
  const PointCloud pts = t.sample_surface(0.05);
  ASSERT_GT(pts.cols(), 500);
  for (Eigen::Index i = 0; i < pts.cols(); ++i) EXPECT_LE(t.surface_distance(pts.col(i)), 1e-9);
  EXPECT_EQ(t.mesh().size(), 24u);
}

TEST(Measurements, NoiselessStraightLineHasNoRotationOrAcceleration) {
  const Trajectory traj(2.9, 2.0, 0.0);
  const auto s = simulate_measurements(traj, 5.0, MeasurementNoise::noiseless(), 1);
  ASSERT_FALSE(s.gyro.empty());
  for (const auto& g : s.gyro) EXPECT_EQ(g.value.norm(), 0.0);
  for (const auto& a : s.accel) EXPECT_EQ(a.value.norm(), 0.0);
}

TEST(Measurements, NoiselessTurnRate) {
  const Trajectory traj(2.9, 2.0, deg2rad(17.0));
  const auto s = simulate_measurements(traj, 5.0, MeasurementNoise::noiseless(), 1);
  const double expected = 2.0 * std::tan(deg2rad(17.0)) / 2.9;
  EXPECT_NEAR(expected, 0.2109, 1e-4);
  for (const auto& g : s.gyro) EXPECT_NEAR(g.value.z(), expected, 1e-12);
}

TEST(Measurements, NoiseMatchesConfiguredSigma) {
  const Trajectory traj(2.9, 2.0, deg2rad(17.0));
  const MeasurementNoise noise;
  const auto s = simulate_measurements(traj, 100.0, noise, 11);
  ASSERT_GE(s.gyro.size(), 10000u);
  const double w = traj.yaw_rate();
  auto sample_std = [](const std::vector<double>& v) {
    double m = 0.0, ss = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
  };
  std::vector<double> gyro, accel;
  for (const auto& g : s.gyro) gyro.push_back(g.value.z() - w);
  for (const auto& a : s.accel) accel.push_back(a.value.x());
  EXPECT_NEAR(sample_std(gyro), noise.gyro_sigma, 0.1 * noise.gyro_sigma);
  EXPECT_NEAR(sample_std(accel), noise.accel_sigma, 0.1 * noise.accel_sigma);

  std::vector<double> east, alt;
  for (const auto& g : s.gps) {
    const Eigen::Vector3d truth = noise.frame.to_geodetic(traj.pose_at(g.time).translation());
    east.push_back(g.value.y() - truth.y());
    alt.push_back(g.value.z() - truth.z());
  }
  EXPECT_NEAR(sample_std(east), noise.gps_latlon_sigma_deg, 0.1 * noise.gps_latlon_sigma_deg);
  EXPECT_NEAR(sample_std(alt), noise.gps_alt_sigma, 0.1 * noise.gps_alt_sigma);
}

TEST(LocalTangentPlane, RoundTrip) {
  const LocalTangentPlane ltp;
  const Eigen::Vector3d p(123.4, -56.7, 8.9);
  EXPECT_LE((ltp.to_local(ltp.to_geodetic(p)) - p).norm(), 1e-9);
}

TEST(Injection, DrawsStayInsideBounds) {
  const InjectionRanges r;
  Eigen::Matrix<double, 6, 1> sum = Eigen::Matrix<double, 6, 1>::Zero();
  const int n = 10000;
  std::set<std::vector<double>> distinct;
  for (int i = 0; i < n; ++i) {
    const auto p = inject_calibration_error(derive_seed(5, static_cast<std::uint64_t>(i)), r).parameters();
    for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(p[k]), r.translation + 1e-15);
    for (int k = 3; k < 6; ++k) EXPECT_LE(std::abs(p[k]), r.rotation + 1e-12);
    sum += p;
    distinct.insert({p[0], p[1], p[2], p[3], p[4], p[5]});
  }
  EXPECT_EQ(distinct.size(), static_cast<std::size_t>(n));
  // Uniform on [-b, b]: standard error of the mean is b / sqrt(3 n).
  const Eigen::Matrix<double, 6, 1> mean = sum / n;
  for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(mean[k]), 3.0 * r.translation / std::sqrt(3.0 * n));
  for (int k = 3; k < 6; ++k) EXPECT_LE(std::abs(mean[k]), 3.0 * r.rotation / std::sqrt(3.0 * n));
}

TEST(Injection, ReplaysForFixedSeed) {
  const auto a = inject_calibration_error(42).matrix();
  const auto b = inject_calibration_error(42).matrix();
  EXPECT_EQ(a, b);
}

TEST(Xyz, RoundTripIsExact) {
  const PointCloud pts = 3.7 * PointCloud::Random(3, 25);
  const auto path = std::filesystem::temp_directory_path() / "lidarcal_xyz_roundtrip.xyz";
  write_xyz(path, pts);
  EXPECT_EQ(read_xyz(path), pts);
  std::filesystem::remove(path);
}

TEST(Xyz, MissingFileIsAnIoError) {
  try {
    read_xyz("/nonexistent/cloud.xyz");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
    EXPECT_NE(std::string(e.what()).find("/nonexistent/cloud.xyz"), std::string::npos);
  }
}

TEST(LidarConfig, RejectsBadValues) {
  LidarConfig c;
  c.channels = 1;
  EXPECT_THROW(c.validate(), Error);
  c = LidarConfig{};
  c.horizontal_fov_deg = 0.0;
  EXPECT_THROW(c.validate(), Error);
}

}  // namespace
}  // namespace lidarcal
