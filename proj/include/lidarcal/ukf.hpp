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

#ifndef LIDARCAL_UKF_HPP
#define LIDARCAL_UKF_HPP

#include <vector>

#include <Eigen/Core>

#include "lidarcal/geometry.hpp"
#include "lidarcal/scene.hpp"

namespace lidarcal {

/// Planar vehicle state: position, world-frame velocity, yaw, yaw rate.
inline constexpr int kStateDim = 8;
using StateVector = Eigen::Matrix<double, kStateDim, 1>;
using StateCovariance = Eigen::Matrix<double, kStateDim, kStateDim>;

enum StateIndex : int { kPx = 0, kPy, kPz, kVx, kVy, kVz, kYaw, kYawRate };

struct UkfState {
  double time{0.0};
  StateVector mean{StateVector::Zero()};
  StateCovariance covariance{StateCovariance::Identity()};

  RigidTransform pose() const;
};

struct UkfParams {
  // Scaled unscented transform.
  double alpha{1e-3};
  double beta{2.0};
  double kappa{0.0};

  // Input noise of the process model (longitudinal accel, yaw rate).
  double accel_sigma{0.05};
  double gyro_sigma{0.005};

  // Additive random walks, per second.
  double position_random_walk{1e-9};   // m^2/s, horizontal
  double vertical_random_walk{1e-8};   // m^2/s
  double velocity_random_walk{1e-6};   // (m/s)^2/s, horizontal
  double vertical_velocity_random_walk{1e-8};
  double yaw_random_walk{1e-10};       // rad^2/s

  // Measurement noise (1 sigma).
  double east_sigma{0.0111};   // GPS longitude noise in meters
  double north_sigma{0.0167};  // GPS latitude noise in meters
  double altitude_sigma{0.02};
  double velocity_sigma{0.1};
  double yaw_sigma{0.005};

  /// Innovations beyond this many standard deviations skip the update.
  double outlier_gate{5.0};

  /// Tuning matched to the simulated stream noise, with floors so that a
  /// noiseless configuration still yields a well-conditioned filter.
  static UkfParams from_noise(const MeasurementNoise& noise);
};

struct ImuSample {
  Eigen::Vector3d accel{Eigen::Vector3d::Zero()};  // body frame
  Eigen::Vector3d gyro{Eigen::Vector3d::Zero()};   // body frame
};

enum class MeasurementKind { kPosition, kVelocity, kYaw };

struct Measurement {
  MeasurementKind kind{MeasurementKind::kPosition};
  double time{0.0};
  Eigen::VectorXd value;
  Eigen::MatrixXd noise_covariance;
};

struct UpdateResult {
  UkfState state;
  bool accepted{true};  // false when gated as an outlier
};

/// Propagates through the constant-turn model driven by the measured yaw
/// rate and longitudinal acceleration, held constant over dt.
/// Throws Error(kFilterDivergence) if the covariance loses definiteness.
UkfState predict(const UkfState& state, const ImuSample& input, double dt, const UkfParams& params);

UpdateResult update(const UkfState& state, const Measurement& measurement, const UkfParams& params,
                    double time_tolerance = 1e-6);

/// Checks symmetry and positive definiteness; throws kFilterDivergence.
void check_covariance(const StateCovariance& p);

struct PoseEstimate {
  double time{0.0};
  RigidTransform pose;
  StateCovariance covariance{StateCovariance::Zero()};
};

struct VehiclePoseTrack {
  std::vector<PoseEstimate> poses;  // one per scan frame, in frame order
};

/// Filters the streams in timestamp order and reports the posterior pose at
/// every scan time. Scan times outside the stream coverage throw kOutOfCoverage.
VehiclePoseTrack estimate_poses(const MeasurementStreams& streams, const std::vector<double>& scan_times,
                                const UkfParams& params);

}  // namespace lidarcal

#endif  // LIDARCAL_UKF_HPP
