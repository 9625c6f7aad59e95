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

#ifndef LIDARCAL_REGISTRATION_HPP
#define LIDARCAL_REGISTRATION_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lidarcal/geometry.hpp"
#include "lidarcal/scene.hpp"
#include "lidarcal/ukf.hpp"

namespace lidarcal {

/// A scan moved into the reference frame by pose * initial extrinsic.
struct PrealignedCloud {
  std::string sensor_id;
  int frame_index{0};
  RigidTransform chain;  // sensor -> reference
  PointCloud points;     // reference frame
};

/// Transforms each scan by pose(frame) * initial_extrinsic(sensor).
/// Throws Error(kMissingPose) for frames the track does not cover and
/// Error(kInvalidArgument) for sensors without an extrinsic.
std::vector<PrealignedCloud> prealign(const std::vector<LidarScan>& scans,
                                      const std::map<std::string, RigidTransform>& initial_extrinsics,
                                      const VehiclePoseTrack& track);

/// Isotropic mixture plus a uniform outlier class.
struct GaussianMixture {
  PointCloud means;
  Eigen::VectorXd variances;   // isotropic variance, or the largest eigenvalue
  std::vector<Eigen::Matrix3d> covariances;  // filled only with full covariances
  Eigen::VectorXd weights;     // inlier component weights, sum to 1
  double outlier_weight{0.0};  // gamma
  double outlier_density{0.0}; // uniform density over the data volume
};

struct JointRegistrationParams {
  int components{100};
  /// Iteration limit of each pass.
  int max_iterations{100};
  /// Stop when the mean per-point log-likelihood gain drops below this.
  double tolerance{1e-6};
  double outlier_weight{0.05};
  /// Initial component standard deviation in meters; <= 0 derives it from
  /// the spacing of the initial means.
  double initial_sigma{-1.0};
  double initial_sigma_scale{1.0};
  double min_variance{1e-6};
  /// Variances are kept above a floor that starts at the initial variance
  /// and shrinks by this factor per iteration down to min_variance. Zero
  /// applies min_variance from the first update.
  double anneal_rate{0.0};
  /// When positive, a second pass with this many components starts from
  /// the transforms of the first pass.
  int refine_components{0};
  double refine_initial_sigma{-1.0};
  /// The first pass only translates the clouds; requires refine_components.
  bool coarse_translation_only{false};
  /// Components carry a full covariance (eigenvalues floored like the
  /// isotropic variance) and the rigid step minimizes the Mahalanobis
  /// objective by damped Gauss-Newton instead of Procrustes. Flat patches
  /// then act as point-to-plane constraints.
  bool full_covariance{false};
  std::uint64_t seed{0};
};

struct JointRegistration {
  std::vector<RigidTransform> transforms;  // cloud frame -> calibration frame
  GaussianMixture mixture;                 // in the calibration frame
  std::vector<double> log_likelihood;      // per iteration and pass, total
  int iterations{0};                       // summed over passes
  bool converged{false};                   // of the last pass
};

/// Jointly registers the clouds to one latent mixture by EM. The first cloud
/// is held fixed during EM; afterwards everything is shifted so that the
/// centroid of the mixture means is the calibration-frame origin.
/// Throws Error(kInvalidArgument) for fewer than 2 clouds or an empty cloud,
/// and Error(kDegenerateGeometry) if a rigid update becomes ill-posed.
JointRegistration joint_register(const std::vector<PointCloud>& clouds, const JointRegistrationParams& params);

/// Box corners in canonical order: sign patterns ---, +--, -+-, --+, ++-,
/// +-+, -++, +++ along the principal axes sorted by decreasing variance,
/// each axis oriented to have a nonnegative dot product with (1, 1, 1).
struct OrientedBox {
  Eigen::Vector3d center{Eigen::Vector3d::Zero()};
  Eigen::Matrix3d axes{Eigen::Matrix3d::Identity()};  // columns
  Eigen::Vector3d extents{Eigen::Vector3d::Zero()};   // full edge lengths
  Eigen::Matrix<double, 3, 8> corners{Eigen::Matrix<double, 3, 8>::Zero()};

  double volume() const { return extents.prod(); }
};

/// PCA box. Exactly repeated eigenvalues (cubes, squares) leave the axes
/// undetermined; for small inputs those are resolved by the smallest box
/// over frames spanned by point differences.
/// Throws Error(kCoplanarInput) for < 4 points or flat input.
OrientedBox oriented_bounding_box(const PointCloud& points);

struct ObservationKey {
  std::string sensor_id;
  int frame_index{0};

  auto operator<=>(const ObservationKey&) const = default;
};

struct RegistrationParams {
  JointRegistrationParams joint;
  int min_points{50};
  /// Mixture components lighter than this fraction of 1/J are dropped from
  /// the reconstructed shape.
  double shape_weight_fraction{0.2};
};

struct RegistrationResult {
  std::vector<ObservationKey> members;            // the set S, sorted
  std::vector<RigidTransform> sensor_to_calibration;  // per member
  std::vector<RigidTransform> reference_to_calibration;  // registration part only
  PointCloud shape;
  OrientedBox obb;
  JointRegistration joint;
};

/// Keeps the clouds with at least `min_points` points, registers them, and
/// reconstructs the target shape and its box.
RegistrationResult register_targets(const std::vector<PrealignedCloud>& clouds, const RegistrationParams& params);

}  // namespace lidarcal

#endif  // LIDARCAL_REGISTRATION_HPP
