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

#ifndef LIDARCAL_PREPROCESS_HPP
#define LIDARCAL_PREPROCESS_HPP

#include <cstdint>
#include <optional>

#include <Eigen/Core>

#include "lidarcal/geometry.hpp"

namespace lidarcal {

/// Plane n . p + d = 0 with unit normal n.
struct PlaneModel {
  Eigen::Vector3d normal{Eigen::Vector3d::UnitZ()};
  double offset{0.0};

  double signed_distance(const Eigen::Vector3d& p) const { return normal.dot(p) + offset; }
};

struct RansacParams {
  int iterations{200};
  double inlier_threshold{0.05};
  std::uint64_t seed{0};
  /// Hypotheses whose normal deviates more than this from +z are skipped;
  /// negative disables the prior.
  double max_normal_tilt{-1.0};
  /// Minimum consensus as a fraction of the cloud.
  double min_inlier_fraction{0.2};
};

struct GroundRemoval {
  PointCloud filtered;
  PlaneModel plane;
  Eigen::Index inliers{0};
};

/// Best-consensus plane over random 3-point hypotheses, refit to its inliers
/// by least squares; returns the cloud without the refit plane's inliers.
/// Throws Error(kNoPlaneFound) for fewer than 3 points or weak consensus.
GroundRemoval ransac_ground_removal(const PointCloud& cloud, const RansacParams& params);

/// Least-squares plane through the points (smallest principal direction).
PlaneModel fit_plane(const PointCloud& points);

/// One centroid per occupied voxel of a grid with cell size `leaf`. The grid
/// is anchored at `anchor` when given, otherwise at the per-axis minimum of
/// the cloud. Output is ordered by voxel index (z, then y, then x).
PointCloud voxel_downsample(const PointCloud& cloud, double leaf,
                            const std::optional<Eigen::Vector3d>& anchor = std::nullopt);

/// Drops points whose mean distance to their k nearest neighbours exceeds
/// mean + std_multiplier * std of that statistic over the cloud.
/// Throws Error(kInsufficientPoints) when the cloud has <= k points.
PointCloud statistical_outlier_removal(const PointCloud& cloud, int k_neighbors, double std_multiplier);

/// Keeps points whose horizontal distance to `center` is at most `radius`.
PointCloud crop_cylinder(const PointCloud& cloud, const Eigen::Vector2d& center, double radius);

}  // namespace lidarcal

#endif  // LIDARCAL_PREPROCESS_HPP
