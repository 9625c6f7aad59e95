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

#include "lidarcal/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Eigenvalues>

#include "lidarcal/error.hpp"
#include "lidarcal/rng.hpp"

namespace lidarcal {

namespace {

PointCloud select(const PointCloud& cloud, const std::vector<Eigen::Index>& idx) {
  PointCloud out(3, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = cloud.col(idx[i]);
  return out;
}

}  // namespace

PlaneModel fit_plane(const PointCloud& points) {
  const Eigen::Vector3d mean = points.rowwise().mean();
  const PointCloud centered = points.colwise() - mean;
  const Eigen::Matrix3d cov = centered * centered.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  PlaneModel plane;
  plane.normal = es.eigenvectors().col(0).normalized();
  if (plane.normal.z() < 0.0) plane.normal = -plane.normal;
  plane.offset = -plane.normal.dot(mean);
  return plane;
}

GroundRemoval ransac_ground_removal(const PointCloud& cloud, const RansacParams& params) {
  if (!(params.inlier_threshold > 0.0)) throw Error(ErrorCode::kInvalidArgument, "inlier threshold must be > 0");
  const Eigen::Index n = cloud.cols();
  if (n < 3) throw Error(ErrorCode::kNoPlaneFound, "need at least 3 points for a plane");

  Rng rng(params.seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  const double cos_prior = params.max_normal_tilt >= 0.0 ? std::cos(params.max_normal_tilt) : -2.0;

  Eigen::Index best_count = 0;
  PlaneModel best;
  for (int it = 0; it < params.iterations; ++it) {
    const Eigen::Index a = pick(rng);
    Eigen::Index b = pick(rng);
    Eigen::Index c = pick(rng);
    if (a == b || b == c || a == c) continue;
    Eigen::Vector3d normal = (cloud.col(b) - cloud.col(a)).cross(cloud.col(c) - cloud.col(a));
    const double len = normal.norm();
    if (len < 1e-12) continue;
    normal /= len;
    if (normal.z() < 0.0) normal = -normal;
    if (normal.z() < cos_prior) continue;
    const double d = -normal.dot(cloud.col(a));
    const Eigen::Index count =
        (((normal.transpose() * cloud).array() + d).abs() <= params.inlier_threshold).count();
    if (count > best_count) {
      best_count = count;
      best = {normal, d};
    }
  }
  if (best_count < 3 || static_cast<double>(best_count) < params.min_inlier_fraction * static_cast<double>(n))
    throw Error(ErrorCode::kNoPlaneFound, "no plane with sufficient consensus (" + std::to_string(best_count) +
                                              " of " + std::to_string(n) + " points)");

  std::vector<Eigen::Index> inliers;
  for (Eigen::Index i = 0; i < n; ++i)
    if (std::abs(best.signed_distance(cloud.col(i))) <= params.inlier_threshold) inliers.push_back(i);
  GroundRemoval out;
  out.plane = fit_plane(select(cloud, inliers));

  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < n; ++i)
    if (std::abs(out.plane.signed_distance(cloud.col(i))) > params.inlier_threshold) keep.push_back(i);
  out.inliers = n - static_cast<Eigen::Index>(keep.size());
  out.filtered = select(cloud, keep);
  return out;
}

PointCloud voxel_downsample(const PointCloud& cloud, double leaf, const std::optional<Eigen::Vector3d>& anchor) {
  if (!(leaf > 0.0)) throw Error(ErrorCode::kInvalidArgument, "voxel leaf must be > 0");
  const Eigen::Index n = cloud.cols();
  if (n == 0) return cloud;
  const Eigen::Vector3d origin = anchor ? *anchor : Eigen::Vector3d(cloud.rowwise().minCoeff());

  using Key = std::array<long long, 3>;
  std::vector<Key> keys(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d rel = (cloud.col(i) - origin) / leaf;
    keys[static_cast<std::size_t>(i)] = {static_cast<long long>(std::floor(rel.z())),
                                         static_cast<long long>(std::floor(rel.y())),
                                         static_cast<long long>(std::floor(rel.x()))};
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return keys[static_cast<std::size_t>(a)] < keys[static_cast<std::size_t>(b)];
  });

  std::vector<Eigen::Vector3d> centroids;
  std::size_t i = 0;
  while (i < order.size()) {
    const Key& key = keys[static_cast<std::size_t>(order[i])];
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    std::size_t j = i;
    for (; j < order.size() && keys[static_cast<std::size_t>(order[j])] == key; ++j) sum += cloud.col(order[j]);
    centroids.push_back(sum / static_cast<double>(j - i));
    i = j;
  }
  PointCloud out(3, static_cast<Eigen::Index>(centroids.size()));
  for (std::size_t c = 0; c < centroids.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = centroids[c];
  return out;
}

PointCloud statistical_outlier_removal(const PointCloud& cloud, int k_neighbors, double std_multiplier) {
  if (k_neighbors < 1) throw Error(ErrorCode::kInvalidArgument, "k_neighbors must be >= 1");
  const Eigen::Index n = cloud.cols();
  if (n <= k_neighbors)
    throw Error(ErrorCode::kInsufficientPoints, "outlier removal needs more than k = " + std::to_string(k_neighbors) +
                                                    " points, got " + std::to_string(n));

  // Brute force; clouds here are a few thousand points at most.
  Eigen::VectorXd stat(n);
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) d2[static_cast<std::size_t>(j)] = (cloud.col(j) - cloud.col(i)).squaredNorm();
    d2[static_cast<std::size_t>(i)] = std::numeric_limits<double>::infinity();
    std::nth_element(d2.begin(), d2.begin() + (k_neighbors - 1), d2.end());
    std::sort(d2.begin(), d2.begin() + k_neighbors);
    double sum = 0.0;
    for (int k = 0; k < k_neighbors; ++k) sum += std::sqrt(d2[static_cast<std::size_t>(k)]);
    stat[i] = sum / k_neighbors;
  }
  const double mean = stat.mean();
  const double sd = std::sqrt((stat.array() - mean).square().mean());
  const double threshold = mean + std_multiplier * sd + 1e-12 * std::abs(mean);

  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < n; ++i)
    if (stat[i] <= threshold) keep.push_back(i);
  return select(cloud, keep);
}

PointCloud crop_cylinder(const PointCloud& cloud, const Eigen::Vector2d& center, double radius) {
  std::vector<Eigen::Index> keep;
  const double r2 = radius * radius;
  for (Eigen::Index i = 0; i < cloud.cols(); ++i)
    if ((cloud.col(i).head<2>() - center).squaredNorm() <= r2) keep.push_back(i);
  return select(cloud, keep);
}

}  // namespace lidarcal
