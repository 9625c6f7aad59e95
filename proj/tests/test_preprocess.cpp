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
#include <map>
#include <tuple>

#include <gtest/gtest.h>

#include "lidarcal/error.hpp"
#include "lidarcal/preprocess.hpp"
#include "lidarcal/rng.hpp"

namespace lidarcal {
namespace {

// Slightly tilted ground grid with a block of points floating above it.
PointCloud ground_and_block(const Eigen::Vector3d& normal) {
  const Eigen::Vector3d n = normal.normalized();
  const Eigen::Vector3d u = n.unitOrthogonal();
  const Eigen::Vector3d v = n.cross(u);
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 30; ++j) pts.push_back((i - 15) * 0.2 * u + (j - 15) * 0.2 * v);
  for (int i = 0; i < 100; ++i) pts.push_back(Eigen::Vector3d(0.1 * (i % 10), 0.1 * (i / 10), 1.0 + 0.01 * i));
  PointCloud c(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) c.col(static_cast<Eigen::Index>(i)) = pts[i];
  return c;
}

TEST(Ransac, FindsGroundAndKeepsElevatedPoints) {
  const Eigen::Vector3d normal(0.02, -0.01, 1.0);
  const GroundRemoval g = ransac_ground_removal(ground_and_block(normal), RansacParams{});
  EXPECT_LT(std::acos(std::min(1.0, std::abs(g.plane.normal.dot(normal.normalized())))), deg2rad(1.0));
  EXPECT_EQ(g.inliers, 900);
  EXPECT_EQ(g.filtered.cols(), 100);
  for (Eigen::Index i = 0; i < g.filtered.cols(); ++i) EXPECT_GT(g.filtered(2, i), 0.5);
}

TEST(Ransac, PurePlaneLeavesNothing) {
  PointCloud c(3, 400);
  for (int i = 0; i < 400; ++i) c.col(i) = Eigen::Vector3d(0.1 * (i % 20), 0.1 * (i / 20), 0.0);
  const GroundRemoval g = ransac_ground_removal(c, RansacParams{});
  EXPECT_EQ(g.filtered.cols(), 0);
}

TEST(Ransac, TooFewPointsThrows) {
  try {
    ransac_ground_removal(PointCloud::Zero(3, 2), RansacParams{});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoPlaneFound);
  }
}

TEST(Ransac, SameSeedSameResult) {
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 0.01);
  PointCloud c = ground_and_block(Eigen::Vector3d::UnitZ());
  for (Eigen::Index i = 0; i < c.cols(); ++i) c(2, i) += n(rng);
  RansacParams p;
  p.seed = 17;
  EXPECT_EQ(ransac_ground_removal(c, p).filtered, ransac_ground_removal(c, p).filtered);
}

TEST(FitPlane, RecoversExactPlane) {
  const Eigen::Vector3d n = Eigen::Vector3d(1, 2, 3).normalized();
  const PointCloud c = ground_and_block(n).leftCols(900).colwise() + 2.0 * n;
  const PlaneModel plane = fit_plane(c);
  EXPECT_NEAR(std::abs(plane.normal.dot(n)), 1.0, 1e-12);
  for (Eigen::Index i = 0; i < c.cols(); ++i) EXPECT_NEAR(plane.signed_distance(c.col(i)), 0.0, 1e-12);
}

TEST(Voxel, OnePointPerOccupiedCell) {
  PointCloud c(3, 4);
  c << 0.01, 0.02, 0.51, 0.52,
       0.0,  0.0,  0.0,  0.0,
       0.0,  0.0,  0.0,  0.0;
  const PointCloud out = voxel_downsample(c, 0.1, Eigen::Vector3d::Zero());
  ASSERT_EQ(out.cols(), 2);
  EXPECT_NEAR(out(0, 0), 0.015, 1e-15);
  EXPECT_NEAR(out(0, 1), 0.515, 1e-15);
}

TEST(Voxel, LeafLargerThanCloudGivesCentroid) {
  Rng rng(5);
  const PointCloud c = PointCloud::Random(3, 50);
  const PointCloud out = voxel_downsample(c, 10.0);
  ASSERT_EQ(out.cols(), 1);
  EXPECT_LE((out.col(0) - c.rowwise().mean()).norm(), 1e-12);
}

TEST(Voxel, MatchesHashGridOracle) {
  Rng rng(8);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  PointCloud c(3, 3000);
  for (Eigen::Index i = 0; i < c.cols(); ++i) c.col(i) = Eigen::Vector3d(u(rng), u(rng), u(rng));
  const double leaf = 0.37;
  const Eigen::Vector3d anchor = c.rowwise().minCoeff();
  std::map<std::tuple<long, long, long>, std::pair<Eigen::Vector3d, int>> cells;
  for (Eigen::Index i = 0; i < c.cols(); ++i) {
    const Eigen::Vector3d q = ((c.col(i) - anchor) / leaf).array().floor();
    auto& cell = cells[{static_cast<long>(q.z()), static_cast<long>(q.y()), static_cast<long>(q.x())}];
    if (cell.second == 0) cell.first.setZero();
    cell.first += c.col(i);
    ++cell.second;
  }
  const PointCloud out = voxel_downsample(c, leaf);
  ASSERT_EQ(out.cols(), static_cast<Eigen::Index>(cells.size()));
  Eigen::Index k = 0;
  for (const auto& [key, cell] : cells) {
    EXPECT_LE((out.col(k) - cell.first / cell.second).norm(), 1e-12);
    ++k;
  }
}

TEST(Voxel, RejectsBadLeaf) {
  EXPECT_THROW(voxel_downsample(PointCloud::Zero(3, 3), 0.0), Error);
}

TEST(OutlierRemoval, DropsIsolatedPoint) {
  PointCloud c(3, 101);
  for (int i = 0; i < 100; ++i) c.col(i) = Eigen::Vector3d(0.1 * (i % 10), 0.1 * (i / 10), 0.0);
  c.col(100) = Eigen::Vector3d(10, 10, 10);
  const PointCloud out = statistical_outlier_removal(c, 8, 2.0);
  EXPECT_EQ(out.cols(), 100);
  EXPECT_EQ(out, c.leftCols(100));
}

TEST(OutlierRemoval, UniformGridKeepsEverything) {
  PointCloud c(3, 125);
  for (int i = 0; i < 125; ++i) c.col(i) = Eigen::Vector3d(i % 5, (i / 5) % 5, i / 25);
  // Interior and boundary points differ, so use a generous multiplier.
  EXPECT_EQ(statistical_outlier_removal(c, 6, 3.0).cols(), 125);
}

TEST(OutlierRemoval, NeedsMoreThanKPoints) {
  try {
    statistical_outlier_removal(PointCloud::Zero(3, 8), 8, 2.0);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientPoints);
  }
}

TEST(Crop, KeepsPointsInsideCylinder) {
  PointCloud c(3, 4);
  c << 0.0, 1.0, 2.0, 0.5,
       0.0, 0.0, 0.0, 0.5,
       5.0, -3.0, 0.0, 100.0;
  const PointCloud out = crop_cylinder(c, Eigen::Vector2d::Zero(), 1.0);
  ASSERT_EQ(out.cols(), 3);
  EXPECT_EQ(out.col(0), c.col(0));
  EXPECT_EQ(out.col(1), c.col(1));
  EXPECT_EQ(out.col(2), c.col(3));
}

}  // namespace
}  // namespace lidarcal
