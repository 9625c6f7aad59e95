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
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "lidarcal/geometry.hpp"

namespace lidarcal {
namespace {

constexpr double kPi = std::numbers::pi;

RigidTransform random_transform(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::Quaterniond q(u(rng), u(rng), u(rng), u(rng));
  return {q.normalized(), Eigen::Vector3d(5 * u(rng), 5 * u(rng), 5 * u(rng))};
}

// Homogeneous matrix built element by element from the quaternion formula,
// independent of the Eigen conversion used inside RigidTransform.
Eigen::Matrix4d oracle_matrix(const RigidTransform& t) {
  const auto& q = t.rotation();
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m(0, 0) = 1 - 2 * (y * y + z * z);
  m(0, 1) = 2 * (x * y - z * w);
  m(0, 2) = 2 * (x * z + y * w);
  m(1, 0) = 2 * (x * y + z * w);
  m(1, 1) = 1 - 2 * (x * x + z * z);
  m(1, 2) = 2 * (y * z - x * w);
  m(2, 0) = 2 * (x * z - y * w);
  m(2, 1) = 2 * (y * z + x * w);
  m(2, 2) = 1 - 2 * (x * x + y * y);
  m.topRightCorner<3, 1>() = t.translation();
  return m;
}

TEST(Compose, IdentityIsNeutral) {
  std::mt19937_64 rng(1);
  const RigidTransform t = random_transform(rng);
  EXPECT_TRUE(compose(RigidTransform::Identity(), t).matrix().isApprox(t.matrix(), 1e-15));
  EXPECT_TRUE(compose(t, RigidTransform::Identity()).matrix().isApprox(t.matrix(), 1e-15));
}

TEST(Compose, TwoQuarterTurnsMakeHalfTurn) {
  const RigidTransform rz90 = RigidTransform::FromEuler({0, 0, kPi / 2});
  const RigidTransform r = compose(rz90, rz90);
  EXPECT_NEAR(rotation_angle(r), kPi, 1e-12);
  EXPECT_NEAR((r * Eigen::Vector3d(1, 0, 0) - Eigen::Vector3d(-1, 0, 0)).norm(), 0.0, 1e-12);
}

TEST(Compose, MatchesHomogeneousMatrixProduct) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform a = random_transform(rng), b = random_transform(rng);
    const Eigen::Matrix4d expected = oracle_matrix(a) * oracle_matrix(b);
    EXPECT_LE((compose(a, b).matrix() - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Invert, Identity) {
  EXPECT_TRUE(invert(RigidTransform::Identity()).matrix().isIdentity(0.0));
}

TEST(Invert, PureTranslation) {
  const RigidTransform t = RigidTransform::FromTranslation({1, 2, 3});
  EXPECT_EQ(invert(t).translation(), Eigen::Vector3d(-1, -2, -3));
  EXPECT_TRUE(invert(t).rotation_matrix().isIdentity(0.0));
}

TEST(Invert, MatchesMatrixInverse) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform t = random_transform(rng);
    const Eigen::Matrix4d expected = oracle_matrix(t).inverse();
    EXPECT_LE((invert(t).matrix() - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Apply, IdentityLeavesPointsUnchanged) {
  const PointCloud pts = PointCloud::Random(3, 50);
  EXPECT_EQ(apply(RigidTransform::Identity(), pts), pts);
}

TEST(Apply, QuarterTurnAboutZ) {
  PointCloud p(3, 1);
  p << 1, 0, 0;
  const PointCloud q = apply(RigidTransform::FromEuler({0, 0, kPi / 2}), p);
  EXPECT_NEAR((q.col(0) - Eigen::Vector3d(0, 1, 0)).norm(), 0.0, 1e-15);
}

TEST(Apply, PreservesPairwiseDistances) {
  std::mt19937_64 rng(4);
  const RigidTransform t = random_transform(rng);
  const PointCloud pts = 10.0 * PointCloud::Random(3, 40);
  const PointCloud moved = apply(t, pts);
  for (Eigen::Index i = 0; i < pts.cols(); ++i)
    for (Eigen::Index j = i + 1; j < pts.cols(); ++j)
      EXPECT_NEAR((moved.col(i) - moved.col(j)).norm(), (pts.col(i) - pts.col(j)).norm(), 1e-9);
}

TEST(Apply, WorksInSinglePrecision) {
  const RigidTransform_<float> t = RigidTransform::FromEuler({0.1, 0.2, 0.3}, {1, 2, 3}).cast<float>();
  PointCloud_<float> p(3, 1);
  p << 1.0f, -1.0f, 0.5f;
  const PointCloud_<float> back = apply(invert(t), apply(t, p));
  EXPECT_NEAR((back - p).norm(), 0.0f, 1e-5f);
}

TEST(Euler, RoundTripAwayFromGimbalLock) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const EulerAngles e{kPi * u(rng), 1.5 * u(rng), kPi * u(rng)};
    const EulerAngles back = to_euler(to_rotation(e));
    EXPECT_NEAR(back.roll, e.roll, 1e-9);
    EXPECT_NEAR(back.pitch, e.pitch, 1e-9);
    EXPECT_NEAR(back.yaw, e.yaw, 1e-9);
  }
}

TEST(Euler, ComposesAsYawPitchRoll) {
  const EulerAngles e{0.3, -0.2, 1.1};
  const Eigen::Matrix3d expected = Eigen::AngleAxisd(e.yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix() *
                                   Eigen::AngleAxisd(e.pitch, Eigen::Vector3d::UnitY()).toRotationMatrix() *
                                   Eigen::AngleAxisd(e.roll, Eigen::Vector3d::UnitX()).toRotationMatrix();
  EXPECT_LE((to_rotation(e) - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Residual, SelfIsZero) {
  std::mt19937_64 rng(6);
  const RigidTransform t = random_transform(rng);
  EXPECT_LE(residual(t, t).vector().cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Residual, ExtraYawShowsUpInPsiOnly) {
  std::mt19937_64 rng(7);
  const RigidTransform gt = random_transform(rng);
  const double d = deg2rad(1.0);
  const TransformResidual r = residual(gt * RigidTransform::FromEuler({0, 0, d}), gt);
  EXPECT_NEAR(r.dpsi, d, 1e-9);
  EXPECT_NEAR(r.dphi, 0.0, 1e-12);
  EXPECT_NEAR(r.dtheta, 0.0, 1e-12);
  EXPECT_NEAR(Eigen::Vector3d(r.dx, r.dy, r.dz).norm(), 0.0, 1e-12);
  EXPECT_FALSE(r.gimbal_lock);
}

// Relative matrix from the oracle; angles from its entries directly and the
// rotation angle from the matrix logarithm.
TEST(Residual, MatchesRelativeMatrixOracle) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform a = random_transform(rng), b = random_transform(rng);
    const Eigen::Matrix4d rel = oracle_matrix(b).inverse() * oracle_matrix(a);
    const TransformResidual r = residual(a, b);
    EXPECT_NEAR(r.dx, rel(0, 3), 1e-12);
    EXPECT_NEAR(r.dy, rel(1, 3), 1e-12);
    EXPECT_NEAR(r.dz, rel(2, 3), 1e-12);
    EXPECT_NEAR(r.dtheta, std::asin(-rel(2, 0)), 1e-9);
    EXPECT_NEAR(r.dphi, std::atan2(rel(2, 1), rel(2, 2)), 1e-9);
    EXPECT_NEAR(r.dpsi, std::atan2(rel(1, 0), rel(0, 0)), 1e-9);
    const double trace = rel.topLeftCorner<3, 3>().trace();
    const double angle = std::acos(std::clamp((trace - 1.0) / 2.0, -1.0, 1.0));
    EXPECT_NEAR(rotation_angle(b.inverse() * a), angle, 1e-6);
  }
}

TEST(Residual, FlagsGimbalLock) {
  const TransformResidual r = residual(RigidTransform::FromEuler({0.0, kPi / 2, 0.0}), RigidTransform());
  EXPECT_TRUE(r.gimbal_lock);
}

TEST(WrapAngle, MapsIntoHalfOpenInterval) {
  EXPECT_NEAR(wrap_angle(3 * kPi), kPi, 1e-12);
  EXPECT_NEAR(wrap_angle(-kPi), kPi, 1e-12);
  EXPECT_NEAR(wrap_angle(0.5), 0.5, 0.0);
  EXPECT_NEAR(wrap_angle(-0.5 - 4 * kPi), -0.5, 1e-12);
}

TEST(LateralDisplacement, KnownValues) {
  EXPECT_EQ(lateral_displacement(0.0, 100.0), 0.0);
  EXPECT_NEAR(lateral_displacement(deg2rad(1.0), 100.0), 1.745, 1e-3);
  EXPECT_NEAR(lateral_displacement(0.0083, 100.0), 0.830, 1e-3);
}

TEST(Parameters, RoundTrip) {
  Eigen::Matrix<double, 6, 1> p;
  p << 0.5, -1.0, 2.0, 0.1, -0.2, 2.9;
  EXPECT_LE((RigidTransform::FromParameters(p).parameters() - p).cwiseAbs().maxCoeff(), 1e-12);
}

}  // namespace
}  // namespace lidarcal
