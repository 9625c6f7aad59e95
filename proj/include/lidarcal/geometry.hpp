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

#ifndef LIDARCAL_GEOMETRY_HPP
#define LIDARCAL_GEOMETRY_HPP

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lidarcal {

template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;

/// Column-major point set, one point per column.
template <typename Scalar>
using PointCloud_ = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;
using PointCloud = PointCloud_<double>;

template <typename Scalar>
constexpr Scalar deg2rad(Scalar deg) {
  return deg * std::numbers::pi_v<Scalar> / Scalar(180);
}

template <typename Scalar>
constexpr Scalar rad2deg(Scalar rad) {
  return rad * Scalar(180) / std::numbers::pi_v<Scalar>;
}

/// Wraps an angle into (-pi, pi].
template <typename Scalar>
Scalar wrap_angle(Scalar a) {
  constexpr Scalar pi = std::numbers::pi_v<Scalar>;
  a = std::remainder(a, Scalar(2) * pi);
  if (a <= -pi) a += Scalar(2) * pi;
  return a;
}

/// Intrinsic Z-Y-X Euler angles: yaw about z, then pitch about the new y,
/// then roll about the new x. R = Rz(yaw) * Ry(pitch) * Rx(roll).
template <typename Scalar>
struct EulerAngles_ {
  Scalar roll{0};
  Scalar pitch{0};
  Scalar yaw{0};

  Vector3<Scalar> vector() const { return {roll, pitch, yaw}; }
  static EulerAngles_ from_vector(const Vector3<Scalar>& v) { return {v.x(), v.y(), v.z()}; }
};
using EulerAngles = EulerAngles_<double>;

/// Pitch magnitude beyond which the Z-Y-X decomposition is treated as gimbal locked.
template <typename Scalar>
constexpr Scalar gimbal_lock_threshold() {
  return std::numbers::pi_v<Scalar> / Scalar(2) - Scalar(1e-3);
}

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> to_rotation(const EulerAngles_<Scalar>& e) {
  using AngleAxis = Eigen::AngleAxis<Scalar>;
  return (AngleAxis(e.yaw, Vector3<Scalar>::UnitZ()) * AngleAxis(e.pitch, Vector3<Scalar>::UnitY()) *
          AngleAxis(e.roll, Vector3<Scalar>::UnitX()))
      .toRotationMatrix();
}

template <typename Scalar>
EulerAngles_<Scalar> to_euler(const Eigen::Matrix<Scalar, 3, 3>& r) {
  const Scalar s = std::clamp(-r(2, 0), Scalar(-1), Scalar(1));
  EulerAngles_<Scalar> e;
  e.pitch = std::asin(s);
  if (std::abs(e.pitch) < gimbal_lock_threshold<Scalar>()) {
    e.roll = std::atan2(r(2, 1), r(2, 2));
    e.yaw = std::atan2(r(1, 0), r(0, 0));
  } else {
    // Only yaw - roll (or yaw + roll) is defined; put everything into yaw.
    e.roll = Scalar(0);
    e.yaw = std::atan2(-r(0, 1), r(1, 1));
  }
  return e;
}

/// Rigid transform in SE(3) stored as a unit quaternion and a translation.
/// Composition follows the matrix convention: (a * b)(p) = a(b(p)).
template <typename Scalar>
class RigidTransform_ {
 public:
  using Vector3 = lidarcal::Vector3<Scalar>;
  using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;
  using Matrix4 = Eigen::Matrix<Scalar, 4, 4>;
  using Quaternion = Eigen::Quaternion<Scalar>;

  RigidTransform_() : rotation_(Quaternion::Identity()), translation_(Vector3::Zero()) {}

  RigidTransform_(const Quaternion& q, const Vector3& t) : rotation_(q.normalized()), translation_(t) {}

  RigidTransform_(const Matrix3& r, const Vector3& t) : rotation_(Quaternion(r).normalized()), translation_(t) {}

  static RigidTransform_ Identity() { return {}; }

  static RigidTransform_ FromTranslation(const Vector3& t) { return {Quaternion::Identity(), t}; }

  static RigidTransform_ FromEuler(const EulerAngles_<Scalar>& e, const Vector3& t = Vector3::Zero()) {
    return {to_rotation(e), t};
  }

  /// xyz (meters) followed by roll, pitch, yaw (radians).
  static RigidTransform_ FromParameters(const Eigen::Matrix<Scalar, 6, 1>& p) {
    return FromEuler(EulerAngles_<Scalar>::from_vector(p.template tail<3>()), p.template head<3>());
  }

  static RigidTransform_ FromMatrix(const Matrix4& m) {
    return {Matrix3(m.template topLeftCorner<3, 3>()), Vector3(m.template topRightCorner<3, 1>())};
  }

  const Quaternion& rotation() const { return rotation_; }
  const Vector3& translation() const { return translation_; }
  Matrix3 rotation_matrix() const { return rotation_.toRotationMatrix(); }
  EulerAngles_<Scalar> euler() const { return to_euler<Scalar>(rotation_matrix()); }

  Eigen::Matrix<Scalar, 6, 1> parameters() const {
    Eigen::Matrix<Scalar, 6, 1> p;
    p << translation_, euler().vector();
    return p;
  }

  Matrix4 matrix() const {
    Matrix4 m = Matrix4::Identity();
    m.template topLeftCorner<3, 3>() = rotation_matrix();
    m.template topRightCorner<3, 1>() = translation_;
    return m;
  }

  RigidTransform_ inverse() const {
    const Quaternion qi = rotation_.conjugate();
    return {qi, -(qi * translation_)};
  }

  RigidTransform_ operator*(const RigidTransform_& other) const {
    return {rotation_ * other.rotation_, rotation_ * other.translation_ + translation_};
  }

  Vector3 operator*(const Vector3& p) const { return rotation_ * p + translation_; }

  template <typename NewScalar>
  RigidTransform_<NewScalar> cast() const {
    return {rotation_.template cast<NewScalar>(), translation_.template cast<NewScalar>()};
  }

 private:
  Quaternion rotation_;
  Vector3 translation_;
};

using RigidTransform = RigidTransform_<double>;

template <typename Scalar>
RigidTransform_<Scalar> compose(const RigidTransform_<Scalar>& a, const RigidTransform_<Scalar>& b) {
  return a * b;
}

template <typename Scalar>
RigidTransform_<Scalar> invert(const RigidTransform_<Scalar>& t) {
  return t.inverse();
}

template <typename Scalar>
PointCloud_<Scalar> apply(const RigidTransform_<Scalar>& t, const PointCloud_<Scalar>& points) {
  return (t.rotation_matrix() * points).colwise() + t.translation();
}

/// Rotation angle of a transform in radians, in [0, pi].
template <typename Scalar>
Scalar rotation_angle(const RigidTransform_<Scalar>& t) {
  return Scalar(2) * std::atan2(t.rotation().vec().norm(), std::abs(t.rotation().w()));
}

/// Per-axis error of an estimated transform against ground truth. The error
/// is the relative transform inv(gt) * est, so translations are expressed in
/// the ground-truth frame and angles are its Z-Y-X decomposition.
template <typename Scalar>
struct TransformResidual_ {
  Scalar dx{0};
  Scalar dy{0};
  Scalar dz{0};
  Scalar dphi{0};
  Scalar dtheta{0};
  Scalar dpsi{0};
  bool gimbal_lock{false};

  Eigen::Matrix<Scalar, 6, 1> vector() const {
    Eigen::Matrix<Scalar, 6, 1> v;
    v << dx, dy, dz, dphi, dtheta, dpsi;
    return v;
  }
};
using TransformResidual = TransformResidual_<double>;

template <typename Scalar>
TransformResidual_<Scalar> residual(const RigidTransform_<Scalar>& estimate, const RigidTransform_<Scalar>& truth) {
  const RigidTransform_<Scalar> rel = truth.inverse() * estimate;
  const Eigen::Matrix<Scalar, 3, 3> r = rel.rotation_matrix();
  TransformResidual_<Scalar> res;
  res.dx = rel.translation().x();
  res.dy = rel.translation().y();
  res.dz = rel.translation().z();
  const EulerAngles_<Scalar> e = to_euler<Scalar>(r);
  res.dphi = e.roll;
  res.dtheta = e.pitch;
  res.dpsi = e.yaw;
  res.gimbal_lock = std::abs(e.pitch) >= gimbal_lock_threshold<Scalar>();
  return res;
}

/// Sideways offset of an object at `range` seen through a yaw error.
template <typename Scalar>
Scalar lateral_displacement(Scalar yaw_error, Scalar range) {
  return range * std::tan(yaw_error);
}

}  // namespace lidarcal

#endif  // LIDARCAL_GEOMETRY_HPP
