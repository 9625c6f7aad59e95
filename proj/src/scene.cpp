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

#include "lidarcal/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "lidarcal/error.hpp"
#include "lidarcal/rng.hpp"

namespace lidarcal {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Moller-Trumbore; returns the ray parameter or +inf.
double intersect(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Triangle& tri) {
  const Eigen::Vector3d e1 = tri.b - tri.a;
  const Eigen::Vector3d e2 = tri.c - tri.a;
  const Eigen::Vector3d p = d.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-15) return kInf;
  const double inv = 1.0 / det;
  const Eigen::Vector3d s = o - tri.a;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return kInf;
  const Eigen::Vector3d q = s.cross(e1);
  const double v = d.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return kInf;
  const double t = e2.dot(q) * inv;
  return t > 1e-9 ? t : kInf;
}

double box_surface_distance(const Box& box, const Eigen::Vector3d& p) {
  const Eigen::Vector3d half = 0.5 * box.size;
  const Eigen::Vector3d q = (box.rotation.transpose() * (p - box.center)).cwiseAbs() - half;
  const double outside = q.cwiseMax(0.0).norm();
  const double inside = std::min(q.maxCoeff(), 0.0);
  return outside > 0.0 ? outside : -inside;
}

}  // namespace

void LidarConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, "lidar config: " + what); };
  if (!(horizontal_fov_deg > 0.0 && horizontal_fov_deg <= 360.0)) fail("horizontal_fov must be in (0, 360]");
  if (!(vertical_fov_deg > 0.0 && vertical_fov_deg < 180.0)) fail("vertical_fov must be in (0, 180)");
  if (channels < 2) fail("channels must be >= 2");
  if (!(range_noise_sigma >= 0.0)) fail("noise sigma must be >= 0");
  if (!(max_range > 0.0)) fail("max_range must be > 0");
  if (!(azimuth_resolution_deg > 0.0)) fail("azimuth_resolution must be > 0");
  if (!(scan_rate > 0.0)) fail("scan_rate must be > 0");
}

int LidarConfig::azimuth_steps() const {
  if (horizontal_fov_deg >= 360.0) return std::max(1, static_cast<int>(std::lround(360.0 / azimuth_resolution_deg)));
  return static_cast<int>(std::lround(horizontal_fov_deg / azimuth_resolution_deg)) + 1;
}

void SensorRig::validate() const {
  if (sensors.size() < 2) throw Error(ErrorCode::kInvalidConfig, "sensor rig needs at least 2 sensors");
  std::set<std::string> ids;
  for (const auto& s : sensors) {
    if (!ids.insert(s.id).second) throw Error(ErrorCode::kInvalidConfig, "duplicate sensor id '" + s.id + "'");
    s.lidar.validate();
  }
}

std::size_t SensorRig::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < sensors.size(); ++i)
    if (sensors[i].id == id) return i;
  throw Error(ErrorCode::kInvalidConfig, "unknown sensor id '" + id + "'");
}

std::vector<Triangle> TargetShape::mesh() const {
  // Corner index bits: x = bit 0, y = bit 1, z = bit 2.
  static constexpr int kFaces[6][4] = {{0, 2, 6, 4}, {1, 5, 7, 3}, {0, 4, 5, 1},
                                       {2, 3, 7, 6}, {0, 1, 3, 2}, {4, 6, 7, 5}};
  std::vector<Triangle> tris;
  tris.reserve(boxes.size() * 12);
  for (const auto& box : boxes) {
    Eigen::Vector3d corners[8];
    for (int c = 0; c < 8; ++c) {
      const Eigen::Vector3d sign((c & 1) ? 0.5 : -0.5, (c & 2) ? 0.5 : -0.5, (c & 4) ? 0.5 : -0.5);
      corners[c] = pose * box.to_target(sign.cwiseProduct(box.size));
    }
    for (const auto& f : kFaces) {
      tris.push_back({corners[f[0]], corners[f[1]], corners[f[2]]});
      tris.push_back({corners[f[0]], corners[f[2]], corners[f[3]]});
    }
  }
  return tris;
}

PointCloud TargetShape::sample_surface(double spacing) const {
  std::vector<Eigen::Vector3d> pts;
  for (const auto& box : boxes) {
    const Eigen::Vector3d lo = -0.5 * box.size;
    for (int axis = 0; axis < 3; ++axis) {
      const int u = (axis + 1) % 3;
      const int v = (axis + 2) % 3;
      const int nu = std::max(1, static_cast<int>(std::ceil(box.size[u] / spacing)));
      const int nv = std::max(1, static_cast<int>(std::ceil(box.size[v] / spacing)));
      for (int side = 0; side < 2; ++side) {
        for (int i = 0; i <= nu; ++i) {
          for (int j = 0; j <= nv; ++j) {
            Eigen::Vector3d p = lo;
            p[axis] += side * box.size[axis];
            p[u] += box.size[u] * i / nu;
            p[v] += box.size[v] * j / nv;
            pts.push_back(pose * box.to_target(p));
          }
        }
      }
    }
  }
  PointCloud out(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = pts[i];
  return out;
}

double TargetShape::surface_distance(const Eigen::Vector3d& p) const {
  const Eigen::Vector3d local = pose.inverse() * p;
  double best = kInf;
  for (const auto& box : boxes) best = std::min(best, box_surface_distance(box, local));
  return best;
}

TargetShape make_l_target(const RigidTransform& pose, double backrest_recline) {
  TargetShape shape;
  shape.pose = pose;
  shape.boxes.push_back({Eigen::Vector3d(0.0, 0.0, 0.25), Eigen::Vector3d(0.6, 0.6, 0.5), Eigen::Matrix3d::Identity()});
  // The backrest pivots about the seat's +x top edge region; its center sits
  // half a height above the seat along the tilted axis.
  const double s = std::sin(backrest_recline), c = std::cos(backrest_recline);
  shape.boxes.push_back({Eigen::Vector3d(0.225 + 0.3 * s, 0.0, 0.5 + 0.3 * c), Eigen::Vector3d(0.15, 0.6, 0.6),
                         Eigen::AngleAxisd(backrest_recline, Eigen::Vector3d::UnitY()).toRotationMatrix()});
  return shape;
}

Trajectory::Trajectory(double wheelbase, double speed, double steering, RigidTransform start)
    : wheelbase_(wheelbase), speed_(speed), steering_(steering), start_(start) {
  if (!(wheelbase > 0.0)) throw Error(ErrorCode::kInvalidArgument, "wheelbase must be > 0");
  if (!(speed > 0.0)) throw Error(ErrorCode::kInvalidArgument, "speed must be > 0");
  if (!(std::abs(steering) < deg2rad(80.0))) throw Error(ErrorCode::kInvalidArgument, "|steering| must be < 80 deg");
  yaw_rate_ = speed_ * std::tan(steering_) / wheelbase_;
}

double Trajectory::turn_radius() const {
  return std::abs(yaw_rate_) < 1e-15 ? kInf : speed_ / yaw_rate_;
}

double Trajectory::yaw_at(double t) const { return start_.euler().yaw + yaw_rate_ * t; }

RigidTransform Trajectory::pose_at(double t) const {
  const double yaw = yaw_rate_ * t;
  Eigen::Vector3d p = Eigen::Vector3d::Zero();
  if (std::abs(yaw_rate_) < 1e-15) {
    p.x() = speed_ * t;
  } else {
    const double r = speed_ / yaw_rate_;
    p.x() = r * std::sin(yaw);
    p.y() = r * (1.0 - std::cos(yaw));
  }
  return start_ * RigidTransform::FromEuler({0.0, 0.0, yaw}, p);
}

std::vector<TimedPose> simulate_trajectory(double wheelbase, double speed, double steering, double duration,
                                           double step) {
  if (!(duration > 0.0)) throw Error(ErrorCode::kInvalidArgument, "duration must be > 0");
  if (!(step > 0.0)) throw Error(ErrorCode::kInvalidArgument, "step must be > 0");
  const Trajectory traj(wheelbase, speed, steering);
  const auto n = static_cast<long>(std::floor(duration / step + 1e-9));
  std::vector<TimedPose> out;
  out.reserve(static_cast<std::size_t>(n + 1));
  for (long k = 0; k <= n; ++k) {
    const double t = static_cast<double>(k) * step;
    out.push_back({t, traj.pose_at(t)});
  }
  return out;
}

LidarScan raycast_scan(const RigidTransform& lidar_world_pose, const LidarConfig& config,
                       const SceneGeometry& scene, std::uint64_t seed) {
  config.validate();
  const auto tris = scene.target.mesh();

  Eigen::Vector3d sphere_center = Eigen::Vector3d::Zero();
  double sphere_radius = 0.0;
  if (!tris.empty()) {
    Eigen::Vector3d lo = tris.front().a, hi = tris.front().a;
    for (const auto& t : tris) {
      for (const auto* v : {&t.a, &t.b, &t.c}) {
        lo = lo.cwiseMin(*v);
        hi = hi.cwiseMax(*v);
      }
    }
    sphere_center = 0.5 * (lo + hi);
    sphere_radius = 0.5 * (hi - lo).norm() + 1e-9;
  }

  const int n_el = config.channels;
  const int n_az = config.azimuth_steps();
  const bool full_circle = config.horizontal_fov_deg >= 360.0;
  const double h = deg2rad(config.horizontal_fov_deg);
  const double v = deg2rad(config.vertical_fov_deg);

  const Eigen::Matrix3d rot = lidar_world_pose.rotation_matrix();
  const Eigen::Vector3d origin = lidar_world_pose.translation();
  const Eigen::Vector3d oc = sphere_center - origin;
  const double oc2 = oc.squaredNorm();

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<Eigen::Vector3d> hits;
  hits.reserve(static_cast<std::size_t>(n_el) * static_cast<std::size_t>(n_az) / 2);
  for (int i = 0; i < n_el; ++i) {
    const double el = -0.5 * v + v * i / (n_el - 1);
    const double ce = std::cos(el), se = std::sin(el);
    for (int j = 0; j < n_az; ++j) {
      const double az = full_circle ? -std::numbers::pi + 2.0 * std::numbers::pi * j / n_az
                                    : (n_az == 1 ? 0.0 : -0.5 * h + h * j / (n_az - 1));
      const Eigen::Vector3d d_s(ce * std::cos(az), ce * std::sin(az), se);
      const Eigen::Vector3d d_w = rot * d_s;

      double best = kInf;
      if (scene.has_ground && d_w.z() < -1e-12) {
        const double t = (scene.ground_height - origin.z()) / d_w.z();
        if (t > 0.0) best = t;
      }
      if (!tris.empty()) {
        const double tca = oc.dot(d_w);
        const double d2 = oc2 - tca * tca;
        if (d2 <= sphere_radius * sphere_radius && tca + sphere_radius > 0.0) {
          for (const auto& tri : tris) best = std::min(best, intersect(origin, d_w, tri));
        }
      }
      if (best > config.max_range) continue;
      Eigen::Vector3d p = best * d_s;
      if (config.range_noise_sigma > 0.0) {
        const double nx = normal(rng), ny = normal(rng), nz = normal(rng);
        p += config.range_noise_sigma * Eigen::Vector3d(nx, ny, nz);
      }
      hits.push_back(p);
    }
  }

  LidarScan scan;
  scan.points.resize(3, static_cast<Eigen::Index>(hits.size()));
  for (std::size_t k = 0; k < hits.size(); ++k) scan.points.col(static_cast<Eigen::Index>(k)) = hits[k];
  return scan;
}

double LocalTangentPlane::meters_per_deg_lat() const { return kEarthRadius * std::numbers::pi / 180.0; }

double LocalTangentPlane::meters_per_deg_lon() const {
  return meters_per_deg_lat() * std::cos(deg2rad(origin_lat_deg));
}

Eigen::Vector3d LocalTangentPlane::to_geodetic(const Eigen::Vector3d& local) const {
  return {origin_lat_deg + local.y() / meters_per_deg_lat(), origin_lon_deg + local.x() / meters_per_deg_lon(),
          origin_alt + local.z()};
}

Eigen::Vector3d LocalTangentPlane::to_local(const Eigen::Vector3d& geodetic) const {
  return {(geodetic.y() - origin_lon_deg) * meters_per_deg_lon(),
          (geodetic.x() - origin_lat_deg) * meters_per_deg_lat(), geodetic.z() - origin_alt};
}

MeasurementNoise MeasurementNoise::noiseless() {
  MeasurementNoise n;
  n.accel_sigma = n.gyro_sigma = n.gps_latlon_sigma_deg = n.gps_alt_sigma = 0.0;
  n.orientation_sigma = n.velocity_sigma = 0.0;
  return n;
}

double MeasurementStreams::start_time() const {
  double t = kInf;
  for (const auto* s : {&accel, &gyro, &gps, &orientation, &velocity})
    if (!s->empty()) t = std::min(t, s->front().time);
  return t;
}

double MeasurementStreams::end_time() const {
  double t = -kInf;
  for (const auto* s : {&accel, &gyro, &gps, &orientation, &velocity})
    if (!s->empty()) t = std::max(t, s->back().time);
  return t;
}

MeasurementStreams simulate_measurements(const Trajectory& trajectory, double duration,
                                         const MeasurementNoise& noise, std::uint64_t seed) {
  if (!(duration > 0.0)) throw Error(ErrorCode::kInvalidArgument, "duration must be > 0");
  MeasurementStreams out;
  out.noise = noise;

  const double v = trajectory.speed();
  const double w = trajectory.yaw_rate();

  auto times = [duration](double rate) {
    if (!(rate > 0.0)) throw Error(ErrorCode::kInvalidConfig, "measurement rates must be > 0");
    std::vector<double> ts;
    const auto n = static_cast<long>(std::floor(duration * rate + 1e-9));
    for (long k = 0; k <= n; ++k) ts.push_back(static_cast<double>(k) / rate);
    return ts;
  };
  auto noisy = [](Rng& rng, const Eigen::Vector3d& sigma) -> Eigen::Vector3d {
    std::normal_distribution<double> n(0.0, 1.0);
    const double a = n(rng), b = n(rng), c = n(rng);
    return Eigen::Vector3d(a, b, c).cwiseProduct(sigma);
  };

  Rng imu_rng(derive_seed(seed, 1));
  for (double t : times(noise.imu_rate)) {
    // Constant speed on a circle: only the centripetal component remains.
    out.accel.push_back({t, Eigen::Vector3d(0.0, v * w, 0.0) + noisy(imu_rng, Eigen::Vector3d::Constant(noise.accel_sigma))});
    out.gyro.push_back({t, Eigen::Vector3d(0.0, 0.0, w) + noisy(imu_rng, Eigen::Vector3d::Constant(noise.gyro_sigma))});
  }

  Rng gps_rng(derive_seed(seed, 2));
  const Eigen::Vector3d gps_sigma(noise.gps_latlon_sigma_deg, noise.gps_latlon_sigma_deg, noise.gps_alt_sigma);
  for (double t : times(noise.gps_rate)) {
    const Eigen::Vector3d geo = noise.frame.to_geodetic(trajectory.pose_at(t).translation());
    out.gps.push_back({t, geo + noisy(gps_rng, gps_sigma)});
  }

  Rng ori_rng(derive_seed(seed, 3));
  for (double t : times(noise.orientation_rate)) {
    const Eigen::Vector3d truth(0.0, 0.0, wrap_angle(trajectory.yaw_at(t)));
    out.orientation.push_back({t, truth + noisy(ori_rng, Eigen::Vector3d::Constant(noise.orientation_sigma))});
  }

  Rng vel_rng(derive_seed(seed, 4));
  for (double t : times(noise.velocity_rate)) {
    const double yaw = trajectory.yaw_at(t);
    const Eigen::Vector3d truth(v * std::cos(yaw), v * std::sin(yaw), 0.0);
    out.velocity.push_back({t, truth + noisy(vel_rng, Eigen::Vector3d::Constant(noise.velocity_sigma))});
  }
  return out;
}

RigidTransform inject_calibration_error(std::uint64_t seed, const InjectionRanges& ranges) {
  if (!(ranges.translation >= 0.0) || !(ranges.rotation >= 0.0))
    throw Error(ErrorCode::kInvalidArgument, "injection ranges must be non-negative");
  Rng rng(seed);
  std::uniform_real_distribution<double> ut(-ranges.translation, ranges.translation);
  std::uniform_real_distribution<double> ur(-ranges.rotation, ranges.rotation);
  Eigen::Vector3d t;
  for (int i = 0; i < 3; ++i) t[i] = ranges.translation > 0.0 ? ut(rng) : 0.0;
  EulerAngles e;
  e.roll = ranges.rotation > 0.0 ? ur(rng) : 0.0;
  e.pitch = ranges.rotation > 0.0 ? ur(rng) : 0.0;
  e.yaw = ranges.rotation > 0.0 ? ur(rng) : 0.0;
  return RigidTransform::FromEuler(e, t);
}

void write_xyz(const std::filesystem::path& path, const PointCloud& points) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  char buf[96];
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", points(0, i), points(1, i), points(2, i));
    out << buf;
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed for '" + path.string() + "'");
}

PointCloud read_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open point file '" + path.string() + "'");
  std::vector<Eigen::Vector3d> pts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    Eigen::Vector3d p;
    if (!(ss >> p.x() >> p.y() >> p.z()) || !p.allFinite())
      throw Error(ErrorCode::kIo, path.string() + ":" + std::to_string(line_no) + ": expected 'x y z'");
    pts.push_back(p);
  }
  PointCloud out(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = pts[i];
  return out;
}

}  // namespace lidarcal
