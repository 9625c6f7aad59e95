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

#include "lidarcal/ukf.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Cholesky>

#include "lidarcal/error.hpp"

namespace lidarcal {

namespace {

constexpr int kAugDim = kStateDim + 2;

struct Weights {
  double lambda;
  double mean0;
  double cov0;
  double rest;
};

Weights make_weights(int n, const UkfParams& p) {
  Weights w;
  w.lambda = p.alpha * p.alpha * (n + p.kappa) - n;
  w.mean0 = w.lambda / (n + w.lambda);
  w.cov0 = w.mean0 + (1.0 - p.alpha * p.alpha + p.beta);
  w.rest = 1.0 / (2.0 * (n + w.lambda));
  return w;
}

// Columns: 0, +L_1..+L_n, -L_1..-L_n with L L^T = (n + lambda) P.
template <int N>
Eigen::Matrix<double, N, 2 * N + 1> sigma_offsets(const Eigen::Matrix<double, N, N>& p, double scale) {
  Eigen::LLT<Eigen::Matrix<double, N, N>> llt(scale * p);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::kFilterDivergence, "covariance is not positive definite");
  const Eigen::Matrix<double, N, N> l = llt.matrixL();
  Eigen::Matrix<double, N, 2 * N + 1> out;
  out.col(0).setZero();
  out.template middleCols<N>(1) = l;
  out.template middleCols<N>(N + 1) = -l;
  return out;
}

// Integrals of (s + a tau) * {cos, sin}(w tau) over [0, dt], written in terms
// of theta = w dt with series near zero so the map stays smooth in w.
struct TurnIntegrals {
  double c0, s0, c1, s1;  // int cos, int sin, int tau cos, int tau sin
};

TurnIntegrals turn_integrals(double w, double dt) {
  const double th = w * dt;
  double sinc, omc, g3, g4;
  if (std::abs(th) < 0.1) {
    const double t2 = th * th;
    sinc = 1.0 - t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 72.0)));
    omc = th / 2.0 * (1.0 - t2 / 12.0 * (1.0 - t2 / 30.0 * (1.0 - t2 / 56.0 * (1.0 - t2 / 90.0))));
    g3 = 0.5 - t2 / 8.0 + t2 * t2 / 144.0 - t2 * t2 * t2 / 5760.0 + t2 * t2 * t2 * t2 / 403200.0;
    g4 = th * (1.0 / 3.0 - t2 / 30.0 + t2 * t2 / 840.0 - t2 * t2 * t2 / 45360.0 + t2 * t2 * t2 * t2 / 3991680.0);
  } else {
    const double s = std::sin(th), c = std::cos(th);
    sinc = s / th;
    omc = (1.0 - c) / th;
    g3 = (th * s + c - 1.0) / (th * th);
    g4 = (s - th * c) / (th * th);
  }
  return {dt * sinc, dt * omc, dt * dt * g3, dt * dt * g4};
}

StateVector process(const StateVector& x, double accel, double yaw_rate, double dt) {
  const double psi = x[kYaw];
  const double c = std::cos(psi), sn = std::sin(psi);
  const double speed = x[kVx] * c + x[kVy] * sn;
  const TurnIntegrals in = turn_integrals(yaw_rate, dt);
  const double along = speed * in.c0 + accel * in.c1;
  const double across = speed * in.s0 + accel * in.s1;

  StateVector out = x;
  out[kPx] += c * along - sn * across;
  out[kPy] += sn * along + c * across;
  out[kPz] += x[kVz] * dt;
  const double psi1 = psi + yaw_rate * dt;
  const double speed1 = speed + accel * dt;
  out[kVx] = speed1 * std::cos(psi1);
  out[kVy] = speed1 * std::sin(psi1);
  out[kYaw] = wrap_angle(psi1);
  out[kYawRate] = yaw_rate;
  return out;
}

Eigen::VectorXd observe(MeasurementKind kind, const StateVector& x) {
  switch (kind) {
    case MeasurementKind::kPosition: return x.segment<3>(kPx);
    case MeasurementKind::kVelocity: return x.segment<3>(kVx);
    case MeasurementKind::kYaw: return Eigen::VectorXd::Constant(1, x[kYaw]);
  }
  return {};
}

void symmetrize(StateCovariance& p) { p = 0.5 * (p + p.transpose()).eval(); }

}  // namespace

RigidTransform UkfState::pose() const {
  return RigidTransform::FromEuler({0.0, 0.0, mean[kYaw]}, mean.segment<3>(kPx));
}

UkfParams UkfParams::from_noise(const MeasurementNoise& noise) {
  UkfParams p;
  const LocalTangentPlane& ltp = noise.frame;
  p.accel_sigma = std::max(noise.accel_sigma, 1e-3);
  p.gyro_sigma = std::max(noise.gyro_sigma, 1e-4);
  p.east_sigma = std::max(noise.gps_latlon_sigma_deg * ltp.meters_per_deg_lon(), 1e-3);
  p.north_sigma = std::max(noise.gps_latlon_sigma_deg * ltp.meters_per_deg_lat(), 1e-3);
  p.altitude_sigma = std::max(noise.gps_alt_sigma, 1e-3);
  p.velocity_sigma = std::max(noise.velocity_sigma, 1e-3);
  p.yaw_sigma = std::max(noise.orientation_sigma, 1e-4);
  return p;
}

void check_covariance(const StateCovariance& p) {
  if (!p.allFinite()) throw Error(ErrorCode::kFilterDivergence, "covariance has non-finite entries");
  const double asym = (p - p.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9 * std::max(1.0, p.cwiseAbs().maxCoeff()))
    throw Error(ErrorCode::kFilterDivergence, "covariance lost symmetry");
  Eigen::LLT<StateCovariance> llt(p);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::kFilterDivergence, "covariance is not positive definite");
}

UkfState predict(const UkfState& state, const ImuSample& input, double dt, const UkfParams& params) {
  if (!(dt > 0.0)) throw Error(ErrorCode::kInvalidArgument, "predict needs dt > 0");
  if (!input.accel.allFinite() || !input.gyro.allFinite())
    throw Error(ErrorCode::kInvalidArgument, "non-finite IMU sample");

  // Augment with the two input-noise channels so their effect passes
  // through the nonlinear model.
  Eigen::Matrix<double, kAugDim, kAugDim> p_aug = Eigen::Matrix<double, kAugDim, kAugDim>::Zero();
  p_aug.topLeftCorner<kStateDim, kStateDim>() = state.covariance;
  p_aug(kStateDim, kStateDim) = params.accel_sigma * params.accel_sigma;
  p_aug(kStateDim + 1, kStateDim + 1) = params.gyro_sigma * params.gyro_sigma;

  const Weights w = make_weights(kAugDim, params);
  const auto offsets = sigma_offsets<kAugDim>(p_aug, kAugDim + w.lambda);

  constexpr int kPoints = 2 * kAugDim + 1;
  Eigen::Matrix<double, kStateDim, kPoints> propagated;
  for (int i = 0; i < kPoints; ++i) {
    const StateVector x = state.mean + offsets.col(i).head<kStateDim>();
    propagated.col(i) = process(x, input.accel.x() + offsets(kStateDim, i), input.gyro.z() + offsets(kStateDim + 1, i), dt);
  }

  // Deviations from the central point keep the large, opposite-signed
  // weights of a small alpha from cancelling catastrophically.
  Eigen::Matrix<double, kStateDim, kPoints> dev = propagated.colwise() - propagated.col(0);
  for (int i = 0; i < kPoints; ++i) dev(kYaw, i) = wrap_angle(dev(kYaw, i));
  const StateVector shift = w.rest * dev.rightCols<kPoints - 1>().rowwise().sum();
  dev.colwise() -= shift;

  UkfState out;
  out.time = state.time + dt;
  out.mean = propagated.col(0) + shift;
  out.mean[kYaw] = wrap_angle(out.mean[kYaw]);
  out.covariance = w.cov0 * dev.col(0) * dev.col(0).transpose();
  out.covariance += w.rest * dev.rightCols<kPoints - 1>() * dev.rightCols<kPoints - 1>().transpose();

  StateVector q = StateVector::Zero();
  q[kPx] = q[kPy] = params.position_random_walk;
  q[kPz] = params.vertical_random_walk;
  q[kVx] = q[kVy] = params.velocity_random_walk;
  q[kVz] = params.vertical_velocity_random_walk;
  q[kYaw] = params.yaw_random_walk;
  out.covariance.diagonal() += q * dt;
  symmetrize(out.covariance);
  check_covariance(out.covariance);
  return out;
}

UpdateResult update(const UkfState& state, const Measurement& measurement, const UkfParams& params,
                    double time_tolerance) {
  if (!measurement.value.allFinite() || !measurement.noise_covariance.allFinite())
    throw Error(ErrorCode::kInvalidArgument, "non-finite measurement");
  if (std::abs(measurement.time - state.time) > time_tolerance)
    throw Error(ErrorCode::kInvalidArgument, "measurement time does not match the filter time");
  const bool is_yaw = measurement.kind == MeasurementKind::kYaw;
  const Eigen::Index m = observe(measurement.kind, state.mean).size();
  if (measurement.value.size() != m || measurement.noise_covariance.rows() != m ||
      measurement.noise_covariance.cols() != m)
    throw Error(ErrorCode::kInvalidArgument, "measurement dimension mismatch");

  const Weights w = make_weights(kStateDim, params);
  const auto offsets = sigma_offsets<kStateDim>(state.covariance, kStateDim + w.lambda);
  constexpr int kPoints = 2 * kStateDim + 1;

  Eigen::MatrixXd z(m, kPoints);
  for (int i = 0; i < kPoints; ++i) {
    StateVector x = state.mean + offsets.col(i);
    z.col(i) = observe(measurement.kind, x);
  }
  Eigen::MatrixXd dz = z.colwise() - z.col(0);
  if (is_yaw)
    for (int i = 0; i < kPoints; ++i) dz(0, i) = wrap_angle(dz(0, i));
  const Eigen::VectorXd shift = w.rest * dz.rightCols(kPoints - 1).rowwise().sum();
  dz.colwise() -= shift;
  const Eigen::VectorXd z_pred = z.col(0) + shift;

  // State deviations from the mean equal the offsets exactly.
  Eigen::MatrixXd s = w.cov0 * dz.col(0) * dz.col(0).transpose() +
                      w.rest * dz.rightCols(kPoints - 1) * dz.rightCols(kPoints - 1).transpose() +
                      measurement.noise_covariance;
  const Eigen::Matrix<double, kStateDim, Eigen::Dynamic> cross =
      w.rest * offsets.rightCols<kPoints - 1>() * dz.rightCols(kPoints - 1).transpose();

  Eigen::VectorXd innovation = measurement.value - z_pred;
  if (is_yaw) innovation[0] = wrap_angle(innovation[0]);

  UpdateResult result;
  result.state = state;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (std::abs(innovation[i]) > params.outlier_gate * std::sqrt(s(i, i))) {
      result.accepted = false;
      return result;
    }
  }

  Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
  if (ldlt.info() != Eigen::Success) throw Error(ErrorCode::kFilterDivergence, "innovation covariance is singular");
  const Eigen::Matrix<double, kStateDim, Eigen::Dynamic> gain = ldlt.solve(cross.transpose()).transpose();
  result.state.mean += gain * innovation;
  result.state.mean[kYaw] = wrap_angle(result.state.mean[kYaw]);
  result.state.covariance -= gain * s * gain.transpose();
  symmetrize(result.state.covariance);
  check_covariance(result.state.covariance);
  return result;
}

VehiclePoseTrack estimate_poses(const MeasurementStreams& streams, const std::vector<double>& scan_times,
                                const UkfParams& params) {
  if (streams.gps.empty() || streams.orientation.empty() || streams.velocity.empty() || streams.gyro.empty() ||
      streams.accel.size() != streams.gyro.size())
    throw Error(ErrorCode::kInvalidArgument, "streams must contain IMU, GPS, orientation and velocity samples");

  const LocalTangentPlane& ltp = streams.noise.frame;
  const double t_begin = std::max({streams.gps.front().time, streams.orientation.front().time,
                                   streams.velocity.front().time, streams.gyro.front().time});
  const double t_end = streams.end_time();
  for (double t : scan_times) {
    if (t < t_begin - 1e-9 || t > t_end + 1e-9)
      throw Error(ErrorCode::kOutOfCoverage,
                  "scan time " + std::to_string(t) + " outside measurement coverage [" + std::to_string(t_begin) +
                      ", " + std::to_string(t_end) + "]");
  }

  // Measurement events; ties keep the stream order below.
  struct Event {
    double time;
    int order;
    Measurement measurement;
  };
  std::vector<Event> events;
  const Eigen::Matrix3d r_pos =
      Eigen::Vector3d(params.east_sigma, params.north_sigma, params.altitude_sigma).array().square().matrix().asDiagonal();
  const Eigen::Matrix3d r_vel = Eigen::Matrix3d::Identity() * params.velocity_sigma * params.velocity_sigma;
  const Eigen::MatrixXd r_yaw = Eigen::MatrixXd::Constant(1, 1, params.yaw_sigma * params.yaw_sigma);
  for (const auto& s : streams.gps)
    events.push_back({s.time, 0, {MeasurementKind::kPosition, s.time, ltp.to_local(s.value), r_pos}});
  for (const auto& s : streams.velocity)
    events.push_back({s.time, 1, {MeasurementKind::kVelocity, s.time, s.value, r_vel}});
  for (const auto& s : streams.orientation)
    events.push_back({s.time, 2, {MeasurementKind::kYaw, s.time, Eigen::VectorXd::Constant(1, s.value.z()), r_yaw}});
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    return a.time < b.time || (a.time == b.time && a.order < b.order);
  });

  // Initialize from the latest sample of each stream at t_begin.
  auto latest = [](const std::vector<Vector3Sample>& s, double t) {
    auto it = std::upper_bound(s.begin(), s.end(), t + 1e-12, [](double v, const Vector3Sample& x) { return v < x.time; });
    return it == s.begin() ? s.front() : *(it - 1);
  };
  UkfState state;
  state.time = t_begin;
  state.mean.segment<3>(kPx) = ltp.to_local(latest(streams.gps, t_begin).value);
  state.mean.segment<3>(kVx) = latest(streams.velocity, t_begin).value;
  state.mean[kYaw] = wrap_angle(latest(streams.orientation, t_begin).value.z());
  state.mean[kYawRate] = latest(streams.gyro, t_begin).value.z();
  StateVector p0;
  p0 << params.east_sigma, params.north_sigma, params.altitude_sigma, params.velocity_sigma,
      params.velocity_sigma, params.velocity_sigma, params.yaw_sigma, params.gyro_sigma;
  state.covariance = p0.array().square().matrix().asDiagonal();

  std::size_t imu = 0;
  auto input_at = [&](double t) {
    while (imu + 1 < streams.gyro.size() && streams.gyro[imu + 1].time <= t + 1e-12) ++imu;
    return ImuSample{streams.accel[imu].value, streams.gyro[imu].value};
  };
  // Predicts up to t, switching inputs at every IMU sample in between.
  auto advance = [&](double t) {
    while (state.time < t - 1e-12) {
      const ImuSample in = input_at(state.time);
      double next = t;
      if (imu + 1 < streams.gyro.size()) next = std::min(next, streams.gyro[imu + 1].time);
      if (next <= state.time + 1e-12) next = t;
      state = predict(state, in, next - state.time, params);
    }
    state.time = t;
  };

  std::vector<std::size_t> order(scan_times.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scan_times[a] < scan_times[b]; });

  VehiclePoseTrack track;
  track.poses.resize(scan_times.size());
  std::size_t e = 0;
  for (std::size_t idx : order) {
    const double t = scan_times[idx];
    while (e < events.size() && events[e].time <= t + 1e-12) {
      if (events[e].time >= state.time - 1e-12) {
        advance(events[e].time);
        Measurement m = events[e].measurement;
        m.time = state.time;
        state = update(state, m, params).state;
      }
      ++e;
    }
    advance(t);
    track.poses[idx] = {t, state.pose(), state.covariance};
  }
  return track;
}

}  // namespace lidarcal
