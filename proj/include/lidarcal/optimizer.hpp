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

#ifndef LIDARCAL_OPTIMIZER_HPP
#define LIDARCAL_OPTIMIZER_HPP

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lidarcal/geometry.hpp"
#include "lidarcal/registration.hpp"
#include "lidarcal/ukf.hpp"

namespace lidarcal {

using BoxCorners = Eigen::Matrix<double, 3, 8>;

/// Everything the cost needs: for each member (i, a) of S the registration
/// transform sensor -> calibration frame, the vehicle pose of frame i, and
/// the initial mounts that the candidates perturb.
struct CalibrationProblem {
  std::vector<ObservationKey> members;
  std::vector<RigidTransform> sensor_to_calibration;
  VehiclePoseTrack track;
  BoxCorners obb{BoxCorners::Zero()};
  std::string reference_sensor;  // L2
  std::string other_sensor;      // L1
  RigidTransform initial_reference;
  RigidTransform initial_other;

  /// Throws Error(kInvalidArgument) unless |S| >= 2 with both sensors present.
  void validate() const;
  /// Index of (sensor, frame) in `members`; throws Error(kUnknownObservation).
  std::size_t index_of(const ObservationKey& key) const;
};

/// Builds the problem from a registration run; the OBB corners come from
/// the reconstructed shape.
CalibrationProblem make_problem(const RegistrationResult& registration, const VehiclePoseTrack& track,
                                const std::string& reference_sensor, const RigidTransform& initial_reference,
                                const std::string& other_sensor, const RigidTransform& initial_other);

/// Candidate extrinsics: the reference sensor's mount and the mount of the
/// other sensor relative to the reference.
struct CalibrationEstimate {
  RigidTransform reference_to_vehicle;   // L2 -> V
  RigidTransform other_to_reference;     // L1 -> L2

  RigidTransform other_to_vehicle() const { return reference_to_vehicle * other_to_reference; }
};

/// Adds the parameter offsets to the initial extrinsics in xyz + ZYX Euler
/// coordinates. `delta` holds the reference mount offset first, then the
/// sensor-to-sensor offset.
CalibrationEstimate perturb(const CalibrationProblem& problem, const Eigen::Matrix<double, 12, 1>& delta);

/// Adds `delta` to the parameters of `base`, wrapping the angles into (-pi, pi].
RigidTransform add_parameters(const RigidTransform& base, const Eigen::Matrix<double, 6, 1>& delta);

/// Calibration-frame pose of the reference frame implied by member (i, a).
RigidTransform estimate_crt(const CalibrationProblem& problem, const CalibrationEstimate& candidate,
                            const ObservationKey& key);

/// Sum over the 8 corners of |inv(t1) c - inv(t2) c|^2.
double pairwise_error(const RigidTransform& t1, const RigidTransform& t2, const BoxCorners& obb);

/// Linear-interpolation percentile of already sorted values, p in [0, 100].
double percentile_sorted(const std::vector<double>& sorted, double p);

/// Keeps values within [P_k, P_(100-k)], preserving input order.
std::vector<double> percentile_filter(const std::vector<double>& errors, double k);

struct CostEvaluation {
  double cost{0.0};
  std::size_t pairs{0};
  std::size_t survivors{0};
};

CostEvaluation evaluate_cost(const CalibrationProblem& problem, const CalibrationEstimate& candidate, double k);

inline double filtered_cost(const CalibrationProblem& problem, const CalibrationEstimate& candidate, double k) {
  return evaluate_cost(problem, candidate, k).cost;
}

struct PowellOptions {
  double xtol{1e-6};
  double ftol{1e-8};
  int max_iterations{200};
  /// First trial step of each line search, in parameter units.
  double initial_step{0.01};
};

struct CostTrace {
  std::vector<double> evaluations;            // every cost evaluation
  std::vector<Eigen::VectorXd> iterates;      // start point and end of each iteration
  std::vector<double> best;                   // best cost after each iteration
  std::vector<std::size_t> survivors;         // filter survivors per evaluation (calibration costs only)
};

struct PowellResult {
  Eigen::VectorXd x;
  double fx{0.0};
  int iterations{0};
  int evaluations{0};
  bool converged{false};
  CostTrace trace;
};

/// Powell's conjugate direction method with Brent line searches.
PowellResult powell_minimize(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x0,
                             const PowellOptions& options = {});

struct StageOptions {
  double k{10.0};
  PowellOptions powell;
};

struct S2SResult {
  RigidTransform other_to_reference;     // S2S estimate
  RigidTransform reference_to_vehicle;   // stage-one reference mount, not reported
  PowellResult powell;
};

/// Optimizes all 12 offsets and keeps the sensor-to-sensor part.
S2SResult calibrate_s2s(const CalibrationProblem& problem, const StageOptions& options = {});

struct S2VResult {
  RigidTransform reference_to_vehicle;
  RigidTransform other_to_vehicle;
  PowellResult powell;
};

/// Optimizes the reference mount with the S2S transform held fixed. With
/// `pin_translation` only the three angles move and the translation stays
/// at its initial value.
S2VResult calibrate_s2v(const CalibrationProblem& problem, const RigidTransform& other_to_reference,
                        const StageOptions& options = {}, bool pin_translation = true);

/// Residual of the other sensor's mount against the reference mount composed
/// with the true S2S transform; the shared mount error cancels.
TransformResidual s2s_residual(const RigidTransform& other_to_vehicle, const RigidTransform& reference_to_vehicle,
                               const RigidTransform& true_other_to_reference);

}  // namespace lidarcal

#endif  // LIDARCAL_OPTIMIZER_HPP
