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

#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "lidarcal/error.hpp"
#include "lidarcal/optimizer.hpp"
#include "lidarcal/rng.hpp"

namespace lidarcal {
namespace {

RigidTransform random_transform(Rng& rng, double t = 2.0, double r = 1.0) {
  std::uniform_real_distribution<double> ut(-t, t), ur(-r, r);
  return RigidTransform::FromEuler({ur(rng), ur(rng), ur(rng)}, Eigen::Vector3d(ut(rng), ut(rng), ut(rng)));
}

BoxCorners unit_corners() {
  BoxCorners c;
  c << -1, 1, -1, -1, 1, 1, -1, 1,
       -1, -1, 1, -1, 1, -1, 1, 1,
       -1, -1, -1, 1, -1, 1, 1, 1;
  return 0.3 * c;
}

struct Synthetic {
  CalibrationProblem problem;
  RigidTransform true_reference;
  RigidTransform true_other;
};

// Vehicle on a planar arc observing a static target: the registration
// transforms follow exactly from the true mounts.
Synthetic make_synthetic(const RigidTransform& initial_reference, const RigidTransform& initial_other) {
  Synthetic s;
  s.true_reference = RigidTransform::FromEuler({0.0, deg2rad(10.0), 0.0}, Eigen::Vector3d(1.2, 0.0, 1.8));
  s.true_other = RigidTransform::FromEuler({0.02, deg2rad(9.0), 0.05}, Eigen::Vector3d(1.1, 0.4, 1.7));
  const RigidTransform world_to_calibration = RigidTransform::FromEuler({0.1, -0.2, 0.7}, Eigen::Vector3d(-15, 3, 0.5));
  auto& p = s.problem;
  p.reference_sensor = "L2";
  p.other_sensor = "L1";
  p.obb = unit_corners();
  p.initial_reference = initial_reference;
  p.initial_other = initial_other;
  for (int i = 0; i < 12; ++i) {
    const double yaw = 0.12 * i;
    p.track.poses.push_back({0.1 * i, RigidTransform::FromEuler({0, 0, yaw}, Eigen::Vector3d(3 * std::sin(yaw), 3 - 3 * std::cos(yaw), 0)), {}});
    for (const char* id : {"L1", "L2"}) {
      const RigidTransform& mount = std::string(id) == "L2" ? s.true_reference : s.true_other;
      p.members.push_back({id, i});
      p.sensor_to_calibration.push_back(world_to_calibration * p.track.poses.back().pose * mount);
    }
  }
  // members must be sorted for lookups
  std::vector<std::size_t> order(p.members.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return p.members[a] < p.members[b]; });
  CalibrationProblem sorted = p;
  for (std::size_t i = 0; i < order.size(); ++i) {
    sorted.members[i] = p.members[order[i]];
    sorted.sensor_to_calibration[i] = p.sensor_to_calibration[order[i]];
  }
  p = sorted;
  return s;
}

CalibrationEstimate truth_of(const Synthetic& s) {
  return {s.true_reference, s.true_reference.inverse() * s.true_other};
}

TEST(EstimateCrt, IdentityChain) {
  CalibrationProblem p;
  p.reference_sensor = "L2";
  p.other_sensor = "L1";
  p.members = {{"L1", 0}, {"L2", 0}};
  p.sensor_to_calibration = {RigidTransform(), RigidTransform()};
  p.track.poses.push_back({});
  const CalibrationEstimate est{RigidTransform(), RigidTransform()};
  EXPECT_LE((estimate_crt(p, est, {"L2", 0}).matrix() - Eigen::Matrix4d::Identity()).norm(), 1e-15);
}

TEST(EstimateCrt, MatchesMatrixChain) {
  Rng rng(4);
  CalibrationProblem p;
  p.reference_sensor = "L2";
  p.other_sensor = "L1";
  p.members = {{"L1", 0}, {"L2", 0}};
  p.sensor_to_calibration = {random_transform(rng), random_transform(rng)};
  p.track.poses.push_back({0.0, random_transform(rng), {}});
  const CalibrationEstimate est{random_transform(rng), random_transform(rng)};
  const Eigen::Matrix4d v = p.track.poses[0].pose.matrix();
  const Eigen::Matrix4d ref = est.reference_to_vehicle.matrix();
  const Eigen::Matrix4d oth = ref * est.other_to_reference.matrix();
  const Eigen::Matrix4d want_ref = p.sensor_to_calibration[1].matrix() * ref.inverse() * v.inverse();
  const Eigen::Matrix4d want_oth = p.sensor_to_calibration[0].matrix() * oth.inverse() * v.inverse();
  EXPECT_LE((estimate_crt(p, est, {"L2", 0}).matrix() - want_ref).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((estimate_crt(p, est, {"L1", 0}).matrix() - want_oth).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(estimate_crt(p, est, {"L3", 0}), Error);
}

TEST(PairwiseError, EqualTransformsGiveZero) {
  Rng rng(1);
  const RigidTransform t = random_transform(rng);
  EXPECT_NEAR(pairwise_error(t, t, unit_corners()), 0.0, 1e-20);
}

TEST(PairwiseError, TranslationOffsetCountsEveryCorner) {
  const Eigen::Vector3d d(0.1, -0.2, 0.05);
  EXPECT_NEAR(pairwise_error(RigidTransform(), RigidTransform::FromTranslation(d), unit_corners()), 8.0 * d.squaredNorm(),
              1e-14);
}

TEST(PairwiseError, MatchesCornerLoop) {
  Rng rng(2);
  const BoxCorners c = unit_corners();
  for (int trial = 0; trial < 20; ++trial) {
    const RigidTransform a = random_transform(rng), b = random_transform(rng);
    const Eigen::Matrix4d ai = a.matrix().inverse(), bi = b.matrix().inverse();
    double want = 0.0;
    for (int k = 0; k < 8; ++k) {
      const Eigen::Vector4d h(c(0, k), c(1, k), c(2, k), 1.0);
      want += (ai * h - bi * h).squaredNorm();
    }
    EXPECT_NEAR(pairwise_error(a, b, c), want, 1e-11);
  }
}

TEST(PercentileFilter, TrimsTails) {
  const std::vector<double> v{5, 1, 9, 3, 10, 7, 2, 8, 4, 6};
  const auto kept = percentile_filter(v, 10.0);
  EXPECT_EQ(kept, (std::vector<double>{5, 9, 3, 7, 2, 8, 4, 6}));
}

TEST(PercentileFilter, EdgeCases) {
  const std::vector<double> v{3, 1, 2};
  EXPECT_EQ(percentile_filter(v, 0.0), v);
  const std::vector<double> same(7, 4.0);
  EXPECT_EQ(percentile_filter(same, 10.0), same);
  EXPECT_THROW(percentile_filter({}, 10.0), Error);
  EXPECT_THROW(percentile_filter(v, 60.0), Error);
}

TEST(PercentileFilter, MatchesSortOracle) {
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(5 + trial);
    for (double& x : v) x = u(rng);
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    const double k = 10.0;
    auto interp = [&](double p) {
      const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
      return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    std::vector<double> want;
    for (double x : v)
      if (x >= interp(k) && x <= interp(100.0 - k)) want.push_back(x);
    EXPECT_EQ(percentile_filter(v, k), want);
    EXPECT_DOUBLE_EQ(percentile_sorted(sorted, 37.0), interp(37.0));
  }
}

TEST(Powell, Quadratic) {
  const auto f = [](const Eigen::VectorXd& x) {
    return (x[0] - 3) * (x[0] - 3) + 2 * (x[1] + 1) * (x[1] + 1) + 0.5 * (x[0] - 3) * (x[1] + 1);
  };
  const PowellResult r = powell_minimize(f, Eigen::VectorXd::Zero(2));
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x[0], 3.0, 1e-6);
  EXPECT_NEAR(r.x[1], -1.0, 1e-6);
  EXPECT_EQ(r.trace.evaluations.size(), static_cast<std::size_t>(r.evaluations));
  for (std::size_t i = 1; i < r.trace.best.size(); ++i) EXPECT_LE(r.trace.best[i], r.trace.best[i - 1]);
}

TEST(Powell, Rosenbrock) {
  const auto f = [](const Eigen::VectorXd& x) {
    return 100 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1 - x[0], 2);
  };
  PowellOptions opt;
  opt.max_iterations = 2000;
  opt.ftol = 1e-15;
  opt.xtol = 1e-10;
  const PowellResult r = powell_minimize(f, Eigen::Vector2d(-1.2, 1.0), opt);
  EXPECT_NEAR(r.x[0], 1.0, 1e-4);
  EXPECT_NEAR(r.x[1], 1.0, 1e-4);
}

TEST(Powell, PositiveDefiniteQuadraticIn6D) {
  Rng rng(12);
  std::normal_distribution<double> n;
  Eigen::MatrixXd a(6, 6);
  for (int i = 0; i < 36; ++i) a(i) = n(rng);
  const Eigen::MatrixXd h = a * a.transpose() + Eigen::MatrixXd::Identity(6, 6);
  Eigen::VectorXd xs(6);
  for (int i = 0; i < 6; ++i) xs[i] = n(rng);
  const auto f = [&](const Eigen::VectorXd& x) { return 0.5 * (x - xs).dot(h * (x - xs)); };
  PowellOptions opt;
  opt.ftol = 1e-16;
  opt.max_iterations = 500;
  const PowellResult r = powell_minimize(f, Eigen::VectorXd::Zero(6), opt);
  EXPECT_LE((r.x - xs).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FilteredCost, VanishesAtTruth) {
  const Synthetic s = make_synthetic(RigidTransform(), RigidTransform());
  EXPECT_LT(filtered_cost(s.problem, truth_of(s), 10.0), 1e-10);
  CalibrationEstimate off = truth_of(s);
  off.reference_to_vehicle = off.reference_to_vehicle * RigidTransform::FromEuler({0, 0, deg2rad(1.0)});
  EXPECT_GT(filtered_cost(s.problem, off, 10.0), 1e-4);
}

TEST(FilteredCost, TwoMembersGiveOnePair) {
  Synthetic s = make_synthetic(RigidTransform(), RigidTransform());
  auto& p = s.problem;
  p.members.resize(2);
  p.sensor_to_calibration.resize(2);
  const CostEvaluation e = evaluate_cost(p, truth_of(s), 10.0);
  EXPECT_EQ(e.pairs, 1u);
  EXPECT_EQ(e.survivors, 1u);
}

TEST(FilteredCost, SumsSurvivingPairErrors) {
  Rng rng(5);
  const Synthetic s = make_synthetic(RigidTransform(), RigidTransform());
  const CalibrationEstimate est{random_transform(rng, 0.2, 0.05), random_transform(rng, 0.2, 0.05)};
  std::vector<double> errors;
  const auto& m = s.problem.members;
  for (std::size_t a = 0; a < m.size(); ++a)
    for (std::size_t b = a + 1; b < m.size(); ++b)
      errors.push_back(pairwise_error(estimate_crt(s.problem, est, m[a]), estimate_crt(s.problem, est, m[b]), s.problem.obb));
  double want = 0.0;
  for (double e : percentile_filter(errors, 10.0)) want += e;
  EXPECT_NEAR(filtered_cost(s.problem, est, 10.0), want, 1e-9 * want);
}

TEST(Calibration, PerturbAppliesOffsets) {
  Rng rng(6);
  const Synthetic s = make_synthetic(random_transform(rng), random_transform(rng));
  const CalibrationEstimate zero = perturb(s.problem, Eigen::Matrix<double, 12, 1>::Zero());
  EXPECT_LE((zero.reference_to_vehicle.matrix() - s.problem.initial_reference.matrix()).norm(), 1e-12);
  EXPECT_LE((zero.other_to_vehicle().matrix() - s.problem.initial_other.matrix()).norm(), 1e-12);
}

TEST(Calibration, PinnedS2vRecoversRotation) {
  const Synthetic truth = make_synthetic(RigidTransform(), RigidTransform());
  const RigidTransform start_ref = truth.true_reference * RigidTransform::FromEuler({0.01, -0.02, 0.03});
  const RigidTransform start_oth = start_ref * truth.true_reference.inverse() * truth.true_other;
  const Synthetic s = make_synthetic(start_ref, start_oth);
  StageOptions opt;
  opt.powell.ftol = 1e-14;
  const S2VResult r = calibrate_s2v(s.problem, truth.true_reference.inverse() * truth.true_other, opt);
  const TransformResidual res = residual(r.reference_to_vehicle, truth.true_reference);
  EXPECT_LT(std::abs(res.dphi), 1e-4);
  EXPECT_LT(std::abs(res.dtheta), 1e-4);
  EXPECT_LT(std::abs(res.dpsi), 1e-4);
  // The pinned translation does not move.
  EXPECT_EQ(r.reference_to_vehicle.translation(), start_ref.translation());
}

TEST(S2sResidual, SharedMountErrorCancels) {
  Rng rng(7);
  const RigidTransform ref = random_transform(rng), s2s = random_transform(rng), shared = random_transform(rng, 0.1, 0.05);
  const TransformResidual r = s2s_residual(shared * ref * s2s, shared * ref, s2s);
  EXPECT_LE(r.vector().norm(), 1e-12);
}

TEST(S2sResidual, ReportsSensorToSensorError) {
  const RigidTransform ref = RigidTransform::FromEuler({0, 0.1, 0}, Eigen::Vector3d(1, 0, 2));
  const RigidTransform s2s = RigidTransform::FromTranslation(Eigen::Vector3d(0, 0.5, 0));
  const RigidTransform err = RigidTransform::FromEuler({0, 0, 0.01}, Eigen::Vector3d(0.02, 0, 0));
  const TransformResidual r = s2s_residual(ref * s2s * err, ref, s2s);
  EXPECT_NEAR(r.dpsi, 0.01, 1e-12);
  EXPECT_NEAR(r.dx, 0.02, 1e-12);
}

// The composed S2V estimate of the other sensor equals the reference mount
// times the S2S transform.
TEST(S2sResidual, ChainConsistency) {
  Rng rng(8);
  const CalibrationEstimate e{random_transform(rng), random_transform(rng)};
  const Eigen::Matrix4d want = e.reference_to_vehicle.matrix() * e.other_to_reference.matrix();
  EXPECT_LE((e.other_to_vehicle().matrix() - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CalibrationProblem, ValidateNeedsBothSensors) {
  Synthetic s = make_synthetic(RigidTransform(), RigidTransform());
  EXPECT_NO_THROW(s.problem.validate());
  CalibrationProblem only_l1 = s.problem;
  only_l1.members.clear();
  only_l1.sensor_to_calibration.clear();
  for (std::size_t i = 0; i < s.problem.members.size(); ++i)
    if (s.problem.members[i].sensor_id == "L1") {
      only_l1.members.push_back(s.problem.members[i]);
      only_l1.sensor_to_calibration.push_back(s.problem.sensor_to_calibration[i]);
    }
  EXPECT_THROW(only_l1.validate(), Error);
}

}  // namespace
}  // namespace lidarcal
