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

#include "lidarcal/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "lidarcal/error.hpp"

namespace lidarcal {

void CalibrationProblem::validate() const {
  if (members.size() != sensor_to_calibration.size())
    throw Error(ErrorCode::kInvalidArgument, "problem members and transforms differ in length");
  if (members.size() < 2) throw Error(ErrorCode::kInvalidArgument, "calibration needs at least 2 observations");
  bool has_ref = false, has_other = false;
  for (const auto& m : members) {
    if (m.sensor_id == reference_sensor) has_ref = true;
    else if (m.sensor_id == other_sensor) has_other = true;
    else throw Error(ErrorCode::kInvalidArgument, "observation of unknown sensor '" + m.sensor_id + "'");
    if (m.frame_index < 0 || static_cast<std::size_t>(m.frame_index) >= track.poses.size())
      throw Error(ErrorCode::kMissingPose, "no vehicle pose for frame " + std::to_string(m.frame_index));
  }
  if (!has_ref || !has_other)
    throw Error(ErrorCode::kInvalidArgument, "calibration needs observations from both sensors");
}

std::size_t CalibrationProblem::index_of(const ObservationKey& key) const {
  const auto it = std::find(members.begin(), members.end(), key);
  if (it == members.end())
    throw Error(ErrorCode::kUnknownObservation,
                "no registration for sensor '" + key.sensor_id + "' frame " + std::to_string(key.frame_index));
  return static_cast<std::size_t>(it - members.begin());
}

CalibrationProblem make_problem(const RegistrationResult& registration, const VehiclePoseTrack& track,
                                const std::string& reference_sensor, const RigidTransform& initial_reference,
                                const std::string& other_sensor, const RigidTransform& initial_other) {
  CalibrationProblem p;
  p.members = registration.members;
  p.sensor_to_calibration = registration.sensor_to_calibration;
  p.track = track;
  p.obb = registration.obb.corners;
  p.reference_sensor = reference_sensor;
  p.other_sensor = other_sensor;
  p.initial_reference = initial_reference;
  p.initial_other = initial_other;
  p.validate();
  return p;
}

RigidTransform add_parameters(const RigidTransform& base, const Eigen::Matrix<double, 6, 1>& delta) {
  Eigen::Matrix<double, 6, 1> p = base.parameters() + delta;
  for (int i = 3; i < 6; ++i) p[i] = wrap_angle(p[i]);
  return RigidTransform::FromParameters(p);
}

CalibrationEstimate perturb(const CalibrationProblem& problem, const Eigen::Matrix<double, 12, 1>& delta) {
  const RigidTransform s2s = problem.initial_reference.inverse() * problem.initial_other;
  return {add_parameters(problem.initial_reference, delta.head<6>()), add_parameters(s2s, delta.tail<6>())};
}

namespace {

const RigidTransform& mount_for(const CalibrationProblem& problem, const CalibrationEstimate& candidate,
                                const std::string& sensor, RigidTransform& scratch) {
  if (sensor == problem.reference_sensor) return candidate.reference_to_vehicle;
  scratch = candidate.other_to_vehicle();
  return scratch;
}

}  // namespace

RigidTransform estimate_crt(const CalibrationProblem& problem, const CalibrationEstimate& candidate,
                            const ObservationKey& key) {
  const std::size_t idx = problem.index_of(key);
  RigidTransform scratch;
  const RigidTransform& mount = mount_for(problem, candidate, key.sensor_id, scratch);
  const RigidTransform& vehicle = problem.track.poses.at(static_cast<std::size_t>(key.frame_index)).pose;
  return problem.sensor_to_calibration[idx] * mount.inverse() * vehicle.inverse();
}

double pairwise_error(const RigidTransform& t1, const RigidTransform& t2, const BoxCorners& obb) {
  const BoxCorners a = apply(t1.inverse(), PointCloud(obb));
  const BoxCorners b = apply(t2.inverse(), PointCloud(obb));
  return (a - b).squaredNorm();
}

double percentile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw Error(ErrorCode::kInvalidArgument, "percentile of an empty list");
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

namespace {

void check_k(double k) {
  if (!(k >= 0.0 && k < 50.0)) throw Error(ErrorCode::kInvalidArgument, "percentile k must be in [0, 50)");
}

// Same interpolation as percentile_sorted using selection instead of a full
// sort. `values` is reordered.
double percentile_select(std::vector<double>& values, double p) {
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  auto nth = values.begin() + static_cast<std::ptrdiff_t>(lo);
  std::nth_element(values.begin(), nth, values.end());
  const double v_lo = *nth;
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0 || lo + 1 >= values.size()) return v_lo;
  const double v_hi = *std::min_element(nth + 1, values.end());
  return v_lo + frac * (v_hi - v_lo);
}

}  // namespace

std::vector<double> percentile_filter(const std::vector<double>& errors, double k) {
  check_k(k);
  if (errors.empty()) throw Error(ErrorCode::kInvalidArgument, "percentile filter of an empty list");
  if (k == 0.0) return errors;
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  const double lo = percentile_sorted(sorted, k);
  const double hi = percentile_sorted(sorted, 100.0 - k);
  std::vector<double> out;
  for (double v : errors)
    if (v >= lo && v <= hi) out.push_back(v);
  return out;
}

CostEvaluation evaluate_cost(const CalibrationProblem& problem, const CalibrationEstimate& candidate, double k) {
  check_k(k);
  const std::size_t n = problem.members.size();
  const RigidTransform other = candidate.other_to_vehicle();
  // inv(crt) applied to the corners, per member.
  std::vector<BoxCorners> pts(n);
  for (std::size_t m = 0; m < n; ++m) {
    const auto& key = problem.members[m];
    const RigidTransform& mount = key.sensor_id == problem.reference_sensor ? candidate.reference_to_vehicle : other;
    const RigidTransform& vehicle = problem.track.poses.at(static_cast<std::size_t>(key.frame_index)).pose;
    const RigidTransform inv_crt = vehicle * mount * problem.sensor_to_calibration[m].inverse();
    pts[m] = apply(inv_crt, PointCloud(problem.obb));
  }
  std::vector<double> errors;
  errors.reserve(n * (n - 1) / 2);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) errors.push_back((pts[a] - pts[b]).squaredNorm());

  CostEvaluation out;
  out.pairs = errors.size();
  if (errors.empty()) return out;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  if (k > 0.0) {
    std::vector<double> scratch = errors;
    lo = percentile_select(scratch, k);
    hi = percentile_select(scratch, 100.0 - k);
  }
  for (double e : errors) {
    if (e >= lo && e <= hi) {
      out.cost += e;
      ++out.survivors;
    }
  }
  return out;
}

namespace {

constexpr double kGold = 1.618033988749895;
constexpr double kCGold = 0.3819660112501051;
constexpr double kGrowLimit = 100.0;
constexpr double kTiny = 1e-21;

struct LineMin {
  double alpha{0.0};
  double value{0.0};
};

template <typename G>
void bracket(const G& g, double& ax, double& bx, double& cx, double& fa, double& fb, double& fc) {
  fb = g(bx);
  if (fb > fa) {
    std::swap(ax, bx);
    std::swap(fa, fb);
  }
  cx = bx + kGold * (bx - ax);
  fc = g(cx);
  for (int guard = 0; fb > fc && guard < 200; ++guard) {
    const double r = (bx - ax) * (fb - fc);
    const double q = (bx - cx) * (fb - fa);
    const double denom = 2.0 * std::copysign(std::max(std::abs(q - r), kTiny), q - r);
    double u = bx - ((bx - cx) * q - (bx - ax) * r) / denom;
    const double ulim = bx + kGrowLimit * (cx - bx);
    double fu;
    if ((bx - u) * (u - cx) > 0.0) {
      fu = g(u);
      if (fu < fc) {
        ax = bx;
        bx = u;
        fa = fb;
        fb = fu;
        return;
      }
      if (fu > fb) {
        cx = u;
        fc = fu;
        return;
      }
      u = cx + kGold * (cx - bx);
      fu = g(u);
    } else if ((cx - u) * (u - ulim) > 0.0) {
      fu = g(u);
      if (fu < fc) {
        bx = cx;
        cx = u;
        u = cx + kGold * (cx - bx);
        fb = fc;
        fc = fu;
        fu = g(u);
      }
    } else if ((u - ulim) * (ulim - cx) >= 0.0) {
      u = ulim;
      fu = g(u);
    } else {
      u = cx + kGold * (cx - bx);
      fu = g(u);
    }
    ax = bx;
    bx = cx;
    cx = u;
    fa = fb;
    fb = fc;
    fc = fu;
  }
}

template <typename G>
LineMin brent(const G& g, double ax, double bx, double cx, double fbx, double tol_rel, double tol_abs) {
  double a = std::min(ax, cx), b = std::max(ax, cx);
  double x = bx, w = bx, v = bx;
  double fx = fbx, fw = fbx, fv = fbx;
  double d = 0.0, e = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    const double xm = 0.5 * (a + b);
    const double tol1 = tol_rel * std::abs(x) + tol_abs;
    const double tol2 = 2.0 * tol1;
    if (std::abs(x - xm) <= tol2 - 0.5 * (b - a)) break;
    if (std::abs(e) > tol1) {
      const double r = (x - w) * (fx - fv);
      double q = (x - v) * (fx - fw);
      double p = (x - v) * q - (x - w) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) p = -p;
      q = std::abs(q);
      const double etemp = e;
      e = d;
      if (std::abs(p) >= std::abs(0.5 * q * etemp) || p <= q * (a - x) || p >= q * (b - x)) {
        e = x >= xm ? a - x : b - x;
        d = kCGold * e;
      } else {
        d = p / q;
        const double u = x + d;
        if (u - a < tol2 || b - u < tol2) d = std::copysign(tol1, xm - x);
      }
    } else {
      e = x >= xm ? a - x : b - x;
      d = kCGold * e;
    }
    const double u = std::abs(d) >= tol1 ? x + d : x + std::copysign(tol1, d);
    const double fu = g(u);
    if (fu <= fx) {
      if (u >= x) a = x; else b = x;
      v = w; w = x; x = u;
      fv = fw; fw = fx; fx = fu;
    } else {
      if (u < x) a = u; else b = u;
      if (fu <= fw || w == x) {
        v = w; w = u;
        fv = fw; fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u;
        fv = fu;
      }
    }
  }
  return {x, fx};
}

}  // namespace

PowellResult powell_minimize(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x0,
                             const PowellOptions& options) {
  const Eigen::Index n = x0.size();
  if (n < 1) throw Error(ErrorCode::kInvalidArgument, "powell needs at least one parameter");
  PowellResult res;
  auto eval = [&](const Eigen::VectorXd& x) {
    const double v = f(x);
    ++res.evaluations;
    res.trace.evaluations.push_back(v);
    return v;
  };
  res.x = x0;
  res.fx = eval(x0);
  if (!std::isfinite(res.fx)) throw Error(ErrorCode::kInvalidArgument, "cost is not finite at the start point");
  res.trace.iterates.push_back(res.x);
  res.trace.best.push_back(res.fx);

  Eigen::MatrixXd dirs = Eigen::MatrixXd::Identity(n, n);
  const double tol_abs = 0.1 * options.xtol;

  auto line_minimize = [&](const Eigen::VectorXd& dir) {
    auto g = [&](double alpha) {
      const double v = eval(res.x + alpha * dir);
      return std::isfinite(v) ? v : std::numeric_limits<double>::max();
    };
    double ax = 0.0, bx = options.initial_step, cx = 0.0;
    double fa = res.fx, fb = 0.0, fc = 0.0;
    bracket(g, ax, bx, cx, fa, fb, fc);
    const LineMin lm = brent(g, ax, bx, cx, fb, 1.5e-8, tol_abs);
    if (lm.value < res.fx) {
      res.x += lm.alpha * dir;
      res.fx = lm.value;
    }
  };

  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    const Eigen::VectorXd x_start = res.x;
    const double f_start = res.fx;
    Eigen::Index biggest_idx = 0;
    double biggest = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double before = res.fx;
      line_minimize(dirs.col(i));
      if (before - res.fx > biggest) {
        biggest = before - res.fx;
        biggest_idx = i;
      }
    }
    res.iterations = iter;
    res.trace.iterates.push_back(res.x);
    res.trace.best.push_back(res.fx);

    if (2.0 * (f_start - res.fx) <= options.ftol * (std::abs(f_start) + std::abs(res.fx)) + 1e-30 ||
        (res.x - x_start).lpNorm<Eigen::Infinity>() < options.xtol) {
      res.converged = true;
      break;
    }

    const Eigen::VectorXd step = res.x - x_start;
    const double fe = eval(res.x + step);
    if (fe < f_start) {
      const double a = f_start - res.fx - biggest;
      const double t = 2.0 * (f_start - 2.0 * res.fx + fe) * a * a - biggest * (f_start - fe) * (f_start - fe);
      if (t < 0.0) {
        const Eigen::VectorXd d = step.normalized();
        line_minimize(d);
        dirs.col(biggest_idx) = dirs.col(n - 1);
        dirs.col(n - 1) = d;
        res.trace.best.back() = res.fx;
        res.trace.iterates.back() = res.x;
      }
    }
  }
  return res;
}

namespace {

PowellResult run_stage(const std::function<CostEvaluation(const Eigen::VectorXd&)>& cost, Eigen::Index n,
                       const PowellOptions& options) {
  std::vector<std::size_t> survivors;
  auto f = [&](const Eigen::VectorXd& x) {
    const CostEvaluation c = cost(x);
    survivors.push_back(c.survivors);
    return c.cost;
  };
  PowellResult res = powell_minimize(f, Eigen::VectorXd::Zero(n), options);
  res.trace.survivors = std::move(survivors);
  return res;
}

}  // namespace

S2SResult calibrate_s2s(const CalibrationProblem& problem, const StageOptions& options) {
  problem.validate();
  auto cost = [&](const Eigen::VectorXd& x) {
    return evaluate_cost(problem, perturb(problem, x), options.k);
  };
  S2SResult out;
  out.powell = run_stage(cost, 12, options.powell);
  const CalibrationEstimate best = perturb(problem, out.powell.x);
  out.other_to_reference = best.other_to_reference;
  out.reference_to_vehicle = best.reference_to_vehicle;
  return out;
}

S2VResult calibrate_s2v(const CalibrationProblem& problem, const RigidTransform& other_to_reference,
                        const StageOptions& options, bool pin_translation) {
  problem.validate();
  auto candidate = [&](const Eigen::VectorXd& x) {
    Eigen::Matrix<double, 6, 1> delta = Eigen::Matrix<double, 6, 1>::Zero();
    if (pin_translation) delta.tail<3>() = x;
    else delta = x;
    return CalibrationEstimate{add_parameters(problem.initial_reference, delta), other_to_reference};
  };
  auto cost = [&](const Eigen::VectorXd& x) { return evaluate_cost(problem, candidate(x), options.k); };
  S2VResult out;
  out.powell = run_stage(cost, pin_translation ? 3 : 6, options.powell);
  const CalibrationEstimate best = candidate(out.powell.x);
  out.reference_to_vehicle = best.reference_to_vehicle;
  out.other_to_vehicle = best.other_to_vehicle();
  return out;
}

TransformResidual s2s_residual(const RigidTransform& other_to_vehicle, const RigidTransform& reference_to_vehicle,
                               const RigidTransform& true_other_to_reference) {
  return residual(other_to_vehicle, reference_to_vehicle * true_other_to_reference);
}

}  // namespace lidarcal
