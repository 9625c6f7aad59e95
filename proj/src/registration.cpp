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

#include "lidarcal/registration.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <utility>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "lidarcal/error.hpp"
#include "lidarcal/rng.hpp"

namespace lidarcal {

namespace {

// Terms more than this far below the running maximum are dropped from the
// log-sum-exp; exp(-50) is far below double resolution of the sum.
constexpr double kLogCutoff = 50.0;
// Components farther than sqrt(2 * kRadiusLog) standard deviations from a
// point are skipped in the E-step.
constexpr double kRadiusLog = 40.0;

PointCloud kmeanspp_seeds(const PointCloud& points, int count, std::uint64_t seed) {
  const Eigen::Index n = points.cols();
  Rng rng(seed);
  PointCloud centers(3, count);
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centers.col(0) = points.col(first(rng));
  Eigen::VectorXd d2 = (points.colwise() - centers.col(0)).colwise().squaredNorm().transpose();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < count; ++c) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      chosen = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= target && d2[i] > 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = first(rng);
    }
    centers.col(c) = points.col(chosen);
    d2 = d2.cwiseMin((points.colwise() - centers.col(c)).colwise().squaredNorm().transpose());
  }
  return centers;
}

double mean_nearest_neighbor_distance(const PointCloud& pts) {
  const Eigen::Index n = pts.cols();
  if (n < 2) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) best = std::min(best, (pts.col(i) - pts.col(j)).squaredNorm());
    sum += std::sqrt(best);
  }
  return sum / static_cast<double>(n);
}

// Rotation and translation minimizing sum_k w_k |R x_k + t - y_k|^2.
RigidTransform weighted_procrustes(const PointCloud& x, const PointCloud& y, const Eigen::VectorXd& w) {
  const double total = w.sum();
  if (!(total > 0.0)) throw Error(ErrorCode::kDegenerateGeometry, "rigid update has no weight");
  const Eigen::Vector3d cx = x * w / total;
  const Eigen::Vector3d cy = y * w / total;
  const Eigen::Matrix3d h = (x.colwise() - cx) * w.asDiagonal() * (y.colwise() - cy).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d s = svd.singularValues();
  if (!(s[1] > 1e-12 * s[0]) || !(s[0] > 0.0))
    throw Error(ErrorCode::kDegenerateGeometry, "rigid update cross-covariance is rank deficient");
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Eigen::Matrix3d r = svd.matrixV() * d * svd.matrixU().transpose();
  return {r, cy - r * cx};
}

// Uniform grid over the component means. Each component is listed in every
// cell its truncation sphere touches, so a point only has to visit the
// components of its own cell.
class ComponentGrid {
 public:
  ComponentGrid(const PointCloud& means, const Eigen::VectorXd& radius) {
    const Eigen::Index count = means.cols();
    Eigen::Vector3d hi = Eigen::Vector3d::Constant(-std::numeric_limits<double>::infinity());
    lo_ = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
    for (Eigen::Index k = 0; k < count; ++k) {
      lo_ = lo_.array().min(means.col(k).array() - radius[k]).matrix();
      hi = hi.array().max(means.col(k).array() + radius[k]).matrix();
    }
    std::vector<double> r(radius.data(), radius.data() + radius.size());
    std::nth_element(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(r.size() / 2), r.end());
    const double extent = (hi - lo_).maxCoeff();
    cell_ = std::max({r[r.size() / 2], extent / 128.0, 1e-9});
    for (int a = 0; a < 3; ++a)
      dims_[a] = static_cast<long>(std::floor((hi[a] - lo_[a]) / cell_)) + 1;
    offsets_.assign(static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]) + 1, 0);
    // Two passes: count, then fill.
    for (int pass = 0; pass < 2; ++pass) {
      std::vector<std::size_t> cursor;
      if (pass == 1) {
        for (std::size_t c = 1; c < offsets_.size(); ++c) offsets_[c] += offsets_[c - 1];
        entries_.resize(offsets_.back());
        cursor.assign(offsets_.begin(), offsets_.end() - 1);
      }
      for (Eigen::Index k = 0; k < count; ++k) {
        std::array<long, 3> a{}, b{};
        for (int d = 0; d < 3; ++d) {
          a[d] = index(means(d, k) - radius[k], d);
          b[d] = index(means(d, k) + radius[k], d);
        }
        for (long z = a[2]; z <= b[2]; ++z)
          for (long y = a[1]; y <= b[1]; ++y)
            for (long x0 = a[0]; x0 <= b[0]; ++x0) {
              const auto c = static_cast<std::size_t>((z * dims_[1] + y) * dims_[0] + x0);
              if (pass == 0) ++offsets_[c + 1];
              else entries_[cursor[c]++] = static_cast<int>(k);
            }
      }
    }
  }

  /// Components whose truncation sphere may contain p; empty outside the grid.
  std::pair<const int*, const int*> candidates(const Eigen::Vector3d& p) const {
    std::array<long, 3> i{};
    for (int d = 0; d < 3; ++d) {
      const double f = (p[d] - lo_[d]) / cell_;
      if (!(f >= 0.0) || f >= static_cast<double>(dims_[d])) return {nullptr, nullptr};
      i[d] = static_cast<long>(f);
    }
    const auto c = static_cast<std::size_t>((i[2] * dims_[1] + i[1]) * dims_[0] + i[0]);
    return {entries_.data() + offsets_[c], entries_.data() + offsets_[c + 1]};
  }

 private:
  long index(double v, int d) const {
    const long i = static_cast<long>(std::floor((v - lo_[d]) / cell_));
    return std::clamp(i, 0L, dims_[static_cast<std::size_t>(d)] - 1);
  }

  Eigen::Vector3d lo_;
  double cell_{1.0};
  std::array<long, 3> dims_{};
  std::vector<std::size_t> offsets_;
  std::vector<int> entries_;
};

}  // namespace

std::vector<PrealignedCloud> prealign(const std::vector<LidarScan>& scans,
                                      const std::map<std::string, RigidTransform>& initial_extrinsics,
                                      const VehiclePoseTrack& track) {
  std::vector<PrealignedCloud> out;
  out.reserve(scans.size());
  for (const auto& scan : scans) {
    const auto ext = initial_extrinsics.find(scan.sensor_id);
    if (ext == initial_extrinsics.end())
      throw Error(ErrorCode::kInvalidArgument, "no initial extrinsic for sensor '" + scan.sensor_id + "'");
    if (scan.frame_index < 0 || static_cast<std::size_t>(scan.frame_index) >= track.poses.size())
      throw Error(ErrorCode::kMissingPose, "no vehicle pose for frame " + std::to_string(scan.frame_index) +
                                               " of sensor '" + scan.sensor_id + "'");
    PrealignedCloud c;
    c.sensor_id = scan.sensor_id;
    c.frame_index = scan.frame_index;
    c.chain = track.poses[static_cast<std::size_t>(scan.frame_index)].pose * ext->second;
    c.points = apply(c.chain, scan.points);
    out.push_back(std::move(c));
  }
  return out;
}

namespace {

struct EmStage {
  int components{0};
  double initial_variance{0.0};
  int max_iterations{0};
  bool rotate{true};
};

struct EmState {
  std::vector<RigidTransform> transforms;
  GaussianMixture gmm;
  std::vector<double> log_likelihood;
  int iterations{0};
  bool converged{false};
};

// Mahalanobis rigid-step objective from per-component statistics of one
// cloud: sum_k sum_i r_ik |R x_i + t - mu_k|^2_{P_k}.
struct ComponentStats {
  int k;
  double lambda;
  Eigen::Vector3d s;   // sum r x
  Eigen::Matrix3d S;   // sum r x x^T
};

double mahalanobis_objective(const std::vector<ComponentStats>& stats, const GaussianMixture& gmm,
                             const std::vector<Eigen::Matrix3d>& prec, const Eigen::Matrix3d& r,
                             const Eigen::Vector3d& t) {
  double f = 0.0;
  for (const auto& c : stats) {
    const Eigen::Matrix3d& p = prec[static_cast<std::size_t>(c.k)];
    const Eigen::Vector3d d = t - gmm.means.col(c.k);
    f += (p * (r * c.S * r.transpose())).trace() + 2.0 * d.dot(p * (r * c.s)) + c.lambda * d.dot(p * d);
  }
  return f;
}

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

// A few damped Gauss-Newton steps on the Mahalanobis objective; a step is
// only taken when it lowers the objective, so the likelihood cannot drop.
RigidTransform mahalanobis_rigid_step(const std::vector<ComponentStats>& stats, const GaussianMixture& gmm,
                                      const std::vector<Eigen::Matrix3d>& prec,
                                      const std::vector<Eigen::Matrix3d>& prec_sqrt, const RigidTransform& start,
                                      bool rotate) {
  Eigen::Matrix3d r = start.rotation_matrix();
  Eigen::Vector3d t = start.translation();
  if (!rotate) {
    Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
    Eigen::Vector3d b = Eigen::Vector3d::Zero();
    for (const auto& c : stats) {
      const Eigen::Matrix3d& p = prec[static_cast<std::size_t>(c.k)];
      h += c.lambda * p;
      b += p * (c.lambda * gmm.means.col(c.k) - r * c.s);
    }
    const Eigen::LDLT<Eigen::Matrix3d> ldlt(h);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0))
      throw Error(ErrorCode::kDegenerateGeometry, "translation update is ill-posed");
    return {start.rotation(), ldlt.solve(b)};
  }

  double f = mahalanobis_objective(stats, gmm, prec, r, t);
  for (int it = 0; it < 3; ++it) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& c : stats) {
      const auto k = static_cast<std::size_t>(c.k);
      const Eigen::Matrix3d& p = prec[k];
      const Eigen::Vector3d a = r * c.s;
      const Eigen::Matrix3d big_a = r * c.S * r.transpose();
      const Eigen::Vector3d d = t - gmm.means.col(c.k);
      // sum_i r_i [a_i]x^T P [a_i]x, with P = sum_m l_m l_m^T.
      for (int m = 0; m < 3; ++m) {
        const Eigen::Matrix3d lm = skew(prec_sqrt[k].col(m));
        h.topLeftCorner<3, 3>() += lm * big_a * lm.transpose();
      }
      const Eigen::Matrix3d cross = skew(a) * p;
      h.topRightCorner<3, 3>() += cross;
      h.bottomRightCorner<3, 3>() += c.lambda * p;
      const Eigen::Matrix3d ap = big_a * p;
      g.head<3>() += Eigen::Vector3d(ap(1, 2) - ap(2, 1), ap(2, 0) - ap(0, 2), ap(0, 1) - ap(1, 0)) + a.cross(p * d);
      g.tail<3>() += p * (a + c.lambda * d);
    }
    h.bottomLeftCorner<3, 3>() = h.topRightCorner<3, 3>().transpose();
    const double damping = 1e-9 * h.trace() / 6.0;
    h.diagonal().array() += damping;
    const Eigen::LDLT<Eigen::Matrix<double, 6, 6>> ldlt(h);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0))
      throw Error(ErrorCode::kDegenerateGeometry, "rigid update is ill-posed");
    Eigen::Matrix<double, 6, 1> delta = -ldlt.solve(g);
    bool improved = false;
    double gain = 0.0;
    for (int half = 0; half < 8 && !improved; ++half, delta *= 0.5) {
      const double angle = delta.head<3>().norm();
      const Eigen::Matrix3d dr =
          angle > 0.0 ? Eigen::AngleAxisd(angle, delta.head<3>() / angle).toRotationMatrix() : Eigen::Matrix3d::Identity();
      const Eigen::Matrix3d r1 = dr * r;
      const Eigen::Vector3d t1 = t + delta.tail<3>();
      const double f1 = mahalanobis_objective(stats, gmm, prec, r1, t1);
      if (f1 < f) {
        gain = f - f1;
        r = r1;
        t = t1;
        f = f1;
        improved = true;
      }
    }
    if (!improved || gain <= 1e-12 * std::abs(f)) break;
  }
  return {r, t};
}

// Eigenvalue floor for a symmetric covariance; fills the precision, its
// square-root factor and the log-determinant.
void floor_covariance(Eigen::Matrix3d& cov, double floor, Eigen::Matrix3d& prec, Eigen::Matrix3d& prec_sqrt,
                      double& logdet, double& max_eig) {
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(0.5 * (cov + cov.transpose()));
  const Eigen::Vector3d ev = es.eigenvalues().cwiseMax(floor);
  const Eigen::Matrix3d& v = es.eigenvectors();
  cov = v * ev.asDiagonal() * v.transpose();
  prec_sqrt = v * ev.cwiseInverse().cwiseSqrt().asDiagonal();
  prec = prec_sqrt * prec_sqrt.transpose();
  logdet = ev.array().log().sum();
  max_eig = ev.maxCoeff();
}

// One EM run from the given transforms with a fresh k-means++ mixture.
void run_em(const std::vector<PointCloud>& x, const EmStage& stage, const JointRegistrationParams& params,
            std::uint64_t seed, double outlier_density, EmState& st) {
  const std::size_t m = x.size();
  const int J = stage.components;
  Eigen::Index total_points = 0;
  for (const auto& c : x) total_points += c.cols();
  PointCloud all(3, total_points);
  {
    Eigen::Index off = 0;
    for (std::size_t j = 0; j < m; ++j) {
      all.middleCols(off, x[j].cols()) = apply(st.transforms[j], x[j]);
      off += x[j].cols();
    }
  }
  GaussianMixture& gmm = st.gmm;
  gmm.means = kmeanspp_seeds(all, J, seed);
  double var0 = stage.initial_variance;
  if (!(var0 > 0.0)) {
    const double s = params.initial_sigma_scale * mean_nearest_neighbor_distance(gmm.means);
    var0 = s * s;
  }
  var0 = std::max(var0, params.min_variance);
  gmm.variances = Eigen::VectorXd::Constant(J, var0);
  gmm.weights = Eigen::VectorXd::Constant(J, 1.0 / J);
  gmm.outlier_weight = params.outlier_weight;
  gmm.outlier_density = outlier_density;
  const bool full = params.full_covariance;
  std::vector<Eigen::Matrix3d> prec, prec_sqrt;
  Eigen::VectorXd logdet;
  if (full) {
    gmm.covariances.assign(static_cast<std::size_t>(J), var0 * Eigen::Matrix3d::Identity());
    prec.assign(static_cast<std::size_t>(J), Eigen::Matrix3d::Identity() / var0);
    prec_sqrt.assign(static_cast<std::size_t>(J), Eigen::Matrix3d::Identity() / std::sqrt(var0));
    logdet = Eigen::VectorXd::Constant(J, 3.0 * std::log(var0));
  } else {
    gmm.covariances.clear();
  }

  // Sufficient statistics per (cloud, component), in the cloud's own frame.
  std::vector<Eigen::VectorXd> lam(m);
  std::vector<PointCloud> wsum(m);
  std::vector<Eigen::VectorXd> sq(m);
  std::vector<std::vector<Eigen::Matrix3d>> scatter(full ? m : 0);

  const double log_norm = 1.5 * std::log(2.0 * std::numbers::pi);
  const double log_outlier = params.outlier_weight > 0.0 ? std::log(params.outlier_weight * outlier_density)
                                                         : -std::numeric_limits<double>::infinity();
  const double log_inlier = std::log1p(-params.outlier_weight);

  double prev_mean_ll = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd logc(J), inv2s(J), terms(J);
  std::vector<int> all_components(static_cast<std::size_t>(J));
  for (int k = 0; k < J; ++k) all_components[static_cast<std::size_t>(k)] = k;
  double floor = var0;
  st.converged = false;
  int iter = 0;
  for (;; ++iter) {
    // E-step.
    for (int k = 0; k < J; ++k) {
      const double half_logdet = full ? 0.5 * logdet[k] : 1.5 * std::log(gmm.variances[k]);
      logc[k] = std::log(gmm.weights[k]) + log_inlier - log_norm - half_logdet;
      inv2s[k] = 0.5 / gmm.variances[k];
    }
    Eigen::VectorXd radius(J);
    for (int k = 0; k < J; ++k) radius[k] = std::sqrt(2.0 * kRadiusLog * gmm.variances[k]);
    const ComponentGrid grid(gmm.means, radius);
    double ll = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const Eigen::Index n = x[j].cols();
      const PointCloud y = apply(st.transforms[j], x[j]);
      lam[j].setZero(J);
      wsum[j].setZero(3, J);
      sq[j].setZero(J);
      if (full) scatter[j].assign(static_cast<std::size_t>(J), Eigen::Matrix3d::Zero());
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Vector3d yi = y.col(i);
        auto [first, last] = grid.candidates(yi);
        if (first == last && !std::isfinite(log_outlier)) {
          first = all_components.data();
          last = first + J;
        }
        const auto nc = static_cast<Eigen::Index>(last - first);
        double top = log_outlier;
        for (Eigen::Index c = 0; c < nc; ++c) {
          const int k = first[c];
          const Eigen::Vector3d d = gmm.means.col(k) - yi;
          terms[c] = logc[k] - (full ? 0.5 * d.dot(prec[static_cast<std::size_t>(k)] * d) : d.squaredNorm() * inv2s[k]);
          top = std::max(top, terms[c]);
        }
        double sum = std::isfinite(log_outlier) ? std::exp(log_outlier - top) : 0.0;
        for (Eigen::Index c = 0; c < nc; ++c)
          if (terms[c] > top - kLogCutoff) sum += std::exp(terms[c] - top);
        const double lse = top + std::log(sum);
        ll += lse;
        const Eigen::Vector3d xi = x[j].col(i);
        const double xi_sq = xi.squaredNorm();
        for (Eigen::Index c = 0; c < nc; ++c) {
          if (terms[c] <= top - kLogCutoff) continue;
          const int k = first[c];
          const double r = std::exp(terms[c] - lse);
          lam[j][k] += r;
          wsum[j].col(k) += r * xi;
          sq[j][k] += r * xi_sq;
          if (full) scatter[j][static_cast<std::size_t>(k)].noalias() += r * xi * xi.transpose();
        }
      }
    }
    st.log_likelihood.push_back(ll);
    const double mean_ll = ll / static_cast<double>(total_points);
    const bool annealed = floor <= params.min_variance;
    const double gain = mean_ll - prev_mean_ll;
    if (annealed && iter > 0 && gain < params.tolerance) {
      st.converged = true;
      break;
    }
    if (iter >= stage.max_iterations) {
      st.converged = annealed && gain <= 10.0 * params.tolerance;
      break;
    }
    prev_mean_ll = mean_ll;
    if (params.anneal_rate > 0.0) floor = std::max(floor * params.anneal_rate, params.min_variance);
    else floor = params.min_variance;

    // CM-step 1: rigid transforms against the current mixture. Every cloud
    // is updated, then the set is re-expressed relative to cloud 0 so that
    // its transform stays the identity. The likelihood does not depend on a
    // common rigid motion, and clouds with identical data move identically.
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<int> active;
      for (int k = 0; k < J; ++k)
        if (lam[j][k] > 1e-12) active.push_back(k);
      const auto na = static_cast<Eigen::Index>(active.size());
      if (na < 3)
        throw Error(ErrorCode::kDegenerateGeometry, "cloud " + std::to_string(j) + " supports fewer than 3 components");
      if (full) {
        std::vector<ComponentStats> stats;
        stats.reserve(active.size());
        for (int k : active)
          stats.push_back({k, lam[j][k], wsum[j].col(k), scatter[j][static_cast<std::size_t>(k)]});
        st.transforms[j] = mahalanobis_rigid_step(stats, gmm, prec, prec_sqrt, st.transforms[j], stage.rotate);
        continue;
      }
      PointCloud xs(3, na), ys(3, na);
      Eigen::VectorXd w(na);
      for (Eigen::Index a = 0; a < na; ++a) {
        const int k = active[static_cast<std::size_t>(a)];
        xs.col(a) = wsum[j].col(k) / lam[j][k];
        ys.col(a) = gmm.means.col(k);
        w[a] = lam[j][k] / gmm.variances[k];
      }
      if (stage.rotate) {
        st.transforms[j] = weighted_procrustes(xs, ys, w);
      } else {
        const Eigen::Matrix3d r = st.transforms[j].rotation_matrix();
        const Eigen::Vector3d t = (ys - r * xs) * w / w.sum();
        st.transforms[j] = RigidTransform(st.transforms[j].rotation(), t);
      }
    }
    const RigidTransform gauge = st.transforms[0].inverse();
    for (auto& t : st.transforms) t = gauge * t;
    st.transforms[0] = RigidTransform::Identity();

    // CM-step 2: means, variances and weights given the new transforms.
    Eigen::VectorXd lam_k = Eigen::VectorXd::Zero(J);
    PointCloud first = PointCloud::Zero(3, J);
    Eigen::VectorXd second = Eigen::VectorXd::Zero(J);
    std::vector<Eigen::Matrix3d> moment(full ? static_cast<std::size_t>(J) : 0, Eigen::Matrix3d::Zero());
    for (std::size_t j = 0; j < m; ++j) {
      const Eigen::Matrix3d r = st.transforms[j].rotation_matrix();
      const Eigen::Vector3d t = st.transforms[j].translation();
      const PointCloud rw = r * wsum[j];
      for (int k = 0; k < J; ++k) {
        lam_k[k] += lam[j][k];
        first.col(k) += rw.col(k) + lam[j][k] * t;
        second[k] += sq[j][k] + 2.0 * t.dot(rw.col(k)) + lam[j][k] * t.squaredNorm();
        if (full && lam[j][k] > 0.0) {
          const Eigen::Vector3d a = rw.col(k);
          moment[static_cast<std::size_t>(k)] += r * scatter[j][static_cast<std::size_t>(k)] * r.transpose() +
                                                 a * t.transpose() + t * a.transpose() + lam[j][k] * t * t.transpose();
        }
      }
    }
    for (int k = 0; k < J; ++k) {
      if (lam_k[k] < 1e-12) continue;
      const Eigen::Vector3d mu = first.col(k) / lam_k[k];
      gmm.means.col(k) = mu;
      if (full) {
        const auto kk = static_cast<std::size_t>(k);
        gmm.covariances[kk] = moment[kk] / lam_k[k] - mu * mu.transpose();
        floor_covariance(gmm.covariances[kk], floor, prec[kk], prec_sqrt[kk], logdet[k], gmm.variances[k]);
        continue;
      }
      const double var = (second[k] - 2.0 * mu.dot(first.col(k)) + lam_k[k] * mu.squaredNorm()) / (3.0 * lam_k[k]);
      gmm.variances[k] = std::max(var, floor);
    }
    const double lam_total = lam_k.sum();
    if (lam_total > 0.0) {
      // Components that own no points keep a tiny positive weight so that
      // log(weight) stays finite; they remain inert.
      gmm.weights = (lam_k / lam_total).cwiseMax(std::numeric_limits<double>::min());
      gmm.weights /= gmm.weights.sum();
    }
  }
  st.iterations += iter;
}

}  // namespace

JointRegistration joint_register(const std::vector<PointCloud>& clouds, const JointRegistrationParams& params) {
  const std::size_t m = clouds.size();
  if (m < 2) throw Error(ErrorCode::kInvalidArgument, "joint registration needs at least 2 clouds");
  if (params.components < 1) throw Error(ErrorCode::kInvalidArgument, "components must be >= 1");
  if (params.refine_components < 0) throw Error(ErrorCode::kInvalidArgument, "refine components must be >= 0");
  if (!(params.outlier_weight >= 0.0 && params.outlier_weight < 1.0))
    throw Error(ErrorCode::kInvalidArgument, "outlier weight must be in [0, 1)");
  if (!(params.min_variance > 0.0)) throw Error(ErrorCode::kInvalidArgument, "min variance must be > 0");
  if (!(params.anneal_rate >= 0.0 && params.anneal_rate < 1.0))
    throw Error(ErrorCode::kInvalidArgument, "anneal rate must be in [0, 1)");
  Eigen::Index total_points = 0;
  for (const auto& c : clouds) {
    if (c.cols() == 0) throw Error(ErrorCode::kInvalidArgument, "joint registration got an empty cloud");
    total_points += c.cols();
  }

  // Work in coordinates centered on the data to keep the expanded variance
  // sums well conditioned.
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  for (const auto& c : clouds) {
    center += c.rowwise().sum();
    lo = lo.cwiseMin(c.rowwise().minCoeff());
    hi = hi.cwiseMax(c.rowwise().maxCoeff());
  }
  center /= static_cast<double>(total_points);
  std::vector<PointCloud> x(m);
  for (std::size_t j = 0; j < m; ++j) x[j] = clouds[j].colwise() - center;
  const double outlier_density = 1.0 / (hi - lo).cwiseMax(1e-3).prod();

  EmState st;
  st.transforms.assign(m, RigidTransform::Identity());
  const double s0 = params.initial_sigma;
  run_em(x, {params.components, s0 > 0.0 ? s0 * s0 : -1.0, params.max_iterations, !params.coarse_translation_only}, params,
         derive_seed(params.seed, 0), outlier_density, st);
  if (params.refine_components > 0) {
    const double s1 = params.refine_initial_sigma;
    run_em(x, {params.refine_components, s1 > 0.0 ? s1 * s1 : -1.0, params.max_iterations, true}, params,
           derive_seed(params.seed, 1), outlier_density, st);
  }

  JointRegistration out;
  out.iterations = st.iterations;
  out.converged = st.converged;
  out.log_likelihood = std::move(st.log_likelihood);
  // Undo the centering and move the origin to the centroid of the means.
  const Eigen::Vector3d mean_centroid = st.gmm.means.rowwise().mean();
  const RigidTransform to_calib = RigidTransform::FromTranslation(-mean_centroid);
  const RigidTransform from_input = RigidTransform::FromTranslation(-center);
  out.transforms.reserve(m);
  for (const auto& t : st.transforms) out.transforms.push_back(to_calib * t * from_input);
  st.gmm.means.colwise() -= mean_centroid;
  out.mixture = std::move(st.gmm);
  return out;
}

OrientedBox oriented_bounding_box(const PointCloud& points) {
  const Eigen::Index n = points.cols();
  if (n < 4) throw Error(ErrorCode::kCoplanarInput, "oriented bounding box needs at least 4 points");
  const Eigen::Vector3d mean = points.rowwise().mean();
  const PointCloud centered = points.colwise() - mean;
  const Eigen::Matrix3d cov = centered * centered.transpose() / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  const Eigen::Vector3d ev = es.eigenvalues();  // ascending
  if (!(ev[2] > 0.0) || ev[0] < 1e-12 * ev[2])
    throw Error(ErrorCode::kCoplanarInput, "points are coplanar");

  Eigen::Matrix3d axes;
  axes << es.eigenvectors().col(2), es.eigenvectors().col(1), es.eigenvectors().col(0);

  auto box_volume = [&](const Eigen::Matrix3d& a) {
    const Eigen::Matrix3Xd proj = a.transpose() * centered;
    return (proj.rowwise().maxCoeff() - proj.rowwise().minCoeff()).prod();
  };

  const bool degenerate = (ev[1] - ev[0]) < 1e-6 * ev[2] || (ev[2] - ev[1]) < 1e-6 * ev[2];
  if (degenerate && n <= 16) {
    std::vector<Eigen::Vector3d> dirs;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const Eigen::Vector3d d = points.col(j) - points.col(i);
        if (d.norm() > 1e-12) dirs.push_back(d.normalized());
      }
    double best = box_volume(axes);
    for (const auto& d1 : dirs) {
      for (const auto& d2 : dirs) {
        const Eigen::Vector3d o = d2 - d1.dot(d2) * d1;
        if (o.norm() < 1e-6) continue;
        Eigen::Matrix3d cand;
        cand.col(0) = d1;
        cand.col(1) = o.normalized();
        cand.col(2) = d1.cross(cand.col(1));
        const double v = box_volume(cand);
        if (v < best * (1.0 - 1e-12)) {
          best = v;
          axes = cand;
        }
      }
    }
    // Order by decreasing spread along each axis.
    std::array<int, 3> idx{0, 1, 2};
    Eigen::Vector3d spread = (axes.transpose() * centered).rowwise().squaredNorm();
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return spread[a] > spread[b] * (1.0 + 1e-12); });
    Eigen::Matrix3d sorted;
    for (int c = 0; c < 3; ++c) sorted.col(c) = axes.col(idx[static_cast<std::size_t>(c)]);
    axes = sorted;
  }

  for (int c = 0; c < 3; ++c) {
    const double s = axes.col(c).sum();
    bool flip = s < 0.0;
    if (std::abs(s) < 1e-12) {
      for (int r = 0; r < 3; ++r)
        if (std::abs(axes(r, c)) > 1e-12) {
          flip = axes(r, c) < 0.0;
          break;
        }
    }
    if (flip) axes.col(c) = -axes.col(c);
  }

  const Eigen::Matrix3Xd proj = axes.transpose() * centered;
  const Eigen::Vector3d lo = proj.rowwise().minCoeff();
  const Eigen::Vector3d hi = proj.rowwise().maxCoeff();

  OrientedBox box;
  box.axes = axes;
  box.extents = hi - lo;
  box.center = mean + axes * (0.5 * (lo + hi));
  static constexpr int kSigns[8][3] = {{-1, -1, -1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1},
                                       {1, 1, -1},   {1, -1, 1},  {-1, 1, 1},  {1, 1, 1}};
  for (int c = 0; c < 8; ++c) {
    Eigen::Vector3d local;
    for (int a = 0; a < 3; ++a) local[a] = kSigns[c][a] < 0 ? lo[a] : hi[a];
    box.corners.col(c) = mean + axes * local;
  }
  return box;
}

RegistrationResult register_targets(const std::vector<PrealignedCloud>& clouds, const RegistrationParams& params) {
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < clouds.size(); ++i)
    if (clouds[i].points.cols() >= params.min_points) chosen.push_back(i);
  std::sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) {
    return ObservationKey{clouds[a].sensor_id, clouds[a].frame_index} <
           ObservationKey{clouds[b].sensor_id, clouds[b].frame_index};
  });

  std::vector<PointCloud> pts;
  pts.reserve(chosen.size());
  for (std::size_t i : chosen) pts.push_back(clouds[i].points);

  RegistrationResult out;
  out.joint = joint_register(pts, params.joint);
  for (std::size_t c = 0; c < chosen.size(); ++c) {
    const auto& cloud = clouds[chosen[c]];
    out.members.push_back({cloud.sensor_id, cloud.frame_index});
    out.reference_to_calibration.push_back(out.joint.transforms[c]);
    out.sensor_to_calibration.push_back(out.joint.transforms[c] * cloud.chain);
  }

  const double min_weight =
      params.shape_weight_fraction / static_cast<double>(out.joint.mixture.weights.size());
  std::vector<Eigen::Index> keep;
  for (Eigen::Index k = 0; k < out.joint.mixture.weights.size(); ++k)
    if (out.joint.mixture.weights[k] > min_weight) keep.push_back(k);
  out.shape.resize(3, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i)
    out.shape.col(static_cast<Eigen::Index>(i)) = out.joint.mixture.means.col(keep[i]);
  out.obb = oriented_bounding_box(out.shape);
  return out;
}

}  // namespace lidarcal
