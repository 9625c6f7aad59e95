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

#include "lidarcal/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

namespace lidarcal::cli {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string read_text(const fs::path& path, ErrorCode code) {
  std::ifstream in(path);
  if (!in) throw Error(code, "cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "write failed for '" + path.string() + "'");
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw Error(ErrorCode::kIo, where + ": bad number '" + s + "'");
  return v;
}

// Transform rows: quaternion plus translation, so files round-trip exactly.
std::string transform_cells(const RigidTransform& t) {
  const auto& q = t.rotation();
  const auto& p = t.translation();
  return fmt(p.x()) + "," + fmt(p.y()) + "," + fmt(p.z()) + "," + fmt(q.w()) + "," + fmt(q.x()) + "," + fmt(q.y()) +
         "," + fmt(q.z());
}

RigidTransform transform_from(const std::vector<std::string>& cells, std::size_t first, const std::string& where) {
  if (cells.size() < first + 7) throw Error(ErrorCode::kIo, where + ": expected 7 transform columns");
  double v[7];
  for (int i = 0; i < 7; ++i) v[i] = to_double(cells[first + i], where);
  return {Eigen::Quaterniond(v[3], v[4], v[5], v[6]), Eigen::Vector3d(v[0], v[1], v[2])};
}

std::string scan_file_name(const std::string& sensor, int frame) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%04d.xyz", frame);
  return sensor + buf;
}

void write_stream(const fs::path& path, const std::vector<Vector3Sample>& samples, const char* columns) {
  std::string text = std::string("time,") + columns + "\n";
  for (const auto& s : samples)
    text += fmt(s.time) + "," + fmt(s.value.x()) + "," + fmt(s.value.y()) + "," + fmt(s.value.z()) + "\n";
  write_text(path, text);
}

void write_poses(const fs::path& path, const std::vector<std::pair<double, RigidTransform>>& poses) {
  std::string text = "frame,time,x,y,z,qw,qx,qy,qz\n";
  for (std::size_t i = 0; i < poses.size(); ++i)
    text += std::to_string(i) + "," + fmt(poses[i].first) + "," + transform_cells(poses[i].second) + "\n";
  write_text(path, text);
}

std::string euler_cells(const RigidTransform& t) {
  const auto p = t.parameters();
  std::string s;
  for (int i = 0; i < 6; ++i) s += (i ? "," : "") + fmt(p[i]);
  return s;
}

std::string residual_cells(const TransformResidual& r) {
  const auto v = r.vector();
  std::string s;
  for (int i = 0; i < 6; ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

double statistic_of(const CampaignReport& report, const Threshold& t) {
  if (t.metric == "campaign") {
    if (t.statistic == "trials") return static_cast<double>(report.trials);
    if (t.statistic == "converged") return static_cast<double>(report.converged);
    if (t.statistic == "non_converged") return static_cast<double>(report.non_converged);
    throw Error(ErrorCode::kInvalidConfig, "unknown campaign statistic '" + t.statistic + "'");
  }
  const MetricStats* m = report.find(t.metric);
  if (!m) throw Error(ErrorCode::kInvalidConfig, "unknown metric '" + t.metric + "' in thresholds");
  const std::map<std::string, double> stats = {
      {"count", static_cast<double>(m->count)}, {"mean", m->mean}, {"median", m->median},
      {"std", m->std}, {"min", m->min}, {"max", m->max}, {"q1", m->q1}, {"q3", m->q3},
      {"whisker_low", m->whisker_low}, {"whisker_high", m->whisker_high}};
  const auto it = stats.find(t.statistic);
  if (it == stats.end()) throw Error(ErrorCode::kInvalidConfig, "unknown statistic '" + t.statistic + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Command implementations.

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string pose_source;
  bool ground_truth_poses{false};
  std::optional<double> k;
  std::string out_dir;
  std::string thresholds_path;
};

fs::path output_dir(const CommonOptions& o) {
  if (!o.out_dir.empty()) return o.out_dir;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return kDefaultOutputDir;
}

TrialConfig resolve_config(const CommonOptions& o, const TrialConfig* base = nullptr) {
  TrialConfig c = !o.config_path.empty() ? load_config(o.config_path) : base ? *base : TrialConfig::defaults();
  if (o.seed) c.seed = *o.seed;
  if (!o.pose_source.empty()) c.pose_source = pose_source_from_string(o.pose_source);
  if (o.ground_truth_poses) c.pose_source = PoseSource::kGroundTruth;
  if (o.k) c.optimizer.k = *o.k;
  c.validate();
  return c;
}

int apply_thresholds(const CommonOptions& o, const CampaignReport& report, std::ostream& err) {
  if (o.thresholds_path.empty()) return kExitOk;
  const auto violations = check_thresholds(report, load_thresholds(o.thresholds_path));
  for (const auto& v : violations) err << "threshold violated: " << v << "\n";
  return violations.empty() ? kExitOk : kExitThresholdViolation;
}

int cmd_simulate(const CommonOptions& o, double crop_radius, std::ostream& out) {
  const TrialConfig c = resolve_config(o);
  const SimulatedData data = simulate(c);
  const fs::path dir = output_dir(o);
  write_dataset(dir, c, data, crop_radius);
  out << "wrote " << c.frame_count() * static_cast<int>(c.sensors.size()) << " scans to " << dir.string() << "\n";
  return kExitOk;
}

std::string estimate_csv(const TrialConfig& c, const RigidTransform& s2s, const RigidTransform& ref,
                         const RigidTransform& other) {
  std::string text = "transform,x,y,z,roll,pitch,yaw\n";
  text += c.other().id + "_to_" + c.reference().id + "," + euler_cells(s2s) + "\n";
  text += c.reference().id + "_to_vehicle," + euler_cells(ref) + "\n";
  text += c.other().id + "_to_vehicle," + euler_cells(other) + "\n";
  return text;
}

std::string residual_csv(const TrialConfig& c, const TransformResidual& s2s, const TransformResidual& ref,
                         const TransformResidual& other) {
  std::string text = "residual,dx,dy,dz,dphi,dtheta,dpsi\n";
  text += "s2s," + residual_cells(s2s) + "\n";
  text += "s2v_" + c.other().id + "," + residual_cells(other) + "\n";
  text += "s2v_" + c.reference().id + "," + residual_cells(ref) + "\n";
  return text;
}

int cmd_calibrate_simulated(const CommonOptions& o, std::ostream& out, std::ostream& err) {
  const TrialConfig c = resolve_config(o);
  const TrialResult r = run_trial(c);
  if (!r.failed_stage.empty() && r.failed_stage != "s2s" && r.failed_stage != "s2v") {
    err << "calibration failed in stage '" << r.failed_stage << "': " << r.message << "\n";
    return kExitPipelineFailure;
  }
  const fs::path dir = output_dir(o);
  write_text(dir / "calibration.csv", estimate_csv(c, r.s2s_estimate, r.reference_estimate, r.other_estimate));
  write_text(dir / "residuals.csv", residual_csv(c, r.s2s, r.s2v_reference, r.s2v_other));
  write_trials_csv({r}, dir / "trials.csv");
  const CampaignReport report = summarize(c, {r});
  out << format_table(report);
  if (!r.converged) {
    err << "optimizer did not converge: " << r.message << "\n";
    return kExitPipelineFailure;
  }
  return apply_thresholds(o, report, err);
}

int cmd_calibrate_input(const CommonOptions& o, const fs::path& input, std::ostream& out, std::ostream& err) {
  Dataset ds = read_dataset(input);
  const TrialConfig c = resolve_config(o, &ds.config);
  std::vector<PrealignedCloud> clouds;
  for (const auto& scan : ds.scans)
    if (auto cl = condition_scan(c, scan, ds.track, ds.initial_mounts)) clouds.push_back(std::move(*cl));
  CalibrationOutcome result;
  try {
    result = calibrate_clouds(c, clouds, ds.track, ds.initial_mounts);
  } catch (const Error& e) {
    err << "calibration failed: " << e.what() << "\n";
    return kExitPipelineFailure;
  }
  const fs::path dir = output_dir(o);
  write_text(dir / "calibration.csv", estimate_csv(c, result.s2s.other_to_reference, result.s2v.reference_to_vehicle,
                                                   result.s2v.other_to_vehicle));
  out << "calibrated from " << clouds.size() << " target clouds\n";
  if (ds.true_mounts.count(c.reference().id) && ds.true_mounts.count(c.other().id)) {
    const auto& tr = ds.true_mounts.at(c.reference().id);
    const auto& to = ds.true_mounts.at(c.other().id);
    TrialResult r;
    r.seed = c.seed;
    r.members = result.registration.members.size();
    r.s2s = s2s_residual(result.s2v.other_to_vehicle, result.s2v.reference_to_vehicle, tr.inverse() * to);
    r.s2v_reference = residual(result.s2v.reference_to_vehicle, tr);
    r.s2v_other = residual(result.s2v.other_to_vehicle, to);
    r.s2s_converged = result.s2s.powell.converged;
    r.s2v_converged = result.s2v.powell.converged;
    r.converged = r.s2s_converged && r.s2v_converged;
    write_text(dir / "residuals.csv", residual_csv(c, r.s2s, r.s2v_reference, r.s2v_other));
    const CampaignReport report = summarize(c, {r});
    out << format_table(report);
    return apply_thresholds(o, report, err);
  }
  if (!o.thresholds_path.empty()) {
    err << "thresholds need ground-truth extrinsics in the input directory\n";
    return kExitConfigError;
  }
  return kExitOk;
}

int cmd_campaign(const CommonOptions& o, int trials, bool quiet, std::ostream& out, std::ostream& err) {
  const TrialConfig c = resolve_config(o);
  const auto progress = [&](int i, const TrialResult& t) {
    if (quiet) return;
    err << "trial " << (i + 1) << "/" << trials << (t.converged ? " converged" : " not converged");
    if (!t.failed_stage.empty()) err << " (" << t.failed_stage << ": " << t.message << ")";
    err << "\n";
  };
  const CampaignResult result = run_campaign(c, trials, c.seed, progress);
  const fs::path dir = output_dir(o);
  export_report(result.report, dir / "campaign.csv");
  write_trials_csv(result.trials, dir / "trials.csv");
  out << format_table(result.report);
  if (result.report.converged == 0) {
    err << "no trial converged\n";
    return kExitPipelineFailure;
  }
  return apply_thresholds(o, result.report, err);
}

int cmd_report(const CommonOptions& o, const fs::path& csv, std::ostream& out, std::ostream& err) {
  const CampaignReport report = read_report(csv);
  out << format_table(report);
  return apply_thresholds(o, report, err);
}

void add_common(CLI::App* app, CommonOptions& o, bool pipeline) {
  app->add_option("--config", o.config_path, "JSON scene and pipeline configuration");
  app->add_option("--out", o.out_dir, std::string("output directory (default: $") + kOutputDirEnv + " or " +
                                          kDefaultOutputDir + ")");
  app->add_option("--assert-thresholds", o.thresholds_path,
                  "JSON list of {metric, statistic, max}; exit 3 when any is exceeded");
  if (!pipeline) return;
  app->add_option_function<std::uint64_t>("--seed", [&o](const std::uint64_t& s) { o.seed = s; }, "random seed");
  auto* ps = app->add_option("--pose-source", o.pose_source, "vehicle poses fed to the pipeline")
                 ->check(CLI::IsMember({"ukf", "ground-truth"}));
  auto* gt = app->add_flag("--ground-truth-poses", o.ground_truth_poses, "shorthand for --pose-source ground-truth");
  ps->excludes(gt);
  app->add_option_function<double>("--k", [&o](const double& k) { o.k = k; }, "percentile filter k in [0, 50)");
}

}  // namespace

std::vector<Threshold> parse_thresholds(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("thresholds: ") + e.what());
  }
  if (!j.is_array()) throw Error(ErrorCode::kInvalidConfig, "thresholds must be a JSON array");
  std::vector<Threshold> out;
  for (const auto& item : j) {
    if (!item.is_object() || !item.contains("metric") || !item.contains("statistic") || !item.contains("max") ||
        !item.at("metric").is_string() || !item.at("statistic").is_string() || !item.at("max").is_number())
      throw Error(ErrorCode::kInvalidConfig, "each threshold needs string metric, string statistic, numeric max");
    for (const auto& [key, value] : item.items())
      if (key != "metric" && key != "statistic" && key != "max")
        throw Error(ErrorCode::kInvalidConfig, "unknown threshold key '" + key + "'");
    out.push_back({item.at("metric").get<std::string>(), item.at("statistic").get<std::string>(),
                   item.at("max").get<double>()});
  }
  return out;
}

std::vector<Threshold> load_thresholds(const fs::path& path) {
  try {
    return parse_thresholds(read_text(path, ErrorCode::kInvalidConfig));
  } catch (const Error& e) {
    throw Error(ErrorCode::kInvalidConfig, path.string() + ": " + e.what());
  }
}

std::vector<std::string> check_thresholds(const CampaignReport& report, const std::vector<Threshold>& thresholds) {
  std::vector<std::string> violations;
  for (const auto& t : thresholds) {
    const double v = statistic_of(report, t);
    if (!(v <= t.max)) violations.push_back(t.metric + " " + t.statistic + " = " + fmt(v) + " > " + fmt(t.max));
  }
  return violations;
}

void write_dataset(const fs::path& dir, const TrialConfig& config, const SimulatedData& data, double crop_radius) {
  write_text(dir / "config.json", config_to_json(config));

  std::string ext = "sensor,kind,x,y,z,qw,qx,qy,qz\n";
  for (const auto& id : data.sensor_ids) {
    ext += id + ",initial," + transform_cells(data.initial_mounts.at(id)) + "\n";
    ext += id + ",truth," + transform_cells(data.true_mounts.at(id)) + "\n";
  }
  write_text(dir / "extrinsics.csv", ext);

  std::vector<std::pair<double, RigidTransform>> est, truth;
  for (const auto& p : data.track.poses) est.emplace_back(p.time, p.pose);
  for (const auto& p : data.true_poses) truth.emplace_back(p.time, p.pose);
  write_poses(dir / "poses.csv", est);
  write_poses(dir / "ground_truth_poses.csv", truth);

  write_stream(dir / "streams" / "accel.csv", data.streams.accel, "ax,ay,az");
  write_stream(dir / "streams" / "gyro.csv", data.streams.gyro, "wx,wy,wz");
  write_stream(dir / "streams" / "gps.csv", data.streams.gps, "lat_deg,lon_deg,alt_m");
  write_stream(dir / "streams" / "orientation.csv", data.streams.orientation, "roll,pitch,yaw");
  write_stream(dir / "streams" / "velocity.csv", data.streams.velocity, "vx,vy,vz");

  const Eigen::Vector2d axis = config.target.position.head<2>();
  fs::create_directories(dir / "scans");
  for (int f = 0; f < config.frame_count(); ++f) {
    for (std::size_t s = 0; s < config.sensors.size(); ++s) {
      const LidarScan scan = simulate_scan(config, data, f, s);
      const RigidTransform chain =
          data.track.poses.at(static_cast<std::size_t>(f)).pose * data.initial_mounts.at(scan.sensor_id);
      const PointCloud world = apply(chain, scan.points);
      std::vector<Eigen::Index> keep;
      for (Eigen::Index i = 0; i < world.cols(); ++i)
        if ((world.col(i).head<2>() - axis).norm() <= crop_radius) keep.push_back(i);
      PointCloud kept(3, static_cast<Eigen::Index>(keep.size()));
      for (std::size_t i = 0; i < keep.size(); ++i) kept.col(static_cast<Eigen::Index>(i)) = scan.points.col(keep[i]);
      write_xyz(dir / "scans" / scan_file_name(scan.sensor_id, f), kept);
    }
  }
}

Dataset read_dataset(const fs::path& dir) {
  Dataset ds;
  ds.config = load_config(dir / "config.json");

  std::istringstream ext(read_text(dir / "extrinsics.csv", ErrorCode::kIo));
  std::string line;
  std::getline(ext, line);
  while (std::getline(ext, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 9) throw Error(ErrorCode::kIo, "extrinsics.csv: expected 9 columns");
    const RigidTransform t = transform_from(cells, 2, "extrinsics.csv");
    if (cells[1] == "initial") ds.initial_mounts[cells[0]] = t;
    else if (cells[1] == "truth") ds.true_mounts[cells[0]] = t;
    else throw Error(ErrorCode::kIo, "extrinsics.csv: unknown kind '" + cells[1] + "'");
  }

  std::istringstream poses(read_text(dir / "poses.csv", ErrorCode::kIo));
  std::getline(poses, line);
  while (std::getline(poses, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 9) throw Error(ErrorCode::kIo, "poses.csv: expected 9 columns");
    ds.track.poses.push_back({to_double(cells[1], "poses.csv"), transform_from(cells, 2, "poses.csv"),
                              StateCovariance::Zero()});
  }

  for (int f = 0; f < static_cast<int>(ds.track.poses.size()); ++f) {
    for (const auto& sc : ds.config.sensors) {
      const fs::path p = dir / "scans" / scan_file_name(sc.id, f);
      if (!fs::exists(p)) continue;
      LidarScan scan;
      scan.sensor_id = sc.id;
      scan.frame_index = f;
      scan.timestamp = ds.track.poses[static_cast<std::size_t>(f)].time;
      scan.points = read_xyz(p);
      ds.scans.push_back(std::move(scan));
    }
  }
  return ds;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Target-based extrinsic calibration for multi-LiDAR rigs with disjoint fields of view", "lidarcal"};
  app.require_subcommand(1);

  CommonOptions sim_o, cal_o, camp_o, rep_o;
  double crop_radius = 3.0;
  std::string input_dir;
  int trials = 20;
  bool quiet = false;
  std::string report_path;

  auto* sim = app.add_subcommand("simulate", "write simulated scans, streams, poses and extrinsics");
  add_common(sim, sim_o, true);
  sim->add_option("--crop-radius", crop_radius, "keep scan points within this distance of the target axis")
      ->check(CLI::PositiveNumber);

  auto* cal = app.add_subcommand("calibrate", "run the pipeline on a simulated trial or a simulate output dir");
  add_common(cal, cal_o, true);
  cal->add_option("--input", input_dir, "directory written by 'simulate'")->check(CLI::ExistingDirectory);

  auto* camp = app.add_subcommand("campaign", "run N seeded trials and report residual statistics");
  add_common(camp, camp_o, true);
  camp->add_option("-n,--trials", trials, "number of trials")->check(CLI::PositiveNumber);
  camp->add_flag("-q,--quiet", quiet, "suppress per-trial progress");

  auto* rep = app.add_subcommand("report", "render a campaign CSV as a table");
  add_common(rep, rep_o, false);
  rep->add_option("csv", report_path, "campaign CSV written by 'campaign'")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  try {
    if (sim->parsed()) return cmd_simulate(sim_o, crop_radius, out);
    if (cal->parsed())
      return input_dir.empty() ? cmd_calibrate_simulated(cal_o, out, err) : cmd_calibrate_input(cal_o, input_dir, out, err);
    if (camp->parsed()) return cmd_campaign(camp_o, trials, quiet, out, err);
    if (rep->parsed()) return cmd_report(rep_o, report_path, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    switch (e.code()) {
      case ErrorCode::kInvalidConfig:
      case ErrorCode::kInvalidArgument:
      case ErrorCode::kIo:
        return kExitConfigError;
      default:
        return kExitPipelineFailure;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitPipelineFailure;
  }
  return kExitConfigError;
}

}  // namespace lidarcal::cli
