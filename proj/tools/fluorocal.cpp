// Command-line front end: simulate | calibrate | triangulate | evaluate |
// report.  Exit codes: 0 success/converged, 2 iteration budget exhausted,
// 3 diverged, 1 any other error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "fluorocal/calibration.hpp"
#include "fluorocal/errors.hpp"
#include "fluorocal/evaluation.hpp"
#include "fluorocal/format.hpp"
#include "fluorocal/generator.hpp"
#include "fluorocal/io.hpp"

namespace fs = std::filesystem;
using namespace fluorocal;

namespace {

LoadedConfig load_or_default(const std::string& path) {
  if (path.empty()) return parse_config("{}", "<defaults>");
  LoadedConfig loaded = load_config(path);
  for (const auto& warning : loaded.warnings)
    std::cerr << "warning: " << path << ": " << warning << "\n";
  return loaded;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create directory '" + dir + "'");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  return out;
}

int run_simulate(const std::string& config_path, const std::string& out_dir) {
  const LoadedConfig loaded = load_or_default(config_path);
  const RunConfig& c = loaded.config;

  const AcquisitionSpec acq = acquisition_spec(c);
  const Dataset data = generate(phantom_spec(c), distortion_spec(c), acq);
  const InitialValues init = make_initial_values(data, acq, init_noise(c));

  ensure_dir(out_dir);
  write_observations_csv(out_dir + "/observations.csv", data.observations);
  write_ground_truth(out_dir + "/truth.json", data.truth);
  write_initial_values(out_dir + "/initial.json", init);

  std::cout << "wrote " << data.observations.size() << " observations, "
            << data.truth.beads.size() << " beads, "
            << acq.exposures << " exposures to " << out_dir << "\n";
  return 0;
}

std::vector<Observation> select_training(std::vector<Observation> obs,
                                         int train_exposures) {
  if (train_exposures <= 0) return obs;
  std::set<int> ids;
  for (const auto& o : obs) ids.insert(o.exposure_id);
  const Split split = make_split({ids.begin(), ids.end()});
  const auto subset = training_subset(split.train_pool, train_exposures);
  const std::set<int> keep(subset.begin(), subset.end());
  std::erase_if(obs, [&](const Observation& o) {
    return keep.count(o.exposure_id) == 0;
  });
  return obs;
}

int run_calibrate(const std::string& obs_path, const std::string& init_path,
                  const std::string& config_path, const std::string& scheme_name,
                  int train_exposures, const std::string& out_dir) {
  const LoadedConfig loaded = load_or_default(config_path);
  const RunConfig& c = loaded.config;

  std::vector<Observation> obs =
      read_observations_csv(obs_path, c.noise_sigma_px);
  obs = select_training(std::move(obs), train_exposures);
  const InitialValues init = read_initial_values(init_path);
  const Scheme scheme =
      scheme_from_string(scheme_name.empty() ? c.scheme : scheme_name);

  Network network = build_network(std::move(obs), init, scheme);
  const CalibrationResult result = run_calibration(network, loop_settings(c));

  ensure_dir(out_dir);
  CalibrationArtifact artifact;
  artifact.status = result.status;
  artifact.best_iteration = result.best_iteration;
  artifact.ba_cost = result.ba_cost;
  artifact.regression_cost = result.regression_cost;
  artifact.combined_cost = result.combined_cost;
  artifact.config_hash = loaded.hash;
  artifact.network = result.network;
  artifact.fields = result.fields;
  artifact.history = result.history;
  write_artifact(out_dir + "/calibration.json", artifact);

  for (const auto& [system, field] : result.fields)
    write_field(out_dir + "/field_" + std::to_string(system) + ".json", field);

  auto trace = open_out(out_dir + "/trace.csv");
  write_outer_trace_csv(trace, result.history, result.network.system_ids());
  auto lm_trace = open_out(out_dir + "/lm_trace.csv");
  write_trace_csv(lm_trace, result.ba_trace);

  std::cout << "status " << to_string(result.status) << ", best iteration "
            << result.best_iteration << ", combined cost "
            << format_double(result.combined_cost) << "\n";
  switch (result.status) {
    case LoopStatus::converged: return 0;
    case LoopStatus::max_iterations: return 2;
    case LoopStatus::diverged: return 3;
  }
  return 1;
}

int run_triangulate(const std::string& calib_path, const std::string& obs_path,
                    const std::string& out_path) {
  const CalibrationArtifact artifact = read_artifact(calib_path);
  if (!artifact.network.rop)
    throw InvalidSpec(
        "triangulate needs a dual-plane artifact (no relative orientation in '" +
        calib_path + "')");

  const std::vector<Observation> obs = read_observations_csv(obs_path);
  std::map<int, std::vector<Observation>> by_exposure;
  for (const auto& o : obs) by_exposure[o.exposure_id].push_back(o);

  auto out = open_out(out_path);
  out << "exposure_id,target_id,x_mm,y_mm,z_mm\n";
  long rows = 0;
  for (const auto& [exposure, pair_obs] : by_exposure) {
    const auto points =
        intersect_pair(pair_obs, artifact.network.intrinsics,
                       artifact.network.reference_system, *artifact.network.rop,
                       artifact.fields);
    for (const auto& [target, p] : points) {
      out << exposure << ',' << target << ',' << format_double(p.x()) << ','
          << format_double(p.y()) << ',' << format_double(p.z()) << '\n';
      ++rows;
    }
  }
  std::cout << "wrote " << rows << " intersections to " << out_path << "\n";
  return 0;
}

/// Held-out observations: rows of the file whose exposure the artifact never
/// adjusted.
std::vector<Observation> held_out(const std::vector<Observation>& obs,
                                  const Network& network) {
  const auto trained = network.exposure_ids();
  const std::set<int> trained_set(trained.begin(), trained.end());
  std::vector<Observation> test;
  for (const auto& o : obs)
    if (!trained_set.count(o.exposure_id)) test.push_back(o);
  return test;
}

MappingError evaluate_artifact(const CalibrationArtifact& artifact,
                               const GroundTruth& truth,
                               const std::vector<Observation>& test_obs,
                               const RunConfig& c) {
  if (artifact.network.rop)
    return intersection_error(test_obs, artifact.network.intrinsics,
                              artifact.network.reference_system,
                              *artifact.network.rop, artifact.fields,
                              truth.beads);

  InitialValues init;
  init.intrinsics = artifact.network.intrinsics;
  init.points = truth.beads;
  for (const auto& o : test_obs)
    init.poses[{o.system_id, o.exposure_id}] =
        truth.poses.at({o.system_id, o.exposure_id});
  const LoopSettings settings = loop_settings(c);
  const Network adjusted =
      adjust_test_exposures(test_obs, artifact.network.intrinsics,
                            artifact.fields, init, settings.model,
                            settings.solver);
  return mapping_error(adjusted.points, truth.beads);
}

int run_evaluate(const std::string& calib_path, const std::string& truth_path,
                 const std::string& obs_path, const std::string& baseline_path,
                 const std::string& config_path, const std::string& out_dir) {
  const LoadedConfig loaded = load_or_default(config_path);
  const CalibrationArtifact artifact = read_artifact(calib_path);
  const GroundTruth truth = read_ground_truth(truth_path);
  const std::vector<Observation> obs =
      read_observations_csv(obs_path, loaded.config.noise_sigma_px);
  const std::vector<Observation> test_obs = held_out(obs, artifact.network);

  EvaluationRow row;
  row.train_size = static_cast<int>(artifact.network.exposure_ids().size());
  row.scheme = artifact.network.scheme;
  row.mapping = evaluate_artifact(artifact, truth, test_obs, loaded.config);

  std::vector<EvaluationRow> rows;
  if (!baseline_path.empty()) {
    const CalibrationArtifact base = read_artifact(baseline_path);
    EvaluationRow base_row;
    base_row.train_size =
        static_cast<int>(base.network.exposure_ids().size());
    base_row.scheme = base.network.scheme;
    base_row.mapping = evaluate_artifact(
        base, truth, held_out(obs, base.network), loaded.config);
    row.improvement =
        improvement_percent(base_row.mapping.average, row.mapping.average);
    rows.push_back(base_row);
  }
  rows.push_back(row);

  ensure_dir(out_dir);
  auto csv = open_out(out_dir + "/report.csv");
  write_report_csv(csv, rows);
  auto md = open_out(out_dir + "/report.md");
  write_report_markdown(md, rows);
  auto plot = open_out(out_dir + "/plotdata.csv");
  write_plot_data(plot, rows);
  write_evaluation_json(out_dir + "/evaluation.json", row);

  std::cout << "average mapping RMSE " << format_double(row.mapping.average)
            << " mm over " << row.mapping.points << " points\n";
  return 0;
}

int run_report(const std::string& runs_dir, std::string out_dir) {
  if (out_dir.empty()) out_dir = runs_dir;
  std::vector<EvaluationRow> rows;
  for (const auto& entry : fs::recursive_directory_iterator(runs_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "evaluation.json")
      rows.push_back(read_evaluation_json(entry.path().string()));
  }
  if (rows.empty())
    throw ConfigError("no evaluation.json found under '" + runs_dir + "'");

  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.train_size != b.train_size) return a.train_size < b.train_size;
    return static_cast<int>(a.scheme) < static_cast<int>(b.scheme);
  });
  for (auto& row : rows) {
    if (row.scheme == Scheme::none) continue;
    for (const auto& base : rows)
      if (base.scheme == Scheme::none && base.train_size == row.train_size)
        row.improvement =
            improvement_percent(base.mapping.average, row.mapping.average);
  }

  ensure_dir(out_dir);
  auto csv = open_out(out_dir + "/report.csv");
  write_report_csv(csv, rows);
  auto md = open_out(out_dir + "/report.md");
  write_report_markdown(md, rows);
  auto plot = open_out(out_dir + "/plotdata.csv");
  write_plot_data(plot, rows);

  std::cout << "aggregated " << rows.size() << " runs into " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-calibrating fluoroscope bundle adjustment"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config_path, out_dir, obs_path, init_path, scheme_name;
  std::string calib_path, truth_path, baseline_path, runs_dir, out_path;
  int train_exposures = 0;

  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic dataset");
  simulate->add_option("--config", config_path, "Run configuration JSON");
  simulate->add_option("--out", out_dir, "Output directory")->required();

  auto* calibrate = app.add_subcommand("calibrate", "Run the calibration loop");
  calibrate->add_option("--obs", obs_path, "Observations CSV")->required();
  calibrate->add_option("--init", init_path, "Initial values JSON")->required();
  calibrate->add_option("--config", config_path, "Run configuration JSON");
  calibrate->add_option("--scheme", scheme_name,
                        "none|knn|knn_iop|knn_smoothing|knn_iop_smoothing");
  calibrate->add_option("--train-exposures", train_exposures,
                        "Calibrate on this many exposures of the training "
                        "pool (even-ranked exposures); 0 = all");
  calibrate->add_option("--out", out_dir, "Output directory")->required();

  auto* triangulate =
      app.add_subcommand("triangulate", "Two-ray intersections per exposure pair");
  triangulate->add_option("--calib", calib_path, "Calibration artifact")->required();
  triangulate->add_option("--obs", obs_path, "Observations CSV")->required();
  triangulate->add_option("--out", out_path, "Output CSV")->required();

  auto* evaluate =
      app.add_subcommand("evaluate", "Held-out accuracy against ground truth");
  evaluate->add_option("--calib", calib_path, "Calibration artifact")->required();
  evaluate->add_option("--truth", truth_path, "Ground truth JSON")->required();
  evaluate->add_option("--obs", obs_path, "Observations CSV")->required();
  evaluate->add_option("--baseline", baseline_path,
                       "Baseline artifact for % improvement");
  evaluate->add_option("--config", config_path, "Run configuration JSON");
  evaluate->add_option("--out", out_dir, "Output directory")->required();

  auto* report = app.add_subcommand("report", "Aggregate evaluations of many runs");
  report->add_option("--runs", runs_dir, "Directory scanned recursively")->required();
  report->add_option("--out", out_dir, "Output directory (default: --runs)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return run_simulate(config_path, out_dir);
    if (calibrate->parsed())
      return run_calibrate(obs_path, init_path, config_path, scheme_name,
                           train_exposures, out_dir);
    if (triangulate->parsed())
      return run_triangulate(calib_path, obs_path, out_path);
    if (evaluate->parsed())
      return run_evaluate(calib_path, truth_path, obs_path, baseline_path,
                          config_path, out_dir);
    if (report->parsed()) return run_report(runs_dir, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
