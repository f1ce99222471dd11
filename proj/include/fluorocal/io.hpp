#pragma once

// Persistence: observation CSV, JSON parameter files, the calibration
// artifact, and the flat key-value run configuration.  All numeric output
// uses shortest round-trip formatting, so write/read cycles are lossless and
// reruns are byte-identical.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fluorocal/calibration.hpp"
#include "fluorocal/distortion.hpp"
#include "fluorocal/evaluation.hpp"
#include "fluorocal/generator.hpp"
#include "fluorocal/network.hpp"

namespace fluorocal {

inline constexpr const char* kFormatVersion = "fluorocal-1";
inline constexpr const char* kToolVersion = "0.1.0";

// --- observations ----------------------------------------------------------

void write_observations_csv(std::ostream& out,
                            const std::vector<Observation>& observations);
void write_observations_csv(const std::string& path,
                            const std::vector<Observation>& observations);

/// Throws MalformedRow (naming source, line and field) and DuplicateKey.
/// The sigma_px column may be absent; rows then get default_sigma.
std::vector<Observation> read_observations_csv(std::istream& in,
                                               const std::string& source,
                                               double default_sigma = 0.06);
std::vector<Observation> read_observations_csv(const std::string& path,
                                               double default_sigma = 0.06);

// --- parameter files -------------------------------------------------------

void write_initial_values(const std::string& path, const InitialValues& init);
/// Throws VersionMismatch on a foreign format version.
InitialValues read_initial_values(const std::string& path);

void write_ground_truth(const std::string& path, const GroundTruth& truth);
GroundTruth read_ground_truth(const std::string& path);

// --- calibration artifact ----------------------------------------------------

struct CalibrationArtifact {
  std::string version = kFormatVersion;
  LoopStatus status = LoopStatus::converged;
  int best_iteration = 0;
  double ba_cost = 0.0;
  double regression_cost = 0.0;
  double combined_cost = 0.0;
  std::string config_hash;
  Network network;
  std::map<int, DistortionField> fields;
  std::vector<OuterRecord> history;
};

void write_artifact(const std::string& path, const CalibrationArtifact& art);
CalibrationArtifact read_artifact(const std::string& path);

/// Byte-exact JSON round trip used by tests as well.
std::string network_to_json_string(const Network& network);
Network network_from_json_string(const std::string& text);

void write_field(const std::string& path, const DistortionField& field);
DistortionField read_field(const std::string& path);

/// One evaluation outcome per file; `report` aggregates these across runs.
void write_evaluation_json(const std::string& path, const EvaluationRow& row);
EvaluationRow read_evaluation_json(const std::string& path);

// --- run configuration -------------------------------------------------------

/// Flat key-value configuration covering generation, estimation and
/// evaluation.  Defaults match the reference workflow.
struct RunConfig {
  // estimation
  std::string scheme = "knn_iop_smoothing";
  double nu = 4.0;
  std::string likelihood = "student_t";
  bool joint_likelihood = false;
  double inlier_tau = 3.0;
  int cv_folds = 10;
  std::vector<int> candidate_ks = {1, 2, 3, 5, 8, 12, 20, 35, 60, 100, 200};
  bool reselect_k = true;
  int grid_nx = 64;
  int grid_ny = 64;
  int max_outer_iterations = 50;
  double combined_tolerance = 1e-6;
  int divergence_patience = 3;
  double lm_initial_lambda = 1e-3;
  double lm_lambda_up = 10.0;
  double lm_lambda_down = 10.0;
  int lm_max_iterations = 100;
  double lm_cost_tolerance = 1e-8;
  bool inner_constraints = true;
  std::uint64_t seed = 0;
  // synthetic generation
  int bead_count = 503;
  double cube_edge_mm = 300.0;
  int faces = 4;
  double face_margin_mm = 10.0;
  double cell_jitter = 0.3;
  double min_spacing_mm = 8.0;
  double bead_diameter_mm = 3.5;
  int systems = 1;
  int exposures = 150;
  int height_levels = 5;
  double camera_distance_mm = 1200.0;
  double second_system_azimuth_deg = 70.0;
  double height_span_mm = 160.0;
  double pose_jitter_mm = 3.0;
  double pose_jitter_deg = 0.8;
  double image_width_px = 2016.0;
  double image_height_px = 2016.0;
  double nominal_principal_distance_px = 3600.0;
  double noise_sigma_px = 0.06;
  double outlier_fraction = 0.0;
  double outlier_min_px = 10.0;
  double outlier_max_px = 50.0;
  std::vector<double> radial_k1;  // one entry per system
  std::vector<double> radial_k2;
  std::vector<double> swirl;
  std::vector<std::vector<double>> bumps;  // [system, cx, cy, ax, ay, width]
  double max_displacement_px = 3.0;
  // starting-value perturbation
  double init_pose_mm = 2.0;
  double init_pose_deg = 0.3;
  double init_point_mm = 1.0;
  double init_rop_mm = 1.0;
  double init_rop_deg = 0.2;
  bool init_triangulate_points = false;
  bool init_nominal_iop = true;
  std::uint64_t init_seed = 1;
};

struct LoadedConfig {
  RunConfig config;
  std::vector<std::string> warnings;  // one per unknown key
  std::string hash;                   // over the effective configuration
};

/// Throws ConfigError on unreadable files or invalid values; unknown keys
/// only warn.
LoadedConfig load_config(const std::string& path);
LoadedConfig parse_config(const std::string& text, const std::string& source);

PhantomSpec phantom_spec(const RunConfig& c);
DistortionSpec distortion_spec(const RunConfig& c);
AcquisitionSpec acquisition_spec(const RunConfig& c);
InitNoise init_noise(const RunConfig& c);
LoopSettings loop_settings(const RunConfig& c);

std::uint64_t fnv1a(const std::string& text);

}  // namespace fluorocal
