#pragma once

// Outer alternation: robust bundle adjustment, inlier gating, per-system
// residual-field regression, correction update.  Repeats until the combined
// cost (adjustment NLL plus regression cost) settles, and rolls back to the
// best iteration seen.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fluorocal/distortion.hpp"
#include "fluorocal/network.hpp"
#include "fluorocal/solver.hpp"

namespace fluorocal {

struct LoopSettings {
  int max_outer_iterations = 50;
  double combined_tolerance = 1e-6;  // relative combined-cost change
  int divergence_patience = 3;       // consecutive increases before giving up
  double inlier_tau = 3.0;
  int cv_folds = 10;
  std::vector<int> candidate_ks = {1, 2, 3, 5, 8, 12, 20, 35, 60, 100, 200};
  bool reselect_k = true;  // re-run CV every outer iteration
  int grid_nx = 64;
  int grid_ny = 64;
  std::uint64_t seed = 0;
  StudentTModel model;
  SolverSettings solver;
};

struct OuterRecord {
  int iteration = 0;
  double ba_cost = 0.0;
  double regression_cost = 0.0;
  double combined_cost = 0.0;
  int inliers = 0;
  std::map<int, int> selected_k;  // per system
};

enum class LoopStatus { converged, max_iterations, diverged };

std::string to_string(LoopStatus status);
LoopStatus loop_status_from_string(const std::string& name);

/// State of the best iteration: `network` holds the adjusted parameters and,
/// in each observation, the accumulated correction its adjustment consumed;
/// `fields` reproduces exactly those corrections from raw image positions.
struct CalibrationResult {
  LoopStatus status = LoopStatus::converged;
  Network network;
  std::map<int, DistortionField> fields;
  ResidualSet residuals;
  double ba_cost = 0.0;
  double regression_cost = 0.0;
  double combined_cost = 0.0;
  int best_iteration = 0;
  std::vector<OuterRecord> history;
  std::vector<IterationRecord> ba_trace;  // inner trace of the best iteration
};

inline double combined_cost(double ba_cost, double regression_cost) {
  return ba_cost + regression_cost;
}

/// Runs the alternation on a copy of the network (corrections reset to zero
/// first).  Throws AllOutliers only when the very first gate rejects the
/// majority; later divergence returns the best state with status diverged.
CalibrationResult run_calibration(Network network, const LoopSettings& settings);

void write_outer_trace_csv(std::ostream& out,
                           const std::vector<OuterRecord>& history,
                           const std::vector<int>& system_ids);

}  // namespace fluorocal
