#pragma once

// Accuracy metrics against reference geometry, deterministic train/test
// splits, and the held-out evaluation paths (test-side re-adjustment for
// single-plane runs, per-pair two-ray intersection for biplanar runs).

#include <iosfwd>
#include <map>
#include <vector>

#include "fluorocal/distortion.hpp"
#include "fluorocal/generator.hpp"
#include "fluorocal/network.hpp"
#include "fluorocal/solver.hpp"

namespace fluorocal {

struct Split {
  std::vector<int> train_pool;
  std::vector<int> test;
};

/// Even-ranked exposures (of the sorted unique ids) form the training pool,
/// odd-ranked ones the held-out test set.
Split make_split(const std::vector<int>& exposure_ids);

/// Evenly strided subset of the training pool; size must lie in [1, pool].
std::vector<int> training_subset(const std::vector<int>& pool, int size);

struct MappingError {
  Vec3 per_axis_rmse = Vec3::Zero();  // mm, after rigid alignment
  double average = 0.0;               // mean of the three axis RMSEs
  int points = 0;                     // error vectors pooled
};

/// Rigid alignment of estimated onto reference points, then per-axis RMSE in
/// reference axes.  Throws NoCommonTargets when fewer than 3 ids are shared.
MappingError mapping_error(const std::map<int, Vec3>& estimated,
                           const std::map<int, Vec3>& reference);

/// Pooled RMS of the inlier residual components:
/// sqrt(sum(rx^2 + ry^2) / (2 n)).
double reprojection_rmse(const ResidualSet& residuals);

/// 100 * (before - after) / before.  Throws NonPositiveBaseline.
double improvement_percent(double before, double after);

/// Two-ray bead positions of one exposure pair in the reference camera frame
/// (reference pose = identity, the other = the ROP); observations are
/// corrected by the per-system fields before back-projection.  Skips beads
/// seen by only one system and near-parallel ray pairs.
std::map<int, Vec3> intersect_pair(
    const std::vector<Observation>& pair_obs,
    const std::map<int, Intrinsics>& intrinsics, int reference_system,
    const Pose& rop, const std::map<int, DistortionField>& fields);

/// Mapping error pooled over test pairs: each pair's intersections are
/// aligned rigidly on their own (every pair lives in its own camera frame)
/// and the aligned error vectors pool into per-axis RMSE.  Throws
/// MissingPair when a test exposure lacks one system.
MappingError intersection_error(const std::vector<Observation>& test_obs,
                                const std::map<int, Intrinsics>& intrinsics,
                                int reference_system, const Pose& rop,
                                const std::map<int, DistortionField>& fields,
                                const std::map<int, Vec3>& reference);

/// Held-out single-plane check: adjusts only the test exposures' poses and
/// the object points, IOP frozen and observations corrected by the field.
/// Returns the adjusted network (its points carry the held-out geometry).
Network adjust_test_exposures(std::vector<Observation> test_obs,
                              const std::map<int, Intrinsics>& intrinsics,
                              const std::map<int, DistortionField>& fields,
                              const InitialValues& init,
                              const StudentTModel& model,
                              const SolverSettings& solver);

struct EvaluationRow {
  int train_size = 0;
  Scheme scheme = Scheme::none;
  MappingError mapping;
  double improvement = 0.0;  // % vs scheme none at the same train size
};

void write_report_csv(std::ostream& out, const std::vector<EvaluationRow>& rows);

/// Rounded table (mm to 2 decimals, % to 1) grouped by training size.
void write_report_markdown(std::ostream& out,
                           const std::vector<EvaluationRow>& rows);

/// Long-format "train_size,scheme,axis,value" rows for plotting.
void write_plot_data(std::ostream& out, const std::vector<EvaluationRow>& rows);

}  // namespace fluorocal
