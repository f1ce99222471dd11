#pragma once

// Levenberg-Marquardt bundle adjustment with a Student-t likelihood,
// Schur-complement elimination of the object points, and a free-network
// datum via 7 inner-constraint rows (3 translation, 3 rotation, 1 scale)
// anchored at the initial object coordinates.

#include <iosfwd>
#include <vector>

#include "fluorocal/network.hpp"
#include "fluorocal/student_t.hpp"

namespace fluorocal {

enum class Likelihood { student_t, gaussian };

struct SolverSettings {
  double initial_lambda = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 10.0;
  double lambda_max = 1e14;
  int max_iterations = 100;
  double cost_tolerance = 1e-8;  // relative change of accepted cost
  bool use_inner_constraints = true;
  Likelihood likelihood = Likelihood::student_t;
  // Couple all residuals through one joint t-density instead of one
  // 2D t-density per observation.
  bool joint_likelihood = false;
  // Recover residual variances diag(C_r) from the parameter covariance at
  // convergence; when off, C_r falls back to the measurement variances.
  bool residual_variances = true;
};

/// Residuals, their variances, and inlier flags, parallel to
/// Network::observations.
struct ResidualSet {
  std::vector<Vec2> residuals;  // measured - predicted, px
  std::vector<Vec2> variances;  // diag(C_r) per observation, px^2
  std::vector<bool> inlier;     // set by classify_inliers (true by default)
};

struct IterationRecord {
  int iteration = 0;
  double cost = 0.0;
  double lambda = 0.0;
  double max_step = 0.0;
  bool accepted = false;
};

enum class SolveStatus { converged, max_iterations };

struct SolveResult {
  SolveStatus status = SolveStatus::converged;
  double final_cost = 0.0;
  int iterations = 0;
  ResidualSet residuals;
  std::vector<IterationRecord> trace;
};

/// Runs the adjustment in place; network parameters hold the estimate on
/// return.  Throws SingularNormalMatrix when the reduced normal matrix
/// cannot be solved (datum not applied or degenerate network) and
/// PointBehindCamera when the start values put a point at or behind a
/// projection centre.
SolveResult levenberg_marquardt(Network& network, const StudentTModel& model,
                                const SolverSettings& settings = {});

/// Total negative log-likelihood of the network at its current parameters.
double network_cost(const Network& network, const StudentTModel& model,
                    Likelihood likelihood = Likelihood::student_t,
                    bool joint = false);

/// Flags observation i as an outlier when its studentized Mahalanobis norm
/// exceeds tau: the squared norms r^T C_r^{-1} r are rescaled by their lower
/// quartile relative to the chi-square(2) reference, floored at one, so the
/// gate follows the residual dispersion while distortion is still unmodeled
/// instead of the nominal sigma alone.  Throws AllOutliers when fewer than
/// half the observations survive.
void classify_inliers(ResidualSet& residuals, double tau = 3.0);

void write_trace_csv(std::ostream& out, const std::vector<IterationRecord>& trace);

}  // namespace fluorocal
