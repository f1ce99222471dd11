#pragma once

// Student-t measurement likelihood.  The negative log density of a D-variate
// t distribution with diagonal covariance C and nu degrees of freedom is
//
//   nll(r) = -lgamma((nu+D)/2) + lgamma(nu/2) + (D/2) log(nu*pi)
//            + (1/2) log|C| + ((nu+D)/2) log(1 + m/nu),   m = r^T C^-1 r.
//
// Its gradient is w C^-1 r with the IRLS weight w = (nu+D)/(nu+m): residuals
// far in the tails are continuously downweighted, which is what replaces
// post-adjustment blunder testing.

#include <Eigen/Core>

#include <cmath>

#include "fluorocal/errors.hpp"

namespace fluorocal {

/// Per-observation likelihood settings.  `variances` is the diagonal of C
/// for one residual vector (px^2).
struct StudentTModel {
  double nu = 4.0;  // > 0; large values approach a Gaussian
};

inline double mahalanobis2(const Eigen::VectorXd& residuals,
                           const Eigen::VectorXd& variances) {
  return (residuals.array().square() / variances.array()).sum();
}

/// Negative log density at the given residual vector.
inline double student_t_nll(const Eigen::VectorXd& residuals,
                            const Eigen::VectorXd& variances,
                            const StudentTModel& model) {
  const double nu = model.nu;
  const double d = static_cast<double>(residuals.size());
  const double m = mahalanobis2(residuals, variances);
  const double log_det = variances.array().log().sum();
  return -std::lgamma((nu + d) / 2.0) + std::lgamma(nu / 2.0) +
         0.5 * d * std::log(nu * M_PI) + 0.5 * log_det +
         0.5 * (nu + d) * std::log1p(m / nu);
}

/// IRLS weight (nu+D)/(nu+m); in (0, (nu+D)/nu], tends to 0 as m -> inf.
inline double student_t_weight(double mahalanobis_sq, double dim,
                               const StudentTModel& model) {
  return (model.nu + dim) / (model.nu + mahalanobis_sq);
}

inline double student_t_weight(const Eigen::VectorXd& residuals,
                               const Eigen::VectorXd& variances,
                               const StudentTModel& model) {
  return student_t_weight(mahalanobis2(residuals, variances),
                          static_cast<double>(residuals.size()), model);
}

/// Analytic gradient of student_t_nll with respect to the residual vector.
inline Eigen::VectorXd student_t_nll_gradient(const Eigen::VectorXd& residuals,
                                              const Eigen::VectorXd& variances,
                                              const StudentTModel& model) {
  const double w = student_t_weight(residuals, variances, model);
  return w * (residuals.array() / variances.array()).matrix();
}

/// Full analytic Hessian of student_t_nll with respect to the residuals.
inline Eigen::MatrixXd student_t_nll_hessian(const Eigen::VectorXd& residuals,
                                             const Eigen::VectorXd& variances,
                                             const StudentTModel& model) {
  const double nu = model.nu;
  const double d = static_cast<double>(residuals.size());
  const double m = mahalanobis2(residuals, variances);
  const double w = student_t_weight(m, d, model);
  const Eigen::VectorXd cinv_r =
      (residuals.array() / variances.array()).matrix();
  Eigen::MatrixXd h = w * variances.cwiseInverse().asDiagonal();
  h -= (2.0 * (nu + d) / ((nu + m) * (nu + m))) * cinv_r * cinv_r.transpose();
  return h;
}

/// Gauss-Newton approximation of the Hessian: w C^-1 (the rank-one tail term
/// is dropped; coincides with the full Hessian at r = 0).
inline Eigen::MatrixXd student_t_nll_gauss_newton(
    const Eigen::VectorXd& residuals, const Eigen::VectorXd& variances,
    const StudentTModel& model) {
  const double w = student_t_weight(residuals, variances, model);
  return w * Eigen::MatrixXd(variances.cwiseInverse().asDiagonal());
}

/// Gaussian counterpart used by the likelihood-ablation mode.
inline double gaussian_nll(const Eigen::VectorXd& residuals,
                           const Eigen::VectorXd& variances) {
  const double d = static_cast<double>(residuals.size());
  return 0.5 * mahalanobis2(residuals, variances) +
         0.5 * variances.array().log().sum() + 0.5 * d * std::log(2.0 * M_PI);
}

}  // namespace fluorocal
