#include "fluorocal/student_t.hpp"

#include <random>

#include "doctest.h"

using namespace fluorocal;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

VectorXd vec(std::initializer_list<double> values) {
  VectorXd v(static_cast<long>(values.size()));
  long i = 0;
  for (double x : values) v(i++) = x;
  return v;
}

}  // namespace

TEST_CASE("nll at zero residual equals the frozen normalization constant") {
  // Univariate t, nu=4, unit variance, r=0:
  //   -lgamma(3) + lgamma(2) + 0.5 log(4 pi) = 0.98082925301172623686
  const StudentTModel model{4.0};
  const double nll = student_t_nll(vec({0.0}), vec({1.0}), model);
  CHECK(nll == doctest::Approx(0.98082925301172623686).epsilon(1e-15));
}

TEST_CASE("nll shifts by half the log variance under scaling") {
  const StudentTModel model{4.0};
  const double base = student_t_nll(vec({0.0}), vec({1.0}), model);
  const double scaled = student_t_nll(vec({0.0}), vec({0.25}), model);
  CHECK(scaled == doctest::Approx(base + 0.5 * std::log(0.25)).epsilon(1e-14));
}

TEST_CASE("nll is even and increasing in the residual magnitude") {
  const StudentTModel model{4.0};
  const VectorXd var = vec({0.5, 2.0});
  double prev = student_t_nll(vec({0.0, 0.0}), var, model);
  for (double r = 0.5; r < 5.0; r += 0.5) {
    const double plus = student_t_nll(vec({r, -0.3 * r}), var, model);
    const double minus = student_t_nll(vec({-r, 0.3 * r}), var, model);
    CHECK(plus == doctest::Approx(minus).epsilon(1e-14));
    CHECK(plus > prev);
    prev = plus;
  }
}

TEST_CASE("irls weight hits the documented anchor values") {
  const StudentTModel model{4.0};
  CHECK(student_t_weight(4.0, 2.0, model) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(student_t_weight(0.0, 2.0, model) == doctest::Approx(1.5).epsilon(1e-15));
  // Gross outlier: weight collapses.
  CHECK(student_t_weight(1e6, 2.0, model) < 1e-5);
  // Vector form agrees with the scalar form.
  const VectorXd r = vec({1.0, 1.0});
  const VectorXd var = vec({0.5, 0.5});
  CHECK(student_t_weight(r, var, model) ==
        doctest::Approx(student_t_weight(4.0, 2.0, model)).epsilon(1e-15));
}

TEST_CASE("gradient and hessian match finite differences") {
  const StudentTModel model{4.0};
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  const double h = 1e-6;
  for (int trial = 0; trial < 50; ++trial) {
    VectorXd r = vec({u(rng), u(rng), u(rng)});
    VectorXd var = vec({0.3 + std::abs(u(rng)), 0.5, 1.7});

    const VectorXd grad = student_t_nll_gradient(r, var, model);
    const MatrixXd hess = student_t_nll_hessian(r, var, model);
    for (int i = 0; i < r.size(); ++i) {
      VectorXd hi = r, lo = r;
      hi(i) += h;
      lo(i) -= h;
      const double fd =
          (student_t_nll(hi, var, model) - student_t_nll(lo, var, model)) /
          (2 * h);
      CHECK(grad(i) == doctest::Approx(fd).epsilon(1e-6));
      const VectorXd fd_row =
          (student_t_nll_gradient(hi, var, model) -
           student_t_nll_gradient(lo, var, model)) /
          (2 * h);
      for (int j = 0; j < r.size(); ++j)
        CHECK(hess(i, j) == doctest::Approx(fd_row(j)).epsilon(5e-5));
    }
  }
}

TEST_CASE("gauss-newton matrix is the weighted inverse covariance") {
  const StudentTModel model{4.0};
  const VectorXd r = vec({1.2, -0.7});
  const VectorXd var = vec({0.8, 1.3});
  const MatrixXd gn = student_t_nll_gauss_newton(r, var, model);
  const double w = student_t_weight(r, var, model);
  CHECK(gn(0, 0) == doctest::Approx(w / var(0)).epsilon(1e-14));
  CHECK(gn(1, 1) == doctest::Approx(w / var(1)).epsilon(1e-14));
  CHECK(gn(0, 1) == 0.0);
  // At r = 0 it coincides with the full Hessian.
  const VectorXd zero = vec({0.0, 0.0});
  CHECK((student_t_nll_gauss_newton(zero, var, model) -
         student_t_nll_hessian(zero, var, model))
            .norm() < 1e-14);
}

TEST_CASE("gaussian nll matches the closed form") {
  const VectorXd r = vec({1.0, -2.0});
  const VectorXd var = vec({0.5, 2.0});
  const double expected = 0.5 * (1.0 / 0.5 + 4.0 / 2.0) +
                          0.5 * (std::log(0.5) + std::log(2.0)) +
                          std::log(2.0 * M_PI);
  CHECK(gaussian_nll(r, var) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("student-t approaches the gaussian as nu grows") {
  const VectorXd var = vec({1.0, 1.0});
  const VectorXd a = vec({0.5, -0.2});
  const VectorXd b = vec({2.5, 1.2});
  // Compare likelihood *differences*: the constants differ, the shape must
  // converge.
  const double gauss_gap = gaussian_nll(b, var) - gaussian_nll(a, var);
  const StudentTModel huge{1e8};
  const double t_gap =
      student_t_nll(b, var, huge) - student_t_nll(a, var, huge);
  CHECK(t_gap == doctest::Approx(gauss_gap).epsilon(1e-6));
}

TEST_CASE("joint nll over a stack differs from the per-observation sum") {
  // Stacking two 2-vectors into one 4-vector couples them through the shared
  // mahalanobis term; equality holds only in the gaussian limit.
  const StudentTModel model{4.0};
  const VectorXd r = vec({0.9, -0.4, 1.1, 0.2});
  const VectorXd var = vec({1.0, 1.0, 1.0, 1.0});
  const double joint = student_t_nll(r, var, model);
  const double split = student_t_nll(r.head(2), var.head(2), model) +
                       student_t_nll(r.tail(2), var.tail(2), model);
  CHECK(joint != doctest::Approx(split).epsilon(1e-6));
}
