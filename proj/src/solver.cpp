#include "fluorocal/solver.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <set>

#include "fluorocal/errors.hpp"
#include "fluorocal/format.hpp"

namespace fluorocal {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Mat2 = Eigen::Matrix2d;
using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat63 = Eigen::Matrix<double, 6, 3>;
using Mat73 = Eigen::Matrix<double, 7, 3>;
using Mat7 = Eigen::Matrix<double, 7, 7>;
using Vec7 = Eigen::Matrix<double, 7, 1>;

// Structural description of one observation: which camera blocks its
// Jacobian touches and where they sit inside the point's coupling strip.
struct ObsPlan {
  const Observation* o = nullptr;
  PoseKey base_key{};
  bool derived = false;  // pose obtained through the ROP
  int n_cam = 0;
  int cam_block[3] = {-1, -1, -1};
  int cam_entry[3] = {-1, -1, -1};  // index into the point's block list
  int point_slot = -1;
};

struct SolverPlan {
  std::vector<ObsPlan> obs;
  // per point: sorted camera block ids with nonzero coupling
  std::vector<std::vector<int>> point_blocks;
};

SolverPlan make_plan(const Network& net, const ParameterLayout& layout) {
  SolverPlan plan;
  plan.obs.reserve(net.observations.size());
  plan.point_blocks.resize(layout.point_ids.size());

  std::vector<std::set<int>> touched(layout.point_ids.size());
  for (const auto& o : net.observations) {
    ObsPlan p;
    p.o = &o;
    p.derived = net.rop && o.system_id != net.reference_system;
    p.base_key = p.derived ? PoseKey{net.reference_system, o.exposure_id}
                           : PoseKey{o.system_id, o.exposure_id};
    p.cam_block[p.n_cam++] = layout.pose_block.at(p.base_key);
    if (net.estimate_iop())
      p.cam_block[p.n_cam++] = layout.iop_block.at(o.system_id);
    if (p.derived) p.cam_block[p.n_cam++] = layout.rop_block;
    p.point_slot = layout.point_slot.at(o.target_id);
    for (int a = 0; a < p.n_cam; ++a)
      touched[p.point_slot].insert(p.cam_block[a]);
    plan.obs.push_back(p);
  }
  for (size_t i = 0; i < touched.size(); ++i)
    plan.point_blocks[i].assign(touched[i].begin(), touched[i].end());
  for (auto& p : plan.obs) {
    const auto& blocks = plan.point_blocks[p.point_slot];
    for (int a = 0; a < p.n_cam; ++a) {
      const auto it =
          std::lower_bound(blocks.begin(), blocks.end(), p.cam_block[a]);
      p.cam_entry[a] = static_cast<int>(it - blocks.begin());
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Residual / Jacobian evaluation

struct ObsLin {
  Mat26 jac[3];
  Mat23 j_point = Mat23::Zero();
  Vec2 residual = Vec2::Zero();
  Vec2 inv_var = Vec2::Zero();
  double m2 = 0.0;
};

struct Linearization {
  std::vector<ObsLin> obs;
  std::vector<double> weights;
  double cost = 0.0;
};

Vec2 predict_observation(const Network& net, const ObsPlan& p) {
  const Observation& o = *p.o;
  const Pose base = net.poses.at(p.base_key);
  const Pose pose = p.derived ? base.then(*net.rop) : base;
  return project(net.points.at(o.target_id), pose,
                 net.intrinsics.at(o.system_id), o.correction);
}

void stack_residuals(const std::vector<Vec2>& residuals,
                     const std::vector<Vec2>& variances, VectorXd& r,
                     VectorXd& v) {
  const auto n = residuals.size();
  r.resize(2 * n);
  v.resize(2 * n);
  for (size_t i = 0; i < n; ++i) {
    r.segment<2>(2 * i) = residuals[i];
    v.segment<2>(2 * i) = variances[i];
  }
}

double cost_of(const std::vector<Vec2>& residuals,
               const std::vector<Vec2>& variances, const StudentTModel& model,
               const SolverSettings& s) {
  VectorXd r, v;
  stack_residuals(residuals, variances, r, v);
  if (s.likelihood == Likelihood::gaussian) return gaussian_nll(r, v);
  if (s.joint_likelihood) return student_t_nll(r, v, model);
  double cost = 0.0;
  for (Eigen::Index i = 0; i < r.size(); i += 2)
    cost += student_t_nll(r.segment<2>(i), v.segment<2>(i), model);
  return cost;
}

std::vector<Vec2> measurement_variances(const Network& net) {
  std::vector<Vec2> v;
  v.reserve(net.observations.size());
  for (const auto& o : net.observations)
    v.push_back(Vec2::Constant(o.sigma * o.sigma));
  return v;
}

std::vector<Vec2> evaluate_residuals(const Network& net,
                                     const SolverPlan& plan) {
  std::vector<Vec2> r;
  r.reserve(plan.obs.size());
  for (const auto& p : plan.obs)
    r.push_back(p.o->image - predict_observation(net, p));
  return r;
}

void assign_weights(Linearization& lin, const StudentTModel& model,
                    const SolverSettings& s) {
  const auto n = lin.obs.size();
  lin.weights.assign(n, 1.0);
  if (s.likelihood == Likelihood::gaussian) return;
  if (s.joint_likelihood) {
    double m2 = 0.0;
    for (const auto& ol : lin.obs) m2 += ol.m2;
    const double w = student_t_weight(m2, 2.0 * static_cast<double>(n), model);
    lin.weights.assign(n, w);
    return;
  }
  for (size_t i = 0; i < n; ++i)
    lin.weights[i] = student_t_weight(lin.obs[i].m2, 2.0, model);
}

void linearize(const Network& net, const SolverPlan& plan,
               const StudentTModel& model, const SolverSettings& s,
               Linearization& lin) {
  lin.obs.resize(plan.obs.size());
  std::vector<Vec2> residuals(plan.obs.size());
  std::vector<Vec2> variances(plan.obs.size());
  for (size_t i = 0; i < plan.obs.size(); ++i) {
    const ObsPlan& p = plan.obs[i];
    const Observation& o = *p.o;
    ObsLin& ol = lin.obs[i];

    const Pose base = net.poses.at(p.base_key);
    const Intrinsics& iop = net.intrinsics.at(o.system_id);
    const Vec3& point = net.points.at(o.target_id);

    ProjectionJacobian pj;
    PoseCompositionJacobian comp;
    if (!p.derived) {
      pj = project_jacobian(point, base, iop, o.correction);
      ol.jac[0].leftCols<3>() = pj.d_translation;
      ol.jac[0].rightCols<3>() = pj.d_rotation;
    } else {
      comp = compose_jacobian(base, *net.rop);
      pj = project_jacobian(point, comp.composed, iop, o.correction);
      ol.jac[0].leftCols<3>() = pj.d_translation * comp.dt_dbase_t;
      ol.jac[0].rightCols<3>() = pj.d_translation * comp.dt_dbase_r +
                                 pj.d_rotation * comp.dr_dbase_r;
    }
    int a = 1;
    if (net.estimate_iop()) {
      ol.jac[a].setZero();
      ol.jac[a].leftCols<3>() = pj.d_iop;
      ++a;
    }
    if (p.derived) {
      ol.jac[a].leftCols<3>() = pj.d_translation * comp.dt_drel_t;
      ol.jac[a].rightCols<3>() = pj.d_rotation * comp.dr_drel_r;
      ++a;
    }
    ol.j_point = pj.d_point;
    ol.residual = o.image - pj.image;
    ol.inv_var = Vec2::Constant(1.0 / (o.sigma * o.sigma));
    ol.m2 = ol.residual.cwiseProduct(ol.inv_var).dot(ol.residual);
    residuals[i] = ol.residual;
    variances[i] = Vec2::Constant(o.sigma * o.sigma);
  }
  assign_weights(lin, model, s);
  lin.cost = cost_of(residuals, variances, model, s);
}

// ---------------------------------------------------------------------------
// Normal equations, Schur reduction and the inner-constraint datum

struct PointEq {
  MatrixXd b;  // stacked coupling strip, (6 * n_blocks) x 3
  Mat3 d = Mat3::Zero();
  Vec3 g = Vec3::Zero();
};

struct NormalEq {
  MatrixXd a;   // camera-camera, padded blocks
  VectorXd gc;  // camera rhs
  std::vector<PointEq> pts;
};

void accumulate_normal(const SolverPlan& plan, const Linearization& lin,
                       const ParameterLayout& layout, NormalEq& eq) {
  const int cam = layout.camera_dim();
  eq.a.setZero(cam, cam);
  eq.gc.setZero(cam);
  eq.pts.resize(plan.point_blocks.size());
  for (size_t i = 0; i < plan.point_blocks.size(); ++i) {
    eq.pts[i].b.setZero(6 * plan.point_blocks[i].size(), 3);
    eq.pts[i].d.setZero();
    eq.pts[i].g.setZero();
  }

  for (size_t i = 0; i < plan.obs.size(); ++i) {
    const ObsPlan& p = plan.obs[i];
    const ObsLin& ol = lin.obs[i];
    const Vec2 wc = lin.weights[i] * ol.inv_var;  // w * C_l^{-1} diagonal
    PointEq& pt = eq.pts[p.point_slot];

    Eigen::Matrix<double, 6, 2> jt_w[3];  // J_a^T (w C^{-1})
    for (int a = 0; a < p.n_cam; ++a)
      jt_w[a] = ol.jac[a].transpose() * wc.asDiagonal();

    for (int a = 0; a < p.n_cam; ++a) {
      const int ra = 6 * p.cam_block[a];
      for (int b = a; b < p.n_cam; ++b)
        eq.a.block<6, 6>(ra, 6 * p.cam_block[b]) += jt_w[a] * ol.jac[b];
      eq.gc.segment<6>(ra) += jt_w[a] * ol.residual;
      pt.b.block<6, 3>(6 * p.cam_entry[a], 0) += jt_w[a] * ol.j_point;
    }
    pt.d += ol.j_point.transpose() * wc.asDiagonal() * ol.j_point;
    pt.g += ol.j_point.transpose() * (wc.cwiseProduct(ol.residual));
  }

  eq.a = eq.a.selfadjointView<Eigen::Upper>();
  // Padded IOP slots: inert diagonal, zero coupling, so the solve ignores
  // them.  Pad at the matrix's own scale or the pivot-ratio singularity test
  // would flag the padding on large networks.
  const double pad = std::max(1.0, eq.a.diagonal().maxCoeff());
  for (const auto& [system, block] : layout.iop_block)
    for (int j = 3; j < 6; ++j) eq.a(6 * block + j, 6 * block + j) = pad;
}

// 7 x 3 datum rows per point (3 translation, 3 rotation, 1 scale about the
// centroid), row-normalized over the whole point vector.
std::vector<Mat73> make_datum(const Network& net,
                              const ParameterLayout& layout) {
  const auto n = layout.point_ids.size();
  Vec3 centroid = Vec3::Zero();
  for (int id : layout.point_ids) centroid += net.points.at(id);
  centroid /= static_cast<double>(n);

  Vec7 row_sq = Vec7::Zero();
  for (int id : layout.point_ids) {
    const Vec3 p = net.points.at(id) - centroid;
    row_sq.head<3>().array() += 1.0;
    const Mat3 sk = skew(p);
    for (int j = 0; j < 3; ++j) row_sq(3 + j) += sk.row(j).squaredNorm();
    row_sq(6) += p.squaredNorm();
  }
  const Vec7 inv_norm = row_sq.cwiseSqrt().cwiseMax(1e-300).cwiseInverse();

  std::vector<Mat73> datum(n);
  for (size_t i = 0; i < n; ++i) {
    const Vec3 p = net.points.at(layout.point_ids[i]) - centroid;
    Mat73 gi;
    gi.topRows<3>() = Mat3::Identity();
    gi.middleRows<3>(3) = skew(p);
    gi.bottomRows<1>() = p.transpose();
    datum[i] = inv_norm.asDiagonal() * gi;
  }
  return datum;
}

struct SchurSolve {
  VectorXd dc;
  VectorXd dp;
};

// Reduced camera system with optional KKT elimination of the 7 datum rows.
SchurSolve solve_schur(const NormalEq& eq, const SolverPlan& plan,
                       const std::vector<Mat73>& datum, double lambda,
                       bool constraints) {
  const int cam = static_cast<int>(eq.a.rows());
  const auto npts = eq.pts.size();

  MatrixXd s = eq.a;
  s.diagonal() += lambda * eq.a.diagonal();
  VectorXd rhs = eq.gc;
  MatrixXd k = MatrixXd::Zero(cam, 7);
  Mat7 m = Mat7::Zero();
  Vec7 h = Vec7::Zero();

  std::vector<Mat3> dinv(npts);
  for (size_t i = 0; i < npts; ++i) {
    const auto& blocks = plan.point_blocks[i];
    Mat3 dt = eq.pts[i].d;
    dt.diagonal() += lambda * eq.pts[i].d.diagonal();
    dinv[i] = dt.inverse();
    if (!dinv[i].allFinite())
      throw SingularNormalMatrix("point normal block not invertible");

    const MatrixXd pd = eq.pts[i].b * dinv[i];          // (6n) x 3
    const MatrixXd bdb = pd * eq.pts[i].b.transpose();  // (6n) x (6n)
    const Vec3 u = dinv[i] * eq.pts[i].g;
    for (size_t e = 0; e < blocks.size(); ++e) {
      for (size_t f = 0; f < blocks.size(); ++f)
        s.block<6, 6>(6 * blocks[e], 6 * blocks[f]) -=
            bdb.block<6, 6>(6 * e, 6 * f);
      rhs.segment<6>(6 * blocks[e]) -= eq.pts[i].b.middleRows<6>(6 * e) * u;
      if (constraints)
        k.middleRows<6>(6 * blocks[e]) +=
            pd.middleRows<6>(6 * e) * datum[i].transpose();
    }
    if (constraints) {
      m += datum[i] * dinv[i] * datum[i].transpose();
      h += datum[i] * u;
    }
  }

  Eigen::LDLT<Mat7> m_ldlt;
  if (constraints) {
    m_ldlt.compute(m);
    s += k * m_ldlt.solve(k.transpose());
    rhs += k * m_ldlt.solve(h);
  }

  const Eigen::LDLT<MatrixXd> s_ldlt(s);
  const VectorXd pivots = s_ldlt.vectorD().cwiseAbs();
  SchurSolve out;
  out.dc = s_ldlt.solve(rhs);
  if (pivots.minCoeff() < 1e-13 * pivots.maxCoeff() || !out.dc.allFinite() ||
      (s * out.dc - rhs).norm() > 1e-4 * std::max(1.0, rhs.norm()))
    throw SingularNormalMatrix(
        "reduced camera system not solvable (datum not applied or degenerate "
        "network)");

  out.dp.resize(3 * npts);
  Vec7 z = Vec7::Zero();
  if (constraints) {
    Vec7 gdy = Vec7::Zero();
    for (size_t i = 0; i < npts; ++i) {
      const auto& blocks = plan.point_blocks[i];
      Vec3 y = eq.pts[i].g;
      for (size_t e = 0; e < blocks.size(); ++e)
        y -= eq.pts[i].b.middleRows<6>(6 * e).transpose() *
             out.dc.segment<6>(6 * blocks[e]);
      gdy += datum[i] * (dinv[i] * y);
    }
    z = m_ldlt.solve(gdy);
  }
  for (size_t i = 0; i < npts; ++i) {
    const auto& blocks = plan.point_blocks[i];
    Vec3 y = eq.pts[i].g;
    for (size_t e = 0; e < blocks.size(); ++e)
      y -= eq.pts[i].b.middleRows<6>(6 * e).transpose() *
           out.dc.segment<6>(6 * blocks[e]);
    if (constraints) y -= datum[i].transpose() * z;
    out.dp.segment<3>(3 * i) = dinv[i] * y;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter vector application

struct ParameterSnapshot {
  std::map<PoseKey, Pose> poses;
  std::map<int, Intrinsics> intrinsics;
  std::optional<Pose> rop;
  std::map<int, Vec3> points;
};

ParameterSnapshot save_parameters(const Network& net) {
  return {net.poses, net.intrinsics, net.rop, net.points};
}

void restore_parameters(Network& net, const ParameterSnapshot& snap) {
  net.poses = snap.poses;
  net.intrinsics = snap.intrinsics;
  net.rop = snap.rop;
  net.points = snap.points;
}

void apply_step(Network& net, const ParameterLayout& layout,
                const VectorXd& dc, const VectorXd& dp) {
  for (size_t b = 0; b < layout.pose_keys.size(); ++b) {
    Pose& pose = net.poses.at(layout.pose_keys[b]);
    const auto d = dc.segment<6>(6 * b);
    pose.translation += d.head<3>();
    pose.rotation = apply_rotation_tangent(pose.rotation, Vec3(d.tail<3>()));
  }
  for (const auto& [system, block] : layout.iop_block) {
    Intrinsics& iop = net.intrinsics.at(system);
    iop.x_p += dc(6 * block + 0);
    iop.y_p += dc(6 * block + 1);
    iop.c += dc(6 * block + 2);
  }
  if (layout.rop_block >= 0) {
    const auto d = dc.segment<6>(6 * layout.rop_block);
    net.rop->translation += d.head<3>();
    net.rop->rotation =
        apply_rotation_tangent(net.rop->rotation, Vec3(d.tail<3>()));
  }
  for (size_t i = 0; i < layout.point_ids.size(); ++i)
    net.points.at(layout.point_ids[i]) += dp.segment<3>(3 * i);
}

// ---------------------------------------------------------------------------
// Residual variance recovery: diag(C_r) = diag(C_l) - diag(J Sigma J^T) from
// the undamped reduced system at the solution.

std::vector<Vec2> recover_residual_variances(const SolverPlan& plan,
                                             const Linearization& lin,
                                             const NormalEq& eq,
                                             const std::vector<Mat73>& datum,
                                             const ParameterLayout& layout) {
  const int cam = layout.camera_dim();
  const auto npts = eq.pts.size();

  MatrixXd s = eq.a;
  MatrixXd k = MatrixXd::Zero(cam, 7);
  Mat7 m = Mat7::Zero();
  std::vector<Mat3> dinv(npts);
  for (size_t i = 0; i < npts; ++i) {
    const auto& blocks = plan.point_blocks[i];
    dinv[i] = eq.pts[i].d.inverse();
    if (!dinv[i].allFinite())
      throw SingularNormalMatrix("point normal block not invertible");
    const MatrixXd pd = eq.pts[i].b * dinv[i];
    const MatrixXd bdb = pd * eq.pts[i].b.transpose();
    for (size_t e = 0; e < blocks.size(); ++e) {
      for (size_t f = 0; f < blocks.size(); ++f)
        s.block<6, 6>(6 * blocks[e], 6 * blocks[f]) -=
            bdb.block<6, 6>(6 * e, 6 * f);
      k.middleRows<6>(6 * blocks[e]) +=
          pd.middleRows<6>(6 * e) * datum[i].transpose();
    }
    m += datum[i] * dinv[i] * datum[i].transpose();
  }
  const Eigen::LDLT<Mat7> m_ldlt(m);
  s += k * m_ldlt.solve(k.transpose());

  Eigen::LDLT<MatrixXd> s_ldlt(s);
  MatrixXd sigma_cc = s_ldlt.solve(MatrixXd::Identity(cam, cam));
  if (!sigma_cc.allFinite())
    throw SingularNormalMatrix("covariance recovery failed");
  const MatrixXd ck = sigma_cc * k;         // cam x 7
  const Mat7 kck = k.transpose() * ck;      // 7 x 7

  // Per point: cross covariances -Y_e toward each observing block and the
  // 3x3 point covariance.
  std::vector<MatrixXd> y(npts);   // stacked (6n) x 3
  std::vector<Mat3> sigma_pp(npts);
  for (size_t i = 0; i < npts; ++i) {
    const auto& blocks = plan.point_blocks[i];
    const auto n = blocks.size();
    const MatrixXd pd = eq.pts[i].b * dinv[i];              // (6n) x 3
    const Eigen::Matrix<double, 7, 3> gd = datum[i] * dinv[i];
    const Eigen::Matrix<double, 7, 3> w7 = m_ldlt.solve(gd);

    MatrixXd y1 = MatrixXd::Zero(6 * n, 3);
    for (size_t e = 0; e < n; ++e)
      for (size_t f = 0; f < n; ++f)
        y1.middleRows<6>(6 * e) +=
            sigma_cc.block<6, 6>(6 * blocks[e], 6 * blocks[f]) *
            pd.middleRows<6>(6 * f);

    Mat3 xss = Mat3::Zero();
    Eigen::Matrix<double, 3, 7> a2 = Eigen::Matrix<double, 3, 7>::Zero();
    y[i].resize(6 * n, 3);
    for (size_t e = 0; e < n; ++e) {
      xss += pd.middleRows<6>(6 * e).transpose() * y1.middleRows<6>(6 * e);
      a2 += pd.middleRows<6>(6 * e).transpose() * ck.middleRows<6>(6 * blocks[e]);
      y[i].middleRows<6>(6 * e) =
          y1.middleRows<6>(6 * e) - ck.middleRows<6>(6 * blocks[e]) * w7;
    }
    const Mat3 a2w = a2 * w7;
    const Mat3 s11 = dinv[i] - gd.transpose() * m_ldlt.solve(gd);
    sigma_pp[i] = s11 + xss - a2w - a2w.transpose() +
                  w7.transpose() * kck * w7;
  }

  std::vector<Vec2> variances(plan.obs.size());
  for (size_t idx = 0; idx < plan.obs.size(); ++idx) {
    const ObsPlan& p = plan.obs[idx];
    const ObsLin& ol = lin.obs[idx];
    Mat2 jsj = Mat2::Zero();
    for (int a = 0; a < p.n_cam; ++a) {
      for (int b = 0; b < p.n_cam; ++b)
        jsj += ol.jac[a] *
               sigma_cc.block<6, 6>(6 * p.cam_block[a], 6 * p.cam_block[b]) *
               ol.jac[b].transpose();
      const Eigen::Matrix<double, 6, 3> sigma_cp =
          -y[p.point_slot].middleRows<6>(6 * p.cam_entry[a]);
      const Mat2 cross = ol.jac[a] * sigma_cp * ol.j_point.transpose();
      jsj += cross + cross.transpose();
    }
    jsj += ol.j_point * sigma_pp[p.point_slot] * ol.j_point.transpose();

    const Vec2 cl = ol.inv_var.cwiseInverse();
    variances[idx] = (cl - jsj.diagonal()).cwiseMax(1e-4 * cl);
  }
  return variances;
}

}  // namespace

double network_cost(const Network& network, const StudentTModel& model,
                    Likelihood likelihood, bool joint) {
  SolverSettings s;
  s.likelihood = likelihood;
  s.joint_likelihood = joint;
  const ParameterLayout layout = make_layout(network);
  const SolverPlan plan = make_plan(network, layout);
  return cost_of(evaluate_residuals(network, plan),
                 measurement_variances(network), model, s);
}

SolveResult levenberg_marquardt(Network& network, const StudentTModel& model,
                                const SolverSettings& settings) {
  const ParameterLayout layout = make_layout(network);
  const SolverPlan plan = make_plan(network, layout);
  const std::vector<Mat73> datum = make_datum(network, layout);

  Linearization lin;
  NormalEq eq;
  linearize(network, plan, model, settings, lin);
  accumulate_normal(plan, lin, layout, eq);

  // Without a datum the undamped normal matrix carries the 7-dim gauge null
  // space; fail fast instead of drifting through damped no-op steps.
  if (!settings.use_inner_constraints) solve_schur(eq, plan, datum, 0.0, false);

  SolveResult result;
  result.status = SolveStatus::max_iterations;
  double cost = lin.cost;
  double lambda = settings.initial_lambda;

  for (int it = 1; it <= settings.max_iterations; ++it) {
    result.iterations = it;
    const SchurSolve step =
        solve_schur(eq, plan, datum, lambda, settings.use_inner_constraints);
    const double max_step =
        std::max(step.dc.lpNorm<Eigen::Infinity>(),
                 step.dp.size() ? step.dp.lpNorm<Eigen::Infinity>() : 0.0);

    // An exactly zero step means the gradient vanished; no damping value can
    // move the iterate, so escalating lambda would only burn solves.
    if (max_step == 0.0) {
      result.trace.push_back({it, cost, lambda, max_step, true});
      result.status = SolveStatus::converged;
      break;
    }

    const ParameterSnapshot snap = save_parameters(network);
    apply_step(network, layout, step.dc, step.dp);

    double trial = std::numeric_limits<double>::infinity();
    try {
      trial = cost_of(evaluate_residuals(network, plan),
                      measurement_variances(network), model, settings);
    } catch (const PointBehindCamera&) {
    }

    // Strict decrease only: accepting an equal-cost trial would let a solve
    // warm-started at its own optimum drift by a rounding-level step instead
    // of reproducing the state exactly.
    if (trial < cost) {
      const double change = cost - trial;
      cost = trial;
      result.trace.push_back({it, cost, lambda, max_step, true});
      lambda = std::max(lambda / settings.lambda_down, 1e-12);
      if (change <= settings.cost_tolerance * std::max(1.0, std::abs(cost))) {
        result.status = SolveStatus::converged;
        break;
      }
      linearize(network, plan, model, settings, lin);
      accumulate_normal(plan, lin, layout, eq);
    } else {
      restore_parameters(network, snap);
      result.trace.push_back({it, cost, lambda, max_step, false});
      lambda *= settings.lambda_up;
      if (lambda > settings.lambda_max) {
        result.status = SolveStatus::converged;
        break;
      }
    }
  }

  result.final_cost = cost;
  linearize(network, plan, model, settings, lin);
  result.residuals.residuals.resize(lin.obs.size());
  for (size_t i = 0; i < lin.obs.size(); ++i)
    result.residuals.residuals[i] = lin.obs[i].residual;
  if (settings.residual_variances && settings.use_inner_constraints) {
    accumulate_normal(plan, lin, layout, eq);
    result.residuals.variances =
        recover_residual_variances(plan, lin, eq, datum, layout);
  } else {
    result.residuals.variances = measurement_variances(network);
  }
  result.residuals.inlier.assign(lin.obs.size(), true);
  return result;
}

void classify_inliers(ResidualSet& residuals, double tau) {
  const auto n = residuals.residuals.size();
  if (n == 0) throw AllOutliers("empty residual set");
  residuals.inlier.assign(n, true);
  std::vector<double> m2(n);
  for (size_t i = 0; i < n; ++i) {
    const Vec2& r = residuals.residuals[i];
    const Vec2& v = residuals.variances[i];
    m2[i] = r.x() * r.x() / v.x() + r.y() * r.y() / v.y();
  }
  // Studentize against the lower quartile of the squared Mahalanobis norms,
  // referenced to its chi-square(2) value and floored at the nominal noise.
  // Unlearned systematic distortion inflates every residual, so a fixed
  // nominal gate would reject the very samples the regression needs; a
  // quantile this low also stays put under heavy upper contamination.
  std::vector<double> sorted = m2;
  const size_t rank = (n + 3) / 4 - 1;
  std::nth_element(sorted.begin(), sorted.begin() + rank, sorted.end());
  constexpr double chi2_lower_quartile = 0.5753641449035618;  // -2 ln(3/4)
  const double scale2 = std::max(1.0, sorted[rank] / chi2_lower_quartile);
  size_t kept = 0;
  for (size_t i = 0; i < n; ++i) {
    residuals.inlier[i] = m2[i] <= tau * tau * scale2;
    kept += residuals.inlier[i];
  }
  if (2 * kept < n)
    throw AllOutliers("fewer than half the observations pass the " +
                      format_double(tau) + "-sigma gate");
}

void write_trace_csv(std::ostream& out,
                     const std::vector<IterationRecord>& trace) {
  out << "iteration,cost,lambda,max_step\n";
  for (const auto& row : trace)
    out << row.iteration << ',' << format_double(row.cost) << ','
        << format_double(row.lambda) << ',' << format_double(row.max_step)
        << '\n';
}

}  // namespace fluorocal
