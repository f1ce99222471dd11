#include "fluorocal/geometry.hpp"

#include <random>

#include "doctest.h"
#include "fluorocal/errors.hpp"

using namespace fluorocal;

namespace {

std::mt19937_64 rng(20240811);

double uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec3 random_vec3(double scale) {
  return Vec3(uniform(-scale, scale), uniform(-scale, scale),
              uniform(-scale, scale));
}

Quat random_rotation() {
  const Vec3 axis = random_vec3(1.0).normalized();
  return Quat(Eigen::AngleAxisd(uniform(-3.0, 3.0), axis));
}

/// A camera at distance looking roughly at the origin, and a point it sees.
struct Scene {
  Pose pose;
  Intrinsics iop;
  Vec3 point;
};

Scene random_scene() {
  Scene s;
  s.pose.translation = random_vec3(100.0) + Vec3(0, 0, 1200.0);
  // The camera looks along its own -z; at +z with a small attitude it sees
  // the origin area.
  s.pose.rotation = canonicalized(Quat(Eigen::AngleAxisd(
      uniform(-0.1, 0.1), random_vec3(1.0).normalized())));
  s.iop = Intrinsics{uniform(-20, 20) + 1000, uniform(-20, 20) + 1000,
                     uniform(3000, 4000)};
  s.point = random_vec3(150.0);
  return s;
}

}  // namespace

TEST_CASE("skew matrix reproduces the cross product") {
  const Vec3 a = random_vec3(2.0), b = random_vec3(2.0);
  CHECK((skew(a) * b - a.cross(b)).norm() == doctest::Approx(0.0));
  CHECK((skew(a) + skew(a).transpose()).norm() == doctest::Approx(0.0));
}

TEST_CASE("exp_quat matches the rotation matrix exponential") {
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 d = random_vec3(1.5);
    const Mat3 via_quat = exp_quat(d).toRotationMatrix();
    // Rodrigues formula as the oracle.
    const double angle = d.norm();
    Mat3 rodrigues = Mat3::Identity();
    if (angle > 0) {
      const Mat3 k = skew(Vec3(d / angle));
      rodrigues += std::sin(angle) * k + (1 - std::cos(angle)) * k * k;
    }
    CHECK((via_quat - rodrigues).norm() < 1e-13);
  }
  CHECK(exp_quat(Vec3(0, 0, 0)).isApprox(Quat::Identity()));
}

TEST_CASE("canonicalized quaternions have non-negative w and compare equal") {
  const Quat q = random_rotation();
  const Quat neg(-q.w(), -q.x(), -q.y(), -q.z());
  const Quat a = canonicalized(q), b = canonicalized(neg);
  CHECK(a.w() >= 0.0);
  CHECK(a.coeffs().isApprox(b.coeffs()));
}

TEST_CASE("pose inverse and composition identities") {
  for (int trial = 0; trial < 20; ++trial) {
    Pose a{random_rotation(), random_vec3(50)};
    Pose b{random_rotation(), random_vec3(50)};
    const Vec3 x = random_vec3(100);

    CHECK((a.inverse().apply(a.apply(x)) - x).norm() < 1e-10);
    CHECK((a.then(b).apply(x) - b.apply(a.apply(x))).norm() < 1e-10);

    const Pose rel = relative_pose(a, b);
    const Pose back = a.then(rel);
    CHECK(back.rotation.angularDistance(b.rotation) < 1e-12);
    CHECK((back.translation - b.translation).norm() < 1e-10);
  }
}

TEST_CASE("projection of a centred point through a nadir camera") {
  // Camera at the origin of its own frame: mu = c / 10, image = mu * (U, V).
  Pose pose;  // identity: camera frame == object frame
  Intrinsics iop{0.0, 0.0, 100.0};
  const Vec2 img = project(Vec3(1.0, 2.0, -10.0), pose, iop);
  CHECK(img.x() == doctest::Approx(10.0).epsilon(1e-14));
  CHECK(img.y() == doctest::Approx(20.0).epsilon(1e-14));
}

TEST_CASE("projection applies principal point and correction additively") {
  Pose pose;
  Intrinsics iop{5.0, -3.0, 100.0};
  const Vec2 img =
      project(Vec3(1.0, 2.0, -10.0), pose, iop, Vec2(0.5, 0.5));
  CHECK(img.x() == doctest::Approx(15.5).epsilon(1e-14));
  CHECK(img.y() == doctest::Approx(17.5).epsilon(1e-14));
}

TEST_CASE("points at or behind the perspective centre throw") {
  Pose pose;
  Intrinsics iop{0, 0, 100};
  CHECK_THROWS_AS(project(Vec3(0, 0, 1.0), pose, iop), PointBehindCamera);
  CHECK_THROWS_AS(project(Vec3(1, 1, 0.0), pose, iop), PointBehindCamera);
  CHECK_NOTHROW(project(Vec3(0, 0, -1.0), pose, iop));
}

TEST_CASE("backprojected ray passes through the object point") {
  for (int trial = 0; trial < 20; ++trial) {
    const Scene s = random_scene();
    const Vec2 img = project(s.point, s.pose, s.iop);
    const Ray ray = backproject_ray(img, s.pose, s.iop);
    // Distance of the point from the ray line.
    const Vec3 to_point = s.point - ray.origin;
    const double dist = (to_point - to_point.dot(ray.direction) *
                                        ray.direction).norm();
    CHECK(dist < 1e-8);
    CHECK(ray.direction.norm() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("backprojection removes the stored correction") {
  const Scene s = random_scene();
  const Vec2 corr(0.8, -1.3);
  const Vec2 img = project(s.point, s.pose, s.iop, corr);
  const Ray with = backproject_ray(img, s.pose, s.iop, corr);
  const Ray clean = backproject_ray(project(s.point, s.pose, s.iop), s.pose,
                                    s.iop);
  CHECK((with.direction - clean.direction).norm() < 1e-12);
}

namespace {

// Fourth-order five-point stencil. Image values run to thousands of pixels,
// so a plain h=1e-6 central quotient sits on the roundoff floor; the wider
// stencil allows a step large enough to stay clear of it.
template <typename F>
Vec2 fd_derivative(F&& eval, double h) {
  return (-eval(2 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2 * h)) /
         (12.0 * h);
}

}  // namespace

TEST_CASE("projection jacobian matches central finite differences") {
  const double h = 1e-3;
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Scene s = random_scene();
    ProjectionJacobian pj;
    try {
      pj = project_jacobian(s.point, s.pose, s.iop);
    } catch (const PointBehindCamera&) {
      continue;
    }
    ++checked;

    const auto check_block = [&](const Mat23& jac, auto perturb) {
      for (int j = 0; j < 3; ++j) {
        const Vec2 fd = fd_derivative(
            [&](double t) {
              Vec3 d = Vec3::Zero();
              d(j) = t;
              return perturb(Vec3(d));
            },
            h);
        const double scale = std::max(1.0, fd.norm());
        CHECK((fd - jac.col(j)).norm() / scale < 1e-6);
      }
    };

    check_block(pj.d_point, [&](const Vec3& d) {
      return project(Vec3(s.point + d), s.pose, s.iop);
    });
    check_block(pj.d_translation, [&](const Vec3& d) {
      Pose p = s.pose;
      p.translation += d;
      return project(s.point, p, s.iop);
    });
    check_block(pj.d_rotation, [&](const Vec3& d) {
      Pose p = s.pose;
      p.rotation = apply_rotation_tangent(p.rotation, d);
      return project(s.point, p, s.iop);
    });
    check_block(pj.d_iop, [&](const Vec3& d) {
      Intrinsics iop{s.iop.x_p + d(0), s.iop.y_p + d(1), s.iop.c + d(2)};
      return project(s.point, s.pose, iop);
    });
  }
  CHECK(checked >= 90);
}

TEST_CASE("pose composition jacobian chains to finite differences") {
  const double h = 1e-3;
  int checked = 0;
  for (int trial = 0; trial < 120 && checked < 50; ++trial) {
    const Scene s = random_scene();
    // Biplanar-scale relative pose; unbounded rotations produce grazing
    // views whose wild curvature has nothing to do with a real rig.
    Pose rel{Quat(Eigen::AngleAxisd(uniform(-1.2, 1.2),
                                    random_vec3(1.0).normalized())),
             random_vec3(30)};
    const PoseCompositionJacobian comp = compose_jacobian(s.pose, rel);
    ProjectionJacobian pj;
    try {
      pj = project_jacobian(s.point, comp.composed, s.iop);
    } catch (const PointBehindCamera&) {
      continue;
    }
    const Vec3 cam = comp.composed.rotation *
                     (s.point - comp.composed.translation);
    const Vec2 img = project(s.point, comp.composed, s.iop);
    if (cam.z() > -250.0 ||
        (img - Vec2(s.iop.x_p, s.iop.y_p)).norm() > 4000.0)
      continue;
    ++checked;

    // Analytic chain: derived image wrt base and rel tangents.
    Mat23 d_base_t = pj.d_translation * comp.dt_dbase_t;
    Mat23 d_base_r = pj.d_translation * comp.dt_dbase_r +
                     pj.d_rotation * comp.dr_dbase_r;
    Mat23 d_rel_t = pj.d_translation * comp.dt_drel_t;
    Mat23 d_rel_r = pj.d_rotation * comp.dr_drel_r;

    const auto fd_check = [&](const Mat23& jac, auto perturbed) {
      for (int j = 0; j < 3; ++j) {
        Vec2 fd;
        try {
          fd = fd_derivative(
              [&](double t) {
                Vec3 d = Vec3::Zero();
                d(j) = t;
                return project(s.point, perturbed(Vec3(d)), s.iop);
              },
              h);
        } catch (const PointBehindCamera&) {
          continue;
        }
        const double scale = std::max(1.0, fd.norm());
        CHECK((fd - jac.col(j)).norm() / scale < 1e-6);
      }
    };

    fd_check(d_base_t, [&](const Vec3& d) {
      Pose b = s.pose;
      b.translation += d;
      return b.then(rel);
    });
    fd_check(d_base_r, [&](const Vec3& d) {
      Pose b = s.pose;
      b.rotation = apply_rotation_tangent(b.rotation, d);
      return b.then(rel);
    });
    fd_check(d_rel_t, [&](const Vec3& d) {
      Pose r = rel;
      r.translation += d;
      return s.pose.then(r);
    });
    fd_check(d_rel_r, [&](const Vec3& d) {
      Pose r = rel;
      r.rotation = apply_rotation_tangent(r.rotation, d);
      return s.pose.then(r);
    });
  }
  CHECK(checked >= 40);
}

TEST_CASE("two-ray intersection matches the least-squares line oracle") {
  for (int trial = 0; trial < 100; ++trial) {
    Ray r1{random_vec3(100), random_vec3(1.0).normalized()};
    Ray r2{random_vec3(100), random_vec3(1.0).normalized()};
    if (r1.direction.cross(r2.direction).norm() < 1e-3) continue;

    // Oracle: minimize summed squared distance to both lines,
    // sum_i |(I - d_i d_i^T)(p - o_i)|^2, a dense 3x3 normal system.
    Mat3 a = Mat3::Zero();
    Vec3 b = Vec3::Zero();
    for (const Ray& r : {r1, r2}) {
      const Mat3 proj = Mat3::Identity() - r.direction * r.direction.transpose();
      a += proj;
      b += proj * r.origin;
    }
    const Vec3 oracle = a.ldlt().solve(b);

    const Vec3 mid = intersect_two_rays(r1, r2);
    CHECK((mid - oracle).norm() < 1e-8);
  }
}

TEST_CASE("near-parallel rays are rejected") {
  Ray r1{Vec3(0, 0, 0), Vec3(0, 0, 1)};
  Ray r2{Vec3(1, 0, 0), Vec3(0, 1e-8, 1).normalized()};
  CHECK_THROWS_AS(intersect_two_rays(r1, r2), DegenerateRays);
}

TEST_CASE("observation-based intersection recovers a projected point") {
  for (int trial = 0; trial < 20; ++trial) {
    const Scene a = random_scene();
    Scene b = random_scene();
    // Second camera from the side so the rays meet at a healthy angle.
    b.pose.rotation = canonicalized(
        b.pose.rotation * Quat(Eigen::AngleAxisd(1.0, Vec3::UnitY())));
    b.pose.translation = Vec3(1100, 50, 300) + random_vec3(50);
    const Vec3 point = random_vec3(120);
    Vec2 img_a, img_b;
    try {
      img_a = project(point, a.pose, a.iop);
      img_b = project(point, b.pose, b.iop);
    } catch (const PointBehindCamera&) {
      continue;
    }
    const Vec3 hit =
        intersect_two_rays(img_a, a.pose, a.iop, img_b, b.pose, b.iop);
    CHECK((hit - point).norm() < 1e-6);
  }
}

TEST_CASE("rigid alignment recovers an exact rigid map") {
  for (int trial = 0; trial < 20; ++trial) {
    const Pose truth{random_rotation(), random_vec3(40)};
    std::vector<Vec3> source, target;
    for (int i = 0; i < 12; ++i) {
      source.push_back(random_vec3(80));
      target.push_back(truth.apply(source.back()));
    }
    const Alignment align = rigid_align(source, target);
    CHECK(align.rmse < 1e-10);
    CHECK(align.transform.rotation.angularDistance(truth.rotation) < 1e-10);
    CHECK((align.transform.translation - truth.translation).norm() < 1e-9);
  }
}

TEST_CASE("rigid alignment is the least-squares optimum") {
  // Iterative refinement oracle: no 6-DOF nudge may beat the closed form.
  const Pose truth{random_rotation(), random_vec3(20)};
  std::vector<Vec3> source, target;
  for (int i = 0; i < 15; ++i) {
    source.push_back(random_vec3(60));
    target.push_back(truth.apply(source.back()) + random_vec3(0.5));
  }
  const Alignment align = rigid_align(source, target);
  const auto cost = [&](const Pose& p) {
    double ss = 0;
    for (size_t i = 0; i < source.size(); ++i)
      ss += (p.apply(source[i]) - target[i]).squaredNorm();
    return ss;
  };
  const double best = cost(align.transform);
  std::mt19937_64 local(7);
  std::uniform_real_distribution<double> u(-1e-3, 1e-3);
  for (int trial = 0; trial < 200; ++trial) {
    Pose nudged = align.transform;
    nudged.translation += Vec3(u(local), u(local), u(local));
    nudged.rotation = apply_rotation_tangent(
        nudged.rotation, Vec3(u(local), u(local), u(local)));
    CHECK(cost(nudged) >= best - 1e-9);
  }
}

TEST_CASE("rigid alignment rejects degenerate input") {
  std::vector<Vec3> line = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0)};
  CHECK_THROWS_AS(rigid_align(line, line), DegenerateConfiguration);
  std::vector<Vec3> two = {Vec3(0, 0, 0), Vec3(1, 0, 0)};
  CHECK_THROWS_AS(rigid_align(two, two), DegenerateConfiguration);
  std::vector<Vec3> mismatched = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  std::vector<Vec3> four(4, Vec3::Zero());
  CHECK_THROWS_AS(rigid_align(mismatched, four), DegenerateConfiguration);
}
