#pragma once

// Projective and Euclidean geometry for pinhole-modelled fluoroscopes.
//
// Conventions used throughout the library:
//   * Object space is metric (mm), image space is pixels.
//   * A Pose maps object space into the camera frame:  v = q (P - T) q^c,
//     where T is the perspective centre in object coordinates and q is a
//     unit quaternion (object -> camera).
//   * The camera looks along -Z of its own frame; a point is visible when
//     the third component W of v is strictly negative.  The per-ray scale
//     mu = c / (-W) is positive for visible points and is eliminated
//     analytically, never estimated.
//   * Image frame is right-handed:  x = x_p + dx + mu*U,  y = y_p + dy + mu*V.
//   * Rotation updates use a 3-parameter tangent composed multiplicatively
//     on the right:  q <- q * exp(delta), with exp() the angle-axis map, so
//     R(q') = R(q) * expm(skew(delta)).

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <cmath>
#include <limits>
#include <vector>

#include "fluorocal/errors.hpp"

namespace fluorocal {

template <typename S> using Vec2T = Eigen::Matrix<S, 2, 1>;
template <typename S> using Vec3T = Eigen::Matrix<S, 3, 1>;
template <typename S> using Mat3T = Eigen::Matrix<S, 3, 3>;
template <typename S> using Mat23T = Eigen::Matrix<S, 2, 3>;
template <typename S> using QuatT = Eigen::Quaternion<S>;

using Vec2 = Vec2T<double>;
using Vec3 = Vec3T<double>;
using Mat3 = Mat3T<double>;
using Mat23 = Mat23T<double>;
using Quat = QuatT<double>;

/// Margin (mm, camera frame) below which a point counts as behind the camera.
inline constexpr double kBehindCameraEps = 1e-9;

/// Minimum angle (rad) between two rays for a well-posed intersection.
inline constexpr double kMinRayAngle = 1e-6;

template <typename S>
Mat3T<S> skew(const Vec3T<S>& v) {
  Mat3T<S> m;
  m << S(0), -v.z(), v.y(),
       v.z(), S(0), -v.x(),
       -v.y(), v.x(), S(0);
  return m;
}

/// q and -q encode the same rotation; fix the sign (w >= 0) for comparisons
/// and serialization.
template <typename S>
QuatT<S> canonicalized(const QuatT<S>& q) {
  QuatT<S> out = q;
  if (out.w() < S(0)) out.coeffs() = -out.coeffs();
  return out;
}

/// Angle-axis exponential: R(exp_quat(d)) == expm(skew(d)).
template <typename S>
QuatT<S> exp_quat(const Vec3T<S>& delta) {
  using std::cos;
  using std::sin;
  const S theta = delta.norm();
  QuatT<S> q;
  if (theta < S(1e-12)) {
    q.w() = S(1);
    q.vec() = delta / S(2);  // first order, renormalized below
  } else {
    q.w() = cos(theta / S(2));
    q.vec() = (sin(theta / S(2)) / theta) * delta;
  }
  q.normalize();
  return q;
}

/// Right-multiplicative rotation update with renormalization.
template <typename S>
QuatT<S> apply_rotation_tangent(const QuatT<S>& q, const Vec3T<S>& delta) {
  QuatT<S> out = q * exp_quat(delta);
  out.normalize();
  return out;
}

/// Principal point offsets and principal distance (all px).
template <typename S>
struct IntrinsicsT {
  S x_p = S(0);
  S y_p = S(0);
  S c = S(1);  // > 0
};
using Intrinsics = IntrinsicsT<double>;

/// Rigid map v = q (x - T) q^c.  For a camera, T is the perspective centre
/// in object space and q rotates object axes into camera axes.
template <typename S>
struct PoseT {
  QuatT<S> rotation = QuatT<S>::Identity();
  Vec3T<S> translation = Vec3T<S>::Zero();

  static PoseT Identity() { return PoseT{}; }

  Vec3T<S> apply(const Vec3T<S>& x) const {
    return rotation * (x - translation);
  }

  /// Inverse map: apply(inverse().apply(y)) == y.
  PoseT inverse() const {
    PoseT inv;
    inv.rotation = rotation.conjugate();
    inv.translation = -(rotation * translation);
    return inv;
  }

  /// Composition second(this(x)): this maps into an intermediate frame,
  /// `second` maps that frame onward.
  PoseT then(const PoseT& second) const {
    PoseT out;
    out.rotation = (second.rotation * rotation).normalized();
    out.translation =
        translation + rotation.conjugate() * second.translation;
    return out;
  }
};
using Pose = PoseT<double>;

/// Relative map a -> b such that a.then(relative_pose(a, b)) == b.
template <typename S>
PoseT<S> relative_pose(const PoseT<S>& a, const PoseT<S>& b) {
  PoseT<S> rel;
  rel.rotation = (b.rotation * a.rotation.conjugate()).normalized();
  rel.translation = a.apply(b.translation);
  return rel;
}

/// Camera-frame coordinates of an object point; throws when the point is at
/// or behind the perspective centre plane.
template <typename S>
Vec3T<S> camera_frame(const Vec3T<S>& point, const PoseT<S>& pose) {
  Vec3T<S> v = pose.apply(point);
  if (!(v.z() < S(-kBehindCameraEps)))
    throw PointBehindCamera("point at or behind camera plane (W = " +
                            std::to_string(static_cast<double>(v.z())) + ")");
  return v;
}

/// Collinearity projection: image = principal point + correction + mu * (U, V)
/// with mu = c / (-W).
template <typename S>
Vec2T<S> project(const Vec3T<S>& point, const PoseT<S>& pose,
                 const IntrinsicsT<S>& iop,
                 const Vec2T<S>& correction = Vec2T<S>::Zero()) {
  const Vec3T<S> v = camera_frame(point, pose);
  const S mu = iop.c / -v.z();
  return Vec2T<S>(iop.x_p + correction.x() + mu * v.x(),
                  iop.y_p + correction.y() + mu * v.y());
}

/// Image point plus analytic partials of (x, y) with respect to the object
/// point, the pose translation, the rotation tangent and the intrinsics.
/// The additive correction has unit Jacobian and is omitted.
template <typename S>
struct ProjectionJacobianT {
  Vec2T<S> image = Vec2T<S>::Zero();
  Mat23T<S> d_point = Mat23T<S>::Zero();        // wrt P
  Mat23T<S> d_translation = Mat23T<S>::Zero();  // wrt T
  Mat23T<S> d_rotation = Mat23T<S>::Zero();     // wrt right tangent of q
  Mat23T<S> d_iop = Mat23T<S>::Zero();          // columns: x_p, y_p, c
};
using ProjectionJacobian = ProjectionJacobianT<double>;

template <typename S>
ProjectionJacobianT<S> project_jacobian(
    const Vec3T<S>& point, const PoseT<S>& pose, const IntrinsicsT<S>& iop,
    const Vec2T<S>& correction = Vec2T<S>::Zero()) {
  const Vec3T<S> v = camera_frame(point, pose);
  const S inv_w = S(1) / -v.z();
  const S mu = iop.c * inv_w;

  ProjectionJacobianT<S> out;
  out.image = Vec2T<S>(iop.x_p + correction.x() + mu * v.x(),
                       iop.y_p + correction.y() + mu * v.y());

  Mat23T<S> d_v;  // partials of (x, y) wrt camera-frame coordinates
  d_v << mu, S(0), mu * v.x() * inv_w,
         S(0), mu, mu * v.y() * inv_w;

  const Mat3T<S> r = pose.rotation.toRotationMatrix();
  const Vec3T<S> u = point - pose.translation;
  out.d_point = d_v * r;
  out.d_translation = -out.d_point;
  out.d_rotation = -d_v * r * skew<S>(u);
  out.d_iop << S(1), S(0), v.x() * inv_w,
               S(0), S(1), v.y() * inv_w;
  return out;
}

/// Partials of the composed pose base.then(rel) with respect to the tangents
/// of both factors.  The composed pose perturbations live in its own right
/// tangent / translation, so projection Jacobians chain through these.
template <typename S>
struct PoseCompositionJacobianT {
  PoseT<S> composed;
  // translation of composed wrt (T_base, tangent_base, T_rel treated in the
  // base camera frame, tangent_rel):
  Mat3T<S> dt_dbase_t;      // = I
  Mat3T<S> dt_dbase_r;      // = skew(R_base^T t_rel)
  Mat3T<S> dt_drel_t;       // = R_base^T
  // rotation tangent of composed wrt tangents of the factors:
  Mat3T<S> dr_dbase_r;      // = I
  Mat3T<S> dr_drel_r;       // = R_base^T
};
using PoseCompositionJacobian = PoseCompositionJacobianT<double>;

template <typename S>
PoseCompositionJacobianT<S> compose_jacobian(const PoseT<S>& base,
                                             const PoseT<S>& rel) {
  PoseCompositionJacobianT<S> out;
  out.composed = base.then(rel);
  const Mat3T<S> rbt = base.rotation.conjugate().toRotationMatrix();
  out.dt_dbase_t = Mat3T<S>::Identity();
  out.dt_dbase_r = skew<S>(Vec3T<S>(rbt * rel.translation));
  out.dt_drel_t = rbt;
  out.dr_dbase_r = Mat3T<S>::Identity();
  out.dr_drel_r = rbt;
  return out;
}

/// Back-projected ray of an image observation: origin at the perspective
/// centre, unit direction in object space.
template <typename S>
struct RayT {
  Vec3T<S> origin;
  Vec3T<S> direction;  // unit
};
using Ray = RayT<double>;

template <typename S>
RayT<S> backproject_ray(const Vec2T<S>& obs, const PoseT<S>& pose,
                        const IntrinsicsT<S>& iop,
                        const Vec2T<S>& correction = Vec2T<S>::Zero()) {
  Vec3T<S> p_img(obs.x() - iop.x_p - correction.x(),
                 obs.y() - iop.y_p - correction.y(), -iop.c);
  RayT<S> ray;
  ray.origin = pose.translation;
  ray.direction = (pose.rotation.conjugate() * p_img).normalized();
  return ray;
}

/// Midpoint of the common perpendicular between two rays (closed-form 2x2
/// solve); equals the intersection for concurrent rays.
template <typename S>
Vec3T<S> intersect_two_rays(const RayT<S>& r1, const RayT<S>& r2) {
  if (r1.direction.cross(r2.direction).norm() < S(kMinRayAngle))
    throw DegenerateRays("rays nearly parallel");

  // Minimize |o1 + t d1 - o2 - s d2|^2 over (t, s).
  const Vec3T<S> w = r2.origin - r1.origin;
  const S b = r1.direction.dot(r2.direction);
  const S det = S(1) - b * b;  // |d1|=|d2|=1
  const S e1 = r1.direction.dot(w);
  const S e2 = r2.direction.dot(w);
  const S t = (e1 - b * e2) / det;
  const S s = (b * e1 - e2) / det;
  return S(0.5) * ((r1.origin + t * r1.direction) +
                   (r2.origin + s * r2.direction));
}

template <typename S>
Vec3T<S> intersect_two_rays(const Vec2T<S>& obs1, const PoseT<S>& pose1,
                            const IntrinsicsT<S>& iop1, const Vec2T<S>& obs2,
                            const PoseT<S>& pose2, const IntrinsicsT<S>& iop2,
                            const Vec2T<S>& correction1 = Vec2T<S>::Zero(),
                            const Vec2T<S>& correction2 = Vec2T<S>::Zero()) {
  return intersect_two_rays(backproject_ray(obs1, pose1, iop1, correction1),
                            backproject_ray(obs2, pose2, iop2, correction2));
}

/// 6-DOF rigid alignment result; `transform` maps source points onto target:
/// y ~= transform.apply(x).
template <typename S>
struct AlignmentT {
  PoseT<S> transform;
  S rmse = S(0);
};
using Alignment = AlignmentT<double>;

/// Orthogonal Procrustes without scale.
template <typename S>
AlignmentT<S> rigid_align(const std::vector<Vec3T<S>>& source,
                          const std::vector<Vec3T<S>>& target) {
  if (source.size() != target.size())
    throw DegenerateConfiguration("rigid_align: size mismatch");
  const auto n = source.size();
  if (n < 3) throw DegenerateConfiguration("rigid_align: need >= 3 points");

  Vec3T<S> cs = Vec3T<S>::Zero(), ct = Vec3T<S>::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    cs += source[i];
    ct += target[i];
  }
  cs /= S(n);
  ct /= S(n);

  Mat3T<S> h = Mat3T<S>::Zero();
  S src_spread = S(0);
  for (std::size_t i = 0; i < n; ++i) {
    h += (source[i] - cs) * (target[i] - ct).transpose();
    src_spread += (source[i] - cs).squaredNorm();
  }

  Eigen::JacobiSVD<Mat3T<S>> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // Collinear sets have (at most) one significant singular value.
  if (sv(1) <= S(1e-12) * std::max(sv(0), S(1e-300)) || src_spread <= S(0))
    throw DegenerateConfiguration("rigid_align: collinear or coincident points");

  Mat3T<S> d = Mat3T<S>::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < S(0)
                ? S(-1)
                : S(1);
  const Mat3T<S> r = svd.matrixV() * d * svd.matrixU().transpose();

  AlignmentT<S> out;
  out.transform.rotation = canonicalized(QuatT<S>(r).normalized());
  out.transform.translation = cs - r.transpose() * ct;

  S ss = S(0);
  for (std::size_t i = 0; i < n; ++i)
    ss += (out.transform.apply(source[i]) - target[i]).squaredNorm();
  out.rmse = std::sqrt(ss / S(n));
  return out;
}

}  // namespace fluorocal
