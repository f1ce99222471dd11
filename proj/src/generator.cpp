#include "fluorocal/generator.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "fluorocal/errors.hpp"

namespace fluorocal {
namespace {

constexpr std::uint64_t kStreamTurntable = 0xE1;
constexpr std::uint64_t kStreamBeads = 0xE2;
constexpr std::uint64_t kStreamImage = 0xE3;
constexpr std::uint64_t kStreamInit = 0xE4;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream,
                       std::uint64_t index) {
  std::uint64_t x = seed ^ (stream * 0x9E3779B97F4A7C15ull) ^
                    (index * 0xC2B2AE3D27D4EB4Full);
  x ^= x >> 33;
  x *= 0xFF51AFD7ED558CCDull;
  x ^= x >> 33;
  x *= 0xC4CEB9FE1A85EC53ull;
  x ^= x >> 33;
  return x;
}

Mat3 rot_z(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
}

/// Lab-frame orientation of a camera on the turntable equator at the given
/// azimuth, looking at the origin with image y along lab +Z.
Mat3 camera_orientation(double azimuth) {
  const Vec3 z_cam(std::cos(azimuth), std::sin(azimuth), 0.0);
  const Vec3 x_cam = Vec3::UnitZ().cross(z_cam).normalized();
  const Vec3 y_cam = z_cam.cross(x_cam);
  Mat3 r;
  r.row(0) = x_cam;
  r.row(1) = y_cam;
  r.row(2) = z_cam;
  return r;
}

std::map<int, Vec3> make_beads(const PhantomSpec& spec, std::uint64_t seed) {
  if (spec.bead_count < 8) throw InvalidSpec("bead_count must be at least 8");
  if (spec.faces < 1 || spec.faces > 4)
    throw InvalidSpec("faces must be between 1 and 4");
  if (!(spec.cube_edge_mm > 0.0)) throw InvalidSpec("cube_edge_mm must be positive");
  if (spec.cell_jitter < 0.0 || spec.cell_jitter > 0.45)
    throw InvalidSpec("cell_jitter must lie in [0, 0.45]");

  std::mt19937_64 rng(mix_seed(seed, kStreamBeads, 0));
  std::uniform_real_distribution<double> jitter(-spec.cell_jitter,
                                                spec.cell_jitter);

  const double half = spec.cube_edge_mm / 2.0;
  const double span = spec.cube_edge_mm - 2.0 * spec.face_margin_mm;
  if (!(span > 0.0)) throw InvalidSpec("face_margin_mm leaves no bead area");

  std::map<int, Vec3> beads;
  int id = 0;
  for (int face = 0; face < spec.faces; ++face) {
    const int remaining = spec.bead_count - id;
    const int n_face = remaining / (spec.faces - face) +
                       (remaining % (spec.faces - face) ? 1 : 0);
    const int g = static_cast<int>(std::ceil(std::sqrt(double(n_face))));
    const double cell = span / g;
    int placed = 0;
    for (int row = 0; row < g && placed < n_face; ++row) {
      for (int col = 0; col < g && placed < n_face; ++col, ++placed) {
        const double a =
            -half + spec.face_margin_mm + (col + 0.5 + jitter(rng)) * cell;
        const double b =
            -half + spec.face_margin_mm + (row + 0.5 + jitter(rng)) * cell;
        Vec3 p;
        switch (face) {
          case 0: p = Vec3(half, a, b); break;
          case 1: p = Vec3(-half, a, b); break;
          case 2: p = Vec3(a, half, b); break;
          default: p = Vec3(a, -half, b); break;
        }
        beads[id++] = p;
      }
    }
  }

  for (auto it = beads.begin(); it != beads.end(); ++it)
    for (auto jt = std::next(it); jt != beads.end(); ++jt)
      if ((it->second - jt->second).norm() < spec.min_spacing_mm)
        throw InvalidSpec("bead spacing below min_spacing_mm; reduce "
                          "bead_count or cell_jitter");
  return beads;
}

}  // namespace

Vec2 true_field_at(const SystemDistortion& d, const Vec2& query) {
  const Vec2 rv = query - d.center;
  const double rho = rv.norm() / d.scale;
  Vec2 out = Vec2::Zero();
  if (rho > 0.0) {
    const double radial = d.radial_k1 * rho * rho +
                          d.radial_k2 * rho * rho * rho * rho;
    out += radial * rv.normalized();
  }
  if (d.swirl != 0.0) {
    const double theta = d.swirl * rho;
    Eigen::Rotation2D<double> rot(theta);
    out += rot.toRotationMatrix() * rv - rv;
  }
  for (const auto& bump : d.bumps) {
    const double w2 = 2.0 * bump.width * bump.width;
    out += bump.amplitude *
           std::exp(-(query - bump.center).squaredNorm() / w2);
  }
  return out;
}

std::map<int, Intrinsics> default_true_iop(const AcquisitionSpec& acq) {
  std::map<int, Intrinsics> iop;
  for (int k = 1; k <= acq.systems; ++k) {
    Intrinsics i;
    i.x_p = acq.image_width_px / 2.0 + (k == 1 ? 3.0 : -4.0);
    i.y_p = acq.image_height_px / 2.0 + (k == 1 ? -2.0 : 2.0);
    i.c = acq.nominal_principal_distance_px * (1.0 + 0.002 * k);
    iop[k] = i;
  }
  return iop;
}

Intrinsics nominal_iop(const AcquisitionSpec& acq) {
  Intrinsics i;
  i.x_p = acq.image_width_px / 2.0;
  i.y_p = acq.image_height_px / 2.0;
  i.c = acq.nominal_principal_distance_px;
  return i;
}

Dataset generate(const PhantomSpec& phantom, const DistortionSpec& distortion,
                 const AcquisitionSpec& acq) {
  if (acq.systems < 1 || acq.systems > 2)
    throw InvalidSpec("systems must be 1 or 2");
  if (acq.exposures < 2) throw InvalidSpec("need at least 2 exposures");
  if (acq.height_levels < 1 || acq.height_levels > acq.exposures)
    throw InvalidSpec("height_levels must lie in [1, exposures]");
  if (!(acq.camera_distance_mm > phantom.cube_edge_mm))
    throw InvalidSpec("camera_distance_mm must clear the phantom");
  if (acq.noise_sigma_px < 0.0) throw InvalidSpec("noise_sigma_px negative");
  if (acq.outlier_fraction < 0.0 || acq.outlier_fraction >= 1.0)
    throw InvalidSpec("outlier_fraction must lie in [0, 1)");
  if (!(acq.nominal_principal_distance_px > 0.0))
    throw InvalidSpec("nominal_principal_distance_px must be positive");

  Dataset data;
  data.truth.beads = make_beads(phantom, acq.seed);
  data.truth.intrinsics = acq.iop.empty() ? default_true_iop(acq) : acq.iop;
  for (int k = 1; k <= acq.systems; ++k)
    if (!data.truth.intrinsics.count(k))
      throw InvalidSpec("iop missing system " + std::to_string(k));
  data.truth.distortion = distortion;
  for (const auto& [system, d] : distortion.systems)
    if (system < 1 || system > acq.systems)
      throw InvalidSpec("distortion given for unknown system " +
                        std::to_string(system));

  // Distortion budget over the full image of each system.
  for (int k = 1; k <= acq.systems; ++k) {
    const auto it = distortion.systems.find(k);
    if (it == distortion.systems.end()) continue;
    for (int iy = 0; iy <= 40; ++iy)
      for (int ix = 0; ix <= 40; ++ix) {
        const Vec2 q(acq.image_width_px * ix / 40.0,
                     acq.image_height_px * iy / 40.0);
        if (true_field_at(it->second, q).norm() >
            distortion.max_displacement_px + 1e-9)
          throw InvalidSpec("distortion exceeds max_displacement_px");
      }
  }

  // Lab-frame cameras, fixed; the phantom turns underneath them.
  std::map<int, Mat3> cam_r;
  std::map<int, Vec3> cam_c;
  for (int k = 1; k <= acq.systems; ++k) {
    const double azimuth =
        (k == 1) ? 0.0 : acq.second_system_azimuth_deg * M_PI / 180.0;
    cam_r[k] = camera_orientation(azimuth);
    cam_c[k] = acq.camera_distance_mm *
               Vec3(std::cos(azimuth), std::sin(azimuth), 0.0);
  }

  const int per_level = (acq.exposures + acq.height_levels - 1) / acq.height_levels;
  std::map<int, std::map<int, int>> seen;  // system -> bead -> exposures

  for (int e = 0; e < acq.exposures; ++e) {
    // Shared turntable state: rotation about the lab vertical, height shift,
    // plus a small rigid jitter.
    std::mt19937_64 table_rng(mix_seed(acq.seed, kStreamTurntable, e));
    std::normal_distribution<double> gauss(0.0, 1.0);

    const int level = e / per_level;
    const double angle = 2.0 * M_PI * (e % per_level) / per_level +
                         2.0 * M_PI * level / (per_level * acq.height_levels);
    const double z_h =
        acq.height_levels > 1
            ? acq.height_span_mm * (double(level) / (acq.height_levels - 1) - 0.5)
            : 0.0;

    Vec3 jitter_t(gauss(table_rng), gauss(table_rng), gauss(table_rng));
    jitter_t *= acq.pose_jitter_mm;
    Vec3 jitter_r(gauss(table_rng), gauss(table_rng), gauss(table_rng));
    jitter_r *= acq.pose_jitter_deg * M_PI / 180.0;

    const Mat3 q_table =
        rot_z(angle) * exp_quat(jitter_r).toRotationMatrix();
    const Vec3 t_table = Vec3(0.0, 0.0, z_h) + jitter_t;

    for (int k = 1; k <= acq.systems; ++k) {
      Pose pose;
      pose.rotation =
          canonicalized(Quat(Mat3(cam_r.at(k) * q_table)).normalized());
      pose.translation = q_table.transpose() * (cam_c.at(k) - t_table);
      data.truth.poses[{k, e}] = pose;

      const auto dist_it = distortion.systems.find(k);
      std::mt19937_64 obs_rng(
          mix_seed(acq.seed, kStreamImage, std::uint64_t(e) * 8 + k));
      std::uniform_real_distribution<double> unit(0.0, 1.0);

      for (const auto& [bead, point] : data.truth.beads) {
        Vec2 ideal;
        try {
          ideal = project(point, pose, data.truth.intrinsics.at(k));
        } catch (const PointBehindCamera&) {
          continue;
        }
        // The distortion acts at the measured position:
        // measured = ideal + D(measured), solved by fixed point.
        Vec2 clean = ideal;
        if (dist_it != distortion.systems.end()) {
          for (int pass = 0; pass < 30; ++pass) {
            const Vec2 next = ideal + true_field_at(dist_it->second, clean);
            if ((next - clean).norm() < 1e-12) {
              clean = next;
              break;
            }
            clean = next;
          }
        }
        if (clean.x() < 0.0 || clean.x() > acq.image_width_px ||
            clean.y() < 0.0 || clean.y() > acq.image_height_px)
          continue;

        Vec2 measured = clean + acq.noise_sigma_px *
                                    Vec2(gauss(obs_rng), gauss(obs_rng));
        bool gross = false;
        if (acq.outlier_fraction > 0.0 && unit(obs_rng) < acq.outlier_fraction) {
          gross = true;
          const double psi = 2.0 * M_PI * unit(obs_rng);
          const double mag = acq.outlier_min_px +
                             (acq.outlier_max_px - acq.outlier_min_px) *
                                 unit(obs_rng);
          measured += mag * Vec2(std::cos(psi), std::sin(psi));
        }

        Observation obs;
        obs.system_id = k;
        obs.exposure_id = e;
        obs.target_id = bead;
        obs.image = measured;
        obs.sigma = std::max(acq.noise_sigma_px, 1e-4);
        data.observations.push_back(obs);
        data.outlier_truth.push_back(gross);
        ++seen[k][bead];
      }
    }
  }

  if (acq.systems == 2)
    data.truth.rop = relative_pose(data.truth.poses.at({1, 0}),
                                   data.truth.poses.at({2, 0}));

  std::map<PoseKey, int> per_exposure;
  for (const auto& o : data.observations)
    ++per_exposure[{o.system_id, o.exposure_id}];
  for (int e = 0; e < acq.exposures; ++e)
    for (int k = 1; k <= acq.systems; ++k) {
      const auto it = per_exposure.find({k, e});
      if (it == per_exposure.end() || it->second < 6)
        throw InvalidSpec("exposure " + std::to_string(e) + " of system " +
                          std::to_string(k) + " sees fewer than 6 beads");
    }
  for (int k = 1; k <= acq.systems; ++k)
    for (const auto& [bead, point] : data.truth.beads)
      if (seen[k][bead] < 2)
        throw InvalidSpec("bead " + std::to_string(bead) +
                          " visible in fewer than 2 exposures of system " +
                          std::to_string(k));
  return data;
}

InitialValues make_initial_values(const Dataset& dataset,
                                  const AcquisitionSpec& acq,
                                  const InitNoise& noise) {
  std::mt19937_64 rng(mix_seed(noise.seed, kStreamInit, 0));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto nvec3 = [&] { return Vec3(gauss(rng), gauss(rng), gauss(rng)); };
  const double deg = M_PI / 180.0;

  InitialValues init;
  for (const auto& [system, iop] : dataset.truth.intrinsics)
    init.intrinsics[system] = noise.nominal_iop ? nominal_iop(acq) : iop;

  for (const auto& [key, pose] : dataset.truth.poses) {
    Pose p = pose;
    p.translation += noise.pose_mm * nvec3();
    p.rotation = apply_rotation_tangent(p.rotation,
                                        Vec3(noise.pose_deg * deg * nvec3()));
    init.poses[key] = p;
  }
  if (!noise.triangulate_points)
    for (const auto& [bead, point] : dataset.truth.beads)
      init.points[bead] = point + noise.point_mm * nvec3();
  if (dataset.truth.rop) {
    Pose rop = *dataset.truth.rop;
    rop.translation += noise.rop_mm * nvec3();
    rop.rotation = apply_rotation_tangent(rop.rotation,
                                          Vec3(noise.rop_deg * deg * nvec3()));
    init.rop = rop;
  }
  return init;
}

}  // namespace fluorocal
