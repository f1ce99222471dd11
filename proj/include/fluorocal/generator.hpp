#pragma once

// Synthetic fluoroscopy: a bead-cube phantom on a turntable, pinhole
// projection with a smooth synthetic distortion applied at the measured
// position, centroid noise and gross outliers.  Byte-deterministic for a
// fixed spec and seed.

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "fluorocal/geometry.hpp"
#include "fluorocal/network.hpp"

namespace fluorocal {

struct PhantomSpec {
  int bead_count = 503;
  double cube_edge_mm = 300.0;
  int faces = 4;  // lateral faces carrying beads
  double face_margin_mm = 10.0;
  double cell_jitter = 0.3;  // of one grid cell
  double min_spacing_mm = 8.0;
  double bead_diameter_mm = 3.5;  // metadata only
};

struct LocalBump {
  Vec2 center = Vec2::Zero();     // px
  Vec2 amplitude = Vec2::Zero();  // px
  double width = 200.0;           // Gaussian sigma, px
};

/// Smooth synthetic distortion of one system: radial polynomial plus swirl
/// about the centre plus local Gaussian bumps, all evaluated at the measured
/// image position.
struct SystemDistortion {
  Vec2 center = Vec2::Zero();  // px
  double scale = 1000.0;       // px; normalizes the radius below
  double radial_k1 = 0.0;      // px of radial shift at normalized radius 1
  double radial_k2 = 0.0;
  double swirl = 0.0;          // rad of in-plane rotation at normalized radius 1
  std::vector<LocalBump> bumps;
};

Vec2 true_field_at(const SystemDistortion& d, const Vec2& query);

struct DistortionSpec {
  std::map<int, SystemDistortion> systems;
  double max_displacement_px = 3.0;  // budget, checked on a dense grid
};

struct AcquisitionSpec {
  int systems = 1;     // 1 or 2; two systems share every turntable state
  int exposures = 150; // turntable states (image pairs when biplanar)
  int height_levels = 5;
  double camera_distance_mm = 1200.0;
  double second_system_azimuth_deg = 70.0;
  double height_span_mm = 160.0;
  double pose_jitter_mm = 3.0;
  double pose_jitter_deg = 0.8;
  double image_width_px = 2016.0;
  double image_height_px = 2016.0;
  double nominal_principal_distance_px = 3600.0;
  std::map<int, Intrinsics> iop;  // true IOP; defaults derived when empty
  double noise_sigma_px = 0.06;
  double outlier_fraction = 0.0;
  double outlier_min_px = 10.0;
  double outlier_max_px = 50.0;
  std::uint64_t seed = 0;
};

struct GroundTruth {
  std::map<int, Intrinsics> intrinsics;
  std::map<PoseKey, Pose> poses;  // every (system, exposure)
  std::optional<Pose> rop;        // when two systems
  std::map<int, Vec3> beads;
  DistortionSpec distortion;
};

struct Dataset {
  std::vector<Observation> observations;
  std::vector<bool> outlier_truth;  // parallel to observations
  GroundTruth truth;
};

/// Throws InvalidSpec for inconsistent parameters, a distortion exceeding its
/// budget, bead spacing violations, or a geometry that leaves an exposure
/// with fewer than 6 beads or a bead seen less than twice per system.
Dataset generate(const PhantomSpec& phantom, const DistortionSpec& distortion,
                 const AcquisitionSpec& acquisition);

/// True IOP values used when AcquisitionSpec::iop is empty: nominal principal
/// distance and centred principal point, plus small per-system offsets.
std::map<int, Intrinsics> default_true_iop(const AcquisitionSpec& acquisition);

/// Nominal IOP (image centre, nominal principal distance): the frozen values
/// of schemes that do not estimate IOP.
Intrinsics nominal_iop(const AcquisitionSpec& acquisition);

struct InitNoise {
  double pose_mm = 2.0;
  double pose_deg = 0.3;
  double point_mm = 1.0;
  double rop_mm = 1.0;
  double rop_deg = 0.2;
  bool triangulate_points = false;  // leave points to two-ray initialization
  bool nominal_iop = true;          // otherwise start from the true IOP
  std::uint64_t seed = 1;
};

/// Perturbed starting values for a calibration run on the dataset.
InitialValues make_initial_values(const Dataset& dataset,
                                  const AcquisitionSpec& acquisition,
                                  const InitNoise& noise);

}  // namespace fluorocal
