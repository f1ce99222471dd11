#pragma once

// The assembled estimation problem: parameter blocks (IOP, EOP, object
// points, optional ROP), the observation graph, and the calibration scheme
// flags.  A built Network is the unit of work handed to the solver and the
// outer calibration loop.

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fluorocal/geometry.hpp"

namespace fluorocal {

/// One 2D bead-centroid measurement.
struct Observation {
  int system_id = 1;
  int exposure_id = 0;
  int target_id = 0;
  Vec2 image = Vec2::Zero();       // measured (x, y), px
  double sigma = 0.06;             // px
  Vec2 correction = Vec2::Zero();  // accumulated additional parameters, px
};

enum class Scheme {
  none,  // bundle adjustment only, no distortion modelling (the baseline)
  knn,
  knn_iop,
  knn_smoothing,
  knn_iop_smoothing,
};

std::string to_string(Scheme scheme);
Scheme scheme_from_string(const std::string& name);

inline bool scheme_estimates_iop(Scheme s) {
  return s == Scheme::knn_iop || s == Scheme::knn_iop_smoothing;
}
inline bool scheme_smooths(Scheme s) {
  return s == Scheme::knn_smoothing || s == Scheme::knn_iop_smoothing;
}
inline bool scheme_learns_field(Scheme s) { return s != Scheme::none; }

using PoseKey = std::pair<int, int>;  // (system_id, exposure_id)

/// Initial parameter values accepted by build_network.  Poses must cover
/// every (system, exposure) present in the observations; points may be
/// omitted and are then initialized by two-ray intersection.
struct InitialValues {
  std::map<int, Intrinsics> intrinsics;
  std::map<PoseKey, Pose> poses;
  std::map<int, Vec3> points;
  std::optional<Pose> rop;
};

struct Network {
  std::vector<Observation> observations;  // sorted by (system, exposure, target)
  std::map<int, Intrinsics> intrinsics;   // per system
  std::map<PoseKey, Pose> poses;          // free poses only (see rop)
  std::map<int, Vec3> points;             // target_id -> object coordinates
  std::optional<Pose> rop;                // reference system -> other system
  int reference_system = 1;               // pose-bearing system under ROP
  Scheme scheme = Scheme::knn_iop_smoothing;

  bool estimate_iop() const { return scheme_estimates_iop(scheme); }
  bool smoothing() const { return scheme_smooths(scheme); }

  /// Pose of any (system, exposure); derives the constrained system's pose
  /// through the ROP.
  Pose pose_of(int system_id, int exposure_id) const;

  std::vector<int> system_ids() const;
  std::vector<int> exposure_ids() const;  // unique, sorted
};

/// Validates and assembles a network.  Throws InsufficientObservations when
/// the graph cannot support the adjustment (empty input, a target seen in
/// fewer than two exposures, or an exposure with fewer than 6 points).
Network build_network(std::vector<Observation> observations,
                      const InitialValues& initial, Scheme scheme);

/// Rebuilds the network with the biplanar relative-orientation constraint:
/// the non-reference system's poses become derived quantities of the
/// reference poses and a single shared ROP block.  Throws MissingPair when
/// an exposure lacks one system's image.
Network attach_rop(const Network& network, const Pose& initial_rop);

/// Observation equations minus free parameters plus inner-constraint rows.
long redundancy(const Network& network);

/// Dense parameter layout used by the solver.  Every camera-side block is
/// padded to 6 slots (IOP blocks use the first 3); padded slots get a unit
/// diagonal and zero coupling, so they never influence the solution.
struct ParameterLayout {
  std::vector<PoseKey> pose_keys;        // block order of free poses
  std::map<PoseKey, int> pose_block;     // key -> camera block index
  std::map<int, int> iop_block;          // system -> camera block index
  int rop_block = -1;
  int n_camera_blocks = 0;
  std::vector<int> point_ids;            // slot order of object points
  std::map<int, int> point_slot;

  int camera_dim() const { return 6 * n_camera_blocks; }
  int point_dim() const { return 3 * static_cast<int>(point_ids.size()); }
  /// True (unpadded) number of free scalar parameters.
  long free_parameters(const Network& network) const;
};

ParameterLayout make_layout(const Network& network);

/// Mean of two-ray intersections from the current poses, for every target
/// missing an initial value.
std::map<int, Vec3> triangulate_initial_points(
    const std::vector<Observation>& observations,
    const std::map<int, Intrinsics>& intrinsics,
    const std::map<PoseKey, Pose>& poses);

}  // namespace fluorocal
