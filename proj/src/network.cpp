#include "fluorocal/network.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "fluorocal/errors.hpp"

namespace fluorocal {

std::string to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::none: return "none";
    case Scheme::knn: return "knn";
    case Scheme::knn_iop: return "knn_iop";
    case Scheme::knn_smoothing: return "knn_smoothing";
    case Scheme::knn_iop_smoothing: return "knn_iop_smoothing";
  }
  throw Error("unreachable scheme value");
}

Scheme scheme_from_string(const std::string& name) {
  for (Scheme s : {Scheme::none, Scheme::knn, Scheme::knn_iop,
                   Scheme::knn_smoothing, Scheme::knn_iop_smoothing}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown scheme '" + name +
                    "' (expected none|knn|knn_iop|knn_smoothing|knn_iop_smoothing)");
}

Pose Network::pose_of(int system_id, int exposure_id) const {
  if (rop && system_id != reference_system) {
    auto it = poses.find({reference_system, exposure_id});
    if (it == poses.end())
      throw Error("no reference pose for exposure " + std::to_string(exposure_id));
    return it->second.then(*rop);
  }
  auto it = poses.find({system_id, exposure_id});
  if (it == poses.end())
    throw Error("no pose for system " + std::to_string(system_id) +
                ", exposure " + std::to_string(exposure_id));
  return it->second;
}

std::vector<int> Network::system_ids() const {
  std::vector<int> ids;
  for (const auto& [id, iop] : intrinsics) ids.push_back(id);
  return ids;
}

std::vector<int> Network::exposure_ids() const {
  std::set<int> ids;
  for (const auto& obs : observations) ids.insert(obs.exposure_id);
  return {ids.begin(), ids.end()};
}

static void sort_observations(std::vector<Observation>& observations) {
  std::sort(observations.begin(), observations.end(),
            [](const Observation& a, const Observation& b) {
              return std::tie(a.system_id, a.exposure_id, a.target_id) <
                     std::tie(b.system_id, b.exposure_id, b.target_id);
            });
}

std::map<int, Vec3> triangulate_initial_points(
    const std::vector<Observation>& observations,
    const std::map<int, Intrinsics>& intrinsics,
    const std::map<PoseKey, Pose>& poses) {
  std::map<int, std::vector<const Observation*>> by_target;
  for (const auto& obs : observations) by_target[obs.target_id].push_back(&obs);

  std::map<int, Vec3> points;
  for (const auto& [target, obs_list] : by_target) {
    std::vector<Ray> rays;
    rays.reserve(obs_list.size());
    for (const Observation* obs : obs_list) {
      rays.push_back(backproject_ray(obs->image,
                                     poses.at({obs->system_id, obs->exposure_id}),
                                     intrinsics.at(obs->system_id),
                                     obs->correction));
    }
    Vec3 sum = Vec3::Zero();
    int n = 0;
    for (size_t j = 1; j < rays.size(); ++j) {
      try {
        sum += intersect_two_rays(rays[0], rays[j]);
        ++n;
      } catch (const DegenerateRays&) {
        // skip near-parallel pairings; other exposures usually provide angle
      }
    }
    if (n == 0)
      throw InsufficientObservations("target " + std::to_string(target) +
                                     ": no ray pair with usable intersection angle");
    points[target] = sum / n;
  }
  return points;
}

Network build_network(std::vector<Observation> observations,
                      const InitialValues& initial, Scheme scheme) {
  if (observations.empty())
    throw InsufficientObservations("no observations");
  sort_observations(observations);

  for (size_t i = 1; i < observations.size(); ++i) {
    const auto& a = observations[i - 1];
    const auto& b = observations[i];
    if (a.system_id == b.system_id && a.exposure_id == b.exposure_id &&
        a.target_id == b.target_id)
      throw DuplicateKey("duplicate observation (system " +
                         std::to_string(a.system_id) + ", exposure " +
                         std::to_string(a.exposure_id) + ", target " +
                         std::to_string(a.target_id) + ")");
  }

  std::map<PoseKey, int> per_exposure;
  std::map<int, std::set<int>> exposures_of_target;
  for (const auto& obs : observations) {
    if (!(obs.sigma > 0.0))
      throw InvalidSpec("observation sigma must be positive");
    if (!initial.intrinsics.count(obs.system_id))
      throw InsufficientObservations("no initial IOP for system " +
                                     std::to_string(obs.system_id));
    if (!initial.poses.count({obs.system_id, obs.exposure_id}))
      throw InsufficientObservations("no initial pose for system " +
                                     std::to_string(obs.system_id) + ", exposure " +
                                     std::to_string(obs.exposure_id));
    ++per_exposure[{obs.system_id, obs.exposure_id}];
    exposures_of_target[obs.target_id].insert(obs.exposure_id);
  }
  for (const auto& [key, count] : per_exposure) {
    if (count < 6)
      throw InsufficientObservations(
          "system " + std::to_string(key.first) + ", exposure " +
          std::to_string(key.second) + " has only " + std::to_string(count) +
          " observations (minimum 6)");
  }
  for (const auto& [target, exposures] : exposures_of_target) {
    if (exposures.size() < 2)
      throw InsufficientObservations("target " + std::to_string(target) +
                                     " observed in fewer than 2 exposures");
  }

  Network net;
  net.observations = std::move(observations);
  net.scheme = scheme;
  net.rop = initial.rop;
  for (const auto& [target, exposures] : exposures_of_target) {
    const auto it = initial.points.find(target);
    if (it != initial.points.end()) net.points[target] = it->second;
  }
  for (const auto& [key, count] : per_exposure) {
    net.intrinsics[key.first] = initial.intrinsics.at(key.first);
    net.poses[key] = initial.poses.at(key);
  }
  net.reference_system = net.intrinsics.begin()->first;

  if (net.points.empty())
    net.points =
        triangulate_initial_points(net.observations, net.intrinsics, net.poses);
  for (const auto& [target, exposures] : exposures_of_target) {
    if (!net.points.count(target))
      throw InsufficientObservations("no initial coordinates for target " +
                                     std::to_string(target));
  }

  if (net.rop) return attach_rop(net, *net.rop);
  return net;
}

Network attach_rop(const Network& network, const Pose& initial_rop) {
  std::vector<int> systems = network.system_ids();
  if (systems.size() != 2)
    throw MissingPair("relative orientation requires exactly 2 systems, have " +
                      std::to_string(systems.size()));
  const int ref = systems[0];
  const int other = systems[1];

  std::map<int, std::set<int>> systems_of_exposure;
  for (const auto& obs : network.observations)
    systems_of_exposure[obs.exposure_id].insert(obs.system_id);
  for (const auto& [exposure, present] : systems_of_exposure) {
    if (present.size() != 2)
      throw MissingPair("exposure " + std::to_string(exposure) +
                        " lacks system " +
                        std::to_string(present.count(ref) ? other : ref));
  }

  Network out = network;
  out.rop = initial_rop;
  out.reference_system = ref;
  for (auto it = out.poses.begin(); it != out.poses.end();)
    it = (it->first.first == other) ? out.poses.erase(it) : std::next(it);
  return out;
}

long ParameterLayout::free_parameters(const Network& network) const {
  long n = 6L * static_cast<long>(pose_keys.size());
  n += 3L * static_cast<long>(iop_block.size());
  if (rop_block >= 0) n += 6;
  n += 3L * static_cast<long>(point_ids.size());
  (void)network;
  return n;
}

ParameterLayout make_layout(const Network& network) {
  ParameterLayout layout;
  for (const auto& [key, pose] : network.poses) {
    layout.pose_block[key] = layout.n_camera_blocks++;
    layout.pose_keys.push_back(key);
  }
  if (network.estimate_iop())
    for (const auto& [system, iop] : network.intrinsics)
      layout.iop_block[system] = layout.n_camera_blocks++;
  if (network.rop) layout.rop_block = layout.n_camera_blocks++;
  int slot = 0;
  for (const auto& [target, point] : network.points) {
    layout.point_ids.push_back(target);
    layout.point_slot[target] = slot++;
  }

  std::set<int> camera_blocks;
  for (const auto& [key, block] : layout.pose_block) camera_blocks.insert(block);
  for (const auto& [system, block] : layout.iop_block) camera_blocks.insert(block);
  if (layout.rop_block >= 0) camera_blocks.insert(layout.rop_block);
  if (static_cast<int>(camera_blocks.size()) != layout.n_camera_blocks ||
      (layout.n_camera_blocks > 0 &&
       (*camera_blocks.begin() != 0 ||
        *camera_blocks.rbegin() != layout.n_camera_blocks - 1)))
    throw Error("parameter bookkeeping mismatch: camera blocks not dense");
  if (layout.camera_dim() + layout.point_dim() !=
      6 * layout.n_camera_blocks + 3 * static_cast<int>(layout.point_ids.size()))
    throw Error("parameter bookkeeping mismatch: vector length");
  return layout;
}

long redundancy(const Network& network) {
  ParameterLayout layout = make_layout(network);
  return 2L * static_cast<long>(network.observations.size()) -
         layout.free_parameters(network) + 7;
}

}  // namespace fluorocal
