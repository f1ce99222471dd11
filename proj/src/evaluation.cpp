#include "fluorocal/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

#include "fluorocal/errors.hpp"
#include "fluorocal/format.hpp"

namespace fluorocal {

Split make_split(const std::vector<int>& exposure_ids) {
  std::set<int> unique(exposure_ids.begin(), exposure_ids.end());
  Split split;
  int rank = 0;
  for (int id : unique)
    ((rank++ % 2 == 0) ? split.train_pool : split.test).push_back(id);
  return split;
}

std::vector<int> training_subset(const std::vector<int>& pool, int size) {
  const int n = static_cast<int>(pool.size());
  if (size < 1 || size > n)
    throw InvalidSpec("training_subset: size " + std::to_string(size) +
                      " outside [1, " + std::to_string(n) + "]");
  std::vector<int> subset;
  subset.reserve(size);
  for (int i = 0; i < size; ++i) subset.push_back(pool[(i * n) / size]);
  return subset;
}

namespace {

MappingError pooled_error(const std::vector<Vec3>& deltas) {
  MappingError err;
  err.points = static_cast<int>(deltas.size());
  Vec3 ss = Vec3::Zero();
  for (const Vec3& d : deltas) ss += d.cwiseProduct(d);
  err.per_axis_rmse = (ss / double(deltas.size())).cwiseSqrt();
  err.average = err.per_axis_rmse.mean();
  return err;
}

}  // namespace

MappingError mapping_error(const std::map<int, Vec3>& estimated,
                           const std::map<int, Vec3>& reference) {
  std::vector<Vec3> src, dst;
  for (const auto& [id, p] : estimated) {
    const auto it = reference.find(id);
    if (it == reference.end()) continue;
    src.push_back(p);
    dst.push_back(it->second);
  }
  if (src.size() < 3)
    throw NoCommonTargets("mapping_error: only " + std::to_string(src.size()) +
                          " shared targets");
  const Alignment align = rigid_align(src, dst);
  std::vector<Vec3> deltas;
  deltas.reserve(src.size());
  for (size_t i = 0; i < src.size(); ++i)
    deltas.push_back(align.transform.apply(src[i]) - dst[i]);
  return pooled_error(deltas);
}

double reprojection_rmse(const ResidualSet& residuals) {
  double ss = 0.0;
  long n = 0;
  for (size_t i = 0; i < residuals.residuals.size(); ++i) {
    if (!residuals.inlier.empty() && !residuals.inlier[i]) continue;
    ss += residuals.residuals[i].squaredNorm();
    ++n;
  }
  if (n == 0) throw AllOutliers("reprojection_rmse: no inliers");
  return std::sqrt(ss / double(2 * n));
}

double improvement_percent(double before, double after) {
  if (!(before > 0.0))
    throw NonPositiveBaseline("improvement needs a positive baseline, got " +
                              format_double(before));
  return 100.0 * (before - after) / before;
}

std::map<int, Vec3> intersect_pair(
    const std::vector<Observation>& pair_obs,
    const std::map<int, Intrinsics>& intrinsics, int reference_system,
    const Pose& rop, const std::map<int, DistortionField>& fields) {
  std::map<int, std::map<int, Vec2>> corrected;  // target -> system -> image
  for (const auto& o : pair_obs) {
    Vec2 corr = Vec2::Zero();
    const auto f = fields.find(o.system_id);
    if (f != fields.end()) corr = f->second.predict(o.image);
    corrected[o.target_id][o.system_id] = o.image - corr;
  }

  const Pose identity = Pose::Identity();
  std::map<int, Vec3> points;
  for (const auto& [target, views] : corrected) {
    if (views.size() != 2) continue;
    const auto ref = views.find(reference_system);
    const auto other = std::find_if(views.begin(), views.end(), [&](auto& kv) {
      return kv.first != reference_system;
    });
    try {
      points[target] = intersect_two_rays(
          backproject_ray(ref->second, identity,
                          intrinsics.at(reference_system)),
          backproject_ray(other->second, rop, intrinsics.at(other->first)));
    } catch (const DegenerateRays&) {
    }
  }
  return points;
}

MappingError intersection_error(const std::vector<Observation>& test_obs,
                                const std::map<int, Intrinsics>& intrinsics,
                                int reference_system, const Pose& rop,
                                const std::map<int, DistortionField>& fields,
                                const std::map<int, Vec3>& reference) {
  std::map<int, std::vector<Observation>> by_exposure;
  for (const auto& o : test_obs) by_exposure[o.exposure_id].push_back(o);

  std::vector<Vec3> deltas;
  for (const auto& [exposure, pair_obs] : by_exposure) {
    std::set<int> systems;
    for (const auto& o : pair_obs) systems.insert(o.system_id);
    if (systems.size() != 2)
      throw MissingPair("exposure " + std::to_string(exposure) +
                        " is not a complete pair");

    const auto points =
        intersect_pair(pair_obs, intrinsics, reference_system, rop, fields);
    std::vector<Vec3> src, dst;
    for (const auto& [id, p] : points) {
      const auto it = reference.find(id);
      if (it == reference.end()) continue;
      src.push_back(p);
      dst.push_back(it->second);
    }
    if (src.size() < 3)
      throw NoCommonTargets("exposure " + std::to_string(exposure) +
                            ": fewer than 3 intersected reference beads");
    const Alignment align = rigid_align(src, dst);
    for (size_t i = 0; i < src.size(); ++i)
      deltas.push_back(align.transform.apply(src[i]) - dst[i]);
  }
  if (deltas.empty()) throw NoCommonTargets("no test pairs to intersect");
  return pooled_error(deltas);
}

Network adjust_test_exposures(std::vector<Observation> test_obs,
                              const std::map<int, Intrinsics>& intrinsics,
                              const std::map<int, DistortionField>& fields,
                              const InitialValues& init,
                              const StudentTModel& model,
                              const SolverSettings& solver) {
  for (auto& o : test_obs) {
    const auto f = fields.find(o.system_id);
    o.correction =
        f != fields.end() ? f->second.predict(o.image) : Vec2::Zero();
  }
  InitialValues frozen = init;
  frozen.intrinsics = intrinsics;
  frozen.rop.reset();
  Network net = build_network(std::move(test_obs), frozen, Scheme::none);
  levenberg_marquardt(net, model, solver);
  return net;
}

void write_report_csv(std::ostream& out,
                      const std::vector<EvaluationRow>& rows) {
  out << "train_size,scheme,rmse_x_mm,rmse_y_mm,rmse_z_mm,rmse_avg_mm,"
         "improvement_pct,points\n";
  for (const auto& r : rows) {
    out << r.train_size << ',' << to_string(r.scheme) << ','
        << format_double(r.mapping.per_axis_rmse.x()) << ','
        << format_double(r.mapping.per_axis_rmse.y()) << ','
        << format_double(r.mapping.per_axis_rmse.z()) << ','
        << format_double(r.mapping.average) << ','
        << (r.scheme == Scheme::none ? std::string()
                                     : format_double(r.improvement))
        << ',' << r.mapping.points << '\n';
  }
}

void write_report_markdown(std::ostream& out,
                           const std::vector<EvaluationRow>& rows) {
  out << "| # of image pairs | Calibration Mode | X_RMSE | Y_RMSE | Z_RMSE | "
         "Average RMSE | % Improvement |\n";
  out << "|---:|---|---:|---:|---:|---:|---:|\n";
  for (const auto& r : rows) {
    out << "| " << r.train_size << " | " << to_string(r.scheme) << " | "
        << format_fixed(r.mapping.per_axis_rmse.x(), 2) << " | "
        << format_fixed(r.mapping.per_axis_rmse.y(), 2) << " | "
        << format_fixed(r.mapping.per_axis_rmse.z(), 2) << " | "
        << format_fixed(r.mapping.average, 2) << " | "
        << (r.scheme == Scheme::none ? std::string("-")
                                     : format_fixed(r.improvement, 1))
        << " |\n";
  }
}

void write_plot_data(std::ostream& out,
                     const std::vector<EvaluationRow>& rows) {
  out << "train_size,scheme,series,value\n";
  for (const auto& r : rows) {
    const char* axes[3] = {"rmse_x_mm", "rmse_y_mm", "rmse_z_mm"};
    for (int a = 0; a < 3; ++a)
      out << r.train_size << ',' << to_string(r.scheme) << ',' << axes[a]
          << ',' << format_double(r.mapping.per_axis_rmse(a)) << '\n';
    out << r.train_size << ',' << to_string(r.scheme) << ",rmse_avg_mm,"
        << format_double(r.mapping.average) << '\n';
    if (r.scheme != Scheme::none)
      out << r.train_size << ',' << to_string(r.scheme) << ",improvement_pct,"
          << format_double(r.improvement) << '\n';
  }
}

}  // namespace fluorocal
