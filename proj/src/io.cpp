#include "fluorocal/io.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "fluorocal/errors.hpp"
#include "fluorocal/format.hpp"
#include "json.hpp"

namespace fluorocal {
namespace {

using nlohmann::json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw MalformedRow(source + ": " + e.what());
  }
}

void check_version(const json& j, const std::string& source) {
  const std::string v = j.value("version", std::string("<missing>"));
  if (v != kFormatVersion)
    throw VersionMismatch(source + ": format version '" + v + "', expected '" +
                          kFormatVersion + "'");
}

json to_json(const Vec2& v) { return json::array({v.x(), v.y()}); }
json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec2 vec2_from(const json& j) { return Vec2(j.at(0), j.at(1)); }
Vec3 vec3_from(const json& j) { return Vec3(j.at(0), j.at(1), j.at(2)); }

json to_json(const Pose& p) {
  return json{{"q", json::array({p.rotation.w(), p.rotation.x(),
                                 p.rotation.y(), p.rotation.z()})},
              {"t", to_json(p.translation)}};
}

Pose pose_from(const json& j) {
  Pose p;
  const auto& q = j.at("q");
  p.rotation = Quat(q.at(0), q.at(1), q.at(2), q.at(3));
  p.translation = vec3_from(j.at("t"));
  return p;
}

json to_json(const Intrinsics& i) {
  return json{{"x_p", i.x_p}, {"y_p", i.y_p}, {"c", i.c}};
}

Intrinsics iop_from(const json& j) {
  Intrinsics i;
  i.x_p = j.at("x_p");
  i.y_p = j.at("y_p");
  i.c = j.at("c");
  return i;
}

json intrinsics_map_to_json(const std::map<int, Intrinsics>& m) {
  json out = json::object();
  for (const auto& [system, iop] : m) out[std::to_string(system)] = to_json(iop);
  return out;
}

std::map<int, Intrinsics> intrinsics_map_from(const json& j) {
  std::map<int, Intrinsics> m;
  for (const auto& [key, value] : j.items()) m[std::stoi(key)] = iop_from(value);
  return m;
}

json poses_to_json(const std::map<PoseKey, Pose>& poses) {
  json out = json::array();
  for (const auto& [key, pose] : poses) {
    json row = to_json(pose);
    row["system"] = key.first;
    row["exposure"] = key.second;
    out.push_back(row);
  }
  return out;
}

std::map<PoseKey, Pose> poses_from(const json& j) {
  std::map<PoseKey, Pose> poses;
  for (const auto& row : j)
    poses[{row.at("system"), row.at("exposure")}] = pose_from(row);
  return poses;
}

json points_to_json(const std::map<int, Vec3>& points) {
  json out = json::object();
  for (const auto& [id, p] : points) out[std::to_string(id)] = to_json(p);
  return out;
}

std::map<int, Vec3> points_from(const json& j) {
  std::map<int, Vec3> points;
  for (const auto& [key, value] : j.items())
    points[std::stoi(key)] = vec3_from(value);
  return points;
}

json stage_to_json(const FieldStage& stage) {
  if (std::holds_alternative<KnnRegressor>(stage)) {
    const auto& reg = std::get<KnnRegressor>(stage);
    json samples = json::array();
    for (const auto& s : reg.samples())
      samples.push_back(json::array({s.position.x(), s.position.y(),
                                     s.residual.x(), s.residual.y(),
                                     s.variance.x(), s.variance.y()}));
    return json{{"type", "knn"}, {"k", reg.k()}, {"samples", samples}};
  }
  const auto& field = std::get<SmoothedField>(stage);
  json nodes = json::array();
  for (const Vec2& n : field.nodes()) nodes.push_back(to_json(n));
  return json{{"type", "smoothed"},
              {"grid",
               json{{"nx", field.grid().nx},
                    {"ny", field.grid().ny},
                    {"lo", to_json(field.grid().lo)},
                    {"hi", to_json(field.grid().hi)}}},
              {"nodes", nodes}};
}

FieldStage stage_from(const json& j) {
  const std::string type = j.at("type");
  if (type == "knn") {
    std::vector<ResidualSample> samples;
    for (const auto& row : j.at("samples")) {
      ResidualSample s;
      s.position = Vec2(row.at(0), row.at(1));
      s.residual = Vec2(row.at(2), row.at(3));
      s.variance = Vec2(row.at(4), row.at(5));
      samples.push_back(s);
    }
    return knn_fit(std::move(samples), j.at("k"));
  }
  if (type == "smoothed") {
    GridSpec grid;
    grid.nx = j.at("grid").at("nx");
    grid.ny = j.at("grid").at("ny");
    grid.lo = vec2_from(j.at("grid").at("lo"));
    grid.hi = vec2_from(j.at("grid").at("hi"));
    std::vector<Vec2> nodes;
    for (const auto& n : j.at("nodes")) nodes.push_back(vec2_from(n));
    return SmoothedField(grid, std::move(nodes));
  }
  throw MalformedRow("unknown field stage type '" + type + "'");
}

json fields_to_json(const std::map<int, DistortionField>& fields) {
  json out = json::object();
  for (const auto& [system, field] : fields) {
    json stages = json::array();
    for (const auto& stage : field.stages) stages.push_back(stage_to_json(stage));
    out[std::to_string(system)] = json{{"stages", stages}};
  }
  return out;
}

std::map<int, DistortionField> fields_from(const json& j) {
  std::map<int, DistortionField> fields;
  for (const auto& [key, value] : j.items()) {
    DistortionField field;
    for (const auto& stage : value.at("stages"))
      field.stages.push_back(stage_from(stage));
    fields[std::stoi(key)] = std::move(field);
  }
  return fields;
}

json network_to_json(const Network& net) {
  json obs = json::array();
  for (const auto& o : net.observations)
    obs.push_back(json::array({o.system_id, o.exposure_id, o.target_id,
                               o.image.x(), o.image.y(), o.sigma,
                               o.correction.x(), o.correction.y()}));
  json out{{"version", kFormatVersion},
           {"scheme", to_string(net.scheme)},
           {"reference_system", net.reference_system},
           {"intrinsics", intrinsics_map_to_json(net.intrinsics)},
           {"poses", poses_to_json(net.poses)},
           {"points", points_to_json(net.points)},
           {"observations", obs}};
  out["rop"] = net.rop ? to_json(*net.rop) : json(nullptr);
  return out;
}

Network network_from(const json& j, const std::string& source) {
  check_version(j, source);
  Network net;
  net.scheme = scheme_from_string(j.at("scheme"));
  net.reference_system = j.at("reference_system");
  net.intrinsics = intrinsics_map_from(j.at("intrinsics"));
  net.poses = poses_from(j.at("poses"));
  net.points = points_from(j.at("points"));
  if (!j.at("rop").is_null()) net.rop = pose_from(j.at("rop"));
  for (const auto& row : j.at("observations")) {
    Observation o;
    o.system_id = row.at(0);
    o.exposure_id = row.at(1);
    o.target_id = row.at(2);
    o.image = Vec2(row.at(3), row.at(4));
    o.sigma = row.at(5);
    o.correction = Vec2(row.at(6), row.at(7));
    net.observations.push_back(o);
  }
  return net;
}

json history_to_json(const std::vector<OuterRecord>& history) {
  json out = json::array();
  for (const auto& r : history) {
    json k = json::object();
    for (const auto& [system, kk] : r.selected_k) k[std::to_string(system)] = kk;
    out.push_back(json{{"iteration", r.iteration},
                       {"ba_cost", r.ba_cost},
                       {"regression_cost", r.regression_cost},
                       {"combined_cost", r.combined_cost},
                       {"inliers", r.inliers},
                       {"selected_k", k}});
  }
  return out;
}

std::vector<OuterRecord> history_from(const json& j) {
  std::vector<OuterRecord> history;
  for (const auto& row : j) {
    OuterRecord r;
    r.iteration = row.at("iteration");
    r.ba_cost = row.at("ba_cost");
    r.regression_cost = row.at("regression_cost");
    r.combined_cost = row.at("combined_cost");
    r.inliers = row.at("inliers");
    for (const auto& [key, value] : row.at("selected_k").items())
      r.selected_k[std::stoi(key)] = value;
    history.push_back(r);
  }
  return history;
}

}  // namespace

// --- observations ------------------------------------------------------------

static const char* kObsHeader = "system_id,exposure_id,target_id,x_px,y_px,sigma_px";
static const char* kObsHeaderNoSigma = "system_id,exposure_id,target_id,x_px,y_px";

void write_observations_csv(std::ostream& out,
                            const std::vector<Observation>& observations) {
  out << kObsHeader << '\n';
  for (const auto& o : observations)
    out << o.system_id << ',' << o.exposure_id << ',' << o.target_id << ','
        << format_double(o.image.x()) << ',' << format_double(o.image.y())
        << ',' << format_double(o.sigma) << '\n';
}

void write_observations_csv(const std::string& path,
                            const std::vector<Observation>& observations) {
  std::ostringstream ss;
  write_observations_csv(ss, observations);
  write_file(path, ss.str());
}

std::vector<Observation> read_observations_csv(std::istream& in,
                                               const std::string& source,
                                               double default_sigma) {
  const auto fail = [&](int line, const std::string& what) {
    throw MalformedRow(source + ":" + std::to_string(line) + ": " + what);
  };

  std::string line;
  if (!std::getline(in, line)) fail(1, "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const bool has_sigma = line == kObsHeader;
  if (!has_sigma && line != kObsHeaderNoSigma)
    fail(1, "bad header, expected '" + std::string(kObsHeader) + "'");
  const int n_fields = has_sigma ? 6 : 5;

  std::vector<Observation> observations;
  std::set<std::tuple<int, int, int>> keys;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::array<std::string, 6> field;
    size_t start = 0;
    for (int f = 0; f < n_fields; ++f) {
      const size_t comma = line.find(',', start);
      if (f < n_fields - 1 && comma == std::string::npos)
        fail(line_no, "expected " + std::to_string(n_fields) +
                          " comma-separated fields");
      field[f] = line.substr(start, comma - start);
      start = comma + 1;
      if (f == n_fields - 1 && comma != std::string::npos)
        fail(line_no, "expected " + std::to_string(n_fields) +
                          " comma-separated fields");
    }

    Observation o;
    const char* names[6] = {"system_id", "exposure_id", "target_id",
                            "x_px",      "y_px",        "sigma_px"};
    const auto parse_int = [&](int f) {
      int value = 0;
      const auto [p, ec] = std::from_chars(
          field[f].data(), field[f].data() + field[f].size(), value);
      if (ec != std::errc() || p != field[f].data() + field[f].size())
        fail(line_no, std::string("field ") + names[f] + ": bad integer '" +
                          field[f] + "'");
      return value;
    };
    const auto parse_double = [&](int f) {
      double value = 0;
      const auto [p, ec] = std::from_chars(
          field[f].data(), field[f].data() + field[f].size(), value);
      if (ec != std::errc() || p != field[f].data() + field[f].size())
        fail(line_no, std::string("field ") + names[f] + ": bad number '" +
                          field[f] + "'");
      return value;
    };
    o.system_id = parse_int(0);
    o.exposure_id = parse_int(1);
    o.target_id = parse_int(2);
    o.image = Vec2(parse_double(3), parse_double(4));
    o.sigma = has_sigma ? parse_double(5) : default_sigma;
    if (!(o.sigma > 0.0))
      fail(line_no, "field sigma_px: must be positive");
    if (!keys.insert({o.system_id, o.exposure_id, o.target_id}).second)
      throw DuplicateKey(source + ":" + std::to_string(line_no) +
                         ": duplicate (system, exposure, target)");
    observations.push_back(o);
  }
  return observations;
}

std::vector<Observation> read_observations_csv(const std::string& path,
                                               double default_sigma) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return read_observations_csv(in, path, default_sigma);
}

// --- parameter files ----------------------------------------------------------

void write_initial_values(const std::string& path, const InitialValues& init) {
  json out{{"version", kFormatVersion},
           {"intrinsics", intrinsics_map_to_json(init.intrinsics)},
           {"poses", poses_to_json(init.poses)},
           {"points", points_to_json(init.points)}};
  out["rop"] = init.rop ? to_json(*init.rop) : json(nullptr);
  write_file(path, out.dump(2) + "\n");
}

InitialValues read_initial_values(const std::string& path) {
  const json j = parse_json(read_file(path), path);
  check_version(j, path);
  InitialValues init;
  init.intrinsics = intrinsics_map_from(j.at("intrinsics"));
  init.poses = poses_from(j.at("poses"));
  init.points = points_from(j.at("points"));
  if (!j.at("rop").is_null()) init.rop = pose_from(j.at("rop"));
  return init;
}

void write_ground_truth(const std::string& path, const GroundTruth& truth) {
  json distortion = json::object();
  for (const auto& [system, d] : truth.distortion.systems) {
    json bumps = json::array();
    for (const auto& b : d.bumps)
      bumps.push_back(json{{"center", to_json(b.center)},
                           {"amplitude", to_json(b.amplitude)},
                           {"width", b.width}});
    distortion[std::to_string(system)] =
        json{{"center", to_json(d.center)}, {"scale", d.scale},
             {"radial_k1", d.radial_k1},    {"radial_k2", d.radial_k2},
             {"swirl", d.swirl},            {"bumps", bumps}};
  }
  json out{{"version", kFormatVersion},
           {"intrinsics", intrinsics_map_to_json(truth.intrinsics)},
           {"poses", poses_to_json(truth.poses)},
           {"points", points_to_json(truth.beads)},
           {"distortion",
            json{{"systems", distortion},
                 {"max_displacement_px", truth.distortion.max_displacement_px}}}};
  out["rop"] = truth.rop ? to_json(*truth.rop) : json(nullptr);
  write_file(path, out.dump(2) + "\n");
}

GroundTruth read_ground_truth(const std::string& path) {
  const json j = parse_json(read_file(path), path);
  check_version(j, path);
  GroundTruth truth;
  truth.intrinsics = intrinsics_map_from(j.at("intrinsics"));
  truth.poses = poses_from(j.at("poses"));
  truth.beads = points_from(j.at("points"));
  if (!j.at("rop").is_null()) truth.rop = pose_from(j.at("rop"));
  const json& dist = j.at("distortion");
  truth.distortion.max_displacement_px = dist.at("max_displacement_px");
  for (const auto& [key, d] : dist.at("systems").items()) {
    SystemDistortion sd;
    sd.center = vec2_from(d.at("center"));
    sd.scale = d.at("scale");
    sd.radial_k1 = d.at("radial_k1");
    sd.radial_k2 = d.at("radial_k2");
    sd.swirl = d.at("swirl");
    for (const auto& b : d.at("bumps")) {
      LocalBump bump;
      bump.center = vec2_from(b.at("center"));
      bump.amplitude = vec2_from(b.at("amplitude"));
      bump.width = b.at("width");
      sd.bumps.push_back(bump);
    }
    truth.distortion.systems[std::stoi(key)] = sd;
  }
  return truth;
}

// --- calibration artifact -------------------------------------------------------

void write_artifact(const std::string& path, const CalibrationArtifact& art) {
  json out{{"version", art.version},
           {"status", to_string(art.status)},
           {"best_iteration", art.best_iteration},
           {"ba_cost", art.ba_cost},
           {"regression_cost", art.regression_cost},
           {"combined_cost", art.combined_cost},
           {"config_hash", art.config_hash},
           {"network", network_to_json(art.network)},
           {"fields", fields_to_json(art.fields)},
           {"history", history_to_json(art.history)}};
  write_file(path, out.dump(2) + "\n");
}

CalibrationArtifact read_artifact(const std::string& path) {
  const json j = parse_json(read_file(path), path);
  check_version(j, path);
  CalibrationArtifact art;
  art.version = j.at("version");
  art.status = loop_status_from_string(j.at("status"));
  art.best_iteration = j.at("best_iteration");
  art.ba_cost = j.at("ba_cost");
  art.regression_cost = j.at("regression_cost");
  art.combined_cost = j.at("combined_cost");
  art.config_hash = j.at("config_hash");
  art.network = network_from(j.at("network"), path);
  art.fields = fields_from(j.at("fields"));
  art.history = history_from(j.at("history"));
  return art;
}

std::string network_to_json_string(const Network& network) {
  return network_to_json(network).dump(2) + "\n";
}

Network network_from_json_string(const std::string& text) {
  return network_from(parse_json(text, "<network>"), "<network>");
}

void write_field(const std::string& path, const DistortionField& field) {
  json stages = json::array();
  for (const auto& stage : field.stages) stages.push_back(stage_to_json(stage));
  const json out{{"version", kFormatVersion}, {"stages", stages}};
  write_file(path, out.dump(2) + "\n");
}

DistortionField read_field(const std::string& path) {
  const json j = parse_json(read_file(path), path);
  check_version(j, path);
  DistortionField field;
  for (const auto& stage : j.at("stages"))
    field.stages.push_back(stage_from(stage));
  return field;
}

void write_evaluation_json(const std::string& path, const EvaluationRow& row) {
  const json out{{"version", kFormatVersion},
                 {"train_size", row.train_size},
                 {"scheme", to_string(row.scheme)},
                 {"x_rmse", row.mapping.per_axis_rmse.x()},
                 {"y_rmse", row.mapping.per_axis_rmse.y()},
                 {"z_rmse", row.mapping.per_axis_rmse.z()},
                 {"average_rmse", row.mapping.average},
                 {"points", row.mapping.points},
                 {"improvement", row.improvement}};
  write_file(path, out.dump(2) + "\n");
}

EvaluationRow read_evaluation_json(const std::string& path) {
  const json j = parse_json(read_file(path), path);
  check_version(j, path);
  EvaluationRow row;
  row.train_size = j.at("train_size");
  row.scheme = scheme_from_string(j.at("scheme"));
  row.mapping.per_axis_rmse =
      Vec3(j.at("x_rmse"), j.at("y_rmse"), j.at("z_rmse"));
  row.mapping.average = j.at("average_rmse");
  row.mapping.points = j.at("points");
  row.improvement = j.at("improvement");
  return row;
}

// --- run configuration -----------------------------------------------------------

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t hash = 0xCBF29CE484222325ull;
  for (const unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001B3ull;
  }
  return hash;
}

namespace {

json config_to_json(const RunConfig& c) {
  json bumps = json::array();
  for (const auto& row : c.bumps) bumps.push_back(row);
  return json{
      {"scheme", c.scheme},
      {"nu", c.nu},
      {"likelihood", c.likelihood},
      {"joint_likelihood", c.joint_likelihood},
      {"inlier_tau", c.inlier_tau},
      {"cv_folds", c.cv_folds},
      {"candidate_ks", c.candidate_ks},
      {"reselect_k", c.reselect_k},
      {"grid_nx", c.grid_nx},
      {"grid_ny", c.grid_ny},
      {"max_outer_iterations", c.max_outer_iterations},
      {"combined_tolerance", c.combined_tolerance},
      {"divergence_patience", c.divergence_patience},
      {"lm_initial_lambda", c.lm_initial_lambda},
      {"lm_lambda_up", c.lm_lambda_up},
      {"lm_lambda_down", c.lm_lambda_down},
      {"lm_max_iterations", c.lm_max_iterations},
      {"lm_cost_tolerance", c.lm_cost_tolerance},
      {"inner_constraints", c.inner_constraints},
      {"seed", c.seed},
      {"bead_count", c.bead_count},
      {"cube_edge_mm", c.cube_edge_mm},
      {"faces", c.faces},
      {"face_margin_mm", c.face_margin_mm},
      {"cell_jitter", c.cell_jitter},
      {"min_spacing_mm", c.min_spacing_mm},
      {"bead_diameter_mm", c.bead_diameter_mm},
      {"systems", c.systems},
      {"exposures", c.exposures},
      {"height_levels", c.height_levels},
      {"camera_distance_mm", c.camera_distance_mm},
      {"second_system_azimuth_deg", c.second_system_azimuth_deg},
      {"height_span_mm", c.height_span_mm},
      {"pose_jitter_mm", c.pose_jitter_mm},
      {"pose_jitter_deg", c.pose_jitter_deg},
      {"image_width_px", c.image_width_px},
      {"image_height_px", c.image_height_px},
      {"nominal_principal_distance_px", c.nominal_principal_distance_px},
      {"noise_sigma_px", c.noise_sigma_px},
      {"outlier_fraction", c.outlier_fraction},
      {"outlier_min_px", c.outlier_min_px},
      {"outlier_max_px", c.outlier_max_px},
      {"radial_k1", c.radial_k1},
      {"radial_k2", c.radial_k2},
      {"swirl", c.swirl},
      {"bumps", bumps},
      {"max_displacement_px", c.max_displacement_px},
      {"init_pose_mm", c.init_pose_mm},
      {"init_pose_deg", c.init_pose_deg},
      {"init_point_mm", c.init_point_mm},
      {"init_rop_mm", c.init_rop_mm},
      {"init_rop_deg", c.init_rop_deg},
      {"init_triangulate_points", c.init_triangulate_points},
      {"init_nominal_iop", c.init_nominal_iop},
      {"init_seed", c.init_seed}};
}

}  // namespace

LoadedConfig parse_config(const std::string& text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(source + ": expected a JSON object");

  LoadedConfig loaded;
  RunConfig& c = loaded.config;

  const auto number = [&](const json& v, const char* key) -> double {
    if (!v.is_number())
      throw ConfigError(source + ": key '" + key + "' must be a number");
    return v.get<double>();
  };
  const auto integer = [&](const json& v, const char* key) -> int {
    if (!v.is_number_integer())
      throw ConfigError(source + ": key '" + key + "' must be an integer");
    return v.get<int>();
  };
  const auto boolean = [&](const json& v, const char* key) -> bool {
    if (!v.is_boolean())
      throw ConfigError(source + ": key '" + key + "' must be a boolean");
    return v.get<bool>();
  };
  const auto u64 = [&](const json& v, const char* key) -> std::uint64_t {
    if (!v.is_number_unsigned() && !v.is_number_integer())
      throw ConfigError(source + ": key '" + key + "' must be an integer");
    return v.get<std::uint64_t>();
  };
  const auto text_value = [&](const json& v, const char* key) -> std::string {
    if (!v.is_string())
      throw ConfigError(source + ": key '" + key + "' must be a string");
    return v.get<std::string>();
  };
  const auto double_list = [&](const json& v, const char* key) {
    if (!v.is_array())
      throw ConfigError(source + ": key '" + key + "' must be an array");
    std::vector<double> out;
    for (const auto& e : v) out.push_back(number(e, key));
    return out;
  };

  using Handler = std::function<void(const json&)>;
  const std::map<std::string, Handler> handlers = {
      {"scheme", [&](const json& v) { c.scheme = text_value(v, "scheme"); }},
      {"nu", [&](const json& v) { c.nu = number(v, "nu"); }},
      {"likelihood",
       [&](const json& v) { c.likelihood = text_value(v, "likelihood"); }},
      {"joint_likelihood",
       [&](const json& v) { c.joint_likelihood = boolean(v, "joint_likelihood"); }},
      {"inlier_tau", [&](const json& v) { c.inlier_tau = number(v, "inlier_tau"); }},
      {"cv_folds", [&](const json& v) { c.cv_folds = integer(v, "cv_folds"); }},
      {"candidate_ks",
       [&](const json& v) {
         if (!v.is_array())
           throw ConfigError(source + ": key 'candidate_ks' must be an array");
         c.candidate_ks.clear();
         for (const auto& e : v) c.candidate_ks.push_back(integer(e, "candidate_ks"));
       }},
      {"reselect_k", [&](const json& v) { c.reselect_k = boolean(v, "reselect_k"); }},
      {"grid_nx", [&](const json& v) { c.grid_nx = integer(v, "grid_nx"); }},
      {"grid_ny", [&](const json& v) { c.grid_ny = integer(v, "grid_ny"); }},
      {"max_outer_iterations",
       [&](const json& v) { c.max_outer_iterations = integer(v, "max_outer_iterations"); }},
      {"combined_tolerance",
       [&](const json& v) { c.combined_tolerance = number(v, "combined_tolerance"); }},
      {"divergence_patience",
       [&](const json& v) { c.divergence_patience = integer(v, "divergence_patience"); }},
      {"lm_initial_lambda",
       [&](const json& v) { c.lm_initial_lambda = number(v, "lm_initial_lambda"); }},
      {"lm_lambda_up",
       [&](const json& v) { c.lm_lambda_up = number(v, "lm_lambda_up"); }},
      {"lm_lambda_down",
       [&](const json& v) { c.lm_lambda_down = number(v, "lm_lambda_down"); }},
      {"lm_max_iterations",
       [&](const json& v) { c.lm_max_iterations = integer(v, "lm_max_iterations"); }},
      {"lm_cost_tolerance",
       [&](const json& v) { c.lm_cost_tolerance = number(v, "lm_cost_tolerance"); }},
      {"inner_constraints",
       [&](const json& v) { c.inner_constraints = boolean(v, "inner_constraints"); }},
      {"seed", [&](const json& v) { c.seed = u64(v, "seed"); }},
      {"bead_count", [&](const json& v) { c.bead_count = integer(v, "bead_count"); }},
      {"cube_edge_mm", [&](const json& v) { c.cube_edge_mm = number(v, "cube_edge_mm"); }},
      {"faces", [&](const json& v) { c.faces = integer(v, "faces"); }},
      {"face_margin_mm",
       [&](const json& v) { c.face_margin_mm = number(v, "face_margin_mm"); }},
      {"cell_jitter", [&](const json& v) { c.cell_jitter = number(v, "cell_jitter"); }},
      {"min_spacing_mm",
       [&](const json& v) { c.min_spacing_mm = number(v, "min_spacing_mm"); }},
      {"bead_diameter_mm",
       [&](const json& v) { c.bead_diameter_mm = number(v, "bead_diameter_mm"); }},
      {"systems", [&](const json& v) { c.systems = integer(v, "systems"); }},
      {"exposures", [&](const json& v) { c.exposures = integer(v, "exposures"); }},
      {"height_levels",
       [&](const json& v) { c.height_levels = integer(v, "height_levels"); }},
      {"camera_distance_mm",
       [&](const json& v) { c.camera_distance_mm = number(v, "camera_distance_mm"); }},
      {"second_system_azimuth_deg",
       [&](const json& v) {
         c.second_system_azimuth_deg = number(v, "second_system_azimuth_deg");
       }},
      {"height_span_mm",
       [&](const json& v) { c.height_span_mm = number(v, "height_span_mm"); }},
      {"pose_jitter_mm",
       [&](const json& v) { c.pose_jitter_mm = number(v, "pose_jitter_mm"); }},
      {"pose_jitter_deg",
       [&](const json& v) { c.pose_jitter_deg = number(v, "pose_jitter_deg"); }},
      {"image_width_px",
       [&](const json& v) { c.image_width_px = number(v, "image_width_px"); }},
      {"image_height_px",
       [&](const json& v) { c.image_height_px = number(v, "image_height_px"); }},
      {"nominal_principal_distance_px",
       [&](const json& v) {
         c.nominal_principal_distance_px = number(v, "nominal_principal_distance_px");
       }},
      {"noise_sigma_px",
       [&](const json& v) { c.noise_sigma_px = number(v, "noise_sigma_px"); }},
      {"outlier_fraction",
       [&](const json& v) { c.outlier_fraction = number(v, "outlier_fraction"); }},
      {"outlier_min_px",
       [&](const json& v) { c.outlier_min_px = number(v, "outlier_min_px"); }},
      {"outlier_max_px",
       [&](const json& v) { c.outlier_max_px = number(v, "outlier_max_px"); }},
      {"radial_k1", [&](const json& v) { c.radial_k1 = double_list(v, "radial_k1"); }},
      {"radial_k2", [&](const json& v) { c.radial_k2 = double_list(v, "radial_k2"); }},
      {"swirl", [&](const json& v) { c.swirl = double_list(v, "swirl"); }},
      {"bumps",
       [&](const json& v) {
         if (!v.is_array())
           throw ConfigError(source + ": key 'bumps' must be an array");
         c.bumps.clear();
         for (const auto& row : v) {
           const auto values = double_list(row, "bumps");
           if (values.size() != 6)
             throw ConfigError(source +
                               ": each bumps row needs 6 numbers "
                               "[system, cx, cy, ax, ay, width]");
           c.bumps.push_back(values);
         }
       }},
      {"max_displacement_px",
       [&](const json& v) { c.max_displacement_px = number(v, "max_displacement_px"); }},
      {"init_pose_mm", [&](const json& v) { c.init_pose_mm = number(v, "init_pose_mm"); }},
      {"init_pose_deg",
       [&](const json& v) { c.init_pose_deg = number(v, "init_pose_deg"); }},
      {"init_point_mm",
       [&](const json& v) { c.init_point_mm = number(v, "init_point_mm"); }},
      {"init_rop_mm", [&](const json& v) { c.init_rop_mm = number(v, "init_rop_mm"); }},
      {"init_rop_deg", [&](const json& v) { c.init_rop_deg = number(v, "init_rop_deg"); }},
      {"init_triangulate_points",
       [&](const json& v) {
         c.init_triangulate_points = boolean(v, "init_triangulate_points");
       }},
      {"init_nominal_iop",
       [&](const json& v) { c.init_nominal_iop = boolean(v, "init_nominal_iop"); }},
      {"init_seed", [&](const json& v) { c.init_seed = u64(v, "init_seed"); }},
  };

  for (const auto& [key, value] : j.items()) {
    const auto it = handlers.find(key);
    if (it == handlers.end()) {
      loaded.warnings.push_back("unknown config key '" + key + "'");
      continue;
    }
    it->second(value);
  }

  scheme_from_string(c.scheme);  // validates
  if (c.likelihood != "student_t" && c.likelihood != "gaussian")
    throw ConfigError(source + ": likelihood must be student_t or gaussian");
  if (!(c.nu > 0.0)) throw ConfigError(source + ": nu must be positive");
  if (!(c.inlier_tau > 0.0))
    throw ConfigError(source + ": inlier_tau must be positive");
  if (c.cv_folds < 2) throw ConfigError(source + ": cv_folds must be >= 2");
  if (c.grid_nx < 2 || c.grid_ny < 2)
    throw ConfigError(source + ": grid_nx and grid_ny must be >= 2");
  if (c.max_outer_iterations < 1)
    throw ConfigError(source + ": max_outer_iterations must be >= 1");
  if (c.candidate_ks.empty())
    throw ConfigError(source + ": candidate_ks must not be empty");

  char hex[32];
  std::snprintf(hex, sizeof hex, "fnv1a:%016llx",
                static_cast<unsigned long long>(
                    fnv1a(config_to_json(c).dump())));
  loaded.hash = hex;
  return loaded;
}

LoadedConfig load_config(const std::string& path) {
  return parse_config(read_file(path), path);
}

PhantomSpec phantom_spec(const RunConfig& c) {
  PhantomSpec s;
  s.bead_count = c.bead_count;
  s.cube_edge_mm = c.cube_edge_mm;
  s.faces = c.faces;
  s.face_margin_mm = c.face_margin_mm;
  s.cell_jitter = c.cell_jitter;
  s.min_spacing_mm = c.min_spacing_mm;
  s.bead_diameter_mm = c.bead_diameter_mm;
  return s;
}

DistortionSpec distortion_spec(const RunConfig& c) {
  DistortionSpec spec;
  spec.max_displacement_px = c.max_displacement_px;
  for (int k = 1; k <= c.systems; ++k) {
    SystemDistortion d;
    d.center = Vec2(c.image_width_px / 2.0, c.image_height_px / 2.0);
    d.scale = std::min(c.image_width_px, c.image_height_px) / 2.0;
    if (static_cast<int>(c.radial_k1.size()) >= k) d.radial_k1 = c.radial_k1[k - 1];
    if (static_cast<int>(c.radial_k2.size()) >= k) d.radial_k2 = c.radial_k2[k - 1];
    if (static_cast<int>(c.swirl.size()) >= k) d.swirl = c.swirl[k - 1];
    for (const auto& row : c.bumps) {
      if (static_cast<int>(row[0]) != k) continue;
      LocalBump b;
      b.center = Vec2(row[1], row[2]);
      b.amplitude = Vec2(row[3], row[4]);
      b.width = row[5];
      d.bumps.push_back(b);
    }
    if (d.radial_k1 != 0.0 || d.radial_k2 != 0.0 || d.swirl != 0.0 ||
        !d.bumps.empty())
      spec.systems[k] = d;
  }
  return spec;
}

AcquisitionSpec acquisition_spec(const RunConfig& c) {
  AcquisitionSpec s;
  s.systems = c.systems;
  s.exposures = c.exposures;
  s.height_levels = c.height_levels;
  s.camera_distance_mm = c.camera_distance_mm;
  s.second_system_azimuth_deg = c.second_system_azimuth_deg;
  s.height_span_mm = c.height_span_mm;
  s.pose_jitter_mm = c.pose_jitter_mm;
  s.pose_jitter_deg = c.pose_jitter_deg;
  s.image_width_px = c.image_width_px;
  s.image_height_px = c.image_height_px;
  s.nominal_principal_distance_px = c.nominal_principal_distance_px;
  s.noise_sigma_px = c.noise_sigma_px;
  s.outlier_fraction = c.outlier_fraction;
  s.outlier_min_px = c.outlier_min_px;
  s.outlier_max_px = c.outlier_max_px;
  s.seed = c.seed;
  return s;
}

InitNoise init_noise(const RunConfig& c) {
  InitNoise n;
  n.pose_mm = c.init_pose_mm;
  n.pose_deg = c.init_pose_deg;
  n.point_mm = c.init_point_mm;
  n.rop_mm = c.init_rop_mm;
  n.rop_deg = c.init_rop_deg;
  n.triangulate_points = c.init_triangulate_points;
  n.nominal_iop = c.init_nominal_iop;
  n.seed = c.init_seed;
  return n;
}

LoopSettings loop_settings(const RunConfig& c) {
  LoopSettings s;
  s.max_outer_iterations = c.max_outer_iterations;
  s.combined_tolerance = c.combined_tolerance;
  s.divergence_patience = c.divergence_patience;
  s.inlier_tau = c.inlier_tau;
  s.cv_folds = c.cv_folds;
  s.candidate_ks = c.candidate_ks;
  s.reselect_k = c.reselect_k;
  s.grid_nx = c.grid_nx;
  s.grid_ny = c.grid_ny;
  s.seed = c.seed;
  s.model.nu = c.nu;
  s.solver.initial_lambda = c.lm_initial_lambda;
  s.solver.lambda_up = c.lm_lambda_up;
  s.solver.lambda_down = c.lm_lambda_down;
  s.solver.max_iterations = c.lm_max_iterations;
  s.solver.cost_tolerance = c.lm_cost_tolerance;
  s.solver.use_inner_constraints = c.inner_constraints;
  s.solver.likelihood =
      c.likelihood == "gaussian" ? Likelihood::gaussian : Likelihood::student_t;
  s.solver.joint_likelihood = c.joint_likelihood;
  return s;
}

}  // namespace fluorocal
