#include "fluorocal/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fluorocal/errors.hpp"
#include "mini_scene.hpp"

using namespace fluorocal;
using fluorocal::testing::make_mini_scene;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "fluorocal_io_test";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Observation> sample_observations() {
  std::vector<Observation> obs;
  Observation o;
  o.system_id = 1;
  o.exposure_id = 3;
  o.target_id = 42;
  o.image = Vec2(1001.25, 998.5);
  o.sigma = 0.06;
  obs.push_back(o);
  o.system_id = 2;
  o.exposure_id = 0;
  o.target_id = 7;
  o.image = Vec2(-0.125, 2015.9999999999998);
  o.sigma = 0.1234567890123456789;
  obs.push_back(o);
  return obs;
}

}  // namespace

TEST_CASE("observation csv survives a lossless round trip") {
  const auto obs = sample_observations();
  std::ostringstream out;
  write_observations_csv(out, obs);

  std::istringstream in(out.str());
  const auto back = read_observations_csv(in, "mem");
  REQUIRE(back.size() == obs.size());
  for (size_t i = 0; i < obs.size(); ++i) {
    CHECK(back[i].system_id == obs[i].system_id);
    CHECK(back[i].exposure_id == obs[i].exposure_id);
    CHECK(back[i].target_id == obs[i].target_id);
    CHECK(back[i].image.x() == obs[i].image.x());
    CHECK(back[i].image.y() == obs[i].image.y());
    CHECK(back[i].sigma == obs[i].sigma);
    CHECK(back[i].correction == Vec2::Zero());
  }

  std::ostringstream again;
  write_observations_csv(again, back);
  CHECK(again.str() == out.str());
}

TEST_CASE("observation csv parses the documented layout") {
  std::istringstream in(
      "system_id,exposure_id,target_id,x_px,y_px,sigma_px\n"
      "1,3,42,1001.25,998.50,0.06\n");
  const auto obs = read_observations_csv(in, "mem");
  REQUIRE(obs.size() == 1);
  CHECK(obs[0].system_id == 1);
  CHECK(obs[0].exposure_id == 3);
  CHECK(obs[0].target_id == 42);
  CHECK(obs[0].image.x() == 1001.25);
  CHECK(obs[0].image.y() == 998.5);
  CHECK(obs[0].sigma == 0.06);
}

TEST_CASE("sigma column is optional and defaults apply") {
  std::istringstream in(
      "system_id,exposure_id,target_id,x_px,y_px\r\n"
      "1,0,5,10.5,20.5\r\n"
      "\r\n"
      "1,0,6,11.5,21.5\r\n");
  const auto obs = read_observations_csv(in, "mem", 0.25);
  REQUIRE(obs.size() == 2);
  CHECK(obs[0].sigma == 0.25);
  CHECK(obs[1].sigma == 0.25);
}

TEST_CASE("header only means no observations") {
  std::istringstream in("system_id,exposure_id,target_id,x_px,y_px,sigma_px\n");
  CHECK(read_observations_csv(in, "mem").empty());
}

TEST_CASE("malformed csv rows name the file, line and field") {
  const auto read = [](const std::string& text) {
    std::istringstream in(text);
    return read_observations_csv(in, "obs.csv");
  };
  const std::string header =
      "system_id,exposure_id,target_id,x_px,y_px,sigma_px\n";

  CHECK_THROWS_WITH_AS(read(""), "obs.csv:1: empty file", MalformedRow);
  CHECK_THROWS_AS(read("nonsense\n"), MalformedRow);
  CHECK_THROWS_WITH_AS(read(header + "1,2,3,4.0,5.0\n"),
                       "obs.csv:2: expected 6 comma-separated fields",
                       MalformedRow);
  CHECK_THROWS_WITH_AS(read(header + "1,2,3,4.0,5.0,0.06,extra\n"),
                       "obs.csv:2: expected 6 comma-separated fields",
                       MalformedRow);
  CHECK_THROWS_WITH_AS(read(header + "1,two,3,4.0,5.0,0.06\n"),
                       "obs.csv:2: field exposure_id: bad integer 'two'",
                       MalformedRow);
  CHECK_THROWS_WITH_AS(read(header + "1,2,3,4.0,what,0.06\n"),
                       "obs.csv:2: field y_px: bad number 'what'",
                       MalformedRow);
  CHECK_THROWS_WITH_AS(read(header + "1,2,3,4.0,5.0,0\n"),
                       "obs.csv:2: field sigma_px: must be positive",
                       MalformedRow);
  CHECK_THROWS_AS(
      read(header + "1,2,3,4.0,5.0,0.06\n1,2,3,9.0,9.0,0.06\n"),
      DuplicateKey);
}

TEST_CASE("initial values round trip bit for bit") {
  auto scene = make_mini_scene(6, 3, 2, 5);
  const fs::path path = temp_dir() / "initial.json";
  write_initial_values(path.string(), scene.truth);
  const InitialValues back = read_initial_values(path.string());

  REQUIRE(back.intrinsics.size() == scene.truth.intrinsics.size());
  for (const auto& [s, iop] : scene.truth.intrinsics) {
    CHECK(back.intrinsics.at(s).x_p == iop.x_p);
    CHECK(back.intrinsics.at(s).y_p == iop.y_p);
    CHECK(back.intrinsics.at(s).c == iop.c);
  }
  REQUIRE(back.poses.size() == scene.truth.poses.size());
  for (const auto& [key, pose] : scene.truth.poses) {
    CHECK(back.poses.at(key).translation == pose.translation);
    CHECK(back.poses.at(key).rotation.coeffs() == pose.rotation.coeffs());
  }
  REQUIRE(back.points.size() == scene.truth.points.size());
  for (const auto& [id, p] : scene.truth.points)
    CHECK(back.points.at(id) == p);
  REQUIRE(back.rop.has_value());
  CHECK(back.rop->translation == scene.truth.rop->translation);
  CHECK(back.rop->rotation.coeffs() == scene.truth.rop->rotation.coeffs());
}

TEST_CASE("ground truth round trip keeps the distortion recipe") {
  GroundTruth truth;
  auto scene = make_mini_scene(5, 2, 2, 6);
  truth.intrinsics = scene.truth.intrinsics;
  truth.poses = scene.truth.poses;
  truth.rop = scene.truth.rop;
  truth.beads = scene.truth.points;
  SystemDistortion d;
  d.center = Vec2(1008, 1008);
  d.scale = 1008;
  d.radial_k1 = 1.2;
  d.radial_k2 = -0.3;
  d.swirl = 0.0005;
  LocalBump bump;
  bump.center = Vec2(300, 1700);
  bump.amplitude = Vec2(0.4, -0.2);
  bump.width = 150;
  d.bumps.push_back(bump);
  truth.distortion.systems[1] = d;
  truth.distortion.max_displacement_px = 3.0;

  const fs::path path = temp_dir() / "truth.json";
  write_ground_truth(path.string(), truth);
  const GroundTruth back = read_ground_truth(path.string());

  CHECK(back.beads.size() == truth.beads.size());
  for (const auto& [id, p] : truth.beads) CHECK(back.beads.at(id) == p);
  CHECK(back.poses.size() == truth.poses.size());
  REQUIRE(back.distortion.systems.count(1));
  const SystemDistortion& bd = back.distortion.systems.at(1);
  CHECK(bd.radial_k1 == d.radial_k1);
  CHECK(bd.radial_k2 == d.radial_k2);
  CHECK(bd.swirl == d.swirl);
  CHECK(bd.center == d.center);
  CHECK(bd.scale == d.scale);
  REQUIRE(bd.bumps.size() == 1);
  CHECK(bd.bumps[0].center == bump.center);
  CHECK(bd.bumps[0].amplitude == bump.amplitude);
  CHECK(bd.bumps[0].width == bump.width);
  CHECK(back.distortion.max_displacement_px == 3.0);

  // The serialized field reproduces the synthetic distortion everywhere.
  for (int i = 0; i < 10; ++i) {
    const Vec2 q(201.6 * i, 151.2 * i);
    CHECK(true_field_at(bd, q) == true_field_at(d, q));
  }
}

TEST_CASE("network json round trips byte identically") {
  auto scene = make_mini_scene(6, 3, 2, 8);
  Network net =
      build_network(scene.observations, scene.truth, Scheme::knn_iop_smoothing);
  net.observations[0].correction = Vec2(0.125, -0.0625);

  const std::string text = network_to_json_string(net);
  Network back = network_from_json_string(text);
  CHECK(network_to_json_string(back) == text);
  CHECK(back.scheme == net.scheme);
  CHECK(back.reference_system == net.reference_system);
  REQUIRE(back.observations.size() == net.observations.size());
  CHECK(back.observations[0].correction == net.observations[0].correction);
  REQUIRE(back.rop.has_value());
  CHECK(back.rop->translation == net.rop->translation);
}

TEST_CASE("distortion fields round trip with exact predictions") {
  std::vector<ResidualSample> samples;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 2016.0);
  std::normal_distribution<double> g(0.0, 0.3);
  for (int i = 0; i < 60; ++i)
    samples.push_back(
        {Vec2(u(rng), u(rng)), Vec2(g(rng), g(rng)), Vec2(0.0036, 0.0036)});

  DistortionField field;
  field.stages.emplace_back(knn_fit(samples, 7));
  field.stages.emplace_back(
      smooth(knn_fit(samples, 15), bounding_grid(samples, 16, 16)));

  const fs::path path = temp_dir() / "field.json";
  write_field(path.string(), field);
  const DistortionField back = read_field(path.string());
  REQUIRE(back.stages.size() == 2);
  CHECK(std::holds_alternative<KnnRegressor>(back.stages[0]));
  CHECK(std::holds_alternative<SmoothedField>(back.stages[1]));
  for (int i = 0; i < 50; ++i) {
    const Vec2 q(u(rng), u(rng));
    CHECK(back.predict(q) == field.predict(q));
  }
}

TEST_CASE("calibration artifact round trips") {
  auto scene = make_mini_scene(6, 3, 1, 9);
  CalibrationArtifact art;
  art.status = LoopStatus::diverged;
  art.best_iteration = 4;
  art.ba_cost = -123.456;
  art.regression_cost = 78.9;
  art.combined_cost = art.ba_cost + art.regression_cost;
  art.config_hash = "fnv1a:0123456789abcdef";
  art.network = build_network(scene.observations, scene.truth, Scheme::knn);
  std::vector<ResidualSample> samples;
  for (int i = 0; i < 12; ++i)
    samples.push_back({Vec2(100.0 * i, 50.0 * i), Vec2(0.1, -0.1), Vec2::Ones()});
  art.fields[1].stages.emplace_back(knn_fit(samples, 3));
  OuterRecord rec;
  rec.iteration = 1;
  rec.ba_cost = 1;
  rec.regression_cost = 2;
  rec.combined_cost = 3;
  rec.inliers = 17;
  rec.selected_k[1] = 5;
  art.history.push_back(rec);

  const fs::path path = temp_dir() / "calibration.json";
  write_artifact(path.string(), art);
  const CalibrationArtifact back = read_artifact(path.string());

  CHECK(back.status == art.status);
  CHECK(back.best_iteration == art.best_iteration);
  CHECK(back.ba_cost == art.ba_cost);
  CHECK(back.regression_cost == art.regression_cost);
  CHECK(back.combined_cost == art.combined_cost);
  CHECK(back.config_hash == art.config_hash);
  CHECK(network_to_json_string(back.network) ==
        network_to_json_string(art.network));
  REQUIRE(back.fields.count(1));
  CHECK(back.fields.at(1).predict(Vec2(500, 500)) ==
        art.fields.at(1).predict(Vec2(500, 500)));
  REQUIRE(back.history.size() == 1);
  CHECK(back.history[0].inliers == 17);
  CHECK(back.history[0].selected_k.at(1) == 5);
}

TEST_CASE("evaluation rows round trip") {
  EvaluationRow row;
  row.train_size = 45;
  row.scheme = Scheme::knn_smoothing;
  row.mapping.per_axis_rmse = Vec3(0.011, 0.022, 0.033);
  row.mapping.average = 0.022;
  row.mapping.points = 1234;
  row.improvement = 87.5;

  const fs::path path = temp_dir() / "evaluation.json";
  write_evaluation_json(path.string(), row);
  const EvaluationRow back = read_evaluation_json(path.string());
  CHECK(back.train_size == row.train_size);
  CHECK(back.scheme == row.scheme);
  CHECK(back.mapping.per_axis_rmse == row.mapping.per_axis_rmse);
  CHECK(back.mapping.average == row.mapping.average);
  CHECK(back.mapping.points == row.mapping.points);
  CHECK(back.improvement == row.improvement);
}

TEST_CASE("foreign format versions are rejected") {
  auto scene = make_mini_scene(5, 2, 1, 10);
  const fs::path path = temp_dir() / "versioned.json";
  write_initial_values(path.string(), scene.truth);

  std::string text = slurp(path);
  const auto at = text.find(kFormatVersion);
  REQUIRE(at != std::string::npos);
  text.replace(at, std::string(kFormatVersion).size(), "fluorocal-99");
  std::ofstream(path, std::ios::binary) << text;

  CHECK_THROWS_AS(read_initial_values(path.string()), VersionMismatch);
}

TEST_CASE("config parsing applies defaults and flags unknown keys") {
  const LoadedConfig defaults = parse_config("{}", "mem");
  CHECK(defaults.warnings.empty());
  CHECK(defaults.config.scheme == "knn_iop_smoothing");
  CHECK(defaults.config.nu == 4.0);
  CHECK(defaults.config.bead_count == 503);
  CHECK(defaults.config.exposures == 150);
  CHECK(defaults.config.noise_sigma_px == 0.06);

  const LoadedConfig loaded = parse_config(
      R"({"scheme":"knn","cv_folds":5,"candidate_ks":[1,2,4],
          "radial_k1":[1.5],"seed":12,"init_nominal_iop":false,
          "mystery_knob":true})",
      "mem");
  CHECK(loaded.config.scheme == "knn");
  CHECK(loaded.config.cv_folds == 5);
  CHECK(loaded.config.candidate_ks == std::vector<int>{1, 2, 4});
  CHECK(loaded.config.radial_k1 == std::vector<double>{1.5});
  CHECK(loaded.config.seed == 12);
  CHECK(loaded.config.init_nominal_iop == false);
  REQUIRE(loaded.warnings.size() == 1);
  CHECK(loaded.warnings[0].find("mystery_knob") != std::string::npos);
}

TEST_CASE("config validation rejects unusable values") {
  CHECK_THROWS_AS(parse_config(R"({"scheme":"bogus"})", "mem"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"cv_folds":1})", "mem"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"nu":0})", "mem"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"inlier_tau":-1})", "mem"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"grid_nx":1})", "mem"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"max_outer_iterations":0})", "mem"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"candidate_ks":[]})", "mem"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"likelihood":"poisson"})", "mem"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config("{", "mem"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"cv_folds":"ten"})", "mem"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("config hashes track the effective configuration") {
  const auto a = parse_config("{}", "a");
  const auto b = parse_config("{}", "b");
  CHECK(a.hash == b.hash);
  CHECK(a.hash.rfind("fnv1a:", 0) == 0);

  // Unknown keys never reach the effective configuration.
  const auto c = parse_config(R"({"mystery_knob":1})", "mem");
  CHECK(c.hash == a.hash);

  // Explicit defaults hash identically, changed values differently.
  const auto d = parse_config(R"({"cv_folds":10})", "mem");
  CHECK(d.hash == a.hash);
  const auto e = parse_config(R"({"cv_folds":5})", "mem");
  CHECK(e.hash != a.hash);
}

TEST_CASE("fnv1a matches the published test vectors") {
  CHECK(fnv1a("") == 0xCBF29CE484222325ull);
  CHECK(fnv1a("a") == 0xAF63DC4C8601EC8Cull);
  CHECK(fnv1a("foobar") == 0x85944171F73967E8ull);
}

TEST_CASE("config spec structs mirror the flat keys") {
  const LoadedConfig loaded = parse_config(
      R"({"systems":2,"exposures":40,"bead_count":120,
          "radial_k1":[1.2,0.0],"swirl":[0.0005,0.0],
          "bumps":[[1,300.0,1700.0,0.4,-0.2,150.0]],
          "noise_sigma_px":0.08,"outlier_fraction":0.02,
          "scheme":"knn_iop","cv_folds":6,"seed":3,
          "lm_max_iterations":77,"inner_constraints":true,
          "init_pose_mm":1.5})",
      "mem");
  const RunConfig& c = loaded.config;

  const PhantomSpec phantom = phantom_spec(c);
  CHECK(phantom.bead_count == 120);

  const AcquisitionSpec acq = acquisition_spec(c);
  CHECK(acq.systems == 2);
  CHECK(acq.exposures == 40);
  CHECK(acq.noise_sigma_px == 0.08);
  CHECK(acq.outlier_fraction == 0.02);
  CHECK(acq.seed == 3);

  const DistortionSpec dist = distortion_spec(c);
  REQUIRE(dist.systems.count(1));
  CHECK(dist.systems.at(1).radial_k1 == 1.2);
  CHECK(dist.systems.at(1).swirl == 0.0005);
  CHECK(dist.systems.at(1).center ==
        Vec2(acq.image_width_px / 2.0, acq.image_height_px / 2.0));
  REQUIRE(dist.systems.at(1).bumps.size() == 1);
  CHECK(dist.systems.at(1).bumps[0].amplitude == Vec2(0.4, -0.2));
  CHECK(!dist.systems.count(2));  // all-zero coefficients stay absent

  const InitNoise noise = init_noise(c);
  CHECK(noise.pose_mm == 1.5);

  const LoopSettings loop = loop_settings(c);
  CHECK(loop.cv_folds == 6);
  CHECK(loop.solver.max_iterations == 77);
  CHECK(loop.seed == 3);
  CHECK(loop.solver.use_inner_constraints);
}
