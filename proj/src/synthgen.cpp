#include "coopadapt/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "coopadapt/evaluation.hpp"
#include "coopadapt/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace coopadapt::synthgen {

namespace {

constexpr double kDegToRad = M_PI / 180.0;

std::string hex_digest(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

json sensor_to_json(const SensorModel& s) {
  return json{{"beams", s.beams},
              {"horizontal_fov_deg", s.horizontal_fov_deg},
              {"vertical_fov_deg", s.vertical_fov_deg},
              {"azimuth_res_deg", s.azimuth_res_deg},
              {"max_range", s.max_range},
              {"mount_height", s.mount_height},
              {"pitch_rad", s.pitch_rad},
              {"range_noise_sigma", s.range_noise_sigma},
              {"dropout_prob", s.dropout_prob},
              {"intensity_model", s.intensity_model == IntensityModel::constant ? "constant"
                                                                                : "lambertian"}};
}

SensorModel sensor_from_json(const json& j) {
  SensorModel s;
  s.beams = j.at("beams").get<int>();
  s.horizontal_fov_deg = j.at("horizontal_fov_deg").get<double>();
  s.vertical_fov_deg = j.at("vertical_fov_deg").get<double>();
  s.azimuth_res_deg = j.at("azimuth_res_deg").get<double>();
  s.max_range = j.at("max_range").get<double>();
  s.mount_height = j.at("mount_height").get<double>();
  s.pitch_rad = j.at("pitch_rad").get<double>();
  s.range_noise_sigma = j.at("range_noise_sigma").get<double>();
  s.dropout_prob = j.at("dropout_prob").get<double>();
  const std::string im = j.at("intensity_model").get<std::string>();
  if (im == "constant") {
    s.intensity_model = IntensityModel::constant;
  } else if (im == "lambertian") {
    s.intensity_model = IntensityModel::lambertian;
  } else {
    throw std::invalid_argument("unknown intensity model: " + im);
  }
  s.validate();
  return s;
}

json scene_to_json(const SceneSpec& s) {
  json j{{"road_half_x", s.road_half_x},
         {"road_half_y", s.road_half_y},
         {"n_cars", s.n_cars},
         {"car_size_mean", {s.car_size_mean(0), s.car_size_mean(1), s.car_size_mean(2)}},
         {"car_size_sigma", {s.car_size_sigma(0), s.car_size_sigma(1), s.car_size_sigma(2)}},
         {"ego_pose", {s.ego_pose(0), s.ego_pose(1), s.ego_pose(2)}}};
  if (s.infra_pose) {
    j["infra_pose"] = {(*s.infra_pose)(0), (*s.infra_pose)(1), (*s.infra_pose)(2)};
  } else {
    j["infra_pose"] = nullptr;
  }
  return j;
}

SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.road_half_x = j.at("road_half_x").get<double>();
  s.road_half_y = j.at("road_half_y").get<double>();
  s.n_cars = j.at("n_cars").get<int>();
  for (int i = 0; i < 3; ++i) {
    s.car_size_mean(i) = j.at("car_size_mean").at(static_cast<std::size_t>(i)).get<double>();
    s.car_size_sigma(i) = j.at("car_size_sigma").at(static_cast<std::size_t>(i)).get<double>();
    s.ego_pose(i) = j.at("ego_pose").at(static_cast<std::size_t>(i)).get<double>();
  }
  if (j.contains("infra_pose") && !j.at("infra_pose").is_null()) {
    Eigen::Vector3d ip;
    for (int i = 0; i < 3; ++i) ip(i) = j.at("infra_pose").at(static_cast<std::size_t>(i)).get<double>();
    s.infra_pose = ip;
  } else {
    s.infra_pose.reset();
  }
  s.validate();
  return s;
}

json profile_to_json(const DomainProfile& p) {
  return json{{"name", p.name},
              {"vehicle_sensor", sensor_to_json(p.vehicle_sensor)},
              {"infrastructure_sensor", sensor_to_json(p.infrastructure_sensor)},
              {"clutter_density", p.clutter_density},
              {"reflectance_offset", p.reflectance_offset},
              {"scene", scene_to_json(p.scene)}};
}

DomainProfile profile_from_json(const json& j) {
  DomainProfile p;
  p.name = j.at("name").get<std::string>();
  p.vehicle_sensor = sensor_from_json(j.at("vehicle_sensor"));
  p.infrastructure_sensor = sensor_from_json(j.at("infrastructure_sensor"));
  p.clutter_density = j.at("clutter_density").get<double>();
  p.reflectance_offset = j.at("reflectance_offset").get<double>();
  p.scene = scene_from_json(j.at("scene"));
  p.validate();
  return p;
}

struct RayHit {
  double range = 0.0;
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();  // world frame
};

// Slab test against an upright oriented box. Ray given in world frame.
std::optional<RayHit> intersect_box(const Eigen::Vector3d& origin, const Eigen::Vector3d& dir,
                                    const Box& box) {
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  // World -> box local (center at origin, axes along the box).
  const Eigen::Vector3d rel = origin - box.center;
  const Eigen::Vector3d o(c * rel(0) + s * rel(1), -s * rel(0) + c * rel(1), rel(2));
  const Eigen::Vector3d d(c * dir(0) + s * dir(1), -s * dir(0) + c * dir(1), dir(2));
  const Eigen::Vector3d half = 0.5 * box.size;

  double t_near = 0.0;
  double t_far = std::numeric_limits<double>::infinity();
  int near_axis = -1;
  double near_sign = 1.0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d(a)) < 1e-12) {
      if (std::abs(o(a)) > half(a)) return std::nullopt;
      continue;
    }
    double t0 = (-half(a) - o(a)) / d(a);
    double t1 = (half(a) - o(a)) / d(a);
    double sign = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      sign = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      near_axis = a;
      near_sign = sign;
    }
    t_far = std::min(t_far, t1);
    if (t_near > t_far) return std::nullopt;
  }
  if (near_axis < 0 || t_near <= 1e-9) return std::nullopt;  // origin inside or behind
  Eigen::Vector3d local_normal = Eigen::Vector3d::Zero();
  local_normal(near_axis) = near_sign;
  RayHit hit;
  hit.range = t_near;
  hit.normal = Eigen::Vector3d(c * local_normal(0) - s * local_normal(1),
                               s * local_normal(0) + c * local_normal(1), local_normal(2));
  return hit;
}

double intensity_for(const SensorModel& sensor, const Eigen::Vector3d& dir,
                     const Eigen::Vector3d& normal) {
  if (sensor.intensity_model == IntensityModel::constant) return 0.5;
  return std::clamp(std::abs(dir.dot(normal)), 0.0, 1.0);
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << content;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

void SensorModel::validate() const {
  if (beams < 1) throw std::invalid_argument("SensorModel: beams must be >= 1");
  if (!(horizontal_fov_deg > 0.0 && horizontal_fov_deg <= 360.0)) {
    throw std::invalid_argument("SensorModel: horizontal fov must be in (0, 360]");
  }
  if (!(vertical_fov_deg >= 0.0)) throw std::invalid_argument("SensorModel: bad vertical fov");
  if (!(azimuth_res_deg > 0.0)) throw std::invalid_argument("SensorModel: bad azimuth resolution");
  if (!(max_range > 0.0)) throw std::invalid_argument("SensorModel: max_range must be positive");
  if (range_noise_sigma < 0.0) throw std::invalid_argument("SensorModel: negative noise sigma");
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) {
    throw std::invalid_argument("SensorModel: dropout_prob must be in [0, 1)");
  }
}

std::string SensorModel::hash() const { return hex_digest(hash_str(sensor_to_json(*this).dump())); }

void SceneSpec::validate() const {
  if (road_half_x <= 0.0 || road_half_y <= 0.0) {
    throw std::invalid_argument("SceneSpec: road extent must be positive");
  }
  if (n_cars < 0) throw std::invalid_argument("SceneSpec: n_cars must be >= 0");
  for (int i = 0; i < 3; ++i) {
    if (car_size_mean(i) <= 0.0 || car_size_sigma(i) < 0.0) {
      throw std::invalid_argument("SceneSpec: bad car size distribution");
    }
  }
}

void DomainProfile::validate() const {
  vehicle_sensor.validate();
  infrastructure_sensor.validate();
  scene.validate();
  if (clutter_density < 0.0) throw std::invalid_argument("DomainProfile: negative clutter density");
}

std::string DomainProfile::hash() const { return hex_digest(hash_str(profile_to_json(*this).dump())); }

DomainProfile builtin_profile(const std::string& name) {
  DomainProfile p;
  p.scene = SceneSpec{};
  if (name == "synthetic_sim") {
    p.name = name;
    // Simulated fleet: uniform clean mechanical LiDARs on both agent types.
    p.vehicle_sensor = SensorModel{.beams = 32,
                                   .horizontal_fov_deg = 360.0,
                                   .vertical_fov_deg = 50.0,
                                   .azimuth_res_deg = 1.5,
                                   .max_range = 200.0,
                                   .mount_height = 1.8,
                                   .pitch_rad = 0.0,
                                   .range_noise_sigma = 0.01,
                                   .dropout_prob = 0.02,
                                   .intensity_model = IntensityModel::constant};
    p.infrastructure_sensor = SensorModel{.beams = 32,
                                          .horizontal_fov_deg = 360.0,
                                          .vertical_fov_deg = 50.0,
                                          .azimuth_res_deg = 1.5,
                                          .max_range = 200.0,
                                          .mount_height = 6.0,
                                          .pitch_rad = -15.0 * kDegToRad,
                                          .range_noise_sigma = 0.01,
                                          .dropout_prob = 0.02,
                                          .intensity_model = IntensityModel::constant};
    p.clutter_density = 0.05;
    p.reflectance_offset = 0.0;
  } else if (name == "synthetic_real") {
    p.name = name;
    // Heterogeneous field deployment: 40-beam mechanical vehicle LiDAR and a
    // dense 300-beam narrow-FoV solid-state unit on the roadside pole.
    p.vehicle_sensor = SensorModel{.beams = 40,
                                   .horizontal_fov_deg = 360.0,
                                   .vertical_fov_deg = 50.0,
                                   .azimuth_res_deg = 1.5,
                                   .max_range = 200.0,
                                   .mount_height = 1.8,
                                   .pitch_rad = 0.0,
                                   .range_noise_sigma = 0.06,
                                   .dropout_prob = 0.10,
                                   .intensity_model = IntensityModel::lambertian};
    p.infrastructure_sensor = SensorModel{.beams = 300,
                                          .horizontal_fov_deg = 100.0,
                                          .vertical_fov_deg = 20.0,
                                          .azimuth_res_deg = 1.5,
                                          .max_range = 280.0,
                                          .mount_height = 6.0,
                                          .pitch_rad = -15.0 * kDegToRad,
                                          .range_noise_sigma = 0.04,
                                          .dropout_prob = 0.05,
                                          .intensity_model = IntensityModel::lambertian};
    p.clutter_density = 0.30;
    p.reflectance_offset = -0.25;
  } else {
    throw std::invalid_argument("unknown built-in profile: " + name);
  }
  return p;
}

DomainProfile load_profile_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open profile file: " + path);
  json j;
  is >> j;
  return profile_from_json(j);
}

std::string profile_to_json_string(const DomainProfile& p) { return profile_to_json(p).dump(2); }

SceneSample sample_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, "scene_sample"));
  SceneSample out;

  out.agents.push_back({make_pose(spec.ego_pose(0), spec.ego_pose(1), 0.0, spec.ego_pose(2)),
                        AgentType::vehicle, true});
  if (spec.infra_pose) {
    out.agents.push_back(
        {make_pose((*spec.infra_pose)(0), (*spec.infra_pose)(1), 0.0, (*spec.infra_pose)(2)),
         AgentType::infrastructure, false});
  }

  // Keep a clearance footprint around each agent so cars never swallow a
  // sensor origin.
  BoxSet blockers;
  for (const auto& a : out.agents) {
    Box blk;
    blk.center = Eigen::Vector3d(a.base_pose.translation()(0), a.base_pose.translation()(1),
                                 spec.car_size_mean(2) / 2.0);
    blk.size = Eigen::Vector3d(6.0, 4.0, spec.car_size_mean(2));
    blk.yaw = 0.0;
    blockers.push_back(blk);
  }

  constexpr int kMaxAttemptsPerCar = 200;
  for (int i = 0; i < spec.n_cars; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttemptsPerCar && !placed; ++attempt) {
      Box car;
      car.size = Eigen::Vector3d(
          std::max(1.0, spec.car_size_mean(0) + spec.car_size_sigma(0) * rng.normal()),
          std::max(0.8, spec.car_size_mean(1) + spec.car_size_sigma(1) * rng.normal()),
          std::max(0.8, spec.car_size_mean(2) + spec.car_size_sigma(2) * rng.normal()));
      const double margin = 0.5 * std::hypot(car.size(0), car.size(1));
      car.center = Eigen::Vector3d(rng.uniform(-spec.road_half_x + margin, spec.road_half_x - margin),
                                   rng.uniform(-spec.road_half_y + margin, spec.road_half_y - margin),
                                   car.size(2) / 2.0);
      car.yaw = rng.uniform(-M_PI, M_PI);

      bool overlaps = false;
      for (const auto& other : out.boxes) {
        if (evaluation::bev_iou(car, other) > 0.0) {
          overlaps = true;
          break;
        }
      }
      for (const auto& blk : blockers) {
        if (!overlaps && evaluation::bev_iou(car, blk) > 0.0) overlaps = true;
      }
      if (!overlaps) {
        out.boxes.push_back(car);
        placed = true;
      }
    }
    if (!placed) {
      throw std::runtime_error(
          "sample_scene: could not place car " + std::to_string(i) + " after " +
          std::to_string(kMaxAttemptsPerCar) +
          " attempts; the non-overlap constraint cannot be satisfied at this density");
    }
  }
  return out;
}

Pose sensor_pose_for(const Pose& base, const SensorModel& sensor) {
  // pitch_rad uses the aviation sign (positive tilts the view up); the
  // rotation about +y needs the opposite sign to realize that.
  return compose(base, make_pose(0.0, 0.0, sensor.mount_height, 0.0, -sensor.pitch_rad));
}

PointCloud raycast(const BoxSet& boxes, const SensorModel& sensor, const Pose& sensor_pose,
                   std::uint64_t seed) {
  sensor.validate();
  sensor_pose.validate();
  Rng rng(derive_seed(seed, "raycast"));

  const Eigen::Matrix3d r = sensor_pose.rotation();
  const Eigen::Vector3d origin = sensor_pose.translation();

  const double hfov = sensor.horizontal_fov_deg * kDegToRad;
  const double vfov = sensor.vertical_fov_deg * kDegToRad;
  const int n_az = std::max(1, static_cast<int>(std::lround(sensor.horizontal_fov_deg /
                                                            sensor.azimuth_res_deg)));

  PointCloud cloud;
  for (int b = 0; b < sensor.beams; ++b) {
    const double elev =
        sensor.beams == 1 ? 0.0 : -vfov / 2.0 + vfov * static_cast<double>(b) /
                                                    static_cast<double>(sensor.beams - 1);
    const double ce = std::cos(elev);
    const double se = std::sin(elev);
    for (int a = 0; a < n_az; ++a) {
      const double az = -hfov / 2.0 + hfov * (static_cast<double>(a) + 0.5) /
                                          static_cast<double>(n_az);
      const Eigen::Vector3d dir_sensor(ce * std::cos(az), ce * std::sin(az), se);
      const Eigen::Vector3d dir_world = r * dir_sensor;

      double best_range = std::numeric_limits<double>::infinity();
      Eigen::Vector3d best_normal = Eigen::Vector3d::UnitZ();
      for (const auto& box : boxes) {
        const auto hit = intersect_box(origin, dir_world, box);
        if (hit && hit->range < best_range) {
          best_range = hit->range;
          best_normal = hit->normal;
        }
      }
      if (!std::isfinite(best_range) || best_range > sensor.max_range) continue;

      // Noise and dropout draws happen for every hit in scan order, so the
      // same seed yields paired draws across different sigma values.
      const double g = rng.normal();
      const double u = rng.uniform();
      const double noise = std::clamp(sensor.range_noise_sigma * g, -4.0 * sensor.range_noise_sigma,
                                      4.0 * sensor.range_noise_sigma);
      const double noisy_range = best_range + noise;
      if (u < sensor.dropout_prob) continue;
      if (noisy_range <= 0.0 || noisy_range > sensor.max_range) continue;

      const Eigen::Vector3d p = dir_sensor * noisy_range;
      cloud.points.push_back({p(0), p(1), p(2), intensity_for(sensor, dir_world, best_normal)});
    }
  }
  return cloud;
}

PointCloud ground_clutter(const SceneSpec& scene, const SensorModel& sensor,
                          const Pose& sensor_pose, double density, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "clutter"));
  const double area = 4.0 * scene.road_half_x * scene.road_half_y;
  const int n = static_cast<int>(std::floor(density * area));

  const Eigen::Matrix3d r_inv = sensor_pose.rotation().transpose();
  const Eigen::Vector3d origin = sensor_pose.translation();
  const double half_hfov = sensor.horizontal_fov_deg * kDegToRad / 2.0;
  const double half_vfov = sensor.vertical_fov_deg * kDegToRad / 2.0;

  PointCloud cloud;
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d world(rng.uniform(-scene.road_half_x, scene.road_half_x),
                                rng.uniform(-scene.road_half_y, scene.road_half_y), 0.0);
    const double g = rng.normal();
    const Eigen::Vector3d in_sensor = r_inv * (world - origin);
    const double range = in_sensor.norm();
    if (range <= 1e-6 || range > sensor.max_range) continue;
    const double az = std::atan2(in_sensor(1), in_sensor(0));
    if (std::abs(az) > half_hfov) continue;
    const double elev = std::asin(std::clamp(in_sensor(2) / range, -1.0, 1.0));
    if (std::abs(elev) > half_vfov) continue;

    const double noise = std::clamp(sensor.range_noise_sigma * g, -4.0 * sensor.range_noise_sigma,
                                    4.0 * sensor.range_noise_sigma);
    const double scale = std::max(0.0, (range + noise) / range);
    const Eigen::Vector3d p = in_sensor * scale;
    const Eigen::Vector3d dir_world = (world - origin) / range;
    cloud.points.push_back(
        {p(0), p(1), p(2), intensity_for(sensor, dir_world, Eigen::Vector3d::UnitZ())});
  }
  return cloud;
}

DatasetManifest generate_dataset(const DomainProfile& profile, int n_frames,
                                 const std::string& out_dir, std::uint64_t seed) {
  profile.validate();
  if (n_frames < 0) throw std::invalid_argument("generate_dataset: n_frames must be >= 0");

  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw std::runtime_error("cannot create dataset dir: " + root.string());

  const std::string domain = profile.name == "synthetic_sim" ? "source" : "target";

  for (int f = 0; f < n_frames; ++f) {
    SceneSpec spec = profile.scene;
    spec.seed = derive_seed(seed, "frame", f);
    const SceneSample scene = sample_scene(spec);

    const fs::path frame_dir = root / ("frame_" + std::to_string(f));
    fs::create_directories(frame_dir, ec);
    if (ec) throw std::runtime_error("cannot create frame dir: " + frame_dir.string());

    for (std::size_t j = 0; j < scene.agents.size(); ++j) {
      const auto& placement = scene.agents[j];
      const SensorModel& sensor = placement.agent_type == AgentType::vehicle
                                      ? profile.vehicle_sensor
                                      : profile.infrastructure_sensor;
      const Pose spose = sensor_pose_for(placement.base_pose, sensor);

      PointCloud cloud = raycast(scene.boxes, sensor, spose, derive_seed(seed, "rays", f, j));
      PointCloud clutter = ground_clutter(profile.scene, sensor, spose, profile.clutter_density,
                                          derive_seed(seed, "ground", f, j));
      cloud.points.insert(cloud.points.end(), clutter.points.begin(), clutter.points.end());
      for (auto& p : cloud.points) {
        p.intensity = std::clamp(p.intensity + profile.reflectance_offset, 0.0, 1.0);
      }

      const fs::path agent_dir = frame_dir / ("agent_" + std::to_string(j));
      fs::create_directories(agent_dir, ec);
      if (ec) throw std::runtime_error("cannot create agent dir: " + agent_dir.string());

      // points.bin: little-endian float32 x, y, z, intensity quadruples.
      {
        std::ofstream os(agent_dir / "points.bin", std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + (agent_dir / "points.bin").string());
        for (const auto& p : cloud.points) {
          const float vals[4] = {static_cast<float>(p.x), static_cast<float>(p.y),
                                 static_cast<float>(p.z), static_cast<float>(p.intensity)};
          os.write(reinterpret_cast<const char*>(vals), sizeof(vals));
        }
        if (!os) throw std::runtime_error("write failed: " + (agent_dir / "points.bin").string());
      }

      // pose.txt: 16 whitespace-separated reals, row-major 4x4.
      {
        std::ostringstream ps;
        ps.precision(17);
        for (int rr = 0; rr < 4; ++rr) {
          for (int cc = 0; cc < 4; ++cc) {
            if (rr != 0 || cc != 0) ps << " ";
            ps << spose.matrix(rr, cc);
          }
        }
        ps << "\n";
        write_text_file(agent_dir / "pose.txt", ps.str());
      }

      {
        json meta{{"agent_type", to_string(placement.agent_type)},
                  {"is_ego", placement.is_ego},
                  {"sensor_hash", sensor.hash()}};
        write_text_file(agent_dir / "meta.json", meta.dump(2) + "\n");
      }
    }

    json labels = json::array();
    for (const auto& b : scene.boxes) {
      labels.push_back(json{{"cx", b.center(0)},
                            {"cy", b.center(1)},
                            {"cz", b.center(2)},
                            {"l", b.size(0)},
                            {"w", b.size(1)},
                            {"h", b.size(2)},
                            {"yaw", b.yaw}});
    }
    write_text_file(frame_dir / "labels.json", labels.dump(2) + "\n");
  }

  DatasetManifest manifest;
  manifest.root = root.string();
  manifest.domain = domain;
  manifest.n_frames = n_frames;
  manifest.seed = seed;
  manifest.profile_hash = profile.hash();

  json mj{{"domain", domain},
          {"n_frames", n_frames},
          {"seed", seed},
          {"profile_hash", manifest.profile_hash},
          {"profile", json::parse(profile_to_json_string(profile))}};
  write_text_file(root / "manifest.json", mj.dump(2) + "\n");
  return manifest;
}

}  // namespace coopadapt::synthgen
