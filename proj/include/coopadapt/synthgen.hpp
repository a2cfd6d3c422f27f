#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "coopadapt/geometry.hpp"

namespace coopadapt::synthgen {

enum class IntensityModel { constant, lambertian };

// A spinning/solid-state LiDAR stand-in. Beams span `vertical_fov_deg`
// symmetrically around the sensor's x-axis; the mount pitch is baked into
// the sensor pose when frames are generated.
struct SensorModel {
  int beams = 40;
  double horizontal_fov_deg = 360.0;
  double vertical_fov_deg = 50.0;
  double azimuth_res_deg = 1.5;
  double max_range = 200.0;
  double mount_height = 1.8;
  double pitch_rad = 0.0;
  double range_noise_sigma = 0.0;  // meters; truncated at 4 sigma
  double dropout_prob = 0.0;
  IntensityModel intensity_model = IntensityModel::constant;

  void validate() const;
  std::string hash() const;  // stable hex digest of all knobs
};

struct SceneSpec {
  double road_half_x = 25.0;
  double road_half_y = 25.0;
  int n_cars = 12;
  Eigen::Vector3d car_size_mean{4.5, 1.9, 1.6};
  Eigen::Vector3d car_size_sigma{0.25, 0.10, 0.08};
  Eigen::Vector3d ego_pose{-5.0, 0.0, 0.0};            // x, y, yaw (ground level)
  std::optional<Eigen::Vector3d> infra_pose{{18.0, 0.0, M_PI}};  // x, y, yaw
  std::uint64_t seed = 0;

  void validate() const;
};

struct DomainProfile {
  std::string name = "synthetic_sim";
  SensorModel vehicle_sensor;
  SensorModel infrastructure_sensor;
  double clutter_density = 0.05;      // points per square meter on the ground
  double reflectance_offset = 0.0;    // additive intensity shift, clamped to [0,1]
  SceneSpec scene;

  void validate() const;
  std::string hash() const;
};

// Two built-in profiles realizing the sim/real gap (noise, clutter,
// reflectance, beam pattern) and the inter-agent gap (beam count, FoV,
// mount height, pitch). Throws on unknown names.
DomainProfile builtin_profile(const std::string& name);
DomainProfile load_profile_file(const std::string& path);
std::string profile_to_json_string(const DomainProfile& p);

struct ScenePlacement {
  Pose base_pose;  // ground-level agent pose
  AgentType agent_type = AgentType::vehicle;
  bool is_ego = false;
};

struct SceneSample {
  BoxSet boxes;  // world frame
  std::vector<ScenePlacement> agents;
};

// Deterministic scene draw: rejection-sampled non-overlapping cars inside the
// road extent, one ego vehicle, optional infrastructure placement.
SceneSample sample_scene(const SceneSpec& spec);

// Sensor pose = ground pose lifted by the mount height and pitched.
Pose sensor_pose_for(const Pose& base, const SensorModel& sensor);

// Casts the sensor's ray pattern against the car boxes. Returns points in
// the sensor frame with range noise and dropout applied; pure clutter/ground
// returns are generated separately at dataset level.
PointCloud raycast(const BoxSet& boxes, const SensorModel& sensor, const Pose& sensor_pose,
                   std::uint64_t seed);

// Uniform ground returns (z = 0 in world) within the road extent, filtered to
// the sensor's FoV and range, with the same range-noise model.
PointCloud ground_clutter(const SceneSpec& scene, const SensorModel& sensor,
                          const Pose& sensor_pose, double density, std::uint64_t seed);

struct DatasetManifest {
  std::string root;
  std::string domain;
  int n_frames = 0;
  std::uint64_t seed = 0;
  std::string profile_hash;
};

// Writes the on-disk dataset (manifest.json, frame_*/agent_*/{points.bin,
// pose.txt, meta.json}, frame_*/labels.json). Deterministic per (profile,
// seed). The sim profile maps to the source domain, the real one to target.
DatasetManifest generate_dataset(const DomainProfile& profile, int n_frames,
                                 const std::string& out_dir, std::uint64_t seed);

}  // namespace coopadapt::synthgen
