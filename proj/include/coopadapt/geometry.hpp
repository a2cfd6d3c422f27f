#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace coopadapt {

// One LiDAR return: xyz in meters, intensity in [0, 1].
struct Point4 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double intensity = 0.0;
};

struct PointCloud {
  std::vector<Point4> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  // Finite coordinates, intensity in [0, 1]. Throws std::invalid_argument.
  void validate() const;
};

// Rigid agent-to-world transform stored as a full 4x4 homogeneous matrix.
struct Pose {
  Eigen::Matrix4d matrix = Eigen::Matrix4d::Identity();

  static Pose identity() { return Pose{}; }
  static Pose from_matrix(const Eigen::Matrix4d& m);

  Eigen::Matrix3d rotation() const { return matrix.block<3, 3>(0, 0); }
  Eigen::Vector3d translation() const { return matrix.block<3, 1>(0, 3); }

  // SE(3) membership: R'R = I and det(R) = 1 within 1e-9, last row (0,0,0,1).
  void validate() const;
};

// yaw about z, then pitch about y, then roll about x (R = Rz * Ry * Rx).
Pose make_pose(double x, double y, double z, double yaw, double pitch = 0.0, double roll = 0.0);

Pose compose(const Pose& a, const Pose& b);
Pose pose_inverse(const Pose& p);

// Oriented 3D box: center xyz, size (l, w, h) > 0, yaw CCW from +x in the
// ground plane, normalized to (-pi, pi]. Score is set on detections only.
struct Box {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Zero();  // l, w, h
  double yaw = 0.0;
  std::optional<double> score;

  void validate() const;

  // BEV footprint corners, CCW order.
  std::array<Eigen::Vector2d, 4> corners_bev() const;
};

using BoxSet = std::vector<Box>;

double normalize_angle(double a);  // wrap to (-pi, pi]

enum class AgentType { vehicle, infrastructure };
enum class Domain { source, target };

std::string to_string(AgentType t);
std::string to_string(Domain d);
AgentType agent_type_from_string(const std::string& s);
Domain domain_from_string(const std::string& s);

struct AgentFrame {
  PointCloud cloud;
  Pose pose;  // agent/sensor to world
  AgentType agent_type = AgentType::vehicle;
  bool is_ego = false;
};

// One collaborative frame. Exactly one agent must be the ego.
struct CollaborativeSample {
  std::vector<AgentFrame> agents;
  std::optional<BoxSet> annotations;  // world frame
  Domain domain = Domain::source;

  int ego_index() const;  // throws if not exactly one ego
  void validate() const;
};

// Ego projection: each point p -> T_ego^-1 * T_agent * p. Intensity passes
// through untouched.
PointCloud project_to_ego(const PointCloud& cloud, const Pose& t_agent, const Pose& t_ego);

// Re-express boxes given in the `from` frame in the `to` frame. Centers move
// as points; yaw shifts by the planar rotation of the relative transform;
// sizes are unchanged.
BoxSet transform_boxes(const BoxSet& boxes, const Pose& t_from, const Pose& t_to);

}  // namespace coopadapt
