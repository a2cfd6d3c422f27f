#include "coopadapt/geometry.hpp"

#include <cmath>
#include <stdexcept>

namespace coopadapt {

void PointCloud::validate() const {
  for (const auto& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) ||
        !std::isfinite(p.intensity)) {
      throw std::invalid_argument("PointCloud: non-finite value");
    }
    if (p.intensity < 0.0 || p.intensity > 1.0) {
      throw std::invalid_argument("PointCloud: intensity outside [0, 1]");
    }
  }
}

Pose Pose::from_matrix(const Eigen::Matrix4d& m) {
  Pose p;
  p.matrix = m;
  p.validate();
  return p;
}

void Pose::validate() const {
  constexpr double tol = 1e-9;
  const Eigen::Matrix3d r = rotation();
  const Eigen::Matrix3d rtr = r.transpose() * r;
  if ((rtr - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) {
    throw std::invalid_argument("Pose: rotation block is not orthonormal");
  }
  if (std::abs(r.determinant() - 1.0) > tol) {
    throw std::invalid_argument("Pose: rotation determinant is not +1");
  }
  const Eigen::RowVector4d last = matrix.row(3);
  if (last(0) != 0.0 || last(1) != 0.0 || last(2) != 0.0 || last(3) != 1.0) {
    throw std::invalid_argument("Pose: last row must be (0, 0, 0, 1)");
  }
  if (!matrix.allFinite()) {
    throw std::invalid_argument("Pose: non-finite entries");
  }
}

Pose make_pose(double x, double y, double z, double yaw, double pitch, double roll) {
  const Eigen::Matrix3d r = (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) *
                             Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
                             Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
                                .toRotationMatrix();
  Pose p;
  p.matrix.setIdentity();
  p.matrix.block<3, 3>(0, 0) = r;
  p.matrix.block<3, 1>(0, 3) = Eigen::Vector3d(x, y, z);
  return p;
}

Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.matrix = a.matrix * b.matrix;
  return out;
}

Pose pose_inverse(const Pose& p) {
  p.validate();
  const Eigen::Matrix3d rt = p.rotation().transpose();
  Pose out;
  out.matrix.setIdentity();
  out.matrix.block<3, 3>(0, 0) = rt;
  out.matrix.block<3, 1>(0, 3) = -rt * p.translation();
  return out;
}

double normalize_angle(double a) {
  a = std::fmod(a, 2.0 * M_PI);
  if (a <= -M_PI) a += 2.0 * M_PI;
  if (a > M_PI) a -= 2.0 * M_PI;
  return a;
}

void Box::validate() const {
  if (!(size(0) > 0.0 && size(1) > 0.0 && size(2) > 0.0)) {
    throw std::invalid_argument("Box: size components must be positive");
  }
  if (!center.allFinite() || !std::isfinite(yaw)) {
    throw std::invalid_argument("Box: non-finite values");
  }
  if (score && (*score < 0.0 || *score > 1.0)) {
    throw std::invalid_argument("Box: score outside [0, 1]");
  }
}

std::array<Eigen::Vector2d, 4> Box::corners_bev() const {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  const double hl = 0.5 * size(0);
  const double hw = 0.5 * size(1);
  const std::array<Eigen::Vector2d, 4> local = {
      Eigen::Vector2d(hl, hw), Eigen::Vector2d(-hl, hw), Eigen::Vector2d(-hl, -hw),
      Eigen::Vector2d(hl, -hw)};
  std::array<Eigen::Vector2d, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = Eigen::Vector2d(center(0) + c * local[i](0) - s * local[i](1),
                             center(1) + s * local[i](0) + c * local[i](1));
  }
  return out;
}

std::string to_string(AgentType t) {
  return t == AgentType::vehicle ? "vehicle" : "infrastructure";
}

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

AgentType agent_type_from_string(const std::string& s) {
  if (s == "vehicle") return AgentType::vehicle;
  if (s == "infrastructure") return AgentType::infrastructure;
  throw std::invalid_argument("unknown agent type: " + s);
}

Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::invalid_argument("unknown domain: " + s);
}

int CollaborativeSample::ego_index() const {
  int idx = -1;
  for (std::size_t j = 0; j < agents.size(); ++j) {
    if (agents[j].is_ego) {
      if (idx >= 0) throw std::invalid_argument("CollaborativeSample: multiple ego agents");
      idx = static_cast<int>(j);
    }
  }
  if (idx < 0) throw std::invalid_argument("CollaborativeSample: no ego agent");
  return idx;
}

void CollaborativeSample::validate() const {
  if (agents.empty()) throw std::invalid_argument("CollaborativeSample: no agents");
  (void)ego_index();
  for (const auto& a : agents) {
    a.cloud.validate();
    a.pose.validate();
  }
  if (annotations) {
    for (const auto& b : *annotations) b.validate();
  }
}

PointCloud project_to_ego(const PointCloud& cloud, const Pose& t_agent, const Pose& t_ego) {
  t_agent.validate();
  t_ego.validate();
  const Eigen::Matrix4d t = pose_inverse(t_ego).matrix * t_agent.matrix;
  const Eigen::Matrix3d r = t.block<3, 3>(0, 0);
  const Eigen::Vector3d off = t.block<3, 1>(0, 3);
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) {
    const Eigen::Vector3d q = r * Eigen::Vector3d(p.x, p.y, p.z) + off;
    out.points.push_back({q(0), q(1), q(2), p.intensity});
  }
  return out;
}

BoxSet transform_boxes(const BoxSet& boxes, const Pose& t_from, const Pose& t_to) {
  t_from.validate();
  t_to.validate();
  const Eigen::Matrix4d t = pose_inverse(t_to).matrix * t_from.matrix;
  const Eigen::Matrix3d r = t.block<3, 3>(0, 0);
  const Eigen::Vector3d off = t.block<3, 1>(0, 3);
  const double dyaw = std::atan2(r(1, 0), r(0, 0));
  BoxSet out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) {
    Box nb = b;
    nb.center = r * b.center + off;
    nb.yaw = normalize_angle(b.yaw + dyaw);
    out.push_back(nb);
  }
  return out;
}

}  // namespace coopadapt
