#include <doctest.h>

#include <cmath>

#include "coopadapt/geometry.hpp"
#include "coopadapt/rng.hpp"
#include "helpers.hpp"

using namespace coopadapt;
using test_helpers::make_box;
using test_helpers::random_pose;

namespace {

PointCloud random_cloud(Rng& rng, std::size_t n, double span = 20.0) {
  PointCloud c;
  c.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    c.points.push_back({rng.uniform(-span, span), rng.uniform(-span, span),
                        rng.uniform(-2.0, 5.0), rng.uniform()});
  }
  return c;
}

}  // namespace

TEST_CASE("pose_inverse: identity maps to identity") {
  const Pose inv = pose_inverse(Pose::identity());
  CHECK((inv.matrix - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pose_inverse: pure translation flips sign") {
  const Pose p = make_pose(5.0, 0.0, 0.0, 0.0);
  const Pose inv = pose_inverse(p);
  CHECK(inv.translation()(0) == doctest::Approx(-5.0).epsilon(1e-12));
  CHECK(inv.translation()(1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK((inv.rotation() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("pose_inverse: compose with inverse gives identity (seeded random poses)") {
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    const Pose p = random_pose(rng);
    const Pose inv = pose_inverse(p);
    const Eigen::Matrix4d prod = compose(p, inv).matrix;
    // Oracle: direct dense 4x4 matrix inverse.
    const Eigen::Matrix4d direct = p.matrix.inverse();
    CHECK((prod - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((inv.matrix - direct).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("pose_inverse: involution within 1e-9") {
  Rng rng(12);
  for (int i = 0; i < 20; ++i) {
    const Pose p = random_pose(rng);
    const Pose back = pose_inverse(pose_inverse(p));
    CHECK((back.matrix - p.matrix).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("pose_inverse: rejects a non-rigid matrix") {
  Pose p;
  p.matrix(0, 0) = 2.0;  // scaled axis breaks orthonormality
  CHECK_THROWS_AS(pose_inverse(p), std::invalid_argument);
}

TEST_CASE("pose: rejects bad last row") {
  Pose p;
  p.matrix(3, 3) = 2.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("project_to_ego: identity posers keep the cloud") {
  Rng rng(21);
  const PointCloud c = random_cloud(rng, 32);
  const PointCloud out = project_to_ego(c, Pose::identity(), Pose::identity());
  REQUIRE(out.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(out.points[i].x == c.points[i].x);
    CHECK(out.points[i].intensity == c.points[i].intensity);
  }
}

TEST_CASE("project_to_ego: translation shifts x") {
  Rng rng(22);
  const PointCloud c = random_cloud(rng, 16);
  const PointCloud out = project_to_ego(c, make_pose(10.0, 0.0, 0.0, 0.0), Pose::identity());
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(out.points[i].x == doctest::Approx(c.points[i].x + 10.0).epsilon(1e-12));
    CHECK(out.points[i].y == doctest::Approx(c.points[i].y).epsilon(1e-12));
  }
}

TEST_CASE("project_to_ego: round trip with roles swapped recovers xyz within 1e-6") {
  Rng rng(23);
  for (int rep = 0; rep < 10; ++rep) {
    const Pose a = random_pose(rng);
    const Pose b = random_pose(rng);
    const PointCloud c = random_cloud(rng, 64);
    const PointCloud fwd = project_to_ego(c, a, b);
    const PointCloud back = project_to_ego(fwd, b, a);
    // Chained-matrix oracle for the forward leg.
    const Eigen::Matrix4d chain = b.matrix.inverse() * a.matrix;
    REQUIRE(back.size() == c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      const Eigen::Vector4d h(c.points[i].x, c.points[i].y, c.points[i].z, 1.0);
      const Eigen::Vector4d expect = chain * h;
      CHECK(std::abs(fwd.points[i].x - expect(0)) < 1e-6);
      CHECK(std::abs(fwd.points[i].y - expect(1)) < 1e-6);
      CHECK(std::abs(fwd.points[i].z - expect(2)) < 1e-6);
      CHECK(std::abs(back.points[i].x - c.points[i].x) < 1e-6);
      CHECK(std::abs(back.points[i].y - c.points[i].y) < 1e-6);
      CHECK(std::abs(back.points[i].z - c.points[i].z) < 1e-6);
      CHECK(back.points[i].intensity == c.points[i].intensity);
    }
  }
}

TEST_CASE("project_to_ego: pairwise distances preserved") {
  Rng rng(24);
  const Pose a = random_pose(rng);
  const Pose b = random_pose(rng);
  const PointCloud c = random_cloud(rng, 20);
  const PointCloud out = project_to_ego(c, a, b);
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (std::size_t j = i + 1; j < c.size(); ++j) {
      const double d0 = std::hypot(c.points[i].x - c.points[j].x, c.points[i].y - c.points[j].y,
                                   c.points[i].z - c.points[j].z);
      const double d1 = std::hypot(out.points[i].x - out.points[j].x,
                                   out.points[i].y - out.points[j].y,
                                   out.points[i].z - out.points[j].z);
      CHECK(std::abs(d0 - d1) < 1e-6);
    }
  }
}

TEST_CASE("transform_boxes: identity keeps boxes") {
  const BoxSet boxes = {make_box(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.3)};
  const BoxSet out = transform_boxes(boxes, Pose::identity(), Pose::identity());
  CHECK(out[0].center == boxes[0].center);
  CHECK(out[0].yaw == boxes[0].yaw);
  CHECK(out[0].size == boxes[0].size);
}

TEST_CASE("transform_boxes: yaw-90 world-to-ego rotation shifts yaw by -pi/2") {
  const BoxSet boxes = {make_box(3.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.4)};
  const Pose ego = make_pose(0.0, 0.0, 0.0, M_PI / 2.0);
  const BoxSet out = transform_boxes(boxes, Pose::identity(), ego);
  CHECK(out[0].yaw == doctest::Approx(0.4 - M_PI / 2.0).epsilon(1e-12));
  CHECK(out[0].center(0) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(out[0].center(1) == doctest::Approx(-3.0).epsilon(1e-9));
}

TEST_CASE("transform_boxes: commutes with corner extraction for planar poses") {
  Rng rng(31);
  for (int rep = 0; rep < 25; ++rep) {
    const Pose from = make_pose(rng.uniform(-10, 10), rng.uniform(-10, 10), 0.0,
                                rng.uniform(-M_PI, M_PI));
    const Pose to = make_pose(rng.uniform(-10, 10), rng.uniform(-10, 10), 0.0,
                              rng.uniform(-M_PI, M_PI));
    const Box b = make_box(rng.uniform(-5, 5), rng.uniform(-5, 5), 0.0, rng.uniform(2, 5),
                           rng.uniform(1, 3), 1.5, rng.uniform(-M_PI, M_PI));
    const Box tb = transform_boxes({b}, from, to)[0];
    const auto corners_after = tb.corners_bev();
    const Eigen::Matrix4d chain = to.matrix.inverse() * from.matrix;
    const auto corners_before = b.corners_bev();
    for (int k = 0; k < 4; ++k) {
      const Eigen::Vector4d h(corners_before[static_cast<std::size_t>(k)](0),
                              corners_before[static_cast<std::size_t>(k)](1), 0.0, 1.0);
      const Eigen::Vector4d moved = chain * h;
      CHECK(std::abs(moved(0) - corners_after[static_cast<std::size_t>(k)](0)) < 1e-6);
      CHECK(std::abs(moved(1) - corners_after[static_cast<std::size_t>(k)](1)) < 1e-6);
    }
  }
}

TEST_CASE("collaborative sample: exactly one ego is enforced") {
  CollaborativeSample s;
  s.agents.resize(2);
  CHECK_THROWS_AS(s.ego_index(), std::invalid_argument);
  s.agents[0].is_ego = true;
  CHECK(s.ego_index() == 0);
  s.agents[1].is_ego = true;
  CHECK_THROWS_AS(s.ego_index(), std::invalid_argument);
}

TEST_CASE("point cloud invariants") {
  PointCloud c;
  c.points.push_back({0.0, 0.0, 0.0, 1.5});
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.points[0].intensity = 0.5;
  CHECK_NOTHROW(c.validate());
  c.points[0].x = std::nan("");
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("normalize_angle wraps to (-pi, pi]") {
  CHECK(normalize_angle(M_PI) == doctest::Approx(M_PI));
  CHECK(normalize_angle(-M_PI) == doctest::Approx(M_PI));
  CHECK(normalize_angle(3.0 * M_PI / 2.0) == doctest::Approx(-M_PI / 2.0));
  CHECK(normalize_angle(0.1) == doctest::Approx(0.1));
}
