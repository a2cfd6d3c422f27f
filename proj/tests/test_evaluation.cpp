#include <doctest.h>

#include <cmath>

#include "coopadapt/evaluation.hpp"
#include "coopadapt/rng.hpp"
#include "helpers.hpp"

using namespace coopadapt;
namespace ev = coopadapt::evaluation;
using test_helpers::iou_oracle;
using test_helpers::make_box;

TEST_CASE("bev_iou: identical boxes give 1, disjoint give 0") {
  const Box a = make_box(0, 0, 0, 4, 2, 1.5, 0.7);
  CHECK(ev::bev_iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  const Box far = make_box(100, 100, 0, 4, 2, 1.5, 0.0);
  CHECK(ev::bev_iou(a, far) == 0.0);
}

TEST_CASE("bev_iou: unit square vs its 45-degree rotation") {
  // The intersection is a regular octagon with area 2(sqrt(2)-1); the IoU
  // works out to exactly 1/sqrt(2). Confirmed against the clipping oracle.
  const Box a = make_box(0, 0, 0, 1, 1, 1, 0.0);
  const Box b = make_box(0, 0, 0, 1, 1, 1, M_PI / 4.0);
  const double expected = 1.0 / std::sqrt(2.0);
  CHECK(ev::bev_iou(a, b) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(iou_oracle(a, b) == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("bev_iou: matches the candidate-vertex oracle on 1000 seeded pairs") {
  Rng rng(404);
  for (int i = 0; i < 1000; ++i) {
    const Box a = make_box(rng.uniform(-5, 5), rng.uniform(-5, 5), 0, rng.uniform(1, 6),
                           rng.uniform(1, 4), 1.5, rng.uniform(-M_PI, M_PI));
    const Box b = make_box(rng.uniform(-5, 5), rng.uniform(-5, 5), 0, rng.uniform(1, 6),
                           rng.uniform(1, 4), 1.5, rng.uniform(-M_PI, M_PI));
    const double lib = ev::bev_iou(a, b);
    const double ora = iou_oracle(a, b);
    CHECK(std::abs(lib - ora) < 1e-9);
  }
}

TEST_CASE("bev_iou: symmetry, self-IoU, and pi-rotation invariance") {
  Rng rng(405);
  for (int i = 0; i < 200; ++i) {
    const Box a = make_box(rng.uniform(-3, 3), rng.uniform(-3, 3), 0, rng.uniform(1, 5),
                           rng.uniform(1, 3), 1.5, rng.uniform(-M_PI, M_PI));
    Box b = make_box(rng.uniform(-3, 3), rng.uniform(-3, 3), 0, rng.uniform(1, 5),
                     rng.uniform(1, 3), 1.5, rng.uniform(-M_PI, M_PI));
    CHECK(std::abs(ev::bev_iou(a, b) - ev::bev_iou(b, a)) < 1e-9);
    CHECK(std::abs(ev::bev_iou(a, a) - 1.0) < 1e-9);
    Box b_pi = b;
    b_pi.yaw = normalize_angle(b.yaw + M_PI);
    CHECK(std::abs(ev::bev_iou(a, b) - ev::bev_iou(a, b_pi)) < 1e-9);
  }
}

TEST_CASE("bev_iou: degenerate box raises") {
  const Box a = make_box(0, 0, 0, 4, 2, 1.5, 0);
  Box zero = a;
  zero.size(1) = 0.0;
  CHECK_THROWS_AS(ev::bev_iou(a, zero), std::invalid_argument);
}

TEST_CASE("match_frame: perfect predictions are all TP") {
  const BoxSet gts = {make_box(0, 0, 0, 4, 2, 1.5, 0.2), make_box(8, 3, 0, 4, 2, 1.5, -0.5)};
  BoxSet preds = gts;
  preds[0].score = 0.9;
  preds[1].score = 0.8;
  const auto m = ev::match_frame(preds, gts, 0.99);
  CHECK(m.n_gt == 2);
  for (const auto& [score, tp] : m.preds) CHECK(tp);
}

TEST_CASE("match_frame: zero predictions") {
  const BoxSet gts = {make_box(0, 0, 0, 4, 2, 1.5, 0.0)};
  const auto m = ev::match_frame({}, gts, 0.5);
  CHECK(m.preds.empty());
  CHECK(m.n_gt == 1);
}

TEST_CASE("match_frame: one gt cannot match two predictions") {
  const BoxSet gts = {make_box(0, 0, 0, 4, 2, 1.5, 0.0)};
  BoxSet preds = {make_box(0.1, 0, 0, 4, 2, 1.5, 0.0, 0.9),
                  make_box(-0.1, 0, 0, 4, 2, 1.5, 0.0, 0.8)};
  const auto m = ev::match_frame(preds, gts, 0.5);
  REQUIRE(m.preds.size() == 2);
  CHECK(m.preds[0].first == 0.9);
  CHECK(m.preds[0].second);
  CHECK_FALSE(m.preds[1].second);
}

TEST_CASE("average_precision: trivial extremes") {
  // Perfect detector.
  ev::MatchResult perfect;
  perfect.n_gt = 3;
  perfect.preds = {{0.9, true}, {0.8, true}, {0.7, true}};
  CHECK(ev::average_precision({perfect}) == doctest::Approx(1.0));

  // No predictions but ground truth present.
  ev::MatchResult none;
  none.n_gt = 2;
  CHECK(ev::average_precision({none}) == 0.0);

  // No ground truth at all -> undefined.
  ev::MatchResult empty;
  empty.n_gt = 0;
  CHECK_THROWS_AS(ev::average_precision({empty}), std::invalid_argument);
}

TEST_CASE("average_precision: 3 preds over 2 gts, TP/FP/TP pattern") {
  ev::MatchResult frame;
  frame.n_gt = 2;
  frame.preds = {{0.9, true}, {0.8, false}, {0.7, true}};
  // Brute-force envelope oracle: recalls (0.5, 0.5, 1.0), envelope precisions
  // at the recall steps are 1.0 and 2/3.
  CHECK(ev::average_precision({frame}) == doctest::Approx(0.5 + 0.5 * (2.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("average_precision: invariant under monotone score rescaling") {
  Rng rng(406);
  std::vector<ev::MatchResult> frames(3);
  for (auto& f : frames) {
    f.n_gt = 4;
    for (int i = 0; i < 5; ++i) f.preds.emplace_back(rng.uniform(), rng.uniform() < 0.5);
  }
  const double base = ev::average_precision(frames);
  std::vector<ev::MatchResult> scaled = frames;
  for (auto& f : scaled) {
    for (auto& [s, tp] : f.preds) s = 0.1 + 0.5 * std::tanh(3.0 * s);  // strictly monotone
  }
  CHECK(ev::average_precision(scaled) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("average_precision: pooled across frames, order independent") {
  ev::MatchResult f1, f2;
  f1.n_gt = 1;
  f1.preds = {{0.9, true}, {0.3, false}};
  f2.n_gt = 2;
  f2.preds = {{0.8, false}, {0.6, true}};
  const double a = ev::average_precision({f1, f2});
  const double b = ev::average_precision({f2, f1});
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}
