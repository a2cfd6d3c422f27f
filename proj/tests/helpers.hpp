#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <doctest.h>

#include "coopadapt/autograd.hpp"
#include "coopadapt/evaluation.hpp"
#include "coopadapt/geometry.hpp"
#include "coopadapt/rng.hpp"
#include "oracles.hpp"

namespace test_helpers {

using coopadapt::Box;
using coopadapt::Pose;
using coopadapt::Rng;
using test_oracles::iou_oracle;
using test_oracles::make_box;
namespace ad = coopadapt::ad;

// Central finite differences against analytic gradients. `loss` must rebuild
// the graph from the current parameter values, call ad::backward on it, and
// return the scalar loss; it must be deterministic. Comparison is relative
// where gradients are meaningfully sized, absolute near zero.
inline void check_gradients(const std::vector<ad::Value>& params,
                            const std::function<double()>& loss, double rel_tol = 1e-3,
                            double h = 1e-5) {
  struct Entry {
    ad::Value p;
    std::vector<double> analytic;
  };
  std::vector<Entry> entries;

  for (auto& p : params) p->grad = ad::Tensor();
  (void)loss();
  for (auto& p : params) {
    Entry e;
    e.p = p;
    if (p->grad.data.empty()) {
      e.analytic.assign(static_cast<std::size_t>(p->val.numel()), 0.0);
    } else {
      e.analytic = p->grad.data;
    }
    entries.push_back(std::move(e));
  }

  for (auto& e : entries) {
    for (std::int64_t i = 0; i < e.p->val.numel(); ++i) {
      const double orig = e.p->val[i];
      const double step = h * std::max(1.0, std::abs(orig));
      e.p->val[i] = orig + step;
      for (auto& p : params) p->grad = ad::Tensor();
      const double lp = loss();
      e.p->val[i] = orig - step;
      for (auto& p : params) p->grad = ad::Tensor();
      const double lm = loss();
      e.p->val[i] = orig;
      const double fd = (lp - lm) / (2.0 * step);
      const double an = e.analytic[static_cast<std::size_t>(i)];
      const double denom = std::max(std::abs(an), std::abs(fd));
      if (denom < 1e-5) {
        CHECK(std::abs(an - fd) <= 1e-6);  // absolute near zero
      } else {
        CHECK(std::abs(an - fd) / denom <= rel_tol);
      }
    }
  }
  for (auto& p : params) p->grad = ad::Tensor();
}

// Random rigid pose with full 3D rotation (uniform axis, bounded angle).
inline Pose random_pose(Rng& rng, double t_span = 10.0) {
  const double u1 = rng.uniform();
  const double u2 = rng.uniform();
  const double u3 = rng.uniform();
  // Uniform unit quaternion (Shoemake).
  const double q0 = std::sqrt(1.0 - u1) * std::sin(2.0 * M_PI * u2);
  const double q1 = std::sqrt(1.0 - u1) * std::cos(2.0 * M_PI * u2);
  const double q2 = std::sqrt(u1) * std::sin(2.0 * M_PI * u3);
  const double q3 = std::sqrt(u1) * std::cos(2.0 * M_PI * u3);
  Eigen::Quaterniond q(q3, q0, q1, q2);
  q.normalize();
  Pose p;
  p.matrix.setIdentity();
  p.matrix.block<3, 3>(0, 0) = q.toRotationMatrix();
  p.matrix.block<3, 1>(0, 3) = Eigen::Vector3d(rng.uniform(-t_span, t_span),
                                               rng.uniform(-t_span, t_span),
                                               rng.uniform(-t_span, t_span));
  return p;
}

}  // namespace test_helpers
