#include "coopadapt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace coopadapt::evaluation {

namespace {

using Poly = std::vector<Eigen::Vector2d>;

double polygon_area(const Poly& p) {
  if (p.size() < 3) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& a = p[i];
    const auto& b = p[(i + 1) % p.size()];
    s += a(0) * b(1) - b(0) * a(1);
  }
  return 0.5 * std::abs(s);
}

// Sutherland-Hodgman: clip `subject` against the CCW convex polygon `clip`.
Poly clip_polygon(Poly subject, const Poly& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Eigen::Vector2d a = clip[e];
    const Eigen::Vector2d b = clip[(e + 1) % clip.size()];
    const Eigen::Vector2d edge = b - a;
    Poly out;
    out.reserve(subject.size() + 4);
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Eigen::Vector2d& p = subject[i];
      const Eigen::Vector2d& q = subject[(i + 1) % subject.size()];
      const double sp = edge(0) * (p(1) - a(1)) - edge(1) * (p(0) - a(0));
      const double sq = edge(0) * (q(1) - a(1)) - edge(1) * (q(0) - a(0));
      const bool p_in = sp >= 0.0;
      const bool q_in = sq >= 0.0;
      if (p_in) out.push_back(p);
      if (p_in != q_in) {
        const double t = sp / (sp - sq);
        out.push_back(p + t * (q - p));
      }
    }
    subject = std::move(out);
  }
  return subject;
}

}  // namespace

double bev_iou(const Box& a, const Box& b) {
  const double area_a = a.size(0) * a.size(1);
  const double area_b = b.size(0) * b.size(1);
  if (area_a <= 0.0 || area_b <= 0.0) {
    throw std::invalid_argument("bev_iou: degenerate zero-area box");
  }
  const auto ca = a.corners_bev();
  const auto cb = b.corners_bev();
  const Poly pa(ca.begin(), ca.end());
  const Poly pb(cb.begin(), cb.end());
  const double inter = polygon_area(clip_polygon(pa, pb));
  const double uni = area_a + area_b - inter;
  return inter / uni;
}

MatchResult match_frame(const BoxSet& preds, const BoxSet& gts, double iou_thresh) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return preds[i].score.value_or(0.0) > preds[j].score.value_or(0.0);
  });

  MatchResult result;
  result.n_gt = static_cast<int>(gts.size());
  std::vector<bool> gt_used(gts.size(), false);
  for (const std::size_t pi : order) {
    double best_iou = 0.0;
    int best_gt = -1;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_used[gi]) continue;
      const double iou = bev_iou(preds[pi], gts[gi]);
      if (iou >= iou_thresh && iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(gi);
      }
    }
    const bool tp = best_gt >= 0;
    if (tp) gt_used[static_cast<std::size_t>(best_gt)] = true;
    result.preds.emplace_back(preds[pi].score.value_or(0.0), tp);
  }
  return result;
}

double average_precision(const std::vector<MatchResult>& frames) {
  if (frames.empty()) throw std::invalid_argument("average_precision: no frames");
  std::int64_t total_gt = 0;
  std::vector<std::pair<double, bool>> pooled;
  for (const auto& f : frames) {
    total_gt += f.n_gt;
    pooled.insert(pooled.end(), f.preds.begin(), f.preds.end());
  }
  if (total_gt == 0) {
    throw std::invalid_argument("average_precision: no ground truth boxes");
  }
  if (pooled.empty()) return 0.0;

  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });

  const std::size_t n = pooled.size();
  std::vector<double> prec(n), rec(n);
  std::int64_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (pooled[i].second) ++tp;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
  }
  // Precision envelope, then area under the envelope at each recall step.
  for (std::size_t i = n - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0.0;
  double prev_rec = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (rec[i] > prev_rec) {
      ap += (rec[i] - prev_rec) * prec[i];
      prev_rec = rec[i];
    }
  }
  return ap;
}

std::string eval_report_to_json(const EvalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "{\n  \"checkpoint\": \"" << r.checkpoint << "\",\n  \"dataset\": \"" << r.dataset
     << "\",\n  \"n_frames\": " << r.n_frames << ",\n  \"n_gts\": " << r.n_gts
     << ",\n  \"n_preds\": " << r.n_preds << ",\n  \"ap\": {";
  bool first = true;
  for (const auto& [thresh, ap] : r.ap_by_threshold) {
    if (!first) os << ", ";
    first = false;
    char key[32];
    std::snprintf(key, sizeof(key), "%g", thresh);
    os << "\"" << key << "\": " << ap;
  }
  os << "}\n}\n";
  return os.str();
}

}  // namespace coopadapt::evaluation
