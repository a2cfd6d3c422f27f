#pragma once

#include <map>
#include <string>
#include <vector>

#include "coopadapt/geometry.hpp"

namespace coopadapt::evaluation {

// IoU of the rotated BEV footprints of two boxes. Throws on zero-area boxes.
double bev_iou(const Box& a, const Box& b);

// Greedy per-frame matching: predictions sorted by descending score (ties by
// insertion order), each matched to the highest-IoU unmatched ground truth
// with IoU >= threshold.
struct MatchResult {
  std::vector<std::pair<double, bool>> preds;  // (score, is_true_positive)
  int n_gt = 0;
};

MatchResult match_frame(const BoxSet& preds, const BoxSet& gts, double iou_thresh);

// All-point interpolated AP over predictions pooled across frames. Throws if
// the frames contain no ground truth at all.
double average_precision(const std::vector<MatchResult>& frames);

struct EvalReport {
  std::map<double, double> ap_by_threshold;
  int n_frames = 0;
  int n_gts = 0;
  int n_preds = 0;
  std::string checkpoint;
  std::string dataset;
  // One row per prediction and threshold: frame, threshold, score, is_tp.
  std::string per_frame_csv;
};

std::string eval_report_to_json(const EvalReport& r);

}  // namespace coopadapt::evaluation

// Dataset-level evaluation lives with the metrics but needs the detector and
// dataset machinery; the declaration is kept here, the implementation in its
// own translation unit.
#include "coopadapt/config.hpp"

namespace coopadapt {
class Dataset;
namespace detector {
class DetectorModel;
}
}  // namespace coopadapt

namespace coopadapt::evaluation {

// Frozen inference over every frame, greedy matching, AP per threshold.
// Ground truths are filtered to the detector's grid range; annotations are
// required (unlike adaptation, evaluation cannot run without labels).
EvalReport evaluate(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                    const Dataset& dataset, const std::vector<double>& thresholds);

// Same protocol with an already-loaded model (used by sweeps and tests).
EvalReport evaluate_model(const ExperimentConfig& cfg, const detector::DetectorModel& model,
                          const Dataset& dataset, const std::vector<double>& thresholds);

}  // namespace coopadapt::evaluation
