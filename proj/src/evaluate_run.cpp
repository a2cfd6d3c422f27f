#include <filesystem>
#include <stdexcept>

#include "coopadapt/dataset.hpp"
#include "coopadapt/evaluation.hpp"
#include "coopadapt/rng.hpp"
#include "coopadapt/training.hpp"

namespace coopadapt::evaluation {

EvalReport evaluate_model(const ExperimentConfig& cfg, const detector::DetectorModel& model,
                          const Dataset& dataset, const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw std::invalid_argument("evaluate: no IoU thresholds");
  const auto& grid = cfg.grid;

  std::map<double, std::vector<MatchResult>> matches;
  for (const double t : thresholds) matches[t] = {};

  int n_gts = 0;
  int n_preds = 0;
  ad::NoGradGuard guard;
  for (int idx = 0; idx < dataset.size(); ++idx) {
    CollaborativeSample cs;
    try {
      cs = dataset.load_frame(idx, true);
    } catch (const std::exception& e) {
      throw std::runtime_error(
          std::string("evaluation requires annotations, unlike adaptation; failed to read "
                      "labels: ") +
          e.what());
    }
    if (!cs.annotations) {
      throw std::runtime_error("evaluation requires annotations, unlike adaptation");
    }
    const training::EgoSample es = training::to_ego_frame(cs);
    const training::SampleForward fw = training::forward_sample(
        model, es, derive_seed(cfg.seed, "pillar_eval", idx), false);
    const BoxSet preds = model.decode_boxes(fw.head.cls_logits->val, fw.head.box_deltas->val,
                                            cfg.eval.score_threshold, cfg.eval.nms_iou);

    BoxSet gts;
    for (const auto& b : es.boxes.value_or(BoxSet{})) {
      if (b.center(0) >= grid.x_min && b.center(0) < grid.x_max && b.center(1) >= grid.y_min &&
          b.center(1) < grid.y_max) {
        gts.push_back(b);
      }
    }
    n_gts += static_cast<int>(gts.size());
    n_preds += static_cast<int>(preds.size());
    for (const double t : thresholds) {
      matches[t].push_back(match_frame(preds, gts, t));
    }
  }

  EvalReport report;
  report.n_frames = dataset.size();
  report.n_gts = n_gts;
  report.n_preds = n_preds;
  report.dataset = dataset.root();
  std::string csv = "frame,iou_threshold,score,is_tp\n";
  for (const double t : thresholds) {
    report.ap_by_threshold[t] = average_precision(matches[t]);
    for (std::size_t f = 0; f < matches[t].size(); ++f) {
      for (const auto& [score, tp] : matches[t][f].preds) {
        csv += std::to_string(f) + "," + std::to_string(t) + "," + std::to_string(score) + "," +
               (tp ? "1" : "0") + "\n";
      }
    }
  }
  report.per_frame_csv = std::move(csv);
  return report;
}

EvalReport evaluate(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                    const Dataset& dataset, const std::vector<double>& thresholds) {
  detector::DetectorModel model(cfg.grid, cfg.model, derive_seed(cfg.seed, "model"));
  training::load_detector_checkpoint(model, cfg, checkpoint_dir);
  EvalReport report = evaluate_model(cfg, model, dataset, thresholds);
  report.checkpoint = checkpoint_dir;
  return report;
}

}  // namespace coopadapt::evaluation
