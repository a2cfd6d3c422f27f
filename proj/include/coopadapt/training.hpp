#pragma once

#include <optional>
#include <string>
#include <vector>

#include "coopadapt/config.hpp"
#include "coopadapt/dataset.hpp"
#include "coopadapt/detector.hpp"

namespace coopadapt::training {

// Adam with bias correction over named parameters. step() consumes and
// clears the gradients; parameters with no gradient this step see g = 0.
class Adam {
 public:
  Adam(std::vector<ad::Value> params, double beta1, double beta2, double eps);

  void step(double lr);
  std::int64_t steps_taken() const { return t_; }

  // Saving also quantizes the live moments through float32 so that a resumed
  // run continues bit-identically.
  void save(const std::string& path);
  void load(const std::string& path);

 private:
  std::vector<ad::Value> params_;
  std::vector<ad::Tensor> m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// One collaborative frame projected into the ego frame.
struct EgoSample {
  std::vector<PointCloud> clouds;
  std::vector<AgentType> types;
  int ego_idx = 0;
  std::optional<BoxSet> boxes;  // ego frame
  Domain domain = Domain::source;
  Pose ego_pose;  // sensor-to-world, kept for mapping detections back
};

EgoSample to_ego_frame(const CollaborativeSample& sample);

// Seeded global yaw rotation, mirror about x, and uniform scaling applied
// identically to every agent's points and to the boxes.
void augment_sample(EgoSample& sample, const AugmentConfig& cfg, Rng& rng);

struct SampleForward {
  std::vector<ad::Value> features;  // F_j, one per agent
  std::vector<ad::Value> encoded;   // F~_j, filled when requested
  detector::HeadOutput head;        // on the fused map
};

SampleForward forward_sample(const detector::DetectorModel& model, const EgoSample& sample,
                             std::uint64_t pillar_seed, bool need_encoded);

struct TrainResult {
  std::string checkpoint_dir;
  int epochs_run = 0;
};

// Source-only pretraining of the detector (no adapters), with early stopping
// on held-out source frames. The checkpoint is rewritten at every epoch end
// (which also quantizes the live state through float32), so resuming from it
// with `start_epoch` continues the exact same trajectory.
TrainResult pretrain_source(const ExperimentConfig& cfg, const Dataset& source,
                            const std::string& run_dir, const std::string& from_checkpoint = "",
                            int start_epoch = 0);

// Joint adaptation: detection loss on source plus the two adversarial
// adapter losses, single optimizer, GRLs inside the adapter paths.
TrainResult adapt_dusa(const ExperimentConfig& cfg, const std::string& from_checkpoint,
                       const Dataset& source, const Dataset& target, const std::string& run_dir);

// Pseudo-label self-training rounds on the target domain.
TrainResult baseline_self_training(const ExperimentConfig& cfg, const std::string& from_checkpoint,
                                   const Dataset& target, const Dataset* source,
                                   const std::string& run_dir);

// Single sim/real discriminator over the pooled features of all agents.
TrainResult baseline_naive_discriminator(const ExperimentConfig& cfg,
                                         const std::string& from_checkpoint, const Dataset& source,
                                         const Dataset& target, const std::string& run_dir);

// Checkpoint directory layout: params.bin (detector), optional adapters.bin,
// optimizer.bin, arch.json.
void save_detector_checkpoint(const detector::DetectorModel& model, const ExperimentConfig& cfg,
                              const std::string& dir,
                              const std::vector<ad::Value>& adapter_params = {});
void load_detector_checkpoint(detector::DetectorModel& model, const ExperimentConfig& cfg,
                              const std::string& dir);

// Trains a fresh sim/real probe on frozen pooled ego features and returns its
// held-out accuracy; the de-facto measure of how domain-separable the feature
// space still is.
double domain_probe_accuracy(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                             const Dataset& source, const Dataset& target, int probe_steps = 300,
                             std::uint64_t probe_seed = 7);

// Held-out accuracy of the adversarially trained sim/real discriminator
// stored in an adapted checkpoint (adapters.bin), evaluated on the tail 25%
// of each dataset's frames in evaluation mode.
double lsa_discriminator_holdout_accuracy(const ExperimentConfig& cfg,
                                          const std::string& checkpoint_dir, const Dataset& source,
                                          const Dataset& target);

}  // namespace coopadapt::training
