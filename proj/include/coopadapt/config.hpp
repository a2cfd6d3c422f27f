#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coopadapt/adapters.hpp"
#include "coopadapt/detector.hpp"

namespace coopadapt {

struct AugmentConfig {
  bool enabled = true;
  double max_yaw = M_PI / 4.0;  // global rotation in [-max_yaw, max_yaw]
  bool flip_x = true;           // random mirror about the x axis
  double scale_min = 0.95;
  double scale_max = 1.05;
};

struct TrainConfig {
  double lr = 0.001;
  double lr_decay_factor = 0.1;
  int lr_decay_epoch = 15;
  int epochs = 20;
  int pretrain_batch = 4;
  int batch_source = 2;
  int batch_target = 2;
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double val_fraction = 0.1;
  int early_stop_patience = 5;
  double early_stop_min_delta = 1e-3;
  bool allow_cold_start = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  AugmentConfig augment;
};

struct GrlConfig {
  double lsa_gamma = -0.05;
  double cia_gamma = -0.1;
};

struct PseudoLabelConfig {
  double tau = 0.3;
  int rounds = 3;
  int epochs_per_round = 5;
  bool mix_source = false;
};

struct EvalConfig {
  double score_threshold = 0.25;
  double nms_iou = 0.15;
  std::vector<double> thresholds{0.3, 0.5, 0.7};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  detector::GridConfig grid;
  detector::ModelConfig model;
  TrainConfig train;
  GrlConfig grl;
  adapters::LsaConfig lsa;
  adapters::CiaConfig cia;
  PseudoLabelConfig selftrain;
  EvalConfig eval;
  std::string source_dataset;
  std::string target_dataset;

  void validate() const;
};

// Exit-code conventions shared with the CLI: configuration problems raise
// ConfigError (exit 2), everything else a runtime error (exit 3).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Strict JSON loading: unknown keys anywhere in the tree are rejected, every
// field has a default, and COOPADAPT_SEED in the environment overrides the
// seed. to_json materializes all defaults.
ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig config_from_file(const std::string& path);
std::string config_to_json_text(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace coopadapt
