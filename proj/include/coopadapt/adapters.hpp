#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coopadapt/autograd.hpp"
#include "coopadapt/rng.hpp"

namespace coopadapt::adapters {

struct LsaConfig {
  bool enabled = true;
  bool use_lfs = true;  // false: plain global average pooling
  int hidden = 64;
  double dropout = 0.5;
};

struct CiaConfig {
  bool enabled = true;
  bool use_conf = true;  // false: reweighting map replaced by all-ones
  int hidden = 64;
};

// Location-adaptive sim/real adapter: a learnable H x W selection map over
// the ego feature grid plus a fully connected sim/real discriminator on the
// pooled global feature. The selection map starts at all ones, which makes
// step 0 identical to plain average pooling.
class LsaAdapter {
 public:
  LsaAdapter(int in_channels, int height, int width, const LsaConfig& cfg, std::uint64_t seed,
             const std::string& name_prefix = "lsa");

  // Feature reweighting: f . M_loc broadcast over channels (identity when
  // the selector is ablated away).
  ad::Value select(const ad::Value& encoded) const;

  // Per-channel global average pool of the weighted map.
  static ad::Value pool(const ad::Value& weighted);

  // Discriminator logit for one pooled feature vector. Dropout is active in
  // training mode only and consumes the provided stream.
  ad::Value discriminate(const ad::Value& pooled, bool training, Rng* dropout_rng) const;

  const ad::Value& selection_map() const { return m_loc_; }
  const LsaConfig& config() const { return cfg_; }
  std::vector<ad::Value> params() const;

 private:
  LsaConfig cfg_;
  ad::Value m_loc_;
  ad::Value fc1_w_, fc1_b_, fc2_w_, fc2_b_, fc3_w_, fc3_b_;
};

struct LsaBatchItem {
  ad::Value encoded_ego;  // [C+2, H, W]
  int domain_label = 0;   // 0 = source/sim, 1 = target/real
};

// Mean binary cross-entropy of the sim/real discriminator over the batch;
// the features pass through a GRL with the given factor first. Throws on an
// empty batch.
ad::Value lsa_loss(const std::vector<LsaBatchItem>& batch, const LsaAdapter& adapter, double gamma,
                   bool training, Rng* dropout_rng);

// Confidence-aware inter-agent adapter: per-cell agent-type discrimination
// through a stack of 1x1 convolutions.
class CiaAdapter {
 public:
  CiaAdapter(int in_channels, int n_agent_types, const CiaConfig& cfg, std::uint64_t seed,
             const std::string& name_prefix = "cia");

  ad::Value logits(const ad::Value& encoded) const;  // [n_types, H, W]

  const CiaConfig& config() const { return cfg_; }
  std::vector<ad::Value> params() const;

 private:
  CiaConfig cfg_;
  ad::Value conv1_w_, conv1_b_, conv2_w_, conv2_b_, conv3_w_, conv3_b_;
};

// Element-wise minimum of the per-agent confidence maps; the reweighing map
// is a constant under backprop.
ad::Tensor cia_confidence_min(const std::vector<ad::Tensor>& conf_maps);

struct CiaSample {
  std::vector<ad::Value> agent_features;  // encoded [C+2, H, W] per agent
  std::vector<int> agent_labels;          // agent-type index per agent
  ad::Tensor m_conf;                      // [H, W]
};

// Confidence-reweighted per-cell cross-entropy, summed over cells and agents,
// normalized per sample by its agent count and over the batch by the sample
// count. Target-domain samples only; throws on an empty batch.
ad::Value cia_loss(const std::vector<CiaSample>& samples, const CiaAdapter& adapter, double gamma,
                   bool use_conf);

}  // namespace coopadapt::adapters
