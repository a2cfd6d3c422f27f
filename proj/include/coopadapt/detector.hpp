#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "coopadapt/autograd.hpp"
#include "coopadapt/geometry.hpp"

namespace coopadapt::detector {

// BEV grid over the ego ground plane. The pillar grid has cell_size spacing;
// the feature grid is what comes out of the conv stack (feature_stride must
// be 1, 2 or 4).
struct GridConfig {
  double x_min = -40.0, x_max = 40.0;
  double y_min = -40.0, y_max = 40.0;
  double z_min = -3.0, z_max = 1.0;
  double cell_size = 0.8;
  int feature_stride = 2;

  void validate() const;
  int pillar_cols() const;  // along x
  int pillar_rows() const;  // along y
  int feat_cols() const;
  int feat_rows() const;
  std::array<int, 3> stage_strides() const;
};

struct ModelConfig {
  int channels = 64;              // C, BEV feature channels
  int point_hidden = 32;          // per-point MLP width / pillar feature dim
  int max_points_per_pillar = 32;
  std::array<double, 3> anchor_size{4.5, 1.9, 1.6};  // l, w, h
  double anchor_z = -1.0;
  double pos_iou = 0.6;
  double neg_iou = 0.45;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double smooth_l1_delta = 1.0;
  bool scalar_distance_encoding = false;  // positional channels (rho, 0) instead of (x, y)
  int n_agent_types = 2;

  void validate() const;
};

inline constexpr int kAnchorsPerCell = 2;  // yaw 0 and pi/2
inline constexpr int kBoxCode = 7;         // dx, dy, dz, dl, dw, dh, dsin-yaw

// Points bucketed into pillars: features row-per-point, a pillar id per
// point, and the flat BEV cell index per pillar (the occupancy index).
struct PillarBatch {
  ad::Tensor point_feats;     // [N, 6]
  std::vector<int> segments;  // pillar id per point
  std::vector<int> cells;     // flat cell (row * cols + col) per pillar
  int n_pillars = 0;
};

// Half-open cell intervals [lo, hi): a point exactly on a boundary belongs to
// the higher-index cell; points outside any range are discarded. Pillars over
// the cap are subsampled with the seeded stream.
PillarBatch pillarize(const PointCloud& cloud, const GridConfig& grid, int max_points_per_pillar,
                      std::uint64_t seed);

struct HeadOutput {
  ad::Value cls_logits;  // [A, H, W]
  ad::Value box_deltas;  // [7A, H, W]
};

struct AnchorTargets {
  ad::Tensor cls_target;  // [A, H, W] in {0, 1}
  ad::Tensor cls_mask;    // [A, H, W]; 0 marks ignored anchors
  ad::Tensor box_target;  // [7A, H, W]
  ad::Tensor box_mask;    // [7A, H, W]; 1 on positive anchors' channels
  int n_pos = 0;
};

// The collaborative detector: shared pillar feature encoder (theta), max +
// 1x1-mix fusion (phi), and the convolutional detection head (beta).
class DetectorModel {
 public:
  DetectorModel(const GridConfig& grid, const ModelConfig& cfg, std::uint64_t init_seed);

  const GridConfig& grid() const { return grid_; }
  const ModelConfig& config() const { return cfg_; }

  // F(P; theta): pillar features -> scattered BEV grid -> conv stack.
  ad::Value extract_features(const PointCloud& ego_cloud, std::uint64_t pillar_seed) const;

  // Appends the two positional channels (identical for every agent).
  ad::Value append_positional_encoding(const ad::Value& f) const;
  const ad::Tensor& positional_encoding() const { return pos_enc_; }

  // G(F; phi): element-wise max across agents, then the 1x1 mixing layer.
  ad::Value fuse(const std::vector<ad::Value>& agent_features) const;

  // P(G; beta).
  HeadOutput predict(const ad::Value& fused) const;

  // Per-cell max over anchors of sigmoid(cls logit).
  static ad::Value confidence_map(const HeadOutput& out);

  // L_PP = smooth-L1 over positive anchors / n_pos + focal over all counted
  // anchors / max(1, n_pos). No direction-classification term.
  ad::Value detection_loss(const HeadOutput& out, const AnchorTargets& targets) const;

  AnchorTargets build_targets(const BoxSet& ego_boxes) const;

  Box anchor_box(int anchor, int row, int col) const;
  std::array<double, kBoxCode> encode_box(const Box& gt, const Box& anchor) const;
  Box decode_box(const std::array<double, kBoxCode>& delta, const Box& anchor) const;

  BoxSet decode_boxes(const ad::Tensor& cls_logits, const ad::Tensor& box_deltas,
                      double score_threshold, double nms_iou) const;

  std::vector<ad::Value> theta_params() const;
  std::vector<ad::Value> phi_params() const;
  std::vector<ad::Value> beta_params() const;
  std::vector<ad::Value> all_params() const;

 private:
  GridConfig grid_;
  ModelConfig cfg_;
  ad::Tensor pos_enc_;  // [2, H, W], pure function of the grid

  // theta
  ad::Value pfn_w_, pfn_b_;
  std::array<ad::Value, 3> conv_w_, conv_b_;
  // phi
  ad::Value mix_w_, mix_b_;
  // beta
  ad::Value trunk_w_, trunk_b_, cls_w_, cls_b_, box_w_, box_b_;
};

}  // namespace coopadapt::detector
