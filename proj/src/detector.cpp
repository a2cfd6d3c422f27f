#include "coopadapt/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "coopadapt/evaluation.hpp"
#include "coopadapt/rng.hpp"

namespace coopadapt::detector {

namespace {

int range_cells(double lo, double hi, double cell) {
  const double n = (hi - lo) / cell;
  const double rounded = std::round(n);
  if (std::abs(n - rounded) > 1e-6 || rounded < 1.0) {
    throw std::invalid_argument("GridConfig: range not divisible by cell size");
  }
  return static_cast<int>(rounded);
}

int conv_out(int n, int stride) { return (n + 2 - 3) / stride + 1; }  // 3x3, pad 1

ad::Tensor he_normal(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
  ad::Tensor t(std::move(shape));
  const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = sigma * rng.normal();
  return t;
}

// Pre-ReLU biases start slightly positive: empty BEV cells otherwise sit
// exactly on the ReLU kink, where gradients are ill-defined.
constexpr double kPreReluBias = 0.01;

double wrap_mod_pi(double a) {
  // Into (-pi/2, pi/2]; headings are mod-pi equivalent for rectangles.
  a = normalize_angle(a);
  if (a > M_PI / 2.0) a -= M_PI;
  if (a <= -M_PI / 2.0) a += M_PI;
  return a;
}

double sigmoid_plain(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

void GridConfig::validate() const {
  if (!(x_max > x_min && y_max > y_min && z_max > z_min)) {
    throw std::invalid_argument("GridConfig: empty range");
  }
  if (!(cell_size > 0.0)) throw std::invalid_argument("GridConfig: cell size must be positive");
  (void)range_cells(x_min, x_max, cell_size);
  (void)range_cells(y_min, y_max, cell_size);
  if (feature_stride != 1 && feature_stride != 2 && feature_stride != 4) {
    throw std::invalid_argument("GridConfig: feature_stride must be 1, 2 or 4");
  }
  if (!(x_max > 0.0 && y_max > 0.0)) {
    throw std::invalid_argument("GridConfig: positive x_max/y_max required for the encoding");
  }
}

int GridConfig::pillar_cols() const { return range_cells(x_min, x_max, cell_size); }
int GridConfig::pillar_rows() const { return range_cells(y_min, y_max, cell_size); }

std::array<int, 3> GridConfig::stage_strides() const {
  switch (feature_stride) {
    case 1:
      return {1, 1, 1};
    case 2:
      return {2, 1, 1};
    default:
      return {2, 2, 1};
  }
}

int GridConfig::feat_cols() const {
  int n = pillar_cols();
  for (const int s : stage_strides()) n = conv_out(n, s);
  return n;
}

int GridConfig::feat_rows() const {
  int n = pillar_rows();
  for (const int s : stage_strides()) n = conv_out(n, s);
  return n;
}

void ModelConfig::validate() const {
  if (channels < 1 || point_hidden < 1) throw std::invalid_argument("ModelConfig: bad widths");
  if (max_points_per_pillar < 1) throw std::invalid_argument("ModelConfig: bad pillar cap");
  for (const double s : anchor_size) {
    if (!(s > 0.0)) throw std::invalid_argument("ModelConfig: anchor size must be positive");
  }
  if (!(pos_iou > neg_iou)) throw std::invalid_argument("ModelConfig: pos_iou must exceed neg_iou");
  if (n_agent_types < 1) throw std::invalid_argument("ModelConfig: bad agent type count");
}

PillarBatch pillarize(const PointCloud& cloud, const GridConfig& grid, int max_points_per_pillar,
                      std::uint64_t seed) {
  grid.validate();
  const int cols = grid.pillar_cols();
  const int rows = grid.pillar_rows();
  const double x_absmax = std::max(std::abs(grid.x_min), std::abs(grid.x_max));
  const double y_absmax = std::max(std::abs(grid.y_min), std::abs(grid.y_max));
  const double z_mid = 0.5 * (grid.z_min + grid.z_max);
  const double z_half = 0.5 * (grid.z_max - grid.z_min);

  // Bucket point indices by cell, first-appearance pillar order.
  std::unordered_map<int, int> cell_to_pillar;
  std::vector<int> pillar_cell;
  std::vector<std::vector<int>> pillar_points;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    if (p.x < grid.x_min || p.x >= grid.x_max || p.y < grid.y_min || p.y >= grid.y_max ||
        p.z < grid.z_min || p.z >= grid.z_max) {
      continue;
    }
    const int ix = static_cast<int>(std::floor((p.x - grid.x_min) / grid.cell_size));
    const int iy = static_cast<int>(std::floor((p.y - grid.y_min) / grid.cell_size));
    if (ix < 0 || ix >= cols || iy < 0 || iy >= rows) continue;
    const int cell = iy * cols + ix;
    auto [it, inserted] = cell_to_pillar.try_emplace(cell, static_cast<int>(pillar_cell.size()));
    if (inserted) {
      pillar_cell.push_back(cell);
      pillar_points.emplace_back();
    }
    pillar_points[static_cast<std::size_t>(it->second)].push_back(static_cast<int>(i));
  }

  // Cap occupancy by seeded subsampling (partial Fisher-Yates per pillar).
  for (std::size_t s = 0; s < pillar_points.size(); ++s) {
    auto& idx = pillar_points[s];
    if (static_cast<int>(idx.size()) <= max_points_per_pillar) continue;
    Rng rng(derive_seed(seed, "pillar_cap", pillar_cell[s]));
    for (int k = 0; k < max_points_per_pillar; ++k) {
      const auto j = k + static_cast<int>(rng.uniform_int(idx.size() - static_cast<std::size_t>(k)));
      std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(max_points_per_pillar));
  }

  PillarBatch batch;
  batch.n_pillars = static_cast<int>(pillar_cell.size());
  batch.cells = std::move(pillar_cell);
  std::int64_t total = 0;
  for (const auto& v : pillar_points) total += static_cast<std::int64_t>(v.size());
  batch.point_feats = ad::Tensor({total, 6});
  batch.segments.reserve(static_cast<std::size_t>(total));
  std::int64_t row = 0;
  for (std::size_t s = 0; s < pillar_points.size(); ++s) {
    const int cell = batch.cells[s];
    const int iy = cell / cols;
    const int ix = cell % cols;
    const double cx = grid.x_min + (ix + 0.5) * grid.cell_size;
    const double cy = grid.y_min + (iy + 0.5) * grid.cell_size;
    for (const int pi : pillar_points[s]) {
      const auto& p = cloud.points[static_cast<std::size_t>(pi)];
      double* f = batch.point_feats.data.data() + row * 6;
      f[0] = p.x / x_absmax;
      f[1] = p.y / y_absmax;
      f[2] = (p.z - z_mid) / z_half;
      f[3] = p.intensity;
      f[4] = (p.x - cx) / grid.cell_size;
      f[5] = (p.y - cy) / grid.cell_size;
      batch.segments.push_back(static_cast<int>(s));
      ++row;
    }
  }
  return batch;
}

DetectorModel::DetectorModel(const GridConfig& grid, const ModelConfig& cfg,
                             std::uint64_t init_seed)
    : grid_(grid), cfg_(cfg) {
  grid_.validate();
  cfg_.validate();

  const int c = cfg_.channels;
  const int ph = cfg_.point_hidden;
  const int a = kAnchorsPerCell;
  Rng rng(derive_seed(init_seed, "model_init"));

  pfn_w_ = ad::parameter("theta.pfn.w", he_normal({6, ph}, 6, rng));
  pfn_b_ = ad::parameter("theta.pfn.b", ad::Tensor::full({ph}, kPreReluBias));

  const std::array<std::int64_t, 3> conv_in = {ph, c, c};
  const std::array<std::int64_t, 3> conv_out_ch = {c, c, c};
  for (int i = 0; i < 3; ++i) {
    conv_w_[static_cast<std::size_t>(i)] = ad::parameter(
        "theta.conv" + std::to_string(i + 1) + ".w",
        he_normal({conv_out_ch[static_cast<std::size_t>(i)], conv_in[static_cast<std::size_t>(i)], 3, 3},
                  conv_in[static_cast<std::size_t>(i)] * 9, rng));
    conv_b_[static_cast<std::size_t>(i)] = ad::parameter(
        "theta.conv" + std::to_string(i + 1) + ".b",
        ad::Tensor::full({conv_out_ch[static_cast<std::size_t>(i)]}, kPreReluBias));
  }

  mix_w_ = ad::parameter("phi.mix.w", he_normal({c, c, 1, 1}, c, rng));
  mix_b_ = ad::parameter("phi.mix.b", ad::Tensor({c}));

  trunk_w_ = ad::parameter("beta.trunk.w", he_normal({c, c, 3, 3}, static_cast<std::int64_t>(c) * 9, rng));
  trunk_b_ = ad::parameter("beta.trunk.b", ad::Tensor::full({c}, kPreReluBias));
  cls_w_ = ad::parameter("beta.cls.w", he_normal({a, c, 1, 1}, c, rng));
  // Focal-friendly prior: start every anchor near p = 0.01.
  ad::Tensor cls_bias({a});
  const double prior = -std::log((1.0 - 0.01) / 0.01);
  for (auto& v : cls_bias.data) v = prior;
  cls_b_ = ad::parameter("beta.cls.b", cls_bias);
  box_w_ = ad::parameter("beta.box.w", he_normal({static_cast<std::int64_t>(kBoxCode) * a, c, 1, 1}, c, rng));
  box_b_ = ad::parameter("beta.box.b", ad::Tensor({static_cast<std::int64_t>(kBoxCode) * a}));

  // Positional channels: normalized cell-center offsets from the ego origin,
  // a pure function of the grid shared by every agent and sample.
  const int rows = grid_.feat_rows();
  const int colsn = grid_.feat_cols();
  pos_enc_ = ad::Tensor({2, rows, colsn});
  const double cw = (grid_.x_max - grid_.x_min) / colsn;
  const double chh = (grid_.y_max - grid_.y_min) / rows;
  for (int r = 0; r < rows; ++r) {
    for (int cidx = 0; cidx < colsn; ++cidx) {
      const double cx = grid_.x_min + (cidx + 0.5) * cw;
      const double cy = grid_.y_min + (r + 0.5) * chh;
      const std::int64_t at = static_cast<std::int64_t>(r) * colsn + cidx;
      if (cfg_.scalar_distance_encoding) {
        const double rho = std::hypot(cx, cy) / std::hypot(grid_.x_max, grid_.y_max);
        pos_enc_[at] = rho;
        pos_enc_[static_cast<std::int64_t>(rows) * colsn + at] = 0.0;
      } else {
        pos_enc_[at] = cx / grid_.x_max;
        pos_enc_[static_cast<std::int64_t>(rows) * colsn + at] = cy / grid_.y_max;
      }
    }
  }
}

ad::Value DetectorModel::extract_features(const PointCloud& cloud, std::uint64_t pillar_seed) const {
  const PillarBatch batch = pillarize(cloud, grid_, cfg_.max_points_per_pillar, pillar_seed);
  const int rows = grid_.pillar_rows();
  const int cols = grid_.pillar_cols();

  ad::Value grid0;
  if (batch.n_pillars == 0) {
    grid0 = ad::constant(ad::Tensor({cfg_.point_hidden, rows, cols}));
  } else {
    auto pts = ad::constant(batch.point_feats);
    auto h = ad::relu(ad::linear(pts, pfn_w_, pfn_b_));
    auto pooled = ad::segment_max(h, batch.segments, batch.n_pillars);
    grid0 = ad::scatter_hw(pooled, batch.cells, rows, cols);
  }

  const auto strides = grid_.stage_strides();
  ad::Value x = grid0;
  for (int i = 0; i < 3; ++i) {
    x = ad::relu(ad::conv2d(x, conv_w_[static_cast<std::size_t>(i)],
                            conv_b_[static_cast<std::size_t>(i)], strides[static_cast<std::size_t>(i)], 1));
  }
  return x;
}

ad::Value DetectorModel::append_positional_encoding(const ad::Value& f) const {
  if (f->val.ndim() != 3 || f->val.shape[1] != grid_.feat_rows() ||
      f->val.shape[2] != grid_.feat_cols()) {
    throw std::invalid_argument("append_positional_encoding: feature map does not match the grid");
  }
  return ad::concat_channels(f, ad::constant(pos_enc_));
}

ad::Value DetectorModel::fuse(const std::vector<ad::Value>& agent_features) const {
  if (agent_features.empty()) throw std::invalid_argument("fuse: need at least one agent");
  ad::Value m = agent_features[0];
  for (std::size_t j = 1; j < agent_features.size(); ++j) {
    if (!agent_features[j]->val.same_shape(m->val)) {
      throw std::invalid_argument("fuse: agent feature shapes differ");
    }
    m = ad::ew_max(m, agent_features[j]);
  }
  return ad::conv2d(m, mix_w_, mix_b_, 1, 0);
}

HeadOutput DetectorModel::predict(const ad::Value& fused) const {
  auto trunk = ad::relu(ad::conv2d(fused, trunk_w_, trunk_b_, 1, 1));
  HeadOutput out;
  out.cls_logits = ad::conv2d(trunk, cls_w_, cls_b_, 1, 0);
  out.box_deltas = ad::conv2d(trunk, box_w_, box_b_, 1, 0);
  return out;
}

ad::Value DetectorModel::confidence_map(const HeadOutput& out) {
  return ad::sigmoid(ad::channel_max(out.cls_logits));
}

ad::Value DetectorModel::detection_loss(const HeadOutput& out, const AnchorTargets& t) const {
  const double norm = 1.0 / std::max(1, t.n_pos);
  auto cls = ad::scale(ad::sum(ad::focal_loss_with_logits(out.cls_logits, t.cls_target, t.cls_mask,
                                                          cfg_.focal_alpha, cfg_.focal_gamma)),
                       norm);
  auto loc = ad::scale(
      ad::sum(ad::smooth_l1(out.box_deltas, t.box_target, t.box_mask, cfg_.smooth_l1_delta)), norm);
  return ad::add(loc, cls);
}

Box DetectorModel::anchor_box(int anchor, int row, int col) const {
  const int rows = grid_.feat_rows();
  const int cols = grid_.feat_cols();
  const double cw = (grid_.x_max - grid_.x_min) / cols;
  const double ch = (grid_.y_max - grid_.y_min) / rows;
  Box b;
  b.center = Eigen::Vector3d(grid_.x_min + (col + 0.5) * cw, grid_.y_min + (row + 0.5) * ch,
                             cfg_.anchor_z);
  b.size = Eigen::Vector3d(cfg_.anchor_size[0], cfg_.anchor_size[1], cfg_.anchor_size[2]);
  b.yaw = anchor == 0 ? 0.0 : M_PI / 2.0;
  return b;
}

std::array<double, kBoxCode> DetectorModel::encode_box(const Box& gt, const Box& anchor) const {
  const double da = std::hypot(anchor.size(0), anchor.size(1));
  std::array<double, kBoxCode> d{};
  d[0] = (gt.center(0) - anchor.center(0)) / da;
  d[1] = (gt.center(1) - anchor.center(1)) / da;
  d[2] = (gt.center(2) - anchor.center(2)) / anchor.size(2);
  d[3] = std::log(gt.size(0) / anchor.size(0));
  d[4] = std::log(gt.size(1) / anchor.size(1));
  d[5] = std::log(gt.size(2) / anchor.size(2));
  d[6] = std::sin(wrap_mod_pi(gt.yaw - anchor.yaw));
  return d;
}

Box DetectorModel::decode_box(const std::array<double, kBoxCode>& d, const Box& anchor) const {
  const double da = std::hypot(anchor.size(0), anchor.size(1));
  Box b;
  b.center = Eigen::Vector3d(anchor.center(0) + d[0] * da, anchor.center(1) + d[1] * da,
                             anchor.center(2) + d[2] * anchor.size(2));
  b.size = Eigen::Vector3d(anchor.size(0) * std::exp(d[3]), anchor.size(1) * std::exp(d[4]),
                           anchor.size(2) * std::exp(d[5]));
  b.yaw = normalize_angle(anchor.yaw + std::asin(std::clamp(d[6], -1.0, 1.0)));
  return b;
}

AnchorTargets DetectorModel::build_targets(const BoxSet& ego_boxes) const {
  const int rows = grid_.feat_rows();
  const int cols = grid_.feat_cols();
  const std::int64_t hw = static_cast<std::int64_t>(rows) * cols;
  const double cw = (grid_.x_max - grid_.x_min) / cols;
  const double chh = (grid_.y_max - grid_.y_min) / rows;

  AnchorTargets t;
  t.cls_target = ad::Tensor({kAnchorsPerCell, rows, cols});
  t.cls_mask = ad::Tensor::full({kAnchorsPerCell, rows, cols}, 1.0);
  t.box_target = ad::Tensor({static_cast<std::int64_t>(kBoxCode) * kAnchorsPerCell, rows, cols});
  t.box_mask = ad::Tensor({static_cast<std::int64_t>(kBoxCode) * kAnchorsPerCell, rows, cols});

  // Keep only ground truths whose center lies in the grid; the rest cannot be
  // represented by any anchor.
  BoxSet gts;
  for (const auto& b : ego_boxes) {
    if (b.center(0) >= grid_.x_min && b.center(0) < grid_.x_max && b.center(1) >= grid_.y_min &&
        b.center(1) < grid_.y_max) {
      gts.push_back(b);
    }
  }

  const std::int64_t n_anchor = static_cast<std::int64_t>(kAnchorsPerCell) * hw;
  std::vector<double> best_iou(static_cast<std::size_t>(n_anchor), 0.0);
  std::vector<int> best_gt(static_cast<std::size_t>(n_anchor), -1);
  std::vector<std::int64_t> force_anchor(gts.size(), -1);
  std::vector<double> force_iou(gts.size(), -1.0);

  const double anchor_diag = std::hypot(cfg_.anchor_size[0], cfg_.anchor_size[1]);
  for (std::size_t gi = 0; gi < gts.size(); ++gi) {
    const Box& gt = gts[gi];
    const double reach = 0.5 * (std::hypot(gt.size(0), gt.size(1)) + anchor_diag);
    const int c_lo = std::max(0, static_cast<int>(std::floor((gt.center(0) - reach - grid_.x_min) / cw)));
    const int c_hi = std::min(cols - 1, static_cast<int>(std::floor((gt.center(0) + reach - grid_.x_min) / cw)));
    const int r_lo = std::max(0, static_cast<int>(std::floor((gt.center(1) - reach - grid_.y_min) / chh)));
    const int r_hi = std::min(rows - 1, static_cast<int>(std::floor((gt.center(1) + reach - grid_.y_min) / chh)));
    for (int r = r_lo; r <= r_hi; ++r) {
      for (int c = c_lo; c <= c_hi; ++c) {
        for (int a = 0; a < kAnchorsPerCell; ++a) {
          const std::int64_t flat = static_cast<std::int64_t>(a) * hw + static_cast<std::int64_t>(r) * cols + c;
          const double iou = evaluation::bev_iou(anchor_box(a, r, c), gt);
          if (iou > best_iou[static_cast<std::size_t>(flat)]) {
            best_iou[static_cast<std::size_t>(flat)] = iou;
            best_gt[static_cast<std::size_t>(flat)] = static_cast<int>(gi);
          }
          if (iou > force_iou[gi]) {
            force_iou[gi] = iou;
            force_anchor[gi] = flat;
          }
        }
      }
    }
  }

  // PointPillars conventions: IoU thresholds plus a forced best anchor per
  // ground truth so no object goes unsupervised.
  std::vector<int> assigned(static_cast<std::size_t>(n_anchor), -1);
  for (std::int64_t f = 0; f < n_anchor; ++f) {
    if (best_gt[static_cast<std::size_t>(f)] >= 0 && best_iou[static_cast<std::size_t>(f)] >= cfg_.pos_iou) {
      assigned[static_cast<std::size_t>(f)] = best_gt[static_cast<std::size_t>(f)];
    }
  }
  for (std::size_t gi = 0; gi < gts.size(); ++gi) {
    if (force_anchor[gi] >= 0 && force_iou[gi] > 0.0) {
      assigned[static_cast<std::size_t>(force_anchor[gi])] = static_cast<int>(gi);
    }
  }

  for (std::int64_t f = 0; f < n_anchor; ++f) {
    const int gi = assigned[static_cast<std::size_t>(f)];
    if (gi >= 0) {
      ++t.n_pos;
      t.cls_target[f] = 1.0;
      const int a = static_cast<int>(f / hw);
      const std::int64_t cell = f % hw;
      const int r = static_cast<int>(cell / cols);
      const int c = static_cast<int>(cell % cols);
      const auto delta = encode_box(gts[static_cast<std::size_t>(gi)], anchor_box(a, r, c));
      for (int k = 0; k < kBoxCode; ++k) {
        const std::int64_t ch = static_cast<std::int64_t>(a) * kBoxCode + k;
        t.box_target[ch * hw + cell] = delta[static_cast<std::size_t>(k)];
        t.box_mask[ch * hw + cell] = 1.0;
      }
    } else if (best_iou[static_cast<std::size_t>(f)] >= cfg_.neg_iou) {
      t.cls_mask[f] = 0.0;  // between the thresholds: ignored
    }
  }
  return t;
}

BoxSet DetectorModel::decode_boxes(const ad::Tensor& cls_logits, const ad::Tensor& box_deltas,
                                   double score_threshold, double nms_iou) const {
  const int rows = grid_.feat_rows();
  const int cols = grid_.feat_cols();
  const std::int64_t hw = static_cast<std::int64_t>(rows) * cols;

  BoxSet candidates;
  for (int a = 0; a < kAnchorsPerCell; ++a) {
    for (std::int64_t cell = 0; cell < hw; ++cell) {
      const double score = sigmoid_plain(cls_logits[static_cast<std::int64_t>(a) * hw + cell]);
      if (score < score_threshold) continue;
      const int r = static_cast<int>(cell / cols);
      const int c = static_cast<int>(cell % cols);
      std::array<double, kBoxCode> d{};
      for (int k = 0; k < kBoxCode; ++k) {
        d[static_cast<std::size_t>(k)] =
            box_deltas[(static_cast<std::int64_t>(a) * kBoxCode + k) * hw + cell];
      }
      Box b = decode_box(d, anchor_box(a, r, c));
      b.score = score;
      candidates.push_back(b);
    }
  }

  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return *candidates[i].score > *candidates[j].score;
  });

  BoxSet kept;
  for (const std::size_t i : order) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (evaluation::bev_iou(candidates[i], k) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(candidates[i]);
  }
  return kept;
}

std::vector<ad::Value> DetectorModel::theta_params() const {
  std::vector<ad::Value> p{pfn_w_, pfn_b_};
  for (int i = 0; i < 3; ++i) {
    p.push_back(conv_w_[static_cast<std::size_t>(i)]);
    p.push_back(conv_b_[static_cast<std::size_t>(i)]);
  }
  return p;
}

std::vector<ad::Value> DetectorModel::phi_params() const { return {mix_w_, mix_b_}; }

std::vector<ad::Value> DetectorModel::beta_params() const {
  return {trunk_w_, trunk_b_, cls_w_, cls_b_, box_w_, box_b_};
}

std::vector<ad::Value> DetectorModel::all_params() const {
  std::vector<ad::Value> p = theta_params();
  for (const auto& v : phi_params()) p.push_back(v);
  for (const auto& v : beta_params()) p.push_back(v);
  return p;
}

}  // namespace coopadapt::detector
