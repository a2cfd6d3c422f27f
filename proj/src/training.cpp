#include "coopadapt/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "coopadapt/adapters.hpp"
#include "coopadapt/checkpoint.hpp"
#include "coopadapt/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace coopadapt::training {

namespace {

int domain_tag(Domain d) { return d == Domain::source ? 0 : 1; }

double lr_for_epoch(const TrainConfig& t, int epoch) {
  return epoch >= t.lr_decay_epoch ? t.lr * t.lr_decay_factor : t.lr;
}

std::vector<int> epoch_order(int n, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  return order;
}

struct MetricsLog {
  explicit MetricsLog(const std::string& run_dir)
      : os_(fs::path(run_dir) / "metrics.jsonl", std::ios::app) {
    if (!os_) throw std::runtime_error("cannot open metrics log in " + run_dir);
  }
  void write(const json& record) {
    os_ << record.dump() << "\n";
    os_.flush();
  }
  std::ofstream os_;
};

EgoSample load_training_sample(const Dataset& ds, int frame, int epoch,
                               const ExperimentConfig& cfg, bool with_labels) {
  const CollaborativeSample cs = ds.load_frame(frame, with_labels);
  EgoSample es = to_ego_frame(cs);
  if (cfg.train.augment.enabled) {
    Rng rng(derive_seed(cfg.seed, "aug", domain_tag(es.domain), frame, epoch));
    augment_sample(es, cfg.train.augment, rng);
  }
  return es;
}

std::uint64_t pillar_seed_for(const ExperimentConfig& cfg, Domain d, int frame, int epoch) {
  return derive_seed(cfg.seed, "pillar", domain_tag(d), frame, epoch);
}

json arch_json(const ExperimentConfig& cfg) {
  return json{{"format_version", 1}, {"config", json::parse(config_to_json_text(cfg))}};
}

ad::Value accumulate(ad::Value acc, const ad::Value& term) {
  return acc ? ad::add(acc, term) : term;
}

// Mean detection loss over frames [lo, hi), inference settings (no
// augmentation, epoch-independent pillar seeds, no gradients).
double detection_loss_over(const detector::DetectorModel& model, const Dataset& ds, int lo, int hi,
                           const ExperimentConfig& cfg) {
  ad::NoGradGuard guard;
  double total = 0.0;
  int count = 0;
  for (int idx = lo; idx < hi; ++idx) {
    const CollaborativeSample cs = ds.load_frame(idx, true);
    const EgoSample es = to_ego_frame(cs);
    const SampleForward fw =
        forward_sample(model, es, derive_seed(cfg.seed, "pillar_eval", idx), false);
    const auto targets = model.build_targets(es.boxes.value_or(BoxSet{}));
    total += model.detection_loss(fw.head, targets)->val[0];
    ++count;
  }
  return count > 0 ? total / count : 0.0;
}

}  // namespace

Adam::Adam(std::vector<ad::Value> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(ad::Tensor::zeros(p->val.shape));
    v_.emplace_back(ad::Tensor::zeros(p->val.shape));
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const bool has_grad = !p->grad.data.empty();
    for (std::int64_t k = 0; k < p->val.numel(); ++k) {
      const double g = has_grad ? p->grad[k] : 0.0;
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
      const double mhat = m_[i][k] / bc1;
      const double vhat = v_[i][k] / bc2;
      p->val[k] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    p->grad = ad::Tensor();
  }
}

void Adam::save(const std::string& path) {
  std::vector<ad::Value> blob;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    blob.push_back(ad::parameter("adam.m." + params_[i]->name, m_[i]));
    blob.push_back(ad::parameter("adam.v." + params_[i]->name, v_[i]));
  }
  blob.push_back(ad::parameter("adam.t", ad::Tensor::scalar(static_cast<double>(t_))));
  checkpoint::save_blob(path, blob);
  // Mirror the float32 quantization back into the live moments.
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i] = blob[2 * i]->val;
    v_[i] = blob[2 * i + 1]->val;
  }
}

void Adam::load(const std::string& path) {
  std::vector<ad::Value> blob;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    blob.push_back(ad::parameter("adam.m." + params_[i]->name, ad::Tensor::zeros(params_[i]->val.shape)));
    blob.push_back(ad::parameter("adam.v." + params_[i]->name, ad::Tensor::zeros(params_[i]->val.shape)));
  }
  blob.push_back(ad::parameter("adam.t", ad::Tensor::scalar(0.0)));
  checkpoint::load_blob(path, blob);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i] = blob[2 * i]->val;
    v_[i] = blob[2 * i + 1]->val;
  }
  t_ = static_cast<std::int64_t>(blob.back()->val[0]);
}

EgoSample to_ego_frame(const CollaborativeSample& sample) {
  EgoSample es;
  es.ego_idx = sample.ego_index();
  es.domain = sample.domain;
  es.ego_pose = sample.agents[static_cast<std::size_t>(es.ego_idx)].pose;
  for (const auto& agent : sample.agents) {
    es.clouds.push_back(project_to_ego(agent.cloud, agent.pose, es.ego_pose));
    es.types.push_back(agent.agent_type);
  }
  if (sample.annotations) {
    es.boxes = transform_boxes(*sample.annotations, Pose::identity(), es.ego_pose);
  }
  return es;
}

void augment_sample(EgoSample& sample, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return;
  const double yaw = rng.uniform(-cfg.max_yaw, cfg.max_yaw);
  const bool flip = cfg.flip_x && rng.uniform() < 0.5;
  const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const double cy = std::cos(yaw);
  const double sy = std::sin(yaw);

  for (auto& cloud : sample.clouds) {
    for (auto& p : cloud.points) {
      double x = cy * p.x - sy * p.y;
      double y = sy * p.x + cy * p.y;
      if (flip) y = -y;
      p.x = x * scale;
      p.y = y * scale;
      p.z = p.z * scale;
    }
  }
  if (sample.boxes) {
    for (auto& b : *sample.boxes) {
      double x = cy * b.center(0) - sy * b.center(1);
      double y = sy * b.center(0) + cy * b.center(1);
      double byaw = b.yaw + yaw;
      if (flip) {
        y = -y;
        byaw = -byaw;
      }
      b.center = Eigen::Vector3d(x * scale, y * scale, b.center(2) * scale);
      b.size *= scale;
      b.yaw = normalize_angle(byaw);
    }
  }
}

SampleForward forward_sample(const detector::DetectorModel& model, const EgoSample& sample,
                             std::uint64_t pillar_seed, bool need_encoded) {
  SampleForward fw;
  for (std::size_t j = 0; j < sample.clouds.size(); ++j) {
    fw.features.push_back(
        model.extract_features(sample.clouds[j], derive_seed(pillar_seed, "agent", j)));
  }
  if (need_encoded) {
    for (const auto& f : fw.features) fw.encoded.push_back(model.append_positional_encoding(f));
  }
  fw.head = model.predict(model.fuse(fw.features));
  return fw;
}

void save_detector_checkpoint(const detector::DetectorModel& model, const ExperimentConfig& cfg,
                              const std::string& dir, const std::vector<ad::Value>& adapter_params) {
  fs::create_directories(dir);
  checkpoint::save_blob((fs::path(dir) / "params.bin").string(), model.all_params());
  if (!adapter_params.empty()) {
    checkpoint::save_blob((fs::path(dir) / "adapters.bin").string(), adapter_params);
  }
  checkpoint::write_json_file((fs::path(dir) / "arch.json").string(), arch_json(cfg).dump(2) + "\n");
}

void load_detector_checkpoint(detector::DetectorModel& model, const ExperimentConfig& cfg,
                              const std::string& dir) {
  const auto arch_path = (fs::path(dir) / "arch.json").string();
  if (checkpoint::file_exists(arch_path)) {
    const json stored = json::parse(checkpoint::read_text_file(arch_path));
    const json now = arch_json(cfg);
    if (stored.at("config").at("grid") != now.at("config").at("grid") ||
        stored.at("config").at("model") != now.at("config").at("model")) {
      throw std::runtime_error("checkpoint " + dir + " was trained with a different grid/model");
    }
  }
  checkpoint::load_blob((fs::path(dir) / "params.bin").string(), model.all_params());
}

TrainResult pretrain_source(const ExperimentConfig& cfg, const Dataset& source,
                            const std::string& run_dir, const std::string& from_checkpoint,
                            int start_epoch) {
  if (source.size() == 0) throw std::runtime_error("pretrain_source: empty dataset");
  fs::create_directories(run_dir);
  MetricsLog metrics(run_dir);

  detector::DetectorModel model(cfg.grid, cfg.model, derive_seed(cfg.seed, "model"));
  Adam adam(model.all_params(), cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps);
  if (!from_checkpoint.empty()) {
    load_detector_checkpoint(model, cfg, from_checkpoint);
    const auto opt_path = (fs::path(from_checkpoint) / "optimizer.bin").string();
    if (checkpoint::file_exists(opt_path)) adam.load(opt_path);
  }

  const int n = source.size();
  int val_n = static_cast<int>(std::floor(cfg.train.val_fraction * n));
  val_n = std::min(val_n, n - 1);
  const int train_n = n - val_n;

  const std::string ckpt_dir = (fs::path(run_dir) / "checkpoint").string();
  double best_val = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  int epochs_run = 0;

  for (int epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
    const double lr = lr_for_epoch(cfg.train, epoch);
    const auto order = epoch_order(train_n, derive_seed(cfg.seed, "order.source", epoch));
    const int batch = std::min(cfg.train.pretrain_batch, train_n);
    const int steps = std::max(1, train_n / batch);

    double epoch_loss = 0.0;
    for (int s = 0; s < steps; ++s) {
      ad::Value l_det;
      for (int k = 0; k < batch; ++k) {
        const int idx = order[static_cast<std::size_t>((s * batch + k) % train_n)];
        const EgoSample es = load_training_sample(source, idx, epoch, cfg, true);
        const SampleForward fw =
            forward_sample(model, es, pillar_seed_for(cfg, Domain::source, idx, epoch), false);
        const auto targets = model.build_targets(es.boxes.value_or(BoxSet{}));
        l_det = accumulate(l_det, model.detection_loss(fw.head, targets));
      }
      l_det = ad::scale(l_det, 1.0 / batch);
      ad::backward(l_det);
      adam.step(lr);
      epoch_loss += l_det->val[0];
    }
    ++epochs_run;

    save_detector_checkpoint(model, cfg, ckpt_dir);
    adam.save((fs::path(ckpt_dir) / "optimizer.bin").string());

    json rec{{"phase", "pretrain"},
             {"epoch", epoch},
             {"lr", lr},
             {"l_det", epoch_loss / steps}};
    if (val_n > 0) {
      const double val_loss = detection_loss_over(model, source, train_n, n, cfg);
      rec["val_l_det"] = val_loss;
      if (val_loss < best_val - cfg.train.early_stop_min_delta) {
        best_val = val_loss;
        bad_epochs = 0;
      } else {
        ++bad_epochs;
      }
      metrics.write(rec);
      if (bad_epochs >= cfg.train.early_stop_patience) break;
    } else {
      metrics.write(rec);
    }
  }

  if (epochs_run == 0 && start_epoch >= cfg.train.epochs) {
    // Nothing to do; still emit a checkpoint so downstream steps have one.
    save_detector_checkpoint(model, cfg, ckpt_dir);
    adam.save((fs::path(ckpt_dir) / "optimizer.bin").string());
  }
  return {ckpt_dir, epochs_run};
}

TrainResult adapt_dusa(const ExperimentConfig& cfg, const std::string& from_checkpoint,
                       const Dataset& source, const Dataset& target, const std::string& run_dir) {
  if (source.size() == 0 || target.size() == 0) {
    throw std::runtime_error("adapt_dusa: both datasets must be non-empty");
  }
  const bool have_ckpt =
      !from_checkpoint.empty() &&
      checkpoint::file_exists((fs::path(from_checkpoint) / "params.bin").string());
  if (!have_ckpt && !cfg.train.allow_cold_start) {
    throw std::runtime_error(
        "adapt_dusa: no pretrained checkpoint at '" + from_checkpoint +
        "'; cold-start adaptation is refused by default (set train.allow_cold_start)");
  }
  fs::create_directories(run_dir);
  MetricsLog metrics(run_dir);

  detector::DetectorModel model(cfg.grid, cfg.model, derive_seed(cfg.seed, "model"));
  if (have_ckpt) load_detector_checkpoint(model, cfg, from_checkpoint);

  const int c2 = cfg.model.channels + 2;
  const int rows = cfg.grid.feat_rows();
  const int cols = cfg.grid.feat_cols();

  std::optional<adapters::LsaAdapter> lsa;
  std::optional<adapters::CiaAdapter> cia;
  std::vector<ad::Value> opt_params = model.all_params();
  std::vector<ad::Value> adapter_params;
  if (cfg.lsa.enabled) {
    lsa.emplace(c2, rows, cols, cfg.lsa, derive_seed(cfg.seed, "lsa"));
    for (const auto& p : lsa->params()) {
      opt_params.push_back(p);
      adapter_params.push_back(p);
    }
  }
  if (cfg.cia.enabled) {
    cia.emplace(c2, cfg.model.n_agent_types, cfg.cia, derive_seed(cfg.seed, "cia"));
    for (const auto& p : cia->params()) {
      opt_params.push_back(p);
      adapter_params.push_back(p);
    }
  }
  Adam adam(opt_params, cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps);

  const int ns = source.size();
  const int nt = target.size();
  const int bs = std::min(cfg.train.batch_source, ns);
  const int bt = std::min(cfg.train.batch_target, nt);
  const std::string ckpt_dir = (fs::path(run_dir) / "checkpoint").string();

  int epochs_run = 0;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const double lr = lr_for_epoch(cfg.train, epoch);
    const auto src_order = epoch_order(ns, derive_seed(cfg.seed, "order.source", epoch));
    const auto tgt_order = epoch_order(nt, derive_seed(cfg.seed, "order.target", epoch));
    const int steps = std::max(1, std::min(ns / bs, nt / bt));

    double sum_det = 0.0, sum_sim = 0.0, sum_agent = 0.0;
    double sim_correct = 0.0, sim_total = 0.0, agent_correct = 0.0, agent_total = 0.0;

    for (int s = 0; s < steps; ++s) {
      Rng dropout_rng(derive_seed(cfg.seed, "dropout", epoch, s));
      std::vector<adapters::LsaBatchItem> lsa_items;
      std::vector<adapters::CiaSample> cia_samples;

      ad::Value l_det;
      for (int k = 0; k < bs; ++k) {
        const int idx = src_order[static_cast<std::size_t>((s * bs + k) % ns)];
        const EgoSample es = load_training_sample(source, idx, epoch, cfg, true);
        const SampleForward fw = forward_sample(
            model, es, pillar_seed_for(cfg, Domain::source, idx, epoch), cfg.lsa.enabled);
        const auto targets = model.build_targets(es.boxes.value_or(BoxSet{}));
        l_det = accumulate(l_det, model.detection_loss(fw.head, targets));
        if (cfg.lsa.enabled) {
          lsa_items.push_back({fw.encoded[static_cast<std::size_t>(es.ego_idx)], 0});
        }
      }
      l_det = ad::scale(l_det, 1.0 / bs);

      for (int k = 0; k < bt; ++k) {
        const int idx = tgt_order[static_cast<std::size_t>((s * bt + k) % nt)];
        const EgoSample es = load_training_sample(target, idx, epoch, cfg, false);
        const SampleForward fw =
            forward_sample(model, es, pillar_seed_for(cfg, Domain::target, idx, epoch),
                           cfg.lsa.enabled || cfg.cia.enabled);
        if (cfg.lsa.enabled) {
          lsa_items.push_back({fw.encoded[static_cast<std::size_t>(es.ego_idx)], 1});
        }
        if (cfg.cia.enabled) {
          std::vector<ad::Tensor> confs;
          {
            // Per-agent confidence through the single-agent fusion path so
            // the head sees in-distribution inputs; constant under backprop.
            ad::NoGradGuard guard;
            for (const auto& f : fw.features) {
              confs.push_back(
                  detector::DetectorModel::confidence_map(model.predict(model.fuse({f})))->val);
            }
          }
          adapters::CiaSample cs;
          cs.agent_features = fw.encoded;
          for (const auto t : es.types) cs.agent_labels.push_back(t == AgentType::vehicle ? 0 : 1);
          cs.m_conf = adapters::cia_confidence_min(confs);
          cia_samples.push_back(std::move(cs));
        }
      }

      ad::Value total = l_det;
      ad::Value l_sim, l_agent;
      if (cfg.lsa.enabled) {
        l_sim = adapters::lsa_loss(lsa_items, *lsa, cfg.grl.lsa_gamma, true, &dropout_rng);
        total = ad::add(total, ad::scale(l_sim, cfg.train.alpha1));
      }
      if (cfg.cia.enabled) {
        l_agent = adapters::cia_loss(cia_samples, *cia, cfg.grl.cia_gamma, cfg.cia.use_conf);
        total = ad::add(total, ad::scale(l_agent, cfg.train.alpha2));
      }
      ad::backward(total);
      adam.step(lr);

      sum_det += l_det->val[0];
      if (l_sim) sum_sim += l_sim->val[0];
      if (l_agent) sum_agent += l_agent->val[0];

      // Diagnostics in evaluation mode (dropout off, no gradients).
      if (cfg.lsa.enabled) {
        ad::NoGradGuard guard;
        for (const auto& item : lsa_items) {
          const auto pooled = adapters::LsaAdapter::pool(lsa->select(item.encoded_ego));
          const double logit = lsa->discriminate(pooled, false, nullptr)->val[0];
          sim_correct += (logit > 0.0) == (item.domain_label == 1) ? 1.0 : 0.0;
          sim_total += 1.0;
        }
      }
      if (cfg.cia.enabled) {
        ad::NoGradGuard guard;
        for (const auto& csample : cia_samples) {
          for (std::size_t j = 0; j < csample.agent_features.size(); ++j) {
            const auto logits = cia->logits(csample.agent_features[j]);
            const std::int64_t hw = logits->val.shape[1] * logits->val.shape[2];
            for (std::int64_t i = 0; i < hw; ++i) {
              int arg = 0;
              double best = logits->val[i];
              for (int ccl = 1; ccl < cfg.model.n_agent_types; ++ccl) {
                if (logits->val[ccl * hw + i] > best) {
                  best = logits->val[ccl * hw + i];
                  arg = ccl;
                }
              }
              agent_correct += arg == csample.agent_labels[j] ? 1.0 : 0.0;
              agent_total += 1.0;
            }
          }
        }
      }
    }
    ++epochs_run;

    save_detector_checkpoint(model, cfg, ckpt_dir, adapter_params);
    adam.save((fs::path(ckpt_dir) / "optimizer.bin").string());

    json rec{{"phase", "adapt_dusa"}, {"epoch", epoch},          {"lr", lr},
             {"l_det", sum_det / steps}, {"l_sim", sum_sim / steps}, {"l_agent", sum_agent / steps}};
    if (sim_total > 0) rec["disc_sim_acc"] = sim_correct / sim_total;
    if (agent_total > 0) rec["disc_agent_acc"] = agent_correct / agent_total;
    metrics.write(rec);
  }

  if (epochs_run == 0) {
    save_detector_checkpoint(model, cfg, ckpt_dir, adapter_params);
    adam.save((fs::path(ckpt_dir) / "optimizer.bin").string());
  }
  return {ckpt_dir, epochs_run};
}

TrainResult baseline_self_training(const ExperimentConfig& cfg, const std::string& from_checkpoint,
                                   const Dataset& target, const Dataset* source,
                                   const std::string& run_dir) {
  const bool have_ckpt =
      !from_checkpoint.empty() &&
      checkpoint::file_exists((fs::path(from_checkpoint) / "params.bin").string());
  if (!have_ckpt) {
    throw std::runtime_error("baseline_self_training: pretrained checkpoint required");
  }
  if (target.size() == 0) throw std::runtime_error("baseline_self_training: empty target dataset");
  fs::create_directories(run_dir);
  MetricsLog metrics(run_dir);

  detector::DetectorModel model(cfg.grid, cfg.model, derive_seed(cfg.seed, "model"));
  load_detector_checkpoint(model, cfg, from_checkpoint);
  Adam adam(model.all_params(), cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps);

  const int nt = target.size();
  int global_epoch = 0;

  std::vector<BoxSet> pseudo(static_cast<std::size_t>(nt));
  for (int round = 0; round < cfg.selftrain.rounds; ++round) {
    // Frozen inference pass.
    int total_pseudo = 0;
    {
      ad::NoGradGuard guard;
      for (int idx = 0; idx < nt; ++idx) {
        const CollaborativeSample cs = target.load_frame(idx, false);
        const EgoSample es = to_ego_frame(cs);
        const SampleForward fw = forward_sample(
            model, es, derive_seed(cfg.seed, "pillar_pseudo", round, idx), false);
        const BoxSet decoded = model.decode_boxes(fw.head.cls_logits->val, fw.head.box_deltas->val,
                                                  cfg.eval.score_threshold, cfg.eval.nms_iou);
        BoxSet kept;
        for (const auto& b : decoded) {
          if (b.score.value_or(0.0) >= cfg.selftrain.tau) kept.push_back(b);
        }
        pseudo[static_cast<std::size_t>(idx)] =
            transform_boxes(kept, es.ego_pose, Pose::identity());
        total_pseudo += static_cast<int>(kept.size());
      }
    }

    {
      json dump = json::array();
      for (const auto& frame_boxes : pseudo) {
        json fb = json::array();
        for (const auto& b : frame_boxes) {
          fb.push_back(json{{"cx", b.center(0)}, {"cy", b.center(1)}, {"cz", b.center(2)},
                            {"l", b.size(0)},   {"w", b.size(1)},   {"h", b.size(2)},
                            {"yaw", b.yaw},     {"score", b.score.value_or(0.0)}});
        }
        dump.push_back(fb);
      }
      checkpoint::write_json_file(
          (fs::path(run_dir) / ("pseudo_labels_round_" + std::to_string(round) + ".json")).string(),
          dump.dump(2) + "\n");
    }

    json rec{{"phase", "selftrain"}, {"round", round}, {"pseudo_labels", total_pseudo}};
    if (total_pseudo == 0) {
      rec["warning"] = "no pseudo-labels above tau; skipping finetune for this round";
      std::cerr << "[selftrain] round " << round
                << ": zero pseudo-labels above tau; skipping finetune\n";
      metrics.write(rec);
    } else {
      metrics.write(rec);
      struct PoolEntry {
        int idx;
        bool from_source;
      };
      std::vector<PoolEntry> pool;
      for (int i = 0; i < nt; ++i) pool.push_back({i, false});
      if (cfg.selftrain.mix_source && source) {
        for (int i = 0; i < source->size(); ++i) pool.push_back({i, true});
      }

      for (int e = 0; e < cfg.selftrain.epochs_per_round; ++e) {
        const double lr = lr_for_epoch(cfg.train, global_epoch);
        const auto order = epoch_order(static_cast<int>(pool.size()),
                                       derive_seed(cfg.seed, "order.selftrain", global_epoch));
        const int batch = std::min(cfg.train.batch_target, static_cast<int>(pool.size()));
        const int steps = std::max(1, static_cast<int>(pool.size()) / batch);
        double epoch_loss = 0.0;
        for (int s = 0; s < steps; ++s) {
          ad::Value l_det;
          for (int k = 0; k < batch; ++k) {
            const PoolEntry entry =
                pool[static_cast<std::size_t>(order[static_cast<std::size_t>((s * batch + k) % pool.size())])];
            EgoSample es;
            if (entry.from_source) {
              es = load_training_sample(*source, entry.idx, global_epoch, cfg, true);
            } else {
              const CollaborativeSample cs = target.load_frame(entry.idx, false);
              es = to_ego_frame(cs);
              es.boxes = transform_boxes(pseudo[static_cast<std::size_t>(entry.idx)],
                                         Pose::identity(), es.ego_pose);
              if (cfg.train.augment.enabled) {
                Rng rng(derive_seed(cfg.seed, "aug", domain_tag(es.domain), entry.idx, global_epoch));
                augment_sample(es, cfg.train.augment, rng);
              }
            }
            const SampleForward fw = forward_sample(
                model, es, pillar_seed_for(cfg, es.domain, entry.idx, global_epoch), false);
            const auto targets = model.build_targets(es.boxes.value_or(BoxSet{}));
            l_det = accumulate(l_det, model.detection_loss(fw.head, targets));
          }
          l_det = ad::scale(l_det, 1.0 / batch);
          ad::backward(l_det);
          adam.step(lr);
          epoch_loss += l_det->val[0];
        }
        metrics.write(json{{"phase", "selftrain_finetune"},
                           {"round", round},
                           {"epoch", global_epoch},
                           {"lr", lr},
                           {"l_det", epoch_loss / steps}});
        ++global_epoch;
      }
    }
    save_detector_checkpoint(model, cfg,
                             (fs::path(run_dir) / ("round_" + std::to_string(round))).string());
  }

  const std::string ckpt_dir = (fs::path(run_dir) / "checkpoint").string();
  save_detector_checkpoint(model, cfg, ckpt_dir);
  adam.save((fs::path(ckpt_dir) / "optimizer.bin").string());
  return {ckpt_dir, global_epoch};
}

TrainResult baseline_naive_discriminator(const ExperimentConfig& cfg,
                                         const std::string& from_checkpoint, const Dataset& source,
                                         const Dataset& target, const std::string& run_dir) {
  const bool have_ckpt =
      !from_checkpoint.empty() &&
      checkpoint::file_exists((fs::path(from_checkpoint) / "params.bin").string());
  if (!have_ckpt && !cfg.train.allow_cold_start) {
    throw std::runtime_error("baseline_naive_discriminator: pretrained checkpoint required");
  }
  if (source.size() == 0 || target.size() == 0) {
    throw std::runtime_error("baseline_naive_discriminator: both datasets must be non-empty");
  }
  fs::create_directories(run_dir);
  MetricsLog metrics(run_dir);

  detector::DetectorModel model(cfg.grid, cfg.model, derive_seed(cfg.seed, "model"));
  if (have_ckpt) load_detector_checkpoint(model, cfg, from_checkpoint);

  // Same discriminator family as the LSA but applied to every agent's pooled
  // feature with plain average pooling (no location selector).
  adapters::LsaConfig ncfg;
  ncfg.enabled = true;
  ncfg.use_lfs = false;
  ncfg.hidden = cfg.lsa.hidden;
  ncfg.dropout = cfg.lsa.dropout;
  adapters::LsaAdapter disc(cfg.model.channels + 2, cfg.grid.feat_rows(), cfg.grid.feat_cols(),
                            ncfg, derive_seed(cfg.seed, "naive"), "naive");

  std::vector<ad::Value> opt_params = model.all_params();
  for (const auto& p : disc.params()) opt_params.push_back(p);
  Adam adam(opt_params, cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps);

  const int ns = source.size();
  const int nt = target.size();
  const int bs = std::min(cfg.train.batch_source, ns);
  const int bt = std::min(cfg.train.batch_target, nt);

  int epochs_run = 0;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const double lr = lr_for_epoch(cfg.train, epoch);
    const auto src_order = epoch_order(ns, derive_seed(cfg.seed, "order.source", epoch));
    const auto tgt_order = epoch_order(nt, derive_seed(cfg.seed, "order.target", epoch));
    const int steps = std::max(1, std::min(ns / bs, nt / bt));

    double sum_det = 0.0, sum_disc = 0.0, correct = 0.0, total_n = 0.0;
    for (int s = 0; s < steps; ++s) {
      Rng dropout_rng(derive_seed(cfg.seed, "dropout", epoch, s));
      std::vector<adapters::LsaBatchItem> items;

      ad::Value l_det;
      for (int k = 0; k < bs; ++k) {
        const int idx = src_order[static_cast<std::size_t>((s * bs + k) % ns)];
        const EgoSample es = load_training_sample(source, idx, epoch, cfg, true);
        const SampleForward fw =
            forward_sample(model, es, pillar_seed_for(cfg, Domain::source, idx, epoch), true);
        const auto targets = model.build_targets(es.boxes.value_or(BoxSet{}));
        l_det = accumulate(l_det, model.detection_loss(fw.head, targets));
        for (const auto& enc : fw.encoded) items.push_back({enc, 0});
      }
      l_det = ad::scale(l_det, 1.0 / bs);

      for (int k = 0; k < bt; ++k) {
        const int idx = tgt_order[static_cast<std::size_t>((s * bt + k) % nt)];
        const EgoSample es = load_training_sample(target, idx, epoch, cfg, false);
        const SampleForward fw =
            forward_sample(model, es, pillar_seed_for(cfg, Domain::target, idx, epoch), true);
        for (const auto& enc : fw.encoded) items.push_back({enc, 1});
      }

      auto l_disc = adapters::lsa_loss(items, disc, cfg.grl.lsa_gamma, true, &dropout_rng);
      auto total = ad::add(l_det, ad::scale(l_disc, cfg.train.alpha1));
      ad::backward(total);
      adam.step(lr);

      sum_det += l_det->val[0];
      sum_disc += l_disc->val[0];
      {
        ad::NoGradGuard guard;
        for (const auto& item : items) {
          const auto pooled = adapters::LsaAdapter::pool(disc.select(item.encoded_ego));
          const double logit = disc.discriminate(pooled, false, nullptr)->val[0];
          correct += (logit > 0.0) == (item.domain_label == 1) ? 1.0 : 0.0;
          total_n += 1.0;
        }
      }
    }
    ++epochs_run;
    json rec{{"phase", "naive_discriminator"},
             {"epoch", epoch},
             {"lr", lr},
             {"l_det", sum_det / steps},
             {"l_disc", sum_disc / steps}};
    if (total_n > 0) rec["disc_acc"] = correct / total_n;
    metrics.write(rec);
  }

  const std::string ckpt_dir = (fs::path(run_dir) / "checkpoint").string();
  save_detector_checkpoint(model, cfg, ckpt_dir, disc.params());
  adam.save((fs::path(ckpt_dir) / "optimizer.bin").string());
  return {ckpt_dir, epochs_run};
}

double domain_probe_accuracy(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                             const Dataset& source, const Dataset& target, int probe_steps,
                             std::uint64_t probe_seed) {
  detector::DetectorModel model(cfg.grid, cfg.model, derive_seed(cfg.seed, "model"));
  load_detector_checkpoint(model, cfg, checkpoint_dir);

  const int c2 = cfg.model.channels + 2;
  struct Sampled {
    std::vector<std::vector<double>> feats;
  };
  auto collect = [&](const Dataset& ds, int dlabel) {
    Sampled out;
    ad::NoGradGuard guard;
    for (int idx = 0; idx < ds.size(); ++idx) {
      const CollaborativeSample cs = ds.load_frame(idx, false);
      const EgoSample es = to_ego_frame(cs);
      const auto f = model.extract_features(es.clouds[static_cast<std::size_t>(es.ego_idx)],
                                            derive_seed(probe_seed, "probe_pillar", dlabel, idx));
      const auto pooled = ad::mean_hw(model.append_positional_encoding(f));
      out.feats.push_back(pooled->val.data);
    }
    return out;
  };
  const Sampled src = collect(source, 0);
  const Sampled tgt = collect(target, 1);

  auto split_at = [](int n) { return std::max(1, (3 * n) / 4); };
  const int s_split = split_at(static_cast<int>(src.feats.size()));
  const int t_split = split_at(static_cast<int>(tgt.feats.size()));

  auto pack = [&](bool train_part) {
    std::vector<const std::vector<double>*> rows;
    std::vector<double> labels;
    const auto add = [&](const Sampled& s, int split, double label) {
      const int n = static_cast<int>(s.feats.size());
      const int lo = train_part ? 0 : split;
      const int hi = train_part ? split : n;
      for (int i = lo; i < hi; ++i) {
        rows.push_back(&s.feats[static_cast<std::size_t>(i)]);
        labels.push_back(label);
      }
    };
    add(src, s_split, 0.0);
    add(tgt, t_split, 1.0);
    ad::Tensor x({static_cast<std::int64_t>(rows.size()), c2});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy(rows[i]->begin(), rows[i]->end(), x.data.begin() + static_cast<std::int64_t>(i) * c2);
    }
    return std::make_pair(x, ad::Tensor({static_cast<std::int64_t>(labels.size())}, labels));
  };
  const auto [x_train, y_train] = pack(true);
  const auto [x_eval, y_eval] = pack(false);

  // Fresh probe with the discriminator architecture, no dropout.
  Rng rng(derive_seed(probe_seed, "probe_init"));
  const int h = cfg.lsa.hidden;
  auto he = [&](std::vector<std::int64_t> shape, std::int64_t fan_in) {
    ad::Tensor t(std::move(shape));
    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = sigma * rng.normal();
    return t;
  };
  auto w1 = ad::parameter("probe.fc1.w", he({c2, h}, c2));
  auto b1 = ad::parameter("probe.fc1.b", ad::Tensor({h}));
  auto w2 = ad::parameter("probe.fc2.w", he({h, h}, h));
  auto b2 = ad::parameter("probe.fc2.b", ad::Tensor({h}));
  auto w3 = ad::parameter("probe.fc3.w", he({h, 1}, h));
  auto b3 = ad::parameter("probe.fc3.b", ad::Tensor({1}));
  const std::vector<ad::Value> probe_params{w1, b1, w2, b2, w3, b3};

  auto forward_logits = [&](const ad::Tensor& x) {
    auto xin = ad::constant(x);
    auto h1 = ad::relu(ad::linear(xin, w1, b1));
    auto h2 = ad::relu(ad::linear(h1, w2, b2));
    auto logits = ad::linear(h2, w3, b3);
    return ad::reshape(logits, {logits->val.shape[0]});
  };

  Adam adam(probe_params, 0.9, 0.999, 1e-8);
  for (int s = 0; s < probe_steps; ++s) {
    auto loss = ad::mean_all(ad::bce_with_logits(forward_logits(x_train), y_train));
    ad::backward(loss);
    adam.step(1e-3);
  }

  ad::NoGradGuard guard;
  const auto logits = forward_logits(x_eval);
  double correct = 0.0;
  for (std::int64_t i = 0; i < logits->val.numel(); ++i) {
    correct += (logits->val[i] > 0.0) == (y_eval[i] > 0.5) ? 1.0 : 0.0;
  }
  return correct / static_cast<double>(logits->val.numel());
}

double lsa_discriminator_holdout_accuracy(const ExperimentConfig& cfg,
                                          const std::string& checkpoint_dir, const Dataset& source,
                                          const Dataset& target) {
  detector::DetectorModel model(cfg.grid, cfg.model, derive_seed(cfg.seed, "model"));
  load_detector_checkpoint(model, cfg, checkpoint_dir);

  const int c2 = cfg.model.channels + 2;
  adapters::LsaAdapter lsa(c2, cfg.grid.feat_rows(), cfg.grid.feat_cols(), cfg.lsa,
                           derive_seed(cfg.seed, "lsa"));
  std::vector<ad::Value> adapter_params = lsa.params();
  std::optional<adapters::CiaAdapter> cia;
  if (cfg.cia.enabled) {
    cia.emplace(c2, cfg.model.n_agent_types, cfg.cia, derive_seed(cfg.seed, "cia"));
    for (const auto& p : cia->params()) adapter_params.push_back(p);
  }
  checkpoint::load_blob((fs::path(checkpoint_dir) / "adapters.bin").string(), adapter_params);

  ad::NoGradGuard guard;
  double correct = 0.0, total = 0.0;
  auto run = [&](const Dataset& ds, int dlabel) {
    const int lo = std::max(1, (3 * ds.size()) / 4);
    for (int idx = lo; idx < ds.size(); ++idx) {
      const EgoSample es = to_ego_frame(ds.load_frame(idx, false));
      const auto f = model.extract_features(es.clouds[static_cast<std::size_t>(es.ego_idx)],
                                            derive_seed(cfg.seed, "pillar_holdout", dlabel, idx));
      const auto pooled = adapters::LsaAdapter::pool(lsa.select(model.append_positional_encoding(f)));
      const double logit = lsa.discriminate(pooled, false, nullptr)->val[0];
      correct += (logit > 0.0) == (dlabel == 1) ? 1.0 : 0.0;
      total += 1.0;
    }
  };
  run(source, 0);
  run(target, 1);
  return total > 0.0 ? correct / total : 0.0;
}

}  // namespace coopadapt::training
