#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "coopadapt/adapters.hpp"
#include "coopadapt/checkpoint.hpp"
#include "coopadapt/evaluation.hpp"
#include "coopadapt/synthgen.hpp"
#include "coopadapt/training.hpp"
#include "helpers.hpp"

using namespace coopadapt;
namespace tr = coopadapt::training;
namespace sg = coopadapt::synthgen;
namespace ad = coopadapt::ad;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("coopadapt_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

ExperimentConfig tiny_cfg() {
  ExperimentConfig cfg;
  cfg.seed = 17;
  cfg.grid.x_min = -12.8;
  cfg.grid.x_max = 12.8;
  cfg.grid.y_min = -12.8;
  cfg.grid.y_max = 12.8;
  cfg.grid.z_min = -3.0;
  cfg.grid.z_max = 1.0;
  cfg.grid.cell_size = 1.6;  // 16x16 pillars -> 8x8 features
  cfg.grid.feature_stride = 2;
  cfg.model.channels = 6;
  cfg.model.point_hidden = 6;
  cfg.model.max_points_per_pillar = 12;
  cfg.model.anchor_size = {4.5, 1.9, 1.6};
  cfg.train.epochs = 1;
  cfg.train.pretrain_batch = 2;
  cfg.train.batch_source = 2;
  cfg.train.batch_target = 2;
  cfg.train.val_fraction = 0.0;
  cfg.lsa.hidden = 8;
  cfg.cia.hidden = 8;
  return cfg;
}

sg::DomainProfile tiny_profile(const std::string& name) {
  auto p = sg::builtin_profile(name);
  p.scene.road_half_x = 10.0;
  p.scene.road_half_y = 10.0;
  p.scene.n_cars = 4;
  p.scene.ego_pose = Eigen::Vector3d(-3.0, 0.0, 0.0);
  p.scene.infra_pose = Eigen::Vector3d(8.0, 0.0, M_PI);
  p.vehicle_sensor.azimuth_res_deg = 3.0;
  p.infrastructure_sensor.azimuth_res_deg = 3.0;
  p.vehicle_sensor.beams = std::min(p.vehicle_sensor.beams, 24);
  p.infrastructure_sensor.beams = std::min(p.infrastructure_sensor.beams, 48);
  return p;
}

struct TinyData {
  fs::path dir;
  std::string source;
  std::string target;
};

TinyData make_tiny_datasets(const std::string& tag, int frames = 6) {
  TinyData d;
  d.dir = temp_dir(tag);
  d.source = (d.dir / "src").string();
  d.target = (d.dir / "tgt").string();
  sg::generate_dataset(tiny_profile("synthetic_sim"), frames, d.source, 100);
  sg::generate_dataset(tiny_profile("synthetic_real"), frames, d.target, 200);
  return d;
}

}  // namespace

TEST_CASE("adam: update matches a hand-rolled oracle fed finite-difference gradients") {
  // Quadratic objective over a 3-parameter toy model.
  auto p = ad::parameter("p", ad::Tensor({3}, {0.7, -0.4, 0.2}));
  const ad::Tensor target({3}, {0.1, 0.3, -0.5});
  auto build_loss = [&]() {
    auto diff = ad::sub(p, ad::constant(target));
    return ad::sum(ad::mul(diff, diff));
  };

  // Reference Adam on finite-difference gradients of the same quadratic.
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> x = {0.7, -0.4, 0.2}, m(3, 0.0), v(3, 0.0);
  auto quad = [&](const std::vector<double>& q) {
    double l = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double e = q[static_cast<std::size_t>(i)] - target[i];
      l += e * e;
    }
    return l;
  };

  tr::Adam adam({p}, b1, b2, eps);
  for (int step = 1; step <= 3; ++step) {
    auto l = build_loss();
    ad::backward(l);
    adam.step(lr);

    for (int i = 0; i < 3; ++i) {
      const double h = 1e-6;
      auto xp = x, xm = x;
      xp[static_cast<std::size_t>(i)] += h;
      xm[static_cast<std::size_t>(i)] -= h;
      const double g = (quad(xp) - quad(xm)) / (2.0 * h);
      m[static_cast<std::size_t>(i)] = b1 * m[static_cast<std::size_t>(i)] + (1.0 - b1) * g;
      v[static_cast<std::size_t>(i)] = b2 * v[static_cast<std::size_t>(i)] + (1.0 - b2) * g * g;
      const double mhat = m[static_cast<std::size_t>(i)] / (1.0 - std::pow(b1, step));
      const double vhat = v[static_cast<std::size_t>(i)] / (1.0 - std::pow(b2, step));
      x[static_cast<std::size_t>(i)] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    for (int i = 0; i < 3; ++i) {
      CHECK(p->val[i] == doctest::Approx(x[static_cast<std::size_t>(i)]).epsilon(1e-3));
    }
  }
}

TEST_CASE("pretrain: loss decreases, metrics and checkpoints are written") {
  const auto data = make_tiny_datasets("pretrain_basic");
  ExperimentConfig cfg = tiny_cfg();
  cfg.train.epochs = 3;
  const Dataset source = Dataset::open(data.source);

  const fs::path run = data.dir / "run";
  const auto result = tr::pretrain_source(cfg, source, run.string());
  CHECK(result.epochs_run == 3);
  CHECK(fs::exists(fs::path(result.checkpoint_dir) / "params.bin"));
  CHECK(fs::exists(fs::path(result.checkpoint_dir) / "optimizer.bin"));
  CHECK(fs::exists(fs::path(result.checkpoint_dir) / "arch.json"));

  std::ifstream is(run / "metrics.jsonl");
  REQUIRE(is);
  std::vector<json> recs;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) recs.push_back(json::parse(line));
  }
  REQUIRE(recs.size() == 3);
  CHECK(recs.front().at("l_det").get<double>() > recs.back().at("l_det").get<double>());
}

TEST_CASE("pretrain: exact step lr schedule") {
  const auto data = make_tiny_datasets("lr_schedule", 4);
  ExperimentConfig cfg = tiny_cfg();
  cfg.train.epochs = 3;
  cfg.train.lr_decay_epoch = 2;
  const Dataset source = Dataset::open(data.source);
  const fs::path run = data.dir / "run";
  tr::pretrain_source(cfg, source, run.string());

  std::ifstream is(run / "metrics.jsonl");
  std::vector<double> lrs;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) lrs.push_back(json::parse(line).at("lr").get<double>());
  }
  REQUIRE(lrs.size() == 3);
  CHECK(lrs[0] == 0.001);
  CHECK(lrs[1] == 0.001);
  CHECK(lrs[2] == 0.001 * 0.1);
}

TEST_CASE("pretrain: full-run determinism and save/resume bit-identity") {
  const auto data = make_tiny_datasets("resume");
  const Dataset source = Dataset::open(data.source);

  ExperimentConfig cfg = tiny_cfg();
  cfg.train.epochs = 2;

  const auto run_a = tr::pretrain_source(cfg, source, (data.dir / "a").string());
  const auto run_b = tr::pretrain_source(cfg, source, (data.dir / "b").string());
  CHECK(slurp(fs::path(run_a.checkpoint_dir) / "params.bin") ==
        slurp(fs::path(run_b.checkpoint_dir) / "params.bin"));

  // Stop after epoch 0, then resume into epoch 1: byte-identical final state.
  ExperimentConfig cfg1 = cfg;
  cfg1.train.epochs = 1;
  const auto run_c = tr::pretrain_source(cfg1, source, (data.dir / "c").string());
  const auto run_d = tr::pretrain_source(cfg, source, (data.dir / "d").string(),
                                         run_c.checkpoint_dir, 1);
  CHECK(run_d.epochs_run == 1);
  CHECK(slurp(fs::path(run_a.checkpoint_dir) / "params.bin") ==
        slurp(fs::path(run_d.checkpoint_dir) / "params.bin"));
  CHECK(slurp(fs::path(run_a.checkpoint_dir) / "optimizer.bin") ==
        slurp(fs::path(run_d.checkpoint_dir) / "optimizer.bin"));
}

TEST_CASE("adapt with alpha1 = alpha2 = 0 is bit-identical to continued pretraining") {
  const auto data = make_tiny_datasets("alpha_zero");
  const Dataset source = Dataset::open(data.source);
  const Dataset target = Dataset::open(data.target);

  ExperimentConfig cfg = tiny_cfg();
  cfg.train.epochs = 1;
  const auto pre = tr::pretrain_source(cfg, source, (data.dir / "pre").string());

  // Continued pretraining: fresh optimizer, epoch counter restarted, source
  // batches of the same size as the adapt loop draws.
  const fs::path ckpt_no_opt = data.dir / "ckpt_no_opt";
  fs::create_directories(ckpt_no_opt);
  fs::copy_file(fs::path(pre.checkpoint_dir) / "params.bin", ckpt_no_opt / "params.bin");
  fs::copy_file(fs::path(pre.checkpoint_dir) / "arch.json", ckpt_no_opt / "arch.json");

  ExperimentConfig cont_cfg = cfg;
  cont_cfg.train.pretrain_batch = cfg.train.batch_source;
  const auto cont =
      tr::pretrain_source(cont_cfg, source, (data.dir / "cont").string(), ckpt_no_opt.string(), 0);

  ExperimentConfig adapt_cfg = cfg;
  adapt_cfg.train.alpha1 = 0.0;
  adapt_cfg.train.alpha2 = 0.0;
  const auto adapted = tr::adapt_dusa(adapt_cfg, pre.checkpoint_dir, source, target,
                                      (data.dir / "adapt").string());

  CHECK(slurp(fs::path(cont.checkpoint_dir) / "params.bin") ==
        slurp(fs::path(adapted.checkpoint_dir) / "params.bin"));
}

TEST_CASE("adapt: refuses a cold start unless explicitly allowed") {
  const auto data = make_tiny_datasets("cold_start", 4);
  const Dataset source = Dataset::open(data.source);
  const Dataset target = Dataset::open(data.target);
  ExperimentConfig cfg = tiny_cfg();
  CHECK_THROWS_WITH_AS(
      tr::adapt_dusa(cfg, (data.dir / "missing").string(), source, target,
                     (data.dir / "run").string()),
      doctest::Contains("cold-start"), std::runtime_error);
  cfg.train.allow_cold_start = true;
  CHECK_NOTHROW(tr::adapt_dusa(cfg, "", source, target, (data.dir / "run2").string()));
}

TEST_CASE("adapt: deleting target labels changes no byte of the trajectory") {
  const auto data = make_tiny_datasets("unsupervised");
  const Dataset source = Dataset::open(data.source);
  const Dataset target = Dataset::open(data.target);

  ExperimentConfig cfg = tiny_cfg();
  const auto pre = tr::pretrain_source(cfg, source, (data.dir / "pre").string());
  const auto run1 =
      tr::adapt_dusa(cfg, pre.checkpoint_dir, source, target, (data.dir / "r1").string());
  const std::string bytes1 = slurp(fs::path(run1.checkpoint_dir) / "params.bin");
  const std::string adapters1 = slurp(fs::path(run1.checkpoint_dir) / "adapters.bin");

  int removed = 0;
  for (const auto& e : fs::recursive_directory_iterator(data.target)) {
    if (e.is_regular_file() && e.path().filename() == "labels.json") {
      fs::remove(e.path());
      ++removed;
    }
  }
  REQUIRE(removed > 0);

  const Dataset target2 = Dataset::open(data.target);
  const auto run2 =
      tr::adapt_dusa(cfg, pre.checkpoint_dir, source, target2, (data.dir / "r2").string());
  CHECK(slurp(fs::path(run2.checkpoint_dir) / "params.bin") == bytes1);
  CHECK(slurp(fs::path(run2.checkpoint_dir) / "adapters.bin") == adapters1);
}

TEST_CASE("objective linearity: doubling alpha1 doubles the sim-loss gradient share") {
  const auto data = make_tiny_datasets("linearity", 4);
  const Dataset source = Dataset::open(data.source);
  const Dataset target = Dataset::open(data.target);
  ExperimentConfig cfg = tiny_cfg();

  detector::DetectorModel model(cfg.grid, cfg.model, derive_seed(cfg.seed, "model"));
  adapters::LsaAdapter lsa(cfg.model.channels + 2, cfg.grid.feat_rows(), cfg.grid.feat_cols(),
                           cfg.lsa, derive_seed(cfg.seed, "lsa"));

  auto grads_for = [&](double alpha1) {
    const CollaborativeSample s0 = source.load_frame(0, true);
    const CollaborativeSample t0 = target.load_frame(0, false);
    const tr::EgoSample es = tr::to_ego_frame(s0);
    const tr::EgoSample et = tr::to_ego_frame(t0);
    const auto fs_ = tr::forward_sample(model, es, 1, true);
    const auto ft = tr::forward_sample(model, et, 2, true);
    auto targets = model.build_targets(es.boxes.value_or(BoxSet{}));
    auto l_det = model.detection_loss(fs_.head, targets);
    std::vector<adapters::LsaBatchItem> items = {
        {fs_.encoded[static_cast<std::size_t>(es.ego_idx)], 0},
        {ft.encoded[static_cast<std::size_t>(et.ego_idx)], 1}};
    auto l_sim = adapters::lsa_loss(items, lsa, cfg.grl.lsa_gamma, false, nullptr);
    auto total = ad::add(l_det, ad::scale(l_sim, alpha1));
    ad::backward(total);
    std::vector<double> grads;
    for (const auto& p : model.theta_params()) {
      grads.insert(grads.end(), p->grad.data.begin(), p->grad.data.end());
      p->grad = ad::Tensor();
    }
    for (const auto& p : model.phi_params()) p->grad = ad::Tensor();
    for (const auto& p : model.beta_params()) p->grad = ad::Tensor();
    for (const auto& p : lsa.params()) p->grad = ad::Tensor();
    return grads;
  };

  const auto g0 = grads_for(0.0);
  const auto g1 = grads_for(1.0);
  const auto g2 = grads_for(2.0);
  for (std::size_t i = 0; i < g0.size(); ++i) {
    const double c1 = g1[i] - g0[i];
    const double c2 = g2[i] - g0[i];
    CHECK(std::abs(c2 - 2.0 * c1) <= 1e-9 * std::max(1.0, std::abs(c2)));
  }
}

TEST_CASE("self-training: tau extremes behave as forced") {
  const auto data = make_tiny_datasets("selftrain");
  const Dataset source = Dataset::open(data.source);
  const Dataset target = Dataset::open(data.target);

  ExperimentConfig cfg = tiny_cfg();
  cfg.train.epochs = 1;
  const auto pre = tr::pretrain_source(cfg, source, (data.dir / "pre").string());
  const std::string pre_params = slurp(fs::path(pre.checkpoint_dir) / "params.bin");

  SUBCASE("tau = 1.0 yields zero pseudo-labels and an unchanged model") {
    ExperimentConfig c = cfg;
    c.selftrain.tau = 1.0;
    c.selftrain.rounds = 2;
    c.selftrain.epochs_per_round = 2;
    const auto st =
        tr::baseline_self_training(c, pre.checkpoint_dir, target, nullptr, (data.dir / "st1").string());
    CHECK(slurp(fs::path(st.checkpoint_dir) / "params.bin") == pre_params);
    std::ifstream is(data.dir / "st1" / "metrics.jsonl");
    std::string line;
    bool warned = false;
    while (std::getline(is, line)) {
      if (line.find("no pseudo-labels") != std::string::npos) warned = true;
    }
    CHECK(warned);
  }

  SUBCASE("tau = 0 keeps every decoded box; replay oracle agrees") {
    ExperimentConfig c = cfg;
    c.selftrain.tau = 0.0;
    c.selftrain.rounds = 1;
    c.selftrain.epochs_per_round = 1;
    // A barely-pretrained model scores near the focal prior (~0.01); decode
    // below it so the pseudo-label path actually sees boxes.
    c.eval.score_threshold = 0.005;
    tr::baseline_self_training(c, pre.checkpoint_dir, target, nullptr, (data.dir / "st0").string());

    // Independent frozen-inference rerun.
    detector::DetectorModel model(c.grid, c.model, derive_seed(c.seed, "model"));
    tr::load_detector_checkpoint(model, c, pre.checkpoint_dir);
    const json stored = json::parse(slurp(data.dir / "st0" / "pseudo_labels_round_0.json"));
    REQUIRE(static_cast<int>(stored.size()) == target.size());
    ad::NoGradGuard guard;
    for (int idx = 0; idx < target.size(); ++idx) {
      const auto es = tr::to_ego_frame(target.load_frame(idx, false));
      const auto fw =
          tr::forward_sample(model, es, derive_seed(c.seed, "pillar_pseudo", 0, idx), false);
      const BoxSet decoded = model.decode_boxes(fw.head.cls_logits->val, fw.head.box_deltas->val,
                                                c.eval.score_threshold, c.eval.nms_iou);
      CHECK(static_cast<int>(stored.at(static_cast<std::size_t>(idx)).size()) ==
            static_cast<int>(decoded.size()));
    }
  }
}

TEST_CASE("adapt: ablation flags disable either adapter") {
  const auto data = make_tiny_datasets("ablation", 4);
  const Dataset source = Dataset::open(data.source);
  const Dataset target = Dataset::open(data.target);
  ExperimentConfig cfg = tiny_cfg();
  const auto pre = tr::pretrain_source(cfg, source, (data.dir / "pre").string());

  // lsa-only configuration: the agent-loss channel disappears entirely.
  ExperimentConfig lsa_only = cfg;
  lsa_only.cia.enabled = false;
  const auto r1 = tr::adapt_dusa(lsa_only, pre.checkpoint_dir, source, target,
                                 (data.dir / "lsa_only").string());
  {
    std::ifstream is(data.dir / "lsa_only" / "metrics.jsonl");
    std::string line;
    std::getline(is, line);
    const json rec = json::parse(line);
    CHECK(rec.at("l_agent").get<double>() == 0.0);
    CHECK(rec.at("l_sim").get<double>() > 0.0);
    CHECK(rec.contains("disc_sim_acc"));
    CHECK_FALSE(rec.contains("disc_agent_acc"));
  }
  // Only the sim-adapter parameters are persisted.
  {
    const std::string blob = slurp(fs::path(r1.checkpoint_dir) / "adapters.bin");
    CHECK(blob.find("lsa.fc1.w") != std::string::npos);
    CHECK(blob.find("cia.conv1.w") == std::string::npos);
  }

  ExperimentConfig cia_only = cfg;
  cia_only.lsa.enabled = false;
  const auto r2 = tr::adapt_dusa(cia_only, pre.checkpoint_dir, source, target,
                                 (data.dir / "cia_only").string());
  {
    const std::string blob = slurp(fs::path(r2.checkpoint_dir) / "adapters.bin");
    CHECK(blob.find("cia.conv1.w") != std::string::npos);
    CHECK(blob.find("lsa.fc1.w") == std::string::npos);
  }
}

TEST_CASE("naive discriminator baseline: reduction to lsa_loss with ones selector") {
  // Same init seed and zero-vs-identity selector: the two adapters compute
  // identical losses on identical items.
  adapters::LsaConfig with_lfs;
  with_lfs.use_lfs = true;
  adapters::LsaConfig no_lfs;
  no_lfs.use_lfs = false;
  adapters::LsaAdapter a(4, 3, 3, with_lfs, 99);
  adapters::LsaAdapter b(4, 3, 3, no_lfs, 99);
  Rng rng(5);
  std::vector<adapters::LsaBatchItem> items;
  for (int i = 0; i < 4; ++i) {
    ad::Tensor t({4, 3, 3});
    for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
    items.push_back({ad::constant(t), i % 2});
  }
  const double la = adapters::lsa_loss(items, a, -0.05, false, nullptr)->val[0];
  const double lb = adapters::lsa_loss(items, b, -0.05, false, nullptr)->val[0];
  CHECK(la == lb);
}

TEST_CASE("naive discriminator baseline: end-to-end smoke run") {
  const auto data = make_tiny_datasets("naive", 4);
  const Dataset source = Dataset::open(data.source);
  const Dataset target = Dataset::open(data.target);
  ExperimentConfig cfg = tiny_cfg();
  const auto pre = tr::pretrain_source(cfg, source, (data.dir / "pre").string());
  const auto run = tr::baseline_naive_discriminator(cfg, pre.checkpoint_dir, source, target,
                                                    (data.dir / "naive").string());
  CHECK(fs::exists(fs::path(run.checkpoint_dir) / "params.bin"));
  CHECK(fs::exists(fs::path(run.checkpoint_dir) / "adapters.bin"));
  std::ifstream is(data.dir / "naive" / "metrics.jsonl");
  std::string line;
  bool has_disc = false;
  while (std::getline(is, line)) {
    if (line.find("l_disc") != std::string::npos) has_disc = true;
  }
  CHECK(has_disc);
}

TEST_CASE("vanishing GRL factor: adapter loss leaves det-loss gradients unchanged") {
  const auto data = make_tiny_datasets("vanishing", 4);
  const Dataset source = Dataset::open(data.source);
  ExperimentConfig cfg = tiny_cfg();
  detector::DetectorModel model(cfg.grid, cfg.model, derive_seed(cfg.seed, "model"));
  adapters::LsaAdapter lsa(cfg.model.channels + 2, cfg.grid.feat_rows(), cfg.grid.feat_cols(),
                           cfg.lsa, 3);

  auto theta_grads = [&](bool with_adapter, double gamma) {
    const auto es = tr::to_ego_frame(source.load_frame(0, true));
    const auto fw = tr::forward_sample(model, es, 1, true);
    auto targets = model.build_targets(es.boxes.value_or(BoxSet{}));
    ad::Value total = model.detection_loss(fw.head, targets);
    if (with_adapter) {
      std::vector<adapters::LsaBatchItem> items = {
          {fw.encoded[static_cast<std::size_t>(es.ego_idx)], 0}};
      total = ad::add(total, adapters::lsa_loss(items, lsa, gamma, false, nullptr));
    }
    ad::backward(total);
    std::vector<double> grads;
    for (const auto& p : model.theta_params()) {
      grads.insert(grads.end(), p->grad.data.begin(), p->grad.data.end());
      p->grad = ad::Tensor();
    }
    for (const auto& p : model.phi_params()) p->grad = ad::Tensor();
    for (const auto& p : model.beta_params()) p->grad = ad::Tensor();
    for (const auto& p : lsa.params()) p->grad = ad::Tensor();
    return grads;
  };

  const auto base = theta_grads(false, 0.0);
  const auto tiny = theta_grads(true, -1e-14);
  REQUIRE(base.size() == tiny.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(std::abs(base[i] - tiny[i]) <= 1e-10 * std::max(1.0, std::abs(base[i])));
  }
}

TEST_CASE("domain probe: deterministic accuracy in [0, 1]") {
  const auto data = make_tiny_datasets("probe", 8);
  const Dataset source = Dataset::open(data.source);
  const Dataset target = Dataset::open(data.target);
  ExperimentConfig cfg = tiny_cfg();
  const auto pre = tr::pretrain_source(cfg, source, (data.dir / "pre").string());
  const double acc1 =
      tr::domain_probe_accuracy(cfg, pre.checkpoint_dir, source, target, 60, 7);
  const double acc2 =
      tr::domain_probe_accuracy(cfg, pre.checkpoint_dir, source, target, 60, 7);
  CHECK(acc1 == acc2);
  CHECK(acc1 >= 0.0);
  CHECK(acc1 <= 1.0);
}

TEST_CASE("evaluate: monotone AP, determinism, and annotation requirement") {
  const auto data = make_tiny_datasets("evaluate", 5);
  const Dataset source = Dataset::open(data.source);
  ExperimentConfig cfg = tiny_cfg();
  cfg.train.epochs = 2;
  const auto pre = tr::pretrain_source(cfg, source, (data.dir / "pre").string());

  const auto rep1 = evaluation::evaluate(cfg, pre.checkpoint_dir, source, {0.3, 0.5, 0.7});
  const auto rep2 = evaluation::evaluate(cfg, pre.checkpoint_dir, source, {0.3, 0.5, 0.7});
  CHECK(rep1.ap_by_threshold == rep2.ap_by_threshold);
  CHECK(rep1.ap_by_threshold.at(0.3) >= rep1.ap_by_threshold.at(0.5));
  CHECK(rep1.ap_by_threshold.at(0.5) >= rep1.ap_by_threshold.at(0.7));
  for (const auto& [t, ap] : rep1.ap_by_threshold) {
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
  }

  // Strip labels: evaluation must refuse (adaptation would not).
  for (const auto& e : fs::recursive_directory_iterator(data.source)) {
    if (e.is_regular_file() && e.path().filename() == "labels.json") fs::remove(e.path());
  }
  const Dataset stripped = Dataset::open(data.source);
  CHECK_THROWS_WITH_AS(evaluation::evaluate(cfg, pre.checkpoint_dir, stripped, {0.5}),
                       doctest::Contains("requires annotations"), std::runtime_error);
}

TEST_CASE("augmentation: identical transform for points and boxes, eval path untouched") {
  const auto data = make_tiny_datasets("augment", 3);
  const Dataset source = Dataset::open(data.source);
  const CollaborativeSample cs = source.load_frame(0, true);
  tr::EgoSample es = tr::to_ego_frame(cs);
  REQUIRE(es.boxes.has_value());
  REQUIRE(!es.boxes->empty());

  AugmentConfig acfg;
  Rng rng(31);
  tr::EgoSample aug = es;
  tr::augment_sample(aug, acfg, rng);

  // Replay the same stream to recover the drawn transform.
  Rng replay(31);
  const double yaw = replay.uniform(-acfg.max_yaw, acfg.max_yaw);
  const bool flip = replay.uniform() < 0.5;
  const double scale = replay.uniform(acfg.scale_min, acfg.scale_max);
  const double cy = std::cos(yaw), sy = std::sin(yaw);

  const auto& p0 = es.clouds[0].points[0];
  double ex = cy * p0.x - sy * p0.y;
  double ey = sy * p0.x + cy * p0.y;
  if (flip) ey = -ey;
  CHECK(aug.clouds[0].points[0].x == doctest::Approx(ex * scale).epsilon(1e-12));
  CHECK(aug.clouds[0].points[0].y == doctest::Approx(ey * scale).epsilon(1e-12));

  const auto& b0 = (*es.boxes)[0];
  double bx = cy * b0.center(0) - sy * b0.center(1);
  double by = sy * b0.center(0) + cy * b0.center(1);
  double byaw = b0.yaw + yaw;
  if (flip) {
    by = -by;
    byaw = -byaw;
  }
  CHECK((*aug.boxes)[0].center(0) == doctest::Approx(bx * scale).epsilon(1e-12));
  CHECK((*aug.boxes)[0].center(1) == doctest::Approx(by * scale).epsilon(1e-12));
  CHECK((*aug.boxes)[0].yaw == doctest::Approx(normalize_angle(byaw)).epsilon(1e-12));
  CHECK((*aug.boxes)[0].size(0) == doctest::Approx(b0.size(0) * scale).epsilon(1e-12));

  // Disabled augmentation is a no-op.
  AugmentConfig off;
  off.enabled = false;
  tr::EgoSample same = es;
  Rng rng2(99);
  tr::augment_sample(same, off, rng2);
  CHECK(same.clouds[0].points[0].x == es.clouds[0].points[0].x);
}
