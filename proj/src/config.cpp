#include "coopadapt/config.hpp"

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "coopadapt/rng.hpp"

using nlohmann::json;

namespace coopadapt {

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown config key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_grid(const json& j, detector::GridConfig& g) {
  reject_unknown(j, {"x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "cell_size",
                     "feature_stride"},
                 "grid");
  get_if(j, "x_min", g.x_min);
  get_if(j, "x_max", g.x_max);
  get_if(j, "y_min", g.y_min);
  get_if(j, "y_max", g.y_max);
  get_if(j, "z_min", g.z_min);
  get_if(j, "z_max", g.z_max);
  get_if(j, "cell_size", g.cell_size);
  get_if(j, "feature_stride", g.feature_stride);
}

void parse_model(const json& j, detector::ModelConfig& m) {
  reject_unknown(j, {"channels", "point_hidden", "max_points_per_pillar", "anchor_size",
                     "anchor_z", "pos_iou", "neg_iou", "focal_alpha", "focal_gamma",
                     "smooth_l1_delta", "scalar_distance_encoding", "n_agent_types"},
                 "model");
  get_if(j, "channels", m.channels);
  get_if(j, "point_hidden", m.point_hidden);
  get_if(j, "max_points_per_pillar", m.max_points_per_pillar);
  if (j.contains("anchor_size")) {
    const auto& a = j.at("anchor_size");
    if (!a.is_array() || a.size() != 3) throw ConfigError("model.anchor_size must be [l, w, h]");
    for (int i = 0; i < 3; ++i) m.anchor_size[static_cast<std::size_t>(i)] = a.at(static_cast<std::size_t>(i)).get<double>();
  }
  get_if(j, "anchor_z", m.anchor_z);
  get_if(j, "pos_iou", m.pos_iou);
  get_if(j, "neg_iou", m.neg_iou);
  get_if(j, "focal_alpha", m.focal_alpha);
  get_if(j, "focal_gamma", m.focal_gamma);
  get_if(j, "smooth_l1_delta", m.smooth_l1_delta);
  get_if(j, "scalar_distance_encoding", m.scalar_distance_encoding);
  get_if(j, "n_agent_types", m.n_agent_types);
}

void parse_augment(const json& j, AugmentConfig& a) {
  reject_unknown(j, {"enabled", "max_yaw", "flip_x", "scale_min", "scale_max"}, "train.augment");
  get_if(j, "enabled", a.enabled);
  get_if(j, "max_yaw", a.max_yaw);
  get_if(j, "flip_x", a.flip_x);
  get_if(j, "scale_min", a.scale_min);
  get_if(j, "scale_max", a.scale_max);
}

void parse_train(const json& j, TrainConfig& t) {
  reject_unknown(j, {"lr", "lr_decay_factor", "lr_decay_epoch", "epochs", "pretrain_batch",
                     "batch_source", "batch_target", "alpha1", "alpha2", "val_fraction",
                     "early_stop_patience", "early_stop_min_delta", "allow_cold_start",
                     "adam_beta1", "adam_beta2", "adam_eps", "augment"},
                 "train");
  get_if(j, "lr", t.lr);
  get_if(j, "lr_decay_factor", t.lr_decay_factor);
  get_if(j, "lr_decay_epoch", t.lr_decay_epoch);
  get_if(j, "epochs", t.epochs);
  get_if(j, "pretrain_batch", t.pretrain_batch);
  get_if(j, "batch_source", t.batch_source);
  get_if(j, "batch_target", t.batch_target);
  get_if(j, "alpha1", t.alpha1);
  get_if(j, "alpha2", t.alpha2);
  get_if(j, "val_fraction", t.val_fraction);
  get_if(j, "early_stop_patience", t.early_stop_patience);
  get_if(j, "early_stop_min_delta", t.early_stop_min_delta);
  get_if(j, "allow_cold_start", t.allow_cold_start);
  get_if(j, "adam_beta1", t.adam_beta1);
  get_if(j, "adam_beta2", t.adam_beta2);
  get_if(j, "adam_eps", t.adam_eps);
  if (j.contains("augment")) parse_augment(j.at("augment"), t.augment);
}

void parse_grl(const json& j, GrlConfig& g) {
  reject_unknown(j, {"lsa_gamma", "cia_gamma"}, "grl");
  get_if(j, "lsa_gamma", g.lsa_gamma);
  get_if(j, "cia_gamma", g.cia_gamma);
}

void parse_lsa(const json& j, adapters::LsaConfig& l) {
  reject_unknown(j, {"enabled", "use_lfs", "hidden", "dropout"}, "lsa");
  get_if(j, "enabled", l.enabled);
  get_if(j, "use_lfs", l.use_lfs);
  get_if(j, "hidden", l.hidden);
  get_if(j, "dropout", l.dropout);
}

void parse_cia(const json& j, adapters::CiaConfig& c) {
  reject_unknown(j, {"enabled", "use_conf", "hidden"}, "cia");
  get_if(j, "enabled", c.enabled);
  get_if(j, "use_conf", c.use_conf);
  get_if(j, "hidden", c.hidden);
}

void parse_selftrain(const json& j, PseudoLabelConfig& p) {
  reject_unknown(j, {"tau", "rounds", "epochs_per_round", "mix_source"}, "selftrain");
  get_if(j, "tau", p.tau);
  get_if(j, "rounds", p.rounds);
  get_if(j, "epochs_per_round", p.epochs_per_round);
  get_if(j, "mix_source", p.mix_source);
}

void parse_eval(const json& j, EvalConfig& e) {
  reject_unknown(j, {"score_threshold", "nms_iou", "thresholds"}, "eval");
  get_if(j, "score_threshold", e.score_threshold);
  get_if(j, "nms_iou", e.nms_iou);
  if (j.contains("thresholds")) {
    e.thresholds = j.at("thresholds").get<std::vector<double>>();
    if (e.thresholds.empty()) throw ConfigError("eval.thresholds must not be empty");
  }
}

void parse_data(const json& j, ExperimentConfig& c) {
  reject_unknown(j, {"source", "target"}, "data");
  get_if(j, "source", c.source_dataset);
  get_if(j, "target", c.target_dataset);
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["grid"] = {{"x_min", c.grid.x_min},       {"x_max", c.grid.x_max},
               {"y_min", c.grid.y_min},       {"y_max", c.grid.y_max},
               {"z_min", c.grid.z_min},       {"z_max", c.grid.z_max},
               {"cell_size", c.grid.cell_size}, {"feature_stride", c.grid.feature_stride}};
  j["model"] = {{"channels", c.model.channels},
                {"point_hidden", c.model.point_hidden},
                {"max_points_per_pillar", c.model.max_points_per_pillar},
                {"anchor_size", {c.model.anchor_size[0], c.model.anchor_size[1], c.model.anchor_size[2]}},
                {"anchor_z", c.model.anchor_z},
                {"pos_iou", c.model.pos_iou},
                {"neg_iou", c.model.neg_iou},
                {"focal_alpha", c.model.focal_alpha},
                {"focal_gamma", c.model.focal_gamma},
                {"smooth_l1_delta", c.model.smooth_l1_delta},
                {"scalar_distance_encoding", c.model.scalar_distance_encoding},
                {"n_agent_types", c.model.n_agent_types}};
  j["train"] = {{"lr", c.train.lr},
                {"lr_decay_factor", c.train.lr_decay_factor},
                {"lr_decay_epoch", c.train.lr_decay_epoch},
                {"epochs", c.train.epochs},
                {"pretrain_batch", c.train.pretrain_batch},
                {"batch_source", c.train.batch_source},
                {"batch_target", c.train.batch_target},
                {"alpha1", c.train.alpha1},
                {"alpha2", c.train.alpha2},
                {"val_fraction", c.train.val_fraction},
                {"early_stop_patience", c.train.early_stop_patience},
                {"early_stop_min_delta", c.train.early_stop_min_delta},
                {"allow_cold_start", c.train.allow_cold_start},
                {"adam_beta1", c.train.adam_beta1},
                {"adam_beta2", c.train.adam_beta2},
                {"adam_eps", c.train.adam_eps},
                {"augment",
                 {{"enabled", c.train.augment.enabled},
                  {"max_yaw", c.train.augment.max_yaw},
                  {"flip_x", c.train.augment.flip_x},
                  {"scale_min", c.train.augment.scale_min},
                  {"scale_max", c.train.augment.scale_max}}}};
  j["grl"] = {{"lsa_gamma", c.grl.lsa_gamma}, {"cia_gamma", c.grl.cia_gamma}};
  j["lsa"] = {{"enabled", c.lsa.enabled},
              {"use_lfs", c.lsa.use_lfs},
              {"hidden", c.lsa.hidden},
              {"dropout", c.lsa.dropout}};
  j["cia"] = {{"enabled", c.cia.enabled}, {"use_conf", c.cia.use_conf}, {"hidden", c.cia.hidden}};
  j["selftrain"] = {{"tau", c.selftrain.tau},
                    {"rounds", c.selftrain.rounds},
                    {"epochs_per_round", c.selftrain.epochs_per_round},
                    {"mix_source", c.selftrain.mix_source}};
  j["eval"] = {{"score_threshold", c.eval.score_threshold},
               {"nms_iou", c.eval.nms_iou},
               {"thresholds", c.eval.thresholds}};
  j["data"] = {{"source", c.source_dataset}, {"target", c.target_dataset}};
  return j;
}

}  // namespace

void ExperimentConfig::validate() const {
  try {
    grid.validate();
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (train.lr <= 0.0) throw ConfigError("train.lr must be positive");
  if (train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (train.batch_source < 1 || train.batch_target < 1 || train.pretrain_batch < 1) {
    throw ConfigError("batch sizes must be >= 1");
  }
  if (train.alpha1 < 0.0 || train.alpha2 < 0.0) throw ConfigError("alphas must be >= 0");
  if (!(grl.lsa_gamma < 0.0) || !(grl.cia_gamma < 0.0)) {
    throw ConfigError("GRL factors must be strictly negative");
  }
  if (!(selftrain.tau >= 0.0 && selftrain.tau <= 1.0)) {
    throw ConfigError("selftrain.tau must be in [0, 1]");
  }
  if (selftrain.rounds < 1 || selftrain.epochs_per_round < 0) {
    throw ConfigError("selftrain rounds/epochs invalid");
  }
  if (train.val_fraction < 0.0 || train.val_fraction >= 1.0) {
    throw ConfigError("train.val_fraction must be in [0, 1)");
  }
  if (lsa.dropout < 0.0 || lsa.dropout >= 1.0) throw ConfigError("lsa.dropout must be in [0, 1)");
  for (const double t : eval.thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("eval.thresholds must lie in (0, 1]");
  }
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, {"seed", "grid", "model", "train", "grl", "lsa", "cia", "selftrain", "eval",
                     "data"},
                 "top level");
  ExperimentConfig c;
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("grid")) parse_grid(j.at("grid"), c.grid);
    if (j.contains("model")) parse_model(j.at("model"), c.model);
    if (j.contains("train")) parse_train(j.at("train"), c.train);
    if (j.contains("grl")) parse_grl(j.at("grl"), c.grl);
    if (j.contains("lsa")) parse_lsa(j.at("lsa"), c.lsa);
    if (j.contains("cia")) parse_cia(j.at("cia"), c.cia);
    if (j.contains("selftrain")) parse_selftrain(j.at("selftrain"), c.selftrain);
    if (j.contains("eval")) parse_eval(j.at("eval"), c.eval);
    if (j.contains("data")) parse_data(j.at("data"), c);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config value: ") + e.what());
  }

  if (const char* env_seed = std::getenv("COOPADAPT_SEED")) {
    try {
      c.seed = std::stoull(env_seed);
    } catch (const std::exception&) {
      throw ConfigError("COOPADAPT_SEED is not an unsigned integer");
    }
  }
  c.validate();
  return c;
}

ExperimentConfig config_from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_json_text(ss.str());
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << std::hex << hash_str(config_to_json(cfg).dump());
  return os.str();
}

}  // namespace coopadapt
