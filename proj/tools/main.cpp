#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "coopadapt/checkpoint.hpp"
#include "coopadapt/config.hpp"
#include "coopadapt/dataset.hpp"
#include "coopadapt/evaluation.hpp"
#include "coopadapt/synthgen.hpp"
#include "coopadapt/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace coopadapt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

ExperimentConfig load_config_or_checkpoint(const std::string& config_path,
                                           const std::string& checkpoint_dir) {
  if (!config_path.empty()) return config_from_file(config_path);
  if (!checkpoint_dir.empty()) {
    const auto arch_path = (fs::path(checkpoint_dir) / "arch.json").string();
    if (checkpoint::file_exists(arch_path)) {
      const json arch = json::parse(checkpoint::read_text_file(arch_path));
      return config_from_json_text(arch.at("config").dump());
    }
  }
  throw ConfigError("no --config given and the checkpoint carries no arch.json");
}

std::string make_run_dir(const std::string& out, const std::string& tag,
                         const ExperimentConfig& cfg) {
  const fs::path dir = fs::path(out) / (tag + "-" + config_hash(cfg) + "-seed" +
                                        std::to_string(cfg.seed));
  fs::create_directories(dir);
  // The resolved config (defaults materialized) makes the run re-derivable
  // from the directory alone.
  checkpoint::write_json_file((dir / "config.resolved.json").string(), config_to_json_text(cfg));
  return dir.string();
}

Dataset open_dataset(const std::string& path, const char* which) {
  if (path.empty()) {
    throw ConfigError(std::string("missing ") + which +
                      " dataset path (set data.source/data.target or the CLI flag)");
  }
  return Dataset::open(path);
}

int cmd_generate(const std::string& profile_name, const std::string& profile_file, int frames,
                 std::uint64_t seed, const std::string& out) {
  synthgen::DomainProfile profile = profile_file.empty()
                                        ? synthgen::builtin_profile(profile_name)
                                        : synthgen::load_profile_file(profile_file);
  const auto manifest = synthgen::generate_dataset(profile, frames, out, seed);
  if (frames == 0) {
    std::cerr << "warning: --frames 0 writes a manifest-only dataset\n";
  }
  std::cout << "wrote " << manifest.n_frames << " frames to " << manifest.root << " (domain "
            << manifest.domain << ", profile " << manifest.profile_hash << ")\n";
  return kExitOk;
}

void print_report(const evaluation::EvalReport& report) {
  for (const auto& [t, ap] : report.ap_by_threshold) {
    std::cout << "AP @ " << t << " = " << ap << "\n";
  }
  std::cout << "frames " << report.n_frames << ", gts " << report.n_gts << ", preds "
            << report.n_preds << "\n";
}

int cmd_eval(const std::string& config_path, const std::string& ckpt,
             const std::string& dataset_path, std::vector<double> thresholds,
             const std::string& out_file, const std::string& csv_file) {
  ExperimentConfig cfg = load_config_or_checkpoint(config_path, ckpt);
  if (thresholds.empty()) thresholds = cfg.eval.thresholds;
  const Dataset ds = open_dataset(dataset_path, "evaluation");
  evaluation::EvalReport report = evaluation::evaluate(cfg, ckpt, ds, thresholds);
  report.checkpoint = ckpt;
  print_report(report);
  if (!out_file.empty()) {
    checkpoint::write_json_file(out_file, evaluation::eval_report_to_json(report));
    std::cout << "report written to " << out_file << "\n";
  }
  if (!csv_file.empty()) {
    checkpoint::write_json_file(csv_file, report.per_frame_csv);
    std::cout << "per-frame matches written to " << csv_file << "\n";
  }
  return kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& from, const std::string& out) {
  const ExperimentConfig base = config_from_file(config_path);
  const Dataset source = open_dataset(base.source_dataset, "source");
  const Dataset target = open_dataset(base.target_dataset, "target");

  const std::vector<double> lsa_gammas = {-0.025, -0.05, -0.1};
  const std::vector<double> cia_gammas = {-0.05, -0.1, -0.2};

  json summary = json::array();
  const fs::path sweep_dir = fs::path(out) / ("sweep-" + config_hash(base) + "-seed" +
                                              std::to_string(base.seed));
  fs::create_directories(sweep_dir);
  for (const double g1 : lsa_gammas) {
    for (const double g2 : cia_gammas) {
      ExperimentConfig cfg = base;
      cfg.grl.lsa_gamma = g1;
      cfg.grl.cia_gamma = g2;
      const fs::path run_dir = sweep_dir / ("lsa" + std::to_string(g1) + "_cia" +
                                            std::to_string(g2));
      fs::create_directories(run_dir);
      checkpoint::write_json_file((run_dir / "config.resolved.json").string(),
                                  config_to_json_text(cfg));
      const auto result = training::adapt_dusa(cfg, from, source, target, run_dir.string());
      const auto report =
          evaluation::evaluate(cfg, result.checkpoint_dir, target, cfg.eval.thresholds);
      json entry{{"lsa_gamma", g1}, {"cia_gamma", g2}, {"checkpoint", result.checkpoint_dir}};
      for (const auto& [t, ap] : report.ap_by_threshold) {
        entry["ap"][std::to_string(t)] = ap;
      }
      summary.push_back(entry);
      std::cout << "sweep lsa_gamma=" << g1 << " cia_gamma=" << g2 << " done\n";
    }
  }
  checkpoint::write_json_file((sweep_dir / "summary.json").string(), summary.dump(2) + "\n");
  std::cout << "sweep summary written to " << (sweep_dir / "summary.json").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"collaborative-detection domain adaptation workbench"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic two-agent dataset");
  std::string gen_profile = "synthetic_sim";
  std::string gen_profile_file;
  int gen_frames = 8;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--profile", gen_profile, "built-in profile name (synthetic_sim|synthetic_real)");
  gen->add_option("--profile-file", gen_profile_file, "JSON profile file (overrides --profile)");
  gen->add_option("--frames", gen_frames, "number of frames")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  // train (pretrain | adapt)
  auto* train = app.add_subcommand("train", "training workflows");
  train->require_subcommand(1);

  auto* pre = train->add_subcommand("pretrain", "source-only detector pretraining");
  std::string pre_config;
  std::string pre_out = "runs";
  std::string pre_from;
  int pre_start_epoch = 0;
  std::string pre_source_override;
  pre->add_option("--config", pre_config, "experiment config JSON")->required();
  pre->add_option("--out", pre_out, "parent directory for the run");
  pre->add_option("--from", pre_from, "checkpoint to resume from");
  pre->add_option("--start-epoch", pre_start_epoch, "epoch index to resume at");
  pre->add_option("--source", pre_source_override, "override data.source");

  auto* adapt = train->add_subcommand("adapt", "domain adaptation from a pretrained checkpoint");
  std::string adapt_config;
  std::string adapt_method = "dusa";
  std::string adapt_from;
  std::string adapt_out = "runs";
  std::string adapt_source_override, adapt_target_override;
  double adapt_tau = -1.0;
  adapt->add_option("--config", adapt_config, "experiment config JSON")->required();
  adapt->add_option("--method", adapt_method, "dusa | discriminator | self-train")
      ->check(CLI::IsMember({"dusa", "discriminator", "self-train"}));
  adapt->add_option("--from", adapt_from, "pretrained checkpoint directory");
  adapt->add_option("--out", adapt_out, "parent directory for the run");
  adapt->add_option("--tau", adapt_tau, "pseudo-label confidence threshold (self-train)");
  adapt->add_option("--source", adapt_source_override, "override data.source");
  adapt->add_option("--target", adapt_target_override, "override data.target");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a labeled dataset");
  std::string ev_config, ev_ckpt, ev_dataset, ev_out, ev_csv;
  std::vector<double> ev_thresholds;
  ev->add_option("--config", ev_config, "experiment config JSON (defaults to checkpoint arch)");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--dataset", ev_dataset, "labeled dataset directory")->required();
  ev->add_option("--thresholds", ev_thresholds, "IoU thresholds")->delimiter(',');
  ev->add_option("--out", ev_out, "write the JSON report here");
  ev->add_option("--per-frame-csv", ev_csv, "write per-frame match rows as CSV here");

  // sweep
  auto* sw = app.add_subcommand("sweep", "GRL-factor grid: adapt + evaluate per cell");
  std::string sw_config, sw_from, sw_out = "runs";
  sw->add_option("--config", sw_config, "experiment config JSON")->required();
  sw->add_option("--from", sw_from, "pretrained checkpoint directory")->required();
  sw->add_option("--out", sw_out, "parent directory for the sweep");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_generate(gen_profile, gen_profile_file, gen_frames, gen_seed, gen_out);
    }
    if (pre->parsed()) {
      ExperimentConfig cfg = config_from_file(pre_config);
      if (!pre_source_override.empty()) cfg.source_dataset = pre_source_override;
      const Dataset source = open_dataset(cfg.source_dataset, "source");
      const std::string run_dir = make_run_dir(pre_out, "pretrain", cfg);
      const auto result = training::pretrain_source(cfg, source, run_dir, pre_from, pre_start_epoch);
      std::cout << "checkpoint: " << result.checkpoint_dir << " (" << result.epochs_run
                << " epochs)\n";
      return kExitOk;
    }
    if (adapt->parsed()) {
      ExperimentConfig cfg = config_from_file(adapt_config);
      if (!adapt_source_override.empty()) cfg.source_dataset = adapt_source_override;
      if (!adapt_target_override.empty()) cfg.target_dataset = adapt_target_override;
      if (adapt_tau >= 0.0) cfg.selftrain.tau = adapt_tau;
      cfg.validate();
      if (adapt_from.empty()) {
        throw std::runtime_error("train adapt requires --from (a pretrained checkpoint)");
      }
      const Dataset target = open_dataset(cfg.target_dataset, "target");
      if (adapt_method == "dusa") {
        const Dataset source = open_dataset(cfg.source_dataset, "source");
        const std::string run_dir = make_run_dir(adapt_out, "adapt-dusa", cfg);
        const auto result = training::adapt_dusa(cfg, adapt_from, source, target, run_dir);
        std::cout << "checkpoint: " << result.checkpoint_dir << "\n";
      } else if (adapt_method == "discriminator") {
        const Dataset source = open_dataset(cfg.source_dataset, "source");
        const std::string run_dir = make_run_dir(adapt_out, "adapt-disc", cfg);
        const auto result =
            training::baseline_naive_discriminator(cfg, adapt_from, source, target, run_dir);
        std::cout << "checkpoint: " << result.checkpoint_dir << "\n";
      } else {
        const std::string run_dir = make_run_dir(adapt_out, "adapt-selftrain", cfg);
        std::optional<Dataset> source;
        if (cfg.selftrain.mix_source) source = open_dataset(cfg.source_dataset, "source");
        const auto result = training::baseline_self_training(
            cfg, adapt_from, target, source ? &*source : nullptr, run_dir);
        std::cout << "checkpoint: " << result.checkpoint_dir << "\n";
      }
      return kExitOk;
    }
    if (ev->parsed()) {
      return cmd_eval(ev_config, ev_ckpt, ev_dataset, ev_thresholds, ev_out, ev_csv);
    }
    if (sw->parsed()) {
      return cmd_sweep(sw_config, sw_from, sw_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
