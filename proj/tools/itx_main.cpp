#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../src/cli_commands.hpp"
#include "itx/threads.hpp"

using itx::cli::RunConfig;

int main(int argc, char** argv) {
  itx::init_threads_from_env();

  CLI::App app{"Imaging-transformer MRI denoising toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  uint64_t seed_flag = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "run configuration (JSON)")
      ->required();
  app.add_option("--out", out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", seed_flag,
                                  "override the config seed");

  auto* phantom = app.add_subcommand("phantom", "generate the ground-truth series");
  auto* corrupt = app.add_subcommand("corrupt", "build the SNR ladder");
  std::string levels_csv;
  corrupt->add_option("--levels", levels_csv,
                      "comma-separated target SNR override");
  auto* train = app.add_subcommand("train", "train the denoiser");
  double lr_flag = -1.0;
  bool resume = false;
  auto* lr_opt = train->add_option("--lr", lr_flag, "peak learning rate override");
  train->add_flag("--resume", resume, "continue from checkpoint_last");
  auto* denoise = app.add_subcommand("denoise", "run inference on a series");
  std::string checkpoint, input_base, gmap_path;
  denoise->add_option("--checkpoint", checkpoint, "parameter file (.itxp)");
  denoise->add_option("--input", input_base,
                      "series base path (BASE_real.itx / BASE_imag.itx)");
  denoise->add_option("--gmap", gmap_path, "g-factor map (.itx)");
  auto* sweep = app.add_subcommand("sweep", "metric sweep over the ladder");
  sweep->add_option("--checkpoint", checkpoint, "parameter file (.itxp)");
  auto* bench = app.add_subcommand("bench", "attention complexity benchmark");

  CLI11_PARSE(app, argc, argv);
  seed_set = seed_opt->count() > 0;

  try {
    std::ifstream is(config_path);
    if (!is) throw itx::IoError("cannot open config: " + config_path);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded())
      throw itx::ConfigError("config is not valid JSON: " + config_path);
    if (seed_set) j["seed"] = seed_flag;
    if (!j.contains("seed"))
      throw itx::ConfigError("missing config field: seed");
    RunConfig cfg = RunConfig::from_json(j);

    if (phantom->parsed()) {
      itx::cli::cmd_phantom(cfg, out_dir);
    } else if (corrupt->parsed()) {
      std::optional<std::vector<double>> levels;
      if (!levels_csv.empty()) {
        std::vector<double> v;
        std::stringstream ss(levels_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) v.push_back(std::stod(tok));
        levels = v;
      }
      itx::cli::cmd_corrupt(cfg, out_dir, levels);
    } else if (train->parsed()) {
      std::optional<double> lr;
      if (lr_opt->count() > 0) lr = lr_flag;
      itx::cli::cmd_train(cfg, out_dir, lr, resume);
    } else if (denoise->parsed()) {
      if (checkpoint.empty()) checkpoint = out_dir + "/checkpoint_best.itxp";
      if (input_base.empty()) input_base = out_dir + "/gt";
      if (gmap_path.empty()) gmap_path = out_dir + "/gmap.itx";
      itx::cli::cmd_denoise(cfg, out_dir, checkpoint, input_base, gmap_path);
    } else if (sweep->parsed()) {
      if (checkpoint.empty()) checkpoint = out_dir + "/checkpoint_best.itxp";
      itx::cli::cmd_sweep(cfg, out_dir, checkpoint);
    } else if (bench->parsed()) {
      itx::cli::cmd_bench(cfg, out_dir);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
