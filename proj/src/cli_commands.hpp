#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "itx/metrics.hpp"
#include "itx/mrsim.hpp"
#include "itx/train.hpp"

namespace itx {
namespace cli {

/// Attention complexity benchmark setup.
struct BenchConfig {
  std::vector<int64_t> sizes{32, 64, 128, 256};
  int64_t channels = 16;
  int64_t frames = 2;
  WindowSpec ws{8, 2};
  int64_t heads = 2;
  int reps = 2;
};

/// Full run configuration mirroring model + training + phantom + ladder.
/// Parsing is strict: unknown keys are rejected, `seed` is required.
struct RunConfig {
  uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  PhantomSpec phantom;
  NoiseLadder ladder;
  double acceleration = 4.0;
  int64_t train_samples = 48;
  double train_snr_min = 0.5;
  double train_snr_max = 2.0;
  BenchConfig bench;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load_file(const std::string& path);
};

struct BenchRow {
  std::string mechanism;
  int64_t size = 0;
  int64_t pixels = 0;
  double seconds = 0.0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double exponent_local_global = 0.0;  // decomposed attention growth
  double exponent_dense = 0.0;         // dense full-attention oracle growth
};

void cmd_phantom(const RunConfig& cfg, const std::string& out_dir);

void cmd_corrupt(const RunConfig& cfg, const std::string& out_dir,
                 const std::optional<std::vector<double>>& level_override = {});

void cmd_train(const RunConfig& cfg, const std::string& out_dir,
               std::optional<double> lr_override = {}, bool resume = false);

void cmd_denoise(const RunConfig& cfg, const std::string& out_dir,
                 const std::string& checkpoint, const std::string& input_base,
                 const std::string& gmap_path);

void cmd_sweep(const RunConfig& cfg, const std::string& out_dir,
               const std::string& checkpoint);

BenchResult run_bench(const BenchConfig& cfg);
void cmd_bench(const RunConfig& cfg, const std::string& out_dir);

}  // namespace cli
}  // namespace itx
