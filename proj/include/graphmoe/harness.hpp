#pragma once

// Experiment orchestration: training runs, ablations, sweeps, route dumps and
// plot-data export. Every run owns its output directory.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "graphmoe/config.hpp"

namespace graphmoe {

struct RunOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string failure;
  double accuracy = 0.0;
  double va_std = 0.0;       // std of the training tracker's v_a, mean over layers
  double eval_va_std = 0.0;  // same statistic from validation-set gate mass
  std::size_t trainable_parameters = 0;
  double wall_seconds = 0.0;
  std::filesystem::path dir;
};

struct Aggregate {
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double va_std_mean = 0.0, va_std_std = 0.0;
  std::size_t ok_runs = 0;
};

Aggregate aggregate(const std::vector<RunOutcome>& runs);

struct TrainResult {
  ExperimentConfig config;
  std::vector<RunOutcome> runs;
  Aggregate summary;
  bool all_ok() const { return summary.ok_runs == runs.size(); }
};

// Data, model and batch streams derive from the run seed.
std::uint64_t data_seed(std::uint64_t run_seed);

// Trains one seed into run_dir: resolved_config.json, metrics.jsonl,
// checkpoint.bin, final.json. Numeric failures are recorded, not thrown.
RunOutcome train_run(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& run_dir);

// All seeds under cfg.output_dir/seed_<s>, plus summary.json.
TrainResult cmd_train(const ExperimentConfig& cfg);

struct AblationArm {
  std::string name;  // full, -Graph, -Poisson, -Normal
  ExperimentConfig config;
  std::vector<RunOutcome> runs;
  Aggregate summary;
};

// Base config with exactly one factor changed.
std::vector<std::pair<std::string, ExperimentConfig>> ablation_arms(const ExperimentConfig& base);

// Four arms under cfg.output_dir/<arm>/seed_<s>; ablation.csv and ablation.json.
std::vector<AblationArm> cmd_ablate(const ExperimentConfig& cfg);

enum class SweepAxis { kExperts, kTopK, kRank, kDensity };
SweepAxis parse_sweep_axis(const std::string& s);
std::string sweep_axis_name(SweepAxis a);
// Checks values against the axis grid and applies one value.
ExperimentConfig sweep_point_config(const ExperimentConfig& base, SweepAxis axis, double value);

struct SweepPoint {
  double value = 0.0;
  ExperimentConfig config;
  std::vector<RunOutcome> runs;
  Aggregate summary;
};

// One training per value under cfg.output_dir/<axis>_<value>/seed_<s>;
// sweep_<axis>.csv and sweep_<axis>.json.
std::vector<SweepPoint> cmd_sweep(const ExperimentConfig& cfg, SweepAxis axis, const std::vector<double>& values);

struct RouteInspectOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path out;  // JSONL
  std::string split = "val";  // val | train
  std::size_t limit = 64;     // sequences; 0 = all
};

// Per-token router rows and selections for every layer, then one per-task
// expert-frequency matrix per layer.
void cmd_route_inspect(const RouteInspectOptions& opts);

// Tidy CSVs (scatter.csv, ablation.csv, sweep.csv) from completed run
// directories. Missing inputs raise ConfigError listing every absent path.
std::vector<std::filesystem::path> cmd_plot_data(const std::vector<std::filesystem::path>& run_dirs,
                                                 const std::filesystem::path& out_dir);

// Worker count for n independent jobs, capped by GRAPHMOE_THREADS.
std::size_t run_parallelism(std::size_t jobs);

}  // namespace graphmoe
