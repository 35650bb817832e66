#pragma once

// Training loop, experiment drivers, config parsing, CSV reporting, and the
// CLI entry point. Every run is fully determined by its config: the init,
// data-order, and triple-sampling RNG streams are derived from (seed, tag)
// and per-run state is never shared.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stp/data.hpp"
#include "stp/losses.hpp"
#include "stp/transformer.hpp"

namespace stp {

struct TaskSpec {
  std::string name = "pattern";  // pattern | copy
  int n_train = 800;
  int n_test = 200;
  double suffix_ratio = 8.0;
  int payload_len = 8;
  uint64_t data_seed = 7;  // dataset identity is separate from the run seed
};

struct OptimizerSpec {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  ModelConfig model;
  TaskSpec task;
  AuxVariant variant = AuxVariant::kNone;
  double lambda = 0.0;
  int warmup_steps = 0;
  OptimizerSpec adam;
  int batch_size = 32;
  int epochs = 20;
  uint64_t seed = 82;
  int fraction_n = 1;
  bool half_compute = false;
  std::string out_dir = "runs";
  // P1 check thresholds (final-quarter NTP plateau vs STP decrease).
  double p1_ntp_range_max = 0.05;
  double p1_stp_decrease_min = 0.05;

  void validate() const;
  std::string run_tag() const;
};

struct StepRow {
  int step = 0;
  int epoch = 0;
  double loss_ntp = 0.0;
  double loss_stp = 0.0;
  double lambda = 0.0;
  double lr = 0.0;
  uint64_t seed = 0;
};

struct RunRecord {
  std::vector<StepRow> rows;
  double accuracy = 0.0, acc_star = 0.0, acc_starstar = 0.0;
  double final_ntp = 0.0, final_stp = 0.0;  // means over the last epoch
  // Final-quarter trend stats, measured on 4 consecutive chunk means.
  double p1_ntp_range = 0.0, p1_stp_drop = 0.0;
  bool p1_ntp_plateau = false, p1_stp_decreasing = false;
  double wall_seconds = 0.0;
  std::string metrics_path, checkpoint_path;
};

struct TrainOutcome {
  RunRecord record;
  ModelParams params;
  AuxLossSpec aux;
};

TrainOutcome train_run(const TrainConfig& config);

struct EvalResult {
  double accuracy = 0.0, acc_star = 0.0, acc_starstar = 0.0;
  int n = 0, n_star = 0, n_starstar = 0;
};

EvalResult evaluate_exact_match(const ModelParams& params,
                                const std::vector<ExamplePair>& test);

struct ExperimentRow {
  std::string experiment;
  std::string variant;
  double lambda = 0.0;
  int fraction_n = 1;
  uint64_t seed = 0;
  double accuracy = 0.0, acc_star = 0.0, acc_starstar = 0.0;
  double final_ntp = 0.0, final_stp = 0.0;
};

struct SweepResult {
  std::vector<ExperimentRow> rows;      // (lambda, seed) order
  std::vector<double> grid;
  std::vector<double> mean_final_stp;   // per grid point, across seeds
  std::vector<double> mean_accuracy;
  std::string aggregate_path;
};

SweepResult sweep_lambda(const TrainConfig& base, const std::vector<double>& grid,
                         const std::vector<uint64_t>& seeds);

struct PairedTest {
  int fraction_n = 1;
  bool degenerate = false;  // all paired differences equal
  double t_stat = 0.0;
  double p = 1.0;
};

struct DataEfficiencyResult {
  std::vector<ExperimentRow> rows;  // (fraction, variant, seed) order
  std::vector<PairedTest> tests;    // STP vs baseline per fraction
  std::string aggregate_path;
};

DataEfficiencyResult data_efficiency_experiment(const TrainConfig& base,
                                                const std::vector<int>& fractions,
                                                const std::vector<uint64_t>& seeds,
                                                bool half_compute_arm = false);

struct DiagnoseOptions {
  int tau = 8;
  int max_sequences = 50;
  std::string out_path = "diagnostics.csv";
};

struct DiagnoseSummary {
  double mean_linearity_epsilon = 0.0;
  int sequences = 0;
};

// Emits rows sequence_id,metric,position,value: per-sequence linearity
// epsilon, curvature profile, rollout divergence, plus dataset-level SVD
// spectra (normalized and raw) of answer-mean minus query-mean vectors.
DiagnoseSummary diagnose(const ModelParams& params, const DatasetSplit& split,
                         const DiagnoseOptions& options);

// Line-oriented `key = value` file with '#' comments; unknown keys are hard
// errors carrying the line number.
TrainConfig parse_config(const std::string& path);
// Applies one key=value override; throws std::invalid_argument on unknown key
// or malformed value.
void apply_override(TrainConfig& config, const std::string& key, const std::string& value);

DatasetSplit build_dataset(const TaskSpec& task);
std::vector<uint64_t> default_seeds();  // {82, 23, 37, 84, 4}
int run_parallelism();                  // STP_THREADS cap, default 1

int cli_main(int argc, char** argv);

}  // namespace stp
