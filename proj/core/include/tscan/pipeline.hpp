#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tscan/evaluation.hpp"
#include "tscan/model.hpp"
#include "tscan/synthetic.hpp"
#include "tscan/training.hpp"

namespace tscan {

// Everything one benchmark run needs: the generator, the shared model and
// training settings, and the evaluation knobs. Per-seed runs override the
// seed fields of the nested configs.
struct BenchConfig {
  std::string name = "benchmark";
  SyntheticConfig synthetic;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  double train_fraction = 0.9;
  int eval_bins = 5;       // adjacent-interval count for continuous treatments
  int min_group_size = 100;
  bool tie_average = false;

  void validate() const;
  std::string to_json() const;
  static BenchConfig from_json(const std::string& text);
};

// Metric name -> value; a missing key means the metric was undefined or
// unsupported for that scorer/seed.
using MetricMap = std::map<std::string, double>;

// The full metric suite for one scorer over one test split. Binary data is
// ranked directly (and can emit a gain curve); continuous data goes through
// the adjacent-interval binarization with eval_bins bins. Keys: auuc, qini,
// cauuc, cqini, uplift_rmse — absent when undefined for this data.
MetricMap score_metrics(const std::vector<InstanceRecord>& test, const UpliftScorer& fn,
                        TreatmentKind kind, int eval_bins, int min_group_size, bool tie_average,
                        GainCurve* curve_out = nullptr);

struct BenchRow {
  std::string model;
  std::vector<MetricMap> per_seed;  // aligned with BenchSummary::seeds
  MetricMap means;                  // over the seeds where the metric was defined
};

// First-stage balancing evidence per seed, read off the training curves.
struct SeedDiagnostics {
  std::uint64_t seed = 0;
  double initial_val_mmd = 0.0;
  double best_epoch_val_mmd = 0.0;
  int stage1_best_epoch = 0;
  int stage2_best_epoch = 0;
  double duration_seconds = 0.0;
};

struct BenchSummary {
  std::string name;
  std::string treatment_kind;
  std::vector<std::uint64_t> seeds;
  std::vector<BenchRow> rows;
  std::vector<SeedDiagnostics> diagnostics;

  const BenchRow* row(const std::string& model) const;
  std::optional<double> mean_of(const std::string& model, const std::string& metric) const;
  std::string to_json() const;  // deterministic; excludes wall-clock fields
};

// Runs the benchmark end to end for every seed: generate, split, normalize,
// two-stage fit, the three ablations, the two reference learners, then the
// metric suite over the shared test split (scorers additionally include the
// known-effect oracle and a random ranking). Writes per-seed datasets,
// checkpoints and gain curves plus summary.json and manifest.json under
// out_dir. `log` receives progress lines when non-null.
BenchSummary run_bench(const BenchConfig& config, const std::string& out_dir,
                       std::ostream* log = nullptr);

struct BenchReplay {
  BenchSummary summary;
  bool matches_stored = false;  // fresh summary JSON equals the stored one byte for byte
  std::string stored_summary;
};

// Replays the resolved config embedded in a manifest written by run_bench
// and compares the fresh summary against the one stored next to it.
BenchReplay rerun_from_manifest(const std::string& manifest_path, const std::string& out_dir,
                                std::ostream* log = nullptr);

}  // namespace tscan
