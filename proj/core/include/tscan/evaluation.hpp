#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tscan/dataset.hpp"

namespace tscan {

// One evaluation row: a predicted uplift score plus the observed arm and
// outcome. treatment is the effective 0/1 indicator (continuous data reaches
// this point only after interval binarization).
struct ScoredRecord {
  double score = 0.0;
  double treatment = 0.0;
  double outcome = 0.0;
  std::optional<std::string> group_key;
  std::optional<double> true_ite;
};

// Normalized cumulative-uplift curve: x is the targeted population fraction,
// y the cumulative uplift relative to targeting everyone. Starts at (0,0)
// and ends at (1,1).
struct GainCurve {
  std::string model;
  std::vector<std::pair<double, double>> points;
};

// Ranking metrics. With tie_average set, curves are evaluated only at
// tied-block boundaries, which makes them exactly invariant to permutations
// within tied scores; otherwise stable input order breaks ties.
//
// All three throw MetricUndefinedError when a treatment arm is absent or the
// terminal cumulative uplift is zero, and ContractError on non-finite scores.
GainCurve uplift_curve(const std::vector<ScoredRecord>& scored, bool tie_average = false);
double auuc(const std::vector<ScoredRecord>& scored, bool tie_average = false);
double qini(const std::vector<ScoredRecord>& scored, bool tie_average = false);

enum class RankMetric { kAuuc, kQini };

std::string to_string(RankMetric m);

struct GroupRow {
  std::string group_key;
  int n = 0;
  bool included = false;
  std::string reason;  // "too_small" | "one_armed" | "undefined" when excluded
  double value = 0.0;  // the requested metric, when included
};

struct StratifiedResult {
  double value = 0.0;  // Σ n_g · metric_g / Σ n_g over included groups
  std::vector<GroupRow> groups;  // sorted by group key
};

// Context-stratified metric: the group-size-weighted mean of the per-group
// metric over groups with n >= min_group_size and both arms present. Every
// record must carry a group key; no qualifying group → MetricUndefinedError.
StratifiedResult stratified_metric(const std::vector<ScoredRecord>& scored, RankMetric metric,
                                   int min_group_size = 100, bool tie_average = false);

// Predicted uplift for moving a record from the first dose to the second.
using UpliftScorer = std::function<double(const InstanceRecord&, double, double)>;

struct BinPair {
  int low_bin = 0, high_bin = 0;
  double low_mid = 0.0, high_mid = 0.0;  // dose midpoints handed to the scorer
  std::vector<ScoredRecord> scored;      // low bin as control, high bin as treated
  bool skipped = false;
  std::string reason;
};

// Reduces continuous treatments to binary comparisons: ranks records by
// dose into `bins` equal-mass bins (tied doses stay together, a tied run
// landing in the bin of its middle rank), then pairs adjacent bins. A pair
// with an empty side is skipped and reported.
std::vector<BinPair> binarize_continuous(const std::vector<InstanceRecord>& records,
                                         const UpliftScorer& scorer, int bins);

// Unweighted mean of the metric over usable pairs; pairs whose metric is
// undefined are marked skipped. No usable pair → MetricUndefinedError.
double binned_metric_mean(std::vector<BinPair>& pairs, RankMetric metric,
                          bool tie_average = false);

// Root mean squared error of score against the known effect; every record
// must carry true_ite.
double uplift_rmse(const std::vector<ScoredRecord>& scored);

// CSV with header model,fraction,cumulative_uplift; rows grouped by curve in
// input order, fractions ascending within each curve.
void export_gain_curves(const std::vector<GainCurve>& curves, const std::string& path);

struct EvalReport {
  std::string model;
  double auuc = 0.0;
  double qini = 0.0;
  std::optional<double> cauuc;  // present when every record carries a group key
  std::optional<double> cqini;
  std::vector<GroupRow> auuc_groups;
  std::vector<GroupRow> qini_groups;
  GainCurve curve;
  std::optional<double> uplift_rmse;  // present when every record carries true_ite

  std::string to_json() const;
};

// Bundles the full metric suite for one model's scores.
EvalReport evaluate_scored(const std::string& model, const std::vector<ScoredRecord>& scored,
                           int min_group_size = 100, bool tie_average = false);

}  // namespace tscan
