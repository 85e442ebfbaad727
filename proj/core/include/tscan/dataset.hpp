#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tscan/rng.hpp"
#include "tscan/schema.hpp"

namespace tscan {

// One observation. Categorical features are integer codes into the schema's
// declared cardinalities; numeric features are raw doubles in schema order.
struct InstanceRecord {
  std::vector<int> merchant_cat;
  std::vector<double> merchant_num;
  std::vector<int> context_cat;
  std::vector<double> context_num;
  double treatment = 0.0;
  double outcome = 0.0;
  std::optional<double> true_ite;        // known only for synthetic data
  std::optional<std::string> group_key;  // context stratum label, if any
};

// A record paired with a sampled counterfactual treatment and the soft
// uplift target produced by a first-stage model.
struct PseudoLabeledRecord {
  InstanceRecord base;
  double t_cf = 0.0;
  double u_tilde = 0.0;
};

// How out-of-vocabulary categorical codes are handled at load time:
// reject the row, or fold the value into code 0.
enum class OovPolicy { kStrict, kMapToReserved };

// File format is chosen by extension: .csv or .jsonl.
std::vector<InstanceRecord> load_dataset(const std::string& path, const FeatureSchema& schema,
                                         OovPolicy oov = OovPolicy::kStrict);
void save_dataset(const std::string& path, const FeatureSchema& schema,
                  const std::vector<InstanceRecord>& records);

// Pseudo-label files are JSONL: each line is the base record's object plus
// "t_cf" and "u_tilde". Treatments in these files are already normalized.
void save_pseudo_labels(const std::string& path, const FeatureSchema& schema,
                        const std::vector<PseudoLabeledRecord>& records);
std::vector<PseudoLabeledRecord> load_pseudo_labels(const std::string& path,
                                                    const FeatureSchema& schema,
                                                    OovPolicy oov = OovPolicy::kStrict);

// Maps raw treatments onto [0, 1] and remembers how, so later predictions
// can apply the identical mapping. Binary treatments pass through; continuous
// ones are min-max scaled. Out-of-range values clamp.
struct NormalizationParams {
  TreatmentKind kind = TreatmentKind::kBinary;
  double t_min = 0.0;
  double t_max = 1.0;

  double apply(double raw) const;

  std::string to_json() const;
  static NormalizationParams from_json(const std::string& text);
};

// Computes the parameters from observed treatments and rewrites each
// record's treatment in place. Throws DegenerateTreatmentError when the
// column is all-constant, and ContractError for values outside the declared
// kind (binary value not in {0,1}).
NormalizationParams normalize_treatment(std::vector<InstanceRecord>& records, TreatmentKind kind);

// Deterministic shuffled split; first part receives round(n * train_fraction).
std::pair<std::vector<InstanceRecord>, std::vector<InstanceRecord>> split_train_test(
    const std::vector<InstanceRecord>& records, double train_fraction, std::uint64_t seed);

enum class CfStrategy { kUniform, kEmpirical };

std::string to_string(CfStrategy s);
CfStrategy cf_strategy_from_string(const std::string& s);

// Draws counterfactual treatments whose discretization level differs from
// the factual one. Levels partition [0,1] into `levels` buckets plus the
// singleton {1}. With a single level the complement is deterministic.
class CounterfactualSampler {
 public:
  CounterfactualSampler(CfStrategy strategy, int levels, std::vector<double> observed_pool);

  // t_f must already be normalized to [0, 1].
  double sample(double t_f, Rng& rng) const;

  static int level_of(double t, int levels);

 private:
  CfStrategy strategy_;
  int levels_;
  std::vector<double> pool_;
};

}  // namespace tscan
