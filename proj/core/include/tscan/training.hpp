#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tscan/dataset.hpp"
#include "tscan/model.hpp"
#include "tscan/tensor.hpp"

namespace tscan {

enum class BandwidthMode { kMedian, kFixed };

std::string to_string(BandwidthMode m);
BandwidthMode bandwidth_mode_from_string(const std::string& s);

struct TrainConfig {
  double learning_rate = 0.015;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lambda_adv = 0.5;    // gradient-reversal strength on the treatment-prediction task
  double alpha_ipm = 0.01;    // weight of the representation-balancing term
  double beta_l2 = 1e-5;      // weight decay over weight matrices (not biases or embeddings)
  double gamma_uplift = 0.6;  // weight of the uplift term in the second-stage loss
  int batch_size = 256;
  int max_epochs = 40;
  int patience = 5;
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;
  std::string mmd_kernel = "rbf";
  BandwidthMode mmd_bandwidth_mode = BandwidthMode::kMedian;
  double mmd_bandwidth = 1.0;  // used as 2*sigma^2 directly when the mode is fixed
  CfStrategy cf_strategy = CfStrategy::kUniform;
  bool resample_counterfactuals = false;  // stage 2: redraw counterfactuals each epoch

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// Per-epoch loss summary. `total` is always factual_mse + alpha*ipm + beta*l2
// in stage 1 and factual_mse + gamma*uplift_mse in stage 2; the treatment
// prediction loss is tracked separately because it belongs to the adversary.
struct LossReport {
  double factual_mse = 0.0;
  double ipm = 0.0;
  double propensity_mse = 0.0;
  double l2 = 0.0;
  double uplift_mse = 0.0;
  double total = 0.0;
};

struct EpochLog {
  int epoch = 0;  // 1-based
  LossReport train;
  LossReport val;
};

// Strict-improvement early stopping: a value below every previous one resets
// the strike count, anything else adds a strike, and `patience` strikes stop
// the run. The caller restores the snapshot taken at the best observation.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);

  bool observe(double value);  // true when this value is a new best
  bool should_stop() const { return strikes_ >= patience_; }
  int best_index() const { return best_index_; }  // 0-based observation index
  double best_value() const { return best_value_; }

 private:
  int patience_;
  int strikes_ = 0;
  int best_index_ = -1;
  double best_value_ = 0.0;
};

// Partition row indices by treatment for the balancing loss. Binary: t=0 vs
// t=1. Continuous: stable sort by t, lower half vs upper half, the odd
// element joining the lower half. All-identical treatments yield two empty
// groups, which callers treat as "skip the term".
std::pair<std::vector<int>, std::vector<int>> split_by_treatment(
    const std::vector<double>& treatments, TreatmentKind kind);

// Lower median of pairwise squared distances between all distinct row pairs
// of the union of `a` and `b`; falls back to 1 when the median is 0.
double median_pairwise_sq_distance(const Tensor& a, const Tensor& b);

// Plain (non-differentiable) squared-MMD value with the RBF kernel
// exp(-||x-y||^2 / two_sigma_sq), biased estimator with self-pairs included.
double mmd_rbf_value(const Tensor& a, const Tensor& b, double two_sigma_sq);

// Convenience wrapper handling bandwidth selection and degenerate inputs: an
// empty side contributes 0 and logs a warning to stderr.
double mmd_loss(const Tensor& a, const Tensor& b, BandwidthMode mode, double fixed_two_sigma_sq);

// Shuffles 0..n-1 with `rng` and carves round(n * fraction) indices for
// validation (capped so training keeps at least one record). Training both
// stages consumes the rng in this order: split first, then one shuffle of the
// training indices per epoch.
std::pair<std::vector<int>, std::vector<int>> validation_split(int n, double fraction, Rng& rng);

struct FitResult {
  CanModel model;                  // weights restored to the best epoch
  LossReport initial_validation;   // validation pass before the first update
  std::vector<EpochLog> epochs;    // one entry per completed epoch
  int best_epoch = 0;              // 1-based; 0 when no validation was possible
};

// First stage: fits the uplift-variant network with factual MSE, the MMD
// balancing term (weight alpha), l2 weight decay (beta), and the adversarial
// treatment-prediction head behind gradient reversal (strength lambda). One
// Adam step per batch on the combined objective; early stopping watches
// validation factual MSE. Records must carry normalized treatments.
FitResult stage1_train(const std::vector<InstanceRecord>& records,
                       const ModelConfig& model_config, const FeatureSchema& schema,
                       const NormalizationParams& normalization, const TrainConfig& config);

// Scores each record's sampled counterfactual with the first-stage model:
// u_tilde = predict_outcome(t_cf) - predict_outcome(t_f). Order-preserving
// and deterministic under the seed.
std::vector<PseudoLabeledRecord> generate_pseudo_labels(const CanModel& first_stage,
                                                        const std::vector<InstanceRecord>& records,
                                                        CfStrategy strategy, std::uint64_t seed);

// Second stage: fits the dual objective factual MSE + gamma * MSE(u_hat,
// u_tilde) on pseudo-labeled records; early stopping watches validation
// total. Under the dense-head ablation the uplift term is dropped and the
// objective reduces to factual MSE. `pseudo_source` is only needed when
// config.resample_counterfactuals is set, to redraw and rescore
// counterfactuals for the training split each epoch.
FitResult stage2_train(const std::vector<PseudoLabeledRecord>& records,
                       const ModelConfig& model_config, const FeatureSchema& schema,
                       const NormalizationParams& normalization, const TrainConfig& config,
                       const CanModel* pseudo_source = nullptr);

}  // namespace tscan
