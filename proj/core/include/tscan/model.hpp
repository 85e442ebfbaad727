#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tscan/dataset.hpp"
#include "tscan/schema.hpp"
#include "tscan/tape.hpp"
#include "tscan/tensor.hpp"

namespace tscan {

enum class Variant { kCanU, kCanD };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct AblationFlags {
  bool remove_context = false;             // drop context tokens, zero gate summary
  bool replace_attention_with_dense = false;  // context layer becomes one dense layer
  bool replace_isotonic_with_dense = false;   // scalar head conditioned on the level encoding
};

struct ModelConfig {
  int embedding_dim = 8;
  std::vector<int> context_mlp_widths = {16};  // hidden widths; the summary output is always d
  std::vector<int> head_mlp_widths = {32};
  int iso_levels = 1;  // M; the head emits M+1 level weights
  int attention_heads = 1;
  Variant variant = Variant::kCanU;
  AblationFlags ablations;
  bool attention_residual = false;  // residual connection around each attention block
  bool scalar_gates = false;        // one gate value per token instead of per dimension

  void validate(const FeatureSchema& schema) const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// Thermometer encoding of a treatment level: floor(t*M)+1 leading ones in a
// vector of length M+1.
std::vector<double> isotonic_encode(double t, int levels);

struct EncodedTokens {
  Tensor merchant_tokens;  // n_s x d
  Tensor context_tokens;   // n_c x d
  Tensor treatment_token;  // 1 x d
};

// Step-by-step observables of one record forward, for inspection and tests.
struct ForwardTrace {
  EncodedTokens tokens;
  Tensor context_summary;  // 1 x d
  Tensor merchant_gates;   // n_s x gate width
  Tensor treatment_gate;   // 1 x gate width
  Tensor h_cal;            // n_s x d
  Tensor h_t;              // 1 x d
  Tensor tal_gates;        // n_s x gate width
  Tensor h_tal;            // 1 x d
};

// The context-aware network. One instance covers CAN-U (with propensity
// head) and CAN-D plus the ablation variants, chosen by ModelConfig.
class CanModel {
 public:
  CanModel() = default;
  CanModel(const ModelConfig& config, const FeatureSchema& schema,
           const NormalizationParams& normalization, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  const FeatureSchema& schema() const { return schema_; }
  const NormalizationParams& normalization() const { return normalization_; }
  std::uint64_t init_seed() const { return init_seed_; }

  int param_count() const { return static_cast<int>(params_.size()); }
  const std::string& param_name(int i) const { return names_[i]; }
  Tensor& param(int i) { return params_[i]; }
  const Tensor& param(int i) const { return params_[i]; }
  int param_index(const std::string& name) const;  // -1 when absent
  bool param_is_weight_matrix(int i) const { return weight_matrix_[i]; }
  std::vector<Tensor*> param_ptrs();

  // --- record-level inference (scratch tape, no gradients) ---
  EncodedTokens encode_features(const InstanceRecord& record) const;
  ForwardTrace trace_forward(const InstanceRecord& record) const;
  // Level weights v (length M+1). VariantError under the dense-head ablation.
  std::vector<double> uplift_weights(const InstanceRecord& record) const;
  // t and the record's treatment must be normalized to [0,1].
  double predict_outcome(const InstanceRecord& record, double t) const;
  double predict_uplift(const InstanceRecord& record, double t_f, double t_cf) const;
  // Predicted (normalized) treatment from the balanced representation.
  // VariantError on CAN-D, which carries no propensity head.
  double propensity(const InstanceRecord& record) const;

 private:
  friend class ModelBuilder;
  ModelConfig config_;
  FeatureSchema schema_;
  NormalizationParams normalization_;
  std::uint64_t init_seed_ = 0;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::vector<bool> weight_matrix_;
  std::map<std::string, int> index_;
};

// Model parameters registered on a tape for one batch. Bind once per batch;
// every record forward in the batch shares these leaves, so gradients
// accumulate across records.
struct BoundModel {
  Tape* tape = nullptr;
  const CanModel* model = nullptr;
  std::vector<Var> params;

  Var p(int idx) const { return params[idx]; }
  Var p(const std::string& name) const;
};

BoundModel bind_model(Tape& tape, const CanModel& model, bool track_gradients);

// Backbone outputs for one record. v is the isotonic weight vector and is
// left invalid under the dense-head ablation (outcomes then come from head
// reruns conditioned on the level encoding).
struct RecordForward {
  Var pooled_hcal;  // 1 x d, the representation the balancing losses see
  Var h_tal;        // 1 x d
  Var v;            // 1 x (M+1)
};

// The treatment token and gates always use the record's own (factual,
// normalized) treatment; the t arguments of the outcome builders select
// levels of the resulting weight vector.
RecordForward build_forward(const BoundModel& bound, const InstanceRecord& record,
                            ForwardTrace* trace = nullptr);
Var build_outcome(const BoundModel& bound, const RecordForward& fwd, double t);
Var build_uplift(const BoundModel& bound, const RecordForward& fwd, double t_f, double t_cf);
// grl_lambda: gradient-reversal strength between the representation and the
// head; nullopt removes the reversal node entirely (head only, no minimax).
Var build_propensity(const BoundModel& bound, const RecordForward& fwd,
                     std::optional<double> grl_lambda);

}  // namespace tscan
