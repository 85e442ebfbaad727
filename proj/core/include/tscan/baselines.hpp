#pragma once

#include <string>
#include <vector>

#include "tscan/dataset.hpp"
#include "tscan/schema.hpp"
#include "tscan/tensor.hpp"
#include "tscan/training.hpp"

namespace tscan {

enum class BaselineKind { kSLearner, kTLearner };

std::string to_string(BaselineKind k);
BaselineKind baseline_kind_from_string(const std::string& s);

// Plain feed-forward regressors over one-hot categoricals plus numerics,
// hidden widths 64 and 32 with ELU. The single-model variant appends the
// treatment as an input feature and scores uplift by differencing two
// forward passes; the two-model variant fits treated and control records
// separately (binary treatments only) and scores their difference.
class BaselineModel {
 public:
  struct Net {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;
  };

  BaselineKind kind() const { return kind_; }

  // t values are normalized; treatments outside the trained kind throw.
  double predict_outcome(const InstanceRecord& record, double t) const;
  double predict_uplift(const InstanceRecord& record, double t_f, double t_cf) const;

 private:
  friend BaselineModel train_baseline(BaselineKind, const std::vector<InstanceRecord>&,
                                      const FeatureSchema&, const NormalizationParams&,
                                      const TrainConfig&);
  double net_forward(const Net& net, const std::vector<double>& x) const;
  std::vector<double> encode(const InstanceRecord& record) const;

  BaselineKind kind_ = BaselineKind::kSLearner;
  FeatureSchema schema_;
  NormalizationParams normalization_;
  std::vector<Net> nets_;  // one for the single-model variant, two (control, treated) otherwise
};

// Fits the baseline with Adam on MSE, early stopping on validation MSE with
// the config's patience, deterministic under config.seed. The two-model
// variant rejects continuous treatments with UnsupportedError.
BaselineModel train_baseline(BaselineKind kind, const std::vector<InstanceRecord>& records,
                             const FeatureSchema& schema, const NormalizationParams& normalization,
                             const TrainConfig& config);

}  // namespace tscan
