#include "tscan/baselines.hpp"

#include <cmath>
#include <numeric>

#include "tscan/adam.hpp"
#include "tscan/errors.hpp"
#include "tscan/tape.hpp"

namespace tscan {

std::string to_string(BaselineKind k) {
  return k == BaselineKind::kSLearner ? "s_learner" : "t_learner";
}

BaselineKind baseline_kind_from_string(const std::string& s) {
  if (s == "s_learner") return BaselineKind::kSLearner;
  if (s == "t_learner") return BaselineKind::kTLearner;
  throw ConfigError("unknown baseline '" + s + "' (expected s_learner|t_learner)");
}

namespace {

constexpr int kHidden[] = {64, 32};

int onehot_width(const FeatureSchema& schema) {
  int w = 0;
  for (const auto& f : schema.merchant_categorical) w += f.cardinality;
  for (const auto& f : schema.context_categorical) w += f.cardinality;
  w += static_cast<int>(schema.merchant_numeric.size() + schema.context_numeric.size());
  return w;
}

void encode_into(const FeatureSchema& schema, const InstanceRecord& r, double* out) {
  int at = 0;
  for (std::size_t i = 0; i < schema.merchant_categorical.size(); ++i) {
    const int card = schema.merchant_categorical[i].cardinality;
    const int code = r.merchant_cat[i];
    if (code < 0 || code >= card) {
      throw OovError("categorical code " + std::to_string(code) + " out of range for '" +
                     schema.merchant_categorical[i].name + "'");
    }
    for (int k = 0; k < card; ++k) out[at + k] = k == code ? 1.0 : 0.0;
    at += card;
  }
  for (double v : r.merchant_num) out[at++] = v;
  for (std::size_t i = 0; i < schema.context_categorical.size(); ++i) {
    const int card = schema.context_categorical[i].cardinality;
    const int code = r.context_cat[i];
    if (code < 0 || code >= card) {
      throw OovError("categorical code " + std::to_string(code) + " out of range for '" +
                     schema.context_categorical[i].name + "'");
    }
    for (int k = 0; k < card; ++k) out[at + k] = k == code ? 1.0 : 0.0;
    at += card;
  }
  for (double v : r.context_num) out[at++] = v;
}

BaselineModel::Net glorot_net(int in_width, Rng& rng) {
  BaselineModel::Net net;
  int prev = in_width;
  for (int width : kHidden) {
    Tensor w(prev, width);
    const double lim = std::sqrt(6.0 / (prev + width));
    for (double& v : w.values()) v = rng.uniform(-lim, lim);
    w.requires_grad = true;
    Tensor b(1, width);
    b.requires_grad = true;
    net.weights.push_back(std::move(w));
    net.biases.push_back(std::move(b));
    prev = width;
  }
  Tensor w(prev, 1);
  const double lim = std::sqrt(6.0 / (prev + 1));
  for (double& v : w.values()) v = rng.uniform(-lim, lim);
  w.requires_grad = true;
  Tensor b(1, 1);
  b.requires_grad = true;
  net.weights.push_back(std::move(w));
  net.biases.push_back(std::move(b));
  return net;
}

// Fits one regressor X -> y; rows of X are full feature vectors.
void fit_net(BaselineModel::Net& net, const Tensor& X, const std::vector<double>& y,
             const TrainConfig& cfg, Rng& rng, const char* label) {
  const int n = X.rows();
  if (n < 1) throw ContractError(std::string(label) + ": no records to fit");
  std::vector<Tensor*> params;  // layer order, weight then bias, matching the leaves
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    params.push_back(&net.weights[l]);
    params.push_back(&net.biases[l]);
  }
  AdamState opt = AdamState::init(params, {cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8});

  auto [train_idx, val_idx] = validation_split(n, cfg.validation_fraction, rng);

  const auto run_batch = [&](Tape& tape, const std::vector<int>& batch, bool track,
                             std::vector<Var>* leaves) {
    tape.reset();
    const int bn = static_cast<int>(batch.size());
    Tensor xb(bn, X.cols()), yb(bn, 1);
    for (int i = 0; i < bn; ++i) {
      const double* src = X.data() + static_cast<std::size_t>(batch[i]) * X.cols();
      std::copy(src, src + X.cols(), xb.data() + static_cast<std::size_t>(i) * X.cols());
      yb.at(i, 0) = y[batch[i]];
    }
    Var h = tape.constant(xb);
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      Var w = track ? tape.leaf(net.weights[l]) : tape.constant(net.weights[l]);
      Var b = track ? tape.leaf(net.biases[l]) : tape.constant(net.biases[l]);
      if (leaves) {
        leaves->push_back(w);
        leaves->push_back(b);
      }
      h = add_bias(matmul(h, w), b);
      if (l + 1 < net.weights.size()) h = elu(h);
    }
    return mse(h, tape.constant(yb));
  };

  Tape tape, val_tape;
  const auto validate = [&]() {
    if (val_idx.empty()) return 0.0;
    double sum = 0.0, weight = 0.0;
    for (std::size_t at = 0; at < val_idx.size(); at += cfg.batch_size) {
      const std::size_t end =
          std::min(val_idx.size(), at + static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> batch(val_idx.begin() + at, val_idx.begin() + end);
      sum += run_batch(val_tape, batch, false, nullptr).scalar() * batch.size();
      weight += static_cast<double>(batch.size());
    }
    return sum / weight;
  };

  EarlyStopper stopper(cfg.patience);
  std::vector<std::vector<double>> best;
  for (const Tensor* p : params) best.push_back(p->values());

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(train_idx);
    for (std::size_t at = 0; at < train_idx.size(); at += cfg.batch_size) {
      const std::size_t end =
          std::min(train_idx.size(), at + static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> batch(train_idx.begin() + at, train_idx.begin() + end);
      std::vector<Var> leaves;
      Var loss = run_batch(tape, batch, true, &leaves);
      if (!std::isfinite(loss.scalar())) {
        throw DivergenceError(std::string(label) + " diverged at epoch " + std::to_string(epoch) +
                              ": non-finite loss");
      }
      tape.backward(loss);
      std::vector<std::span<const double>> grads;
      grads.reserve(leaves.size());
      for (const Var& v : leaves) grads.push_back(tape.grad(v));
      adam_step(params, grads, opt);
    }
    if (val_idx.empty()) {
      best.clear();
      for (const Tensor* p : params) best.push_back(p->values());
      continue;
    }
    if (stopper.observe(validate())) {
      best.clear();
      for (const Tensor* p : params) best.push_back(p->values());
    }
    if (stopper.should_stop()) break;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->values() = best[i];
}

}  // namespace

double BaselineModel::net_forward(const Net& net, const std::vector<double>& x) const {
  std::vector<double> h = x, next;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const Tensor& w = net.weights[l];
    const Tensor& b = net.biases[l];
    next.assign(w.cols(), 0.0);
    for (int j = 0; j < w.cols(); ++j) {
      double s = b.at(0, j);
      for (int i = 0; i < w.rows(); ++i) s += h[i] * w.at(i, j);
      next[j] = s;
    }
    if (l + 1 < net.weights.size()) {
      for (double& v : next) v = v > 0 ? v : std::expm1(v);
    }
    h.swap(next);
  }
  return h[0];
}

std::vector<double> BaselineModel::encode(const InstanceRecord& record) const {
  std::vector<double> x(onehot_width(schema_));
  encode_into(schema_, record, x.data());
  return x;
}

double BaselineModel::predict_outcome(const InstanceRecord& record, double t) const {
  if (kind_ == BaselineKind::kSLearner) {
    std::vector<double> x = encode(record);
    x.push_back(t);
    return net_forward(nets_[0], x);
  }
  if (t != 0.0 && t != 1.0) {
    throw ContractError("two-model baseline scores binary treatments only");
  }
  return net_forward(nets_[t == 0.0 ? 0 : 1], encode(record));
}

double BaselineModel::predict_uplift(const InstanceRecord& record, double t_f, double t_cf) const {
  return predict_outcome(record, t_cf) - predict_outcome(record, t_f);
}

BaselineModel train_baseline(BaselineKind kind, const std::vector<InstanceRecord>& records,
                             const FeatureSchema& schema, const NormalizationParams& normalization,
                             const TrainConfig& config) {
  config.validate();
  schema.validate();
  if (records.empty()) throw ContractError("baseline training needs records");
  if (kind == BaselineKind::kTLearner && normalization.kind != TreatmentKind::kBinary) {
    throw UnsupportedError("the two-model baseline supports binary treatments only");
  }

  BaselineModel model;
  model.kind_ = kind;
  model.schema_ = schema;
  model.normalization_ = normalization;

  const int base_width = onehot_width(schema);
  if (kind == BaselineKind::kSLearner) {
    Tensor X(static_cast<int>(records.size()), base_width + 1);
    std::vector<double> y(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      double* row = X.data() + i * static_cast<std::size_t>(base_width + 1);
      encode_into(schema, records[i], row);
      row[base_width] = records[i].treatment;
      y[i] = records[i].outcome;
    }
    Rng rng(config.seed);
    model.nets_.push_back(glorot_net(base_width + 1, rng));
    fit_net(model.nets_[0], X, y, config, rng, "single-model baseline");
    return model;
  }

  std::vector<const InstanceRecord*> arms[2];
  for (const InstanceRecord& r : records) {
    if (r.treatment != 0.0 && r.treatment != 1.0) {
      throw UnsupportedError("the two-model baseline supports binary treatments only");
    }
    arms[r.treatment == 0.0 ? 0 : 1].push_back(&r);
  }
  if (arms[0].empty() || arms[1].empty()) {
    throw DegenerateTreatmentError("the two-model baseline needs both treatment arms");
  }
  for (int arm = 0; arm < 2; ++arm) {
    Tensor X(static_cast<int>(arms[arm].size()), base_width);
    std::vector<double> y(arms[arm].size());
    for (std::size_t i = 0; i < arms[arm].size(); ++i) {
      encode_into(schema, *arms[arm][i], X.data() + i * static_cast<std::size_t>(base_width));
      y[i] = arms[arm][i]->outcome;
    }
    Rng rng(config.seed + arm);
    model.nets_.push_back(glorot_net(base_width, rng));
    fit_net(model.nets_[arm], X, y, config, rng, arm == 0 ? "control-arm baseline" : "treated-arm baseline");
  }
  return model;
}

}  // namespace tscan
