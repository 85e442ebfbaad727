#include "tscan/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "tscan/adam.hpp"
#include "tscan/errors.hpp"
#include "json_util.hpp"

namespace tscan {

std::string to_string(BandwidthMode m) {
  return m == BandwidthMode::kMedian ? "median" : "fixed";
}

BandwidthMode bandwidth_mode_from_string(const std::string& s) {
  if (s == "median") return BandwidthMode::kMedian;
  if (s == "fixed") return BandwidthMode::kFixed;
  throw ConfigError("unknown bandwidth mode '" + s + "' (expected median|fixed)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("adam betas must lie in [0,1)");
  }
  if (lambda_adv < 0 || alpha_ipm < 0 || beta_l2 < 0 || gamma_uplift < 0) {
    throw ConfigError("loss weights must be nonnegative");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (!(validation_fraction >= 0 && validation_fraction < 1)) {
    throw ConfigError("validation_fraction must lie in [0,1)");
  }
  if (mmd_kernel != "rbf") throw ConfigError("unsupported mmd_kernel '" + mmd_kernel + "'");
  if (mmd_bandwidth_mode == BandwidthMode::kFixed && !(mmd_bandwidth > 0)) {
    throw ConfigError("fixed mmd_bandwidth must be positive");
  }
}

std::string TrainConfig::to_json() const {
  nlohmann::json j{{"learning_rate", learning_rate},
                   {"beta1", beta1},
                   {"beta2", beta2},
                   {"lambda_adv", lambda_adv},
                   {"alpha_ipm", alpha_ipm},
                   {"beta_l2", beta_l2},
                   {"gamma_uplift", gamma_uplift},
                   {"batch_size", batch_size},
                   {"max_epochs", max_epochs},
                   {"patience", patience},
                   {"validation_fraction", validation_fraction},
                   {"seed", seed},
                   {"mmd_kernel", mmd_kernel},
                   {"mmd_bandwidth_mode", to_string(mmd_bandwidth_mode)},
                   {"mmd_bandwidth", mmd_bandwidth},
                   {"cf_strategy", to_string(cf_strategy)},
                   {"resample_counterfactuals", resample_counterfactuals}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j = parse_json(text, "training config");
  reject_unknown_keys(j,
                      {"learning_rate", "beta1", "beta2", "lambda_adv", "alpha_ipm", "beta_l2",
                       "gamma_uplift", "batch_size", "max_epochs", "patience",
                       "validation_fraction", "seed", "mmd_kernel", "mmd_bandwidth_mode",
                       "mmd_bandwidth", "cf_strategy", "resample_counterfactuals"},
                      "training config");
  TrainConfig c;
  try {
    if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("beta1")) c.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) c.beta2 = j["beta2"].get<double>();
    if (j.contains("lambda_adv")) c.lambda_adv = j["lambda_adv"].get<double>();
    if (j.contains("alpha_ipm")) c.alpha_ipm = j["alpha_ipm"].get<double>();
    if (j.contains("beta_l2")) c.beta_l2 = j["beta_l2"].get<double>();
    if (j.contains("gamma_uplift")) c.gamma_uplift = j["gamma_uplift"].get<double>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<int>();
    if (j.contains("patience")) c.patience = j["patience"].get<int>();
    if (j.contains("validation_fraction")) {
      c.validation_fraction = j["validation_fraction"].get<double>();
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("mmd_kernel")) c.mmd_kernel = j["mmd_kernel"].get<std::string>();
    if (j.contains("mmd_bandwidth_mode")) {
      c.mmd_bandwidth_mode = bandwidth_mode_from_string(j["mmd_bandwidth_mode"].get<std::string>());
    }
    if (j.contains("mmd_bandwidth")) c.mmd_bandwidth = j["mmd_bandwidth"].get<double>();
    if (j.contains("cf_strategy")) {
      c.cf_strategy = cf_strategy_from_string(j["cf_strategy"].get<std::string>());
    }
    if (j.contains("resample_counterfactuals")) {
      c.resample_counterfactuals = j["resample_counterfactuals"].get<bool>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

EarlyStopper::EarlyStopper(int patience) : patience_(patience) {
  if (patience < 1) throw ContractError("early stopping patience must be at least 1");
}

bool EarlyStopper::observe(double value) {
  const int index = best_index_ < 0 ? 0 : best_index_ + strikes_ + 1;
  if (best_index_ < 0 || value < best_value_) {
    best_value_ = value;
    best_index_ = index;
    strikes_ = 0;
    return true;
  }
  ++strikes_;
  return false;
}

std::pair<std::vector<int>, std::vector<int>> split_by_treatment(
    const std::vector<double>& treatments, TreatmentKind kind) {
  const int n = static_cast<int>(treatments.size());
  std::vector<int> lower, upper;
  if (n == 0) return {lower, upper};
  bool all_same = true;
  for (double t : treatments) {
    if (t != treatments[0]) {
      all_same = false;
      break;
    }
  }
  if (all_same) return {lower, upper};
  if (kind == TreatmentKind::kBinary) {
    for (int i = 0; i < n; ++i) (treatments[i] == 0.0 ? lower : upper).push_back(i);
    return {lower, upper};
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return treatments[a] < treatments[b]; });
  const int n_lower = (n + 1) / 2;
  lower.assign(order.begin(), order.begin() + n_lower);
  upper.assign(order.begin() + n_lower, order.end());
  return {lower, upper};
}

namespace {

double row_sq_distance(const double* x, const double* y, int d) {
  double s = 0.0;
  for (int k = 0; k < d; ++k) {
    const double diff = x[k] - y[k];
    s += diff * diff;
  }
  return s;
}

}  // namespace

double median_pairwise_sq_distance(const Tensor& a, const Tensor& b) {
  if (a.rows() > 0 && b.rows() > 0 && a.cols() != b.cols()) {
    throw ShapeError("bandwidth inputs disagree on width: " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  const int d = a.rows() > 0 ? a.cols() : b.cols();
  std::vector<const double*> rows;
  rows.reserve(static_cast<std::size_t>(a.rows()) + b.rows());
  for (int i = 0; i < a.rows(); ++i) rows.push_back(a.data() + static_cast<std::size_t>(i) * d);
  for (int i = 0; i < b.rows(); ++i) rows.push_back(b.data() + static_cast<std::size_t>(i) * d);
  const std::size_t n = rows.size();
  if (n < 2) return 1.0;
  std::vector<double> dists;
  dists.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dists.push_back(row_sq_distance(rows[i], rows[j], d));
    }
  }
  const std::size_t mid = (dists.size() - 1) / 2;
  std::nth_element(dists.begin(), dists.begin() + mid, dists.end());
  const double med = dists[mid];
  return med > 0.0 ? med : 1.0;
}

double mmd_rbf_value(const Tensor& a, const Tensor& b, double two_sigma_sq) {
  if (a.rows() == 0 || b.rows() == 0) {
    throw ContractError("squared-MMD needs two non-empty groups");
  }
  if (a.cols() != b.cols()) {
    throw ShapeError("squared-MMD inputs disagree on width: " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  if (!(two_sigma_sq > 0)) throw ContractError("kernel bandwidth must be positive");
  const int d = a.cols();
  const auto mean_k = [&](const Tensor& x, const Tensor& y) {
    double s = 0.0;
    for (int i = 0; i < x.rows(); ++i) {
      for (int j = 0; j < y.rows(); ++j) {
        s += std::exp(-row_sq_distance(x.data() + static_cast<std::size_t>(i) * d,
                                       y.data() + static_cast<std::size_t>(j) * d, d) /
                      two_sigma_sq);
      }
    }
    return s / (static_cast<double>(x.rows()) * y.rows());
  };
  // The self terms commute exactly; the cross sum does not, because swapping
  // the arguments transposes the accumulation order. Fix a canonical operand
  // order so mmd(a, b) and mmd(b, a) run identical loops bit for bit.
  const bool swap_cross =
      a.rows() != b.rows()
          ? a.rows() > b.rows()
          : std::lexicographical_compare(b.data(), b.data() + b.size(), a.data(),
                                         a.data() + a.size());
  const double cross = swap_cross ? mean_k(b, a) : mean_k(a, b);
  return mean_k(a, a) + mean_k(b, b) - 2.0 * cross;
}

double mmd_loss(const Tensor& a, const Tensor& b, BandwidthMode mode, double fixed_two_sigma_sq) {
  if (a.rows() == 0 || b.rows() == 0) {
    std::cerr << "warning: one-sided treatment group, balancing term contributes 0\n";
    return 0.0;
  }
  const double bw =
      mode == BandwidthMode::kFixed ? fixed_two_sigma_sq : median_pairwise_sq_distance(a, b);
  return mmd_rbf_value(a, b, bw);
}

std::pair<std::vector<int>, std::vector<int>> validation_split(int n, double fraction, Rng& rng) {
  if (n < 1) throw ContractError("cannot split an empty dataset");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  int n_val = static_cast<int>(std::llround(n * fraction));
  if (n_val >= n) n_val = n - 1;
  if (n_val < 0) n_val = 0;
  std::vector<int> val(idx.begin(), idx.begin() + n_val);
  std::vector<int> train(idx.begin() + n_val, idx.end());
  return {train, val};
}

namespace {

// Rows of the pooled balanced representation stacked per treatment group, as
// tape nodes (for the differentiable loss) and as plain tensors (for
// bandwidth selection, which stays outside the gradient).
struct GroupedPooled {
  Var a, b;
  Tensor a_vals, b_vals;
  bool defined = false;
};

GroupedPooled group_pooled(Tape& tape, const std::vector<Var>& pooled,
                           const std::vector<int>& lower, const std::vector<int>& upper) {
  GroupedPooled g;
  if (lower.empty() || upper.empty()) return g;
  std::vector<Var> parts;
  parts.reserve(lower.size());
  for (int i : lower) parts.push_back(pooled[i]);
  g.a = concat_rows(tape, parts);
  parts.clear();
  for (int i : upper) parts.push_back(pooled[i]);
  g.b = concat_rows(tape, parts);
  g.a_vals = g.a.to_tensor();
  g.b_vals = g.b.to_tensor();
  g.defined = true;
  return g;
}

double pick_bandwidth(const TrainConfig& cfg, const GroupedPooled& g) {
  if (cfg.mmd_bandwidth_mode == BandwidthMode::kFixed) return cfg.mmd_bandwidth;
  return median_pairwise_sq_distance(g.a_vals, g.b_vals);
}

double weight_sum_squares(const CanModel& model) {
  double s = 0.0;
  for (int i = 0; i < model.param_count(); ++i) {
    if (!model.param_is_weight_matrix(i)) continue;
    for (double v : model.param(i).values()) s += v * v;
  }
  return s;
}

// Weighted running means for per-epoch loss aggregation.
struct MeanAcc {
  double sum = 0.0, weight = 0.0;
  void add(double v, double w) {
    sum += v * w;
    weight += w;
  }
  double mean() const { return weight > 0 ? sum / weight : 0.0; }
};

std::vector<std::vector<double>> snapshot_params(const CanModel& model) {
  std::vector<std::vector<double>> snap;
  snap.reserve(model.param_count());
  for (int i = 0; i < model.param_count(); ++i) snap.push_back(model.param(i).values());
  return snap;
}

void restore_params(CanModel& model, const std::vector<std::vector<double>>& snap) {
  for (int i = 0; i < model.param_count(); ++i) model.param(i).values() = snap[i];
}

std::vector<int> batch_of(const std::vector<int>& order, std::size_t begin, int batch_size) {
  const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
  return std::vector<int>(order.begin() + begin, order.begin() + end);
}

void optimizer_step(Tape& tape, const BoundModel& bound, std::vector<Tensor*>& params,
                    AdamState& opt) {
  std::vector<std::span<const double>> grads;
  grads.reserve(bound.params.size());
  for (const Var& p : bound.params) grads.push_back(tape.grad(p));
  adam_step(params, grads, opt);
}

// ---- stage 1 ---------------------------------------------------------------

struct Stage1Batch {
  double factual = 0.0, ipm = 0.0, prop = 0.0, l2 = 0.0;
  bool ipm_defined = false;
  BoundModel bound;
  Var combined;
};

Stage1Batch stage1_forward(Tape& tape, const CanModel& model,
                           const std::vector<InstanceRecord>& records,
                           const std::vector<int>& batch, const TrainConfig& cfg,
                           bool track_gradients) {
  tape.reset();
  Stage1Batch out;
  out.bound = bind_model(tape, model, track_gradients);
  const int bn = static_cast<int>(batch.size());

  std::vector<Var> yhat, pooled, phat;
  yhat.reserve(bn);
  pooled.reserve(bn);
  phat.reserve(bn);
  Tensor y_target(bn, 1), t_target(bn, 1);
  std::vector<double> treatments(bn);
  for (int i = 0; i < bn; ++i) {
    const InstanceRecord& r = records[batch[i]];
    RecordForward fwd = build_forward(out.bound, r);
    yhat.push_back(build_outcome(out.bound, fwd, r.treatment));
    pooled.push_back(fwd.pooled_hcal);
    phat.push_back(build_propensity(out.bound, fwd, cfg.lambda_adv));
    y_target.at(i, 0) = r.outcome;
    t_target.at(i, 0) = r.treatment;
    treatments[i] = r.treatment;
  }

  Var factual = mse(concat_rows(tape, yhat), tape.constant(y_target));
  std::vector<Var> terms{factual};
  std::vector<double> weights{1.0};
  out.factual = factual.scalar();

  if (cfg.alpha_ipm > 0) {
    auto [lower, upper] = split_by_treatment(treatments, model.normalization().kind);
    GroupedPooled g = group_pooled(tape, pooled, lower, upper);
    if (g.defined) {
      Var m = mmd_rbf(g.a, g.b, pick_bandwidth(cfg, g));
      out.ipm = m.scalar();
      out.ipm_defined = true;
      terms.push_back(m);
      weights.push_back(cfg.alpha_ipm);
    } else {
      std::cerr << "warning: one-sided treatment batch, balancing term contributes 0\n";
    }
  }

  if (cfg.beta_l2 > 0) {
    std::vector<Var> sq;
    std::vector<double> ones;
    for (int i = 0; i < model.param_count(); ++i) {
      if (!model.param_is_weight_matrix(i)) continue;
      sq.push_back(sum_squares(out.bound.p(i)));
      ones.push_back(1.0);
    }
    Var l2v = weighted_sum(tape, sq, ones);
    out.l2 = l2v.scalar();
    terms.push_back(l2v);
    weights.push_back(cfg.beta_l2);
  }

  Var prop = mse(concat_rows(tape, phat), tape.constant(t_target));
  out.prop = prop.scalar();
  terms.push_back(prop);
  weights.push_back(1.0);

  out.combined = weighted_sum(tape, terms, weights);
  return out;
}

LossReport stage1_validate(Tape& tape, const CanModel& model,
                           const std::vector<InstanceRecord>& records,
                           const std::vector<int>& val_idx, const TrainConfig& cfg) {
  LossReport r;
  if (val_idx.empty()) return r;
  MeanAcc factual, ipm, prop;
  for (std::size_t at = 0; at < val_idx.size(); at += cfg.batch_size) {
    std::vector<int> batch = batch_of(val_idx, at, cfg.batch_size);
    Stage1Batch b = stage1_forward(tape, model, records, batch, cfg, false);
    const double w = static_cast<double>(batch.size());
    factual.add(b.factual, w);
    prop.add(b.prop, w);
    if (b.ipm_defined) ipm.add(b.ipm, w);
  }
  r.factual_mse = factual.mean();
  r.ipm = ipm.mean();
  r.propensity_mse = prop.mean();
  r.l2 = weight_sum_squares(model);
  r.total = r.factual_mse + cfg.alpha_ipm * r.ipm + cfg.beta_l2 * r.l2;
  return r;
}

}  // namespace

FitResult stage1_train(const std::vector<InstanceRecord>& records,
                       const ModelConfig& model_config, const FeatureSchema& schema,
                       const NormalizationParams& normalization, const TrainConfig& config) {
  config.validate();
  model_config.validate(schema);
  if (model_config.variant != Variant::kCanU) {
    throw VariantError("first-stage training requires the uplift variant with its treatment head");
  }
  if (records.size() < 2) throw ContractError("first-stage training needs at least 2 records");

  CanModel model(model_config, schema, normalization, config.seed);
  std::vector<Tensor*> params = model.param_ptrs();
  AdamState opt = AdamState::init(params, {config.learning_rate, config.beta1, config.beta2, 1e-8});

  Rng rng(config.seed);
  auto [train_idx, val_idx] =
      validation_split(static_cast<int>(records.size()), config.validation_fraction, rng);

  Tape tape, val_tape;
  FitResult result;
  result.initial_validation = stage1_validate(val_tape, model, records, val_idx, config);

  EarlyStopper stopper(config.patience);
  std::vector<std::vector<double>> best = snapshot_params(model);
  int best_epoch = 0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(train_idx);
    MeanAcc factual, ipm, prop;
    double l2 = 0.0;
    for (std::size_t at = 0; at < train_idx.size(); at += config.batch_size) {
      std::vector<int> batch = batch_of(train_idx, at, config.batch_size);
      Stage1Batch b = stage1_forward(tape, model, records, batch, config, true);
      if (!std::isfinite(b.combined.scalar())) {
        throw DivergenceError("first-stage training diverged at epoch " + std::to_string(epoch) +
                              ": non-finite loss");
      }
      tape.backward(b.combined);
      optimizer_step(tape, b.bound, params, opt);
      const double w = static_cast<double>(batch.size());
      factual.add(b.factual, w);
      prop.add(b.prop, w);
      if (b.ipm_defined) ipm.add(b.ipm, w);
      l2 = b.l2;
    }

    EpochLog log;
    log.epoch = epoch;
    log.train.factual_mse = factual.mean();
    log.train.ipm = ipm.mean();
    log.train.propensity_mse = prop.mean();
    log.train.l2 = l2;
    log.train.total =
        log.train.factual_mse + config.alpha_ipm * log.train.ipm + config.beta_l2 * log.train.l2;
    log.val = stage1_validate(val_tape, model, records, val_idx, config);
    result.epochs.push_back(log);

    if (val_idx.empty()) {
      best = snapshot_params(model);
      best_epoch = epoch;
      continue;
    }
    if (stopper.observe(log.val.factual_mse)) {
      best = snapshot_params(model);
      best_epoch = epoch;
    }
    if (stopper.should_stop()) break;
  }

  restore_params(model, best);
  result.model = std::move(model);
  result.best_epoch = best_epoch;
  return result;
}

std::vector<PseudoLabeledRecord> generate_pseudo_labels(const CanModel& first_stage,
                                                        const std::vector<InstanceRecord>& records,
                                                        CfStrategy strategy, std::uint64_t seed) {
  if (first_stage.config().variant != Variant::kCanU) {
    throw VariantError("pseudo labels come from the first-stage uplift variant");
  }
  std::vector<double> pool;
  if (strategy == CfStrategy::kEmpirical) {
    pool.reserve(records.size());
    for (const InstanceRecord& r : records) pool.push_back(r.treatment);
  }
  CounterfactualSampler sampler(strategy, first_stage.config().iso_levels, std::move(pool));
  Rng rng(seed);
  std::vector<PseudoLabeledRecord> out;
  out.reserve(records.size());
  for (const InstanceRecord& r : records) {
    PseudoLabeledRecord p;
    p.base = r;
    p.t_cf = sampler.sample(r.treatment, rng);
    p.u_tilde = first_stage.predict_uplift(r, r.treatment, p.t_cf);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

// ---- stage 2 ---------------------------------------------------------------

struct Stage2Batch {
  double factual = 0.0, uplift = 0.0;
  BoundModel bound;
  Var combined;
};

Stage2Batch stage2_forward(Tape& tape, const CanModel& model,
                           const std::vector<PseudoLabeledRecord>& records,
                           const std::vector<int>& batch, const TrainConfig& cfg,
                           bool track_gradients) {
  tape.reset();
  Stage2Batch out;
  out.bound = bind_model(tape, model, track_gradients);
  const int bn = static_cast<int>(batch.size());
  const bool with_uplift =
      !model.config().ablations.replace_isotonic_with_dense && cfg.gamma_uplift > 0;

  std::vector<Var> yhat, uhat;
  yhat.reserve(bn);
  uhat.reserve(bn);
  Tensor y_target(bn, 1), u_target(bn, 1);
  for (int i = 0; i < bn; ++i) {
    const PseudoLabeledRecord& p = records[batch[i]];
    RecordForward fwd = build_forward(out.bound, p.base);
    yhat.push_back(build_outcome(out.bound, fwd, p.base.treatment));
    if (with_uplift) uhat.push_back(build_uplift(out.bound, fwd, p.base.treatment, p.t_cf));
    y_target.at(i, 0) = p.base.outcome;
    u_target.at(i, 0) = p.u_tilde;
  }

  Var factual = mse(concat_rows(tape, yhat), tape.constant(y_target));
  out.factual = factual.scalar();
  if (with_uplift) {
    Var uplift = mse(concat_rows(tape, uhat), tape.constant(u_target));
    out.uplift = uplift.scalar();
    std::vector<Var> terms{factual, uplift};
    std::vector<double> weights{1.0, cfg.gamma_uplift};
    out.combined = weighted_sum(tape, terms, weights);
  } else {
    out.combined = factual;
  }
  return out;
}

LossReport stage2_validate(Tape& tape, const CanModel& model,
                           const std::vector<PseudoLabeledRecord>& records,
                           const std::vector<int>& val_idx, const TrainConfig& cfg) {
  LossReport r;
  if (val_idx.empty()) return r;
  MeanAcc factual, uplift;
  for (std::size_t at = 0; at < val_idx.size(); at += cfg.batch_size) {
    std::vector<int> batch = batch_of(val_idx, at, cfg.batch_size);
    Stage2Batch b = stage2_forward(tape, model, records, batch, cfg, false);
    const double w = static_cast<double>(batch.size());
    factual.add(b.factual, w);
    uplift.add(b.uplift, w);
  }
  r.factual_mse = factual.mean();
  r.uplift_mse = uplift.mean();
  r.total = r.factual_mse + cfg.gamma_uplift * r.uplift_mse;
  return r;
}

}  // namespace

FitResult stage2_train(const std::vector<PseudoLabeledRecord>& records,
                       const ModelConfig& model_config, const FeatureSchema& schema,
                       const NormalizationParams& normalization, const TrainConfig& config,
                       const CanModel* pseudo_source) {
  config.validate();
  model_config.validate(schema);
  if (model_config.variant != Variant::kCanD) {
    throw VariantError("second-stage training requires the pseudo-label variant (no treatment head)");
  }
  if (records.size() < 2) throw ContractError("second-stage training needs at least 2 records");
  if (config.resample_counterfactuals && pseudo_source == nullptr) {
    throw ConfigError("resampling counterfactuals needs the first-stage model");
  }

  CanModel model(model_config, schema, normalization, config.seed);
  std::vector<Tensor*> params = model.param_ptrs();
  AdamState opt = AdamState::init(params, {config.learning_rate, config.beta1, config.beta2, 1e-8});

  Rng rng(config.seed);
  auto [train_idx, val_idx] =
      validation_split(static_cast<int>(records.size()), config.validation_fraction, rng);

  std::vector<PseudoLabeledRecord> working = records;

  Tape tape, val_tape;
  FitResult result;
  result.initial_validation = stage2_validate(val_tape, model, working, val_idx, config);

  EarlyStopper stopper(config.patience);
  std::vector<std::vector<double>> best = snapshot_params(model);
  int best_epoch = 0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    if (config.resample_counterfactuals && epoch > 1) {
      // Redraw the training split's counterfactuals; validation targets stay
      // fixed so the early-stopping signal remains comparable across epochs.
      std::vector<InstanceRecord> bases;
      bases.reserve(train_idx.size());
      for (int i : train_idx) bases.push_back(working[i].base);
      std::vector<PseudoLabeledRecord> fresh = generate_pseudo_labels(
          *pseudo_source, bases, config.cf_strategy, config.seed + 1000003ULL * epoch);
      for (std::size_t k = 0; k < train_idx.size(); ++k) working[train_idx[k]] = fresh[k];
    }

    rng.shuffle(train_idx);
    MeanAcc factual, uplift;
    for (std::size_t at = 0; at < train_idx.size(); at += config.batch_size) {
      std::vector<int> batch = batch_of(train_idx, at, config.batch_size);
      Stage2Batch b = stage2_forward(tape, model, working, batch, config, true);
      if (!std::isfinite(b.combined.scalar())) {
        throw DivergenceError("second-stage training diverged at epoch " + std::to_string(epoch) +
                              ": non-finite loss");
      }
      tape.backward(b.combined);
      optimizer_step(tape, b.bound, params, opt);
      const double w = static_cast<double>(batch.size());
      factual.add(b.factual, w);
      uplift.add(b.uplift, w);
    }

    EpochLog log;
    log.epoch = epoch;
    log.train.factual_mse = factual.mean();
    log.train.uplift_mse = uplift.mean();
    log.train.total = log.train.factual_mse + config.gamma_uplift * log.train.uplift_mse;
    log.val = stage2_validate(val_tape, model, working, val_idx, config);
    result.epochs.push_back(log);

    if (val_idx.empty()) {
      best = snapshot_params(model);
      best_epoch = epoch;
      continue;
    }
    if (stopper.observe(log.val.total)) {
      best = snapshot_params(model);
      best_epoch = epoch;
    }
    if (stopper.should_stop()) break;
  }

  restore_params(model, best);
  result.model = std::move(model);
  result.best_epoch = best_epoch;
  return result;
}

}  // namespace tscan
