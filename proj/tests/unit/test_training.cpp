#include <cmath>
#include <vector>

#include "doctest.h"
#include "tscan/adam.hpp"
#include "tscan/errors.hpp"
#include "tscan/model.hpp"
#include "tscan/rng.hpp"
#include "tscan/synthetic.hpp"
#include "tscan/tape.hpp"
#include "tscan/training.hpp"

using namespace tscan;

namespace {

Tensor row_tensor(std::initializer_list<double> vals) {
  Tensor t(1, static_cast<int>(vals.size()));
  int j = 0;
  for (double v : vals) t.at(0, j++) = v;
  return t;
}

Tensor stack(std::initializer_list<std::initializer_list<double>> rows) {
  const int r = static_cast<int>(rows.size());
  const int c = static_cast<int>(rows.begin()->size());
  Tensor t(r, c);
  int i = 0;
  for (const auto& row : rows) {
    int j = 0;
    for (double v : row) t.at(i, j++) = v;
    ++i;
  }
  return t;
}

std::vector<InstanceRecord> normalized_synthetic(int n, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.n = n;
  cfg.seed = seed;
  cfg.bias_strength = 1.0;
  cfg.noise_sd = 0.3;
  auto recs = generate_synthetic(cfg);
  normalize_treatment(recs, TreatmentKind::kBinary);
  return recs;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.embedding_dim = 4;
  c.context_mlp_widths = {6};
  c.head_mlp_widths = {8};
  return c;
}

TrainConfig tiny_train(std::uint64_t seed = 5) {
  TrainConfig c;
  c.batch_size = 64;
  c.max_epochs = 4;
  c.patience = 3;
  c.validation_fraction = 0.2;
  c.seed = seed;
  c.learning_rate = 0.01;
  return c;
}

}  // namespace

// ---- squared-MMD oracles ---------------------------------------------------

TEST_CASE("identical groups have vanishing squared MMD") {
  Tensor a = stack({{0.3, -1.2}, {2.0, 0.5}, {-0.7, 0.1}});
  CHECK(std::abs(mmd_rbf_value(a, a, 2.0)) < 1e-12);
  // And through the differentiable op.
  Tape tape;
  Var v = mmd_rbf(tape.constant(a), tape.constant(a), 2.0);
  CHECK(std::abs(v.scalar()) < 1e-12);
}

TEST_CASE("singleton groups {0} and {1} give 2 - 2 e^{-1/2}") {
  Tensor a = row_tensor({0.0});
  Tensor b = row_tensor({1.0});
  const double expected = 2.0 - 2.0 * std::exp(-0.5);
  CHECK(std::abs(mmd_rbf_value(a, b, 2.0) - expected) < 1e-9);
  Tape tape;
  Var v = mmd_rbf(tape.constant(a), tape.constant(b), 2.0);
  CHECK(std::abs(v.scalar() - expected) < 1e-9);
}

TEST_CASE("squared MMD is symmetric bit for bit") {
  Rng rng(9);
  Tape tape;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a(5, 3), b(4, 3);
    for (std::int64_t i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    for (std::int64_t i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
    CHECK(mmd_rbf_value(a, b, 2.0) == mmd_rbf_value(b, a, 2.0));
    tape.reset();
    const double ab = mmd_rbf(tape.constant(a), tape.constant(b), 1.5).scalar();
    const double ba = mmd_rbf(tape.constant(b), tape.constant(a), 1.5).scalar();
    CHECK(ab == ba);
  }
}

TEST_CASE("squared MMD grows with group separation") {
  Tensor near = stack({{0.1}, {0.2}});
  Tensor far = stack({{3.0}, {3.1}});
  Tensor base = stack({{0.0}, {0.05}});
  CHECK(mmd_rbf_value(base, far, 2.0) > mmd_rbf_value(base, near, 2.0));
  CHECK(mmd_rbf_value(base, far, 2.0) > 0.0);
}

TEST_CASE("squared MMD input validation") {
  Tensor a = row_tensor({0.0});
  Tensor b = row_tensor({1.0, 2.0});
  CHECK_THROWS_AS(mmd_rbf_value(a, b, 2.0), ShapeError);
  CHECK_THROWS_AS(mmd_rbf_value(a, a, 0.0), ContractError);
  Tensor empty;
  CHECK_THROWS_AS(mmd_rbf_value(empty, a, 2.0), ContractError);
  // The convenience wrapper tolerates one-sided groups.
  CHECK(mmd_loss(empty, a, BandwidthMode::kFixed, 2.0) == 0.0);
}

TEST_CASE("median bandwidth follows the lower median of pairwise distances") {
  // Union {0, 1, 3}: squared distances 1, 9, 4 -> median 4.
  Tensor a = stack({{0.0}, {1.0}});
  Tensor b = row_tensor({3.0});
  CHECK(median_pairwise_sq_distance(a, b) == 4.0);

  // Union {0, 1, 2}: distances 1, 4, 1 -> median 1.
  Tensor c = row_tensor({0.0});
  Tensor d = stack({{1.0}, {2.0}});
  CHECK(median_pairwise_sq_distance(c, d) == 1.0);

  // Four points -> six pairwise distances; the lower median is the third
  // smallest. Union {0, 1, 2, 4}: 1, 4, 16, 1, 9, 4 -> sorted 1 1 4 4 9 16.
  Tensor e = stack({{0.0}, {1.0}});
  Tensor f = stack({{2.0}, {4.0}});
  CHECK(median_pairwise_sq_distance(e, f) == 4.0);

  // All-identical rows give a zero median, which falls back to 1.
  Tensor same = stack({{2.0}, {2.0}, {2.0}});
  Tensor same2 = row_tensor({2.0});
  CHECK(median_pairwise_sq_distance(same, same2) == 1.0);

  // The wrapper with median mode matches the explicit two-step computation.
  Rng rng(31);
  Tensor x(4, 2), y(3, 2);
  for (std::int64_t i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (std::int64_t i = 0; i < y.size(); ++i) y.data()[i] = rng.normal();
  CHECK(mmd_loss(x, y, BandwidthMode::kMedian, 99.0) ==
        mmd_rbf_value(x, y, median_pairwise_sq_distance(x, y)));
}

// ---- grouping and splitting -------------------------------------------------

TEST_CASE("binary treatments split into control and treated index lists") {
  auto [lo, hi] = split_by_treatment({0.0, 1.0, 1.0, 0.0, 1.0}, TreatmentKind::kBinary);
  CHECK(lo == std::vector<int>{0, 3});
  CHECK(hi == std::vector<int>{1, 2, 4});
}

TEST_CASE("continuous treatments split at the median, odd row joins the lower half") {
  auto [lo, hi] = split_by_treatment({0.1, 0.9, 0.5, 0.7, 0.3}, TreatmentKind::kContinuous);
  // Sorted: .1(0) .3(4) .5(2) | .7(3) .9(1)
  CHECK(lo == std::vector<int>{0, 4, 2});
  CHECK(hi == std::vector<int>{3, 1});
}

TEST_CASE("ties keep the stable input order in a continuous split") {
  auto [lo, hi] = split_by_treatment({0.5, 0.5, 0.5, 0.5}, TreatmentKind::kContinuous);
  // All identical: no meaningful halves; both groups must come back empty.
  CHECK(lo.empty());
  CHECK(hi.empty());
}

TEST_CASE("one-armed binary data degenerates to two empty groups") {
  // A single-armed batch carries no balancing information; the contract is
  // to signal "skip the term" by emptying both sides.
  auto [lo, hi] = split_by_treatment({1.0, 1.0, 1.0}, TreatmentKind::kBinary);
  CHECK(lo.empty());
  CHECK(hi.empty());
}

TEST_CASE("validation_split covers all indices and respects the fraction") {
  Rng rng(12);
  auto [train, val] = validation_split(10, 0.3, rng);
  CHECK(train.size() == 7);
  CHECK(val.size() == 3);
  std::vector<bool> seen(10, false);
  for (int i : train) seen[static_cast<std::size_t>(i)] = true;
  for (int i : val) seen[static_cast<std::size_t>(i)] = true;
  for (bool s : seen) CHECK(s);

  // The split never starves training even with an extreme fraction.
  Rng rng2(12);
  auto [train2, val2] = validation_split(5, 0.99, rng2);
  CHECK(train2.size() >= 1);

  Rng a(3), b(3);
  auto s1 = validation_split(20, 0.25, a);
  auto s2 = validation_split(20, 0.25, b);
  CHECK(s1.first == s2.first);
  CHECK(s1.second == s2.second);
}

// ---- early stopping ---------------------------------------------------------

TEST_CASE("early stopper requires strict improvement and counts strikes") {
  EarlyStopper s(2);
  CHECK(s.observe(1.0));        // first observation is always best
  CHECK_FALSE(s.should_stop());
  CHECK(s.observe(0.9));        // improvement
  CHECK_FALSE(s.should_stop());
  CHECK_FALSE(s.observe(0.95));  // strike 1
  CHECK_FALSE(s.should_stop());
  CHECK_FALSE(s.observe(0.97));  // strike 2 -> stop
  CHECK(s.should_stop());
  CHECK(s.best_index() == 1);
  CHECK(s.best_value() == 0.9);
}

TEST_CASE("early stopper treats an equal value as a strike") {
  EarlyStopper s(1);
  CHECK(s.observe(0.5));
  CHECK_FALSE(s.observe(0.5));
  CHECK(s.should_stop());
}

TEST_CASE("early stopper resets strikes on every new best") {
  EarlyStopper s(2);
  s.observe(1.0);
  s.observe(1.1);  // strike 1
  CHECK(s.observe(0.8));
  CHECK_FALSE(s.should_stop());
  s.observe(0.9);  // strike 1 again
  CHECK_FALSE(s.should_stop());
  s.observe(0.85);  // strike 2
  CHECK(s.should_stop());
  CHECK(s.best_index() == 2);
}

// ---- config -----------------------------------------------------------------

TEST_CASE("train config validation and json round-trip") {
  TrainConfig c;
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.validation_fraction = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.mmd_kernel = "linear";
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = TrainConfig{};
  c.alpha_ipm = 0.7;
  c.lambda_adv = 0.3;
  c.gamma_uplift = 1.25;
  c.mmd_bandwidth_mode = BandwidthMode::kFixed;
  c.mmd_bandwidth = 3.5;
  c.cf_strategy = CfStrategy::kEmpirical;
  c.resample_counterfactuals = true;
  TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.alpha_ipm == 0.7);
  CHECK(back.lambda_adv == 0.3);
  CHECK(back.gamma_uplift == 1.25);
  CHECK(back.mmd_bandwidth_mode == BandwidthMode::kFixed);
  CHECK(back.mmd_bandwidth == 3.5);
  CHECK(back.cf_strategy == CfStrategy::kEmpirical);
  CHECK(back.resample_counterfactuals);
  CHECK_THROWS_AS(TrainConfig::from_json("{\"no_such_key\": 1}"), ConfigError);
}

// ---- stage 1 ----------------------------------------------------------------

TEST_CASE("stage 1 trains only the uplift variant and reduces the factual loss") {
  auto recs = normalized_synthetic(300, 8);
  ModelConfig mc = tiny_model();
  TrainConfig tc = tiny_train();
  tc.max_epochs = 6;

  FitResult fit = stage1_train(recs, mc, synthetic_schema(TreatmentKind::kBinary),
                               {TreatmentKind::kBinary, 0.0, 1.0}, tc);
  REQUIRE(!fit.epochs.empty());
  CHECK(fit.best_epoch >= 1);
  CHECK(fit.epochs.back().train.factual_mse < fit.initial_validation.factual_mse);
  // The balancing term was measured from the first validation pass onward.
  CHECK(fit.initial_validation.ipm >= 0.0);

  ModelConfig cand = tiny_model();
  cand.variant = Variant::kCanD;
  CHECK_THROWS_AS(stage1_train(recs, cand, synthetic_schema(TreatmentKind::kBinary),
                               {TreatmentKind::kBinary, 0.0, 1.0}, tc),
                  VariantError);
}

TEST_CASE("stage-1 epoch totals decompose into the logged pieces") {
  auto recs = normalized_synthetic(200, 13);
  TrainConfig tc = tiny_train();
  tc.alpha_ipm = 0.4;
  tc.beta_l2 = 1e-4;
  tc.max_epochs = 2;
  FitResult fit = stage1_train(recs, tiny_model(), synthetic_schema(TreatmentKind::kBinary),
                               {TreatmentKind::kBinary, 0.0, 1.0}, tc);
  for (const EpochLog& e : fit.epochs) {
    CHECK(std::abs(e.train.total - (e.train.factual_mse + tc.alpha_ipm * e.train.ipm +
                                    tc.beta_l2 * e.train.l2)) < 1e-12);
    CHECK(std::abs(e.val.total - (e.val.factual_mse + tc.alpha_ipm * e.val.ipm +
                                  tc.beta_l2 * e.val.l2)) < 1e-12);
    CHECK(e.train.ipm >= 0.0);
    CHECK(e.train.l2 > 0.0);
  }
}

namespace {

// Plain factual-MSE trainer mirroring the first stage's data pipeline
// exactly: same init seed, same split, same shuffles, same batches, same
// optimizer settings -- but no balancing, no adversary, no weight decay.
FitResult plain_regression(const std::vector<InstanceRecord>& records, const ModelConfig& mc,
                           const FeatureSchema& schema, const NormalizationParams& norm,
                           const TrainConfig& cfg) {
  CanModel model(mc, schema, norm, cfg.seed);
  std::vector<Tensor*> params = model.param_ptrs();
  AdamState opt = AdamState::init(params, {cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8});
  Rng rng(cfg.seed);
  auto [train_idx, val_idx] =
      validation_split(static_cast<int>(records.size()), cfg.validation_fraction, rng);

  Tape tape;
  auto run_batch = [&](const std::vector<int>& batch, bool track) {
    tape.reset();
    BoundModel bound = bind_model(tape, model, track);
    Tensor y(static_cast<int>(batch.size()), 1);
    std::vector<Var> yhat;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const InstanceRecord& r = records[static_cast<std::size_t>(batch[i])];
      RecordForward fwd = build_forward(bound, r);
      yhat.push_back(build_outcome(bound, fwd, r.treatment));
      y.at(static_cast<int>(i), 0) = r.outcome;
    }
    Var loss = mse(concat_rows(tape, yhat), tape.constant(y));
    if (track) {
      tape.backward(loss);
      std::vector<std::span<const double>> grads;
      for (const Var& p : bound.params) grads.push_back(tape.grad(p));
      adam_step(params, grads, opt);
    }
    return loss.scalar();
  };
  auto validate = [&]() {
    double sum = 0.0, weight = 0.0;
    for (std::size_t at = 0; at < val_idx.size(); at += cfg.batch_size) {
      std::vector<int> batch(val_idx.begin() + at,
                             val_idx.begin() +
                                 std::min(val_idx.size(), at + static_cast<std::size_t>(
                                                                   cfg.batch_size)));
      const double m = run_batch(batch, false);
      sum += m * static_cast<double>(batch.size());
      weight += static_cast<double>(batch.size());
    }
    return weight > 0 ? sum / weight : 0.0;
  };

  FitResult out;
  out.initial_validation.factual_mse = validate();
  EarlyStopper stopper(cfg.patience);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(train_idx);
    double sum = 0.0, weight = 0.0;
    for (std::size_t at = 0; at < train_idx.size(); at += cfg.batch_size) {
      std::vector<int> batch(train_idx.begin() + at,
                             train_idx.begin() +
                                 std::min(train_idx.size(), at + static_cast<std::size_t>(
                                                                     cfg.batch_size)));
      const double m = run_batch(batch, true);
      sum += m * static_cast<double>(batch.size());
      weight += static_cast<double>(batch.size());
    }
    EpochLog log;
    log.epoch = epoch;
    log.train.factual_mse = sum / weight;
    log.val.factual_mse = validate();
    out.epochs.push_back(log);
    if (stopper.observe(log.val.factual_mse)) out.best_epoch = epoch;
    if (stopper.should_stop()) break;
  }
  return out;
}

}  // namespace

TEST_CASE("with all auxiliary weights at zero, stage 1 is plain regression") {
  auto recs = normalized_synthetic(240, 77);
  ModelConfig mc = tiny_model();
  TrainConfig tc = tiny_train(21);
  tc.alpha_ipm = 0.0;
  tc.lambda_adv = 0.0;
  tc.beta_l2 = 0.0;
  tc.max_epochs = 5;
  const FeatureSchema schema = synthetic_schema(TreatmentKind::kBinary);
  const NormalizationParams norm{TreatmentKind::kBinary, 0.0, 1.0};

  FitResult staged = stage1_train(recs, mc, schema, norm, tc);
  FitResult plain = plain_regression(recs, mc, schema, norm, tc);

  REQUIRE(staged.epochs.size() == plain.epochs.size());
  CHECK(std::abs(staged.initial_validation.factual_mse -
                 plain.initial_validation.factual_mse) < 1e-9);
  for (std::size_t e = 0; e < staged.epochs.size(); ++e) {
    CHECK(std::abs(staged.epochs[e].train.factual_mse - plain.epochs[e].train.factual_mse) <
          1e-9);
    CHECK(std::abs(staged.epochs[e].val.factual_mse - plain.epochs[e].val.factual_mse) < 1e-9);
  }
  CHECK(staged.best_epoch == plain.best_epoch);
}

TEST_CASE("the adversarial and balancing terms actually change the trajectory") {
  auto recs = normalized_synthetic(240, 78);
  ModelConfig mc = tiny_model();
  TrainConfig off = tiny_train(22);
  off.alpha_ipm = 0.0;
  off.lambda_adv = 0.0;
  off.beta_l2 = 0.0;
  off.max_epochs = 3;
  TrainConfig on = off;
  on.alpha_ipm = 1.0;
  on.lambda_adv = 1.0;
  const FeatureSchema schema = synthetic_schema(TreatmentKind::kBinary);
  const NormalizationParams norm{TreatmentKind::kBinary, 0.0, 1.0};
  FitResult a = stage1_train(recs, mc, schema, norm, off);
  FitResult b = stage1_train(recs, mc, schema, norm, on);
  REQUIRE(!a.epochs.empty());
  REQUIRE(!b.epochs.empty());
  CHECK(a.epochs[0].train.factual_mse != b.epochs[0].train.factual_mse);
}

// ---- pseudo labels ----------------------------------------------------------

TEST_CASE("pseudo labels are deterministic and match the stage-1 model") {
  auto recs = normalized_synthetic(60, 101);
  TrainConfig tc = tiny_train();
  tc.max_epochs = 2;
  FitResult fit = stage1_train(recs, tiny_model(), synthetic_schema(TreatmentKind::kBinary),
                               {TreatmentKind::kBinary, 0.0, 1.0}, tc);

  auto p1 = generate_pseudo_labels(fit.model, recs, CfStrategy::kUniform, 5);
  auto p2 = generate_pseudo_labels(fit.model, recs, CfStrategy::kUniform, 5);
  REQUIRE(p1.size() == recs.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].t_cf == p2[i].t_cf);
    CHECK(p1[i].u_tilde == p2[i].u_tilde);
    // Binary single-level sampling is the deterministic complement.
    CHECK(p1[i].t_cf == 1.0 - recs[i].treatment);
    // The label is the model's own outcome difference, bit for bit.
    CHECK(p1[i].u_tilde == fit.model.predict_uplift(recs[i], recs[i].treatment, p1[i].t_cf));
  }
}

TEST_CASE("pseudo labels require the uplift variant") {
  ModelConfig mc = tiny_model();
  mc.variant = Variant::kCanD;
  CanModel second(mc, synthetic_schema(TreatmentKind::kBinary), {TreatmentKind::kBinary, 0.0, 1.0},
                  4);
  auto recs = normalized_synthetic(30, 3);
  CHECK_THROWS_AS(generate_pseudo_labels(second, recs, CfStrategy::kUniform, 1), VariantError);
}

// ---- stage 2 ----------------------------------------------------------------

TEST_CASE("stage 2 fits the dual objective and tracks both losses") {
  auto recs = normalized_synthetic(200, 55);
  const FeatureSchema schema = synthetic_schema(TreatmentKind::kBinary);
  const NormalizationParams norm{TreatmentKind::kBinary, 0.0, 1.0};
  TrainConfig tc = tiny_train(31);
  tc.max_epochs = 3;
  FitResult s1 = stage1_train(recs, tiny_model(), schema, norm, tc);
  auto pseudo = generate_pseudo_labels(s1.model, recs, CfStrategy::kUniform, 7);

  ModelConfig mc2 = tiny_model();
  mc2.variant = Variant::kCanD;
  TrainConfig tc2 = tiny_train(32);
  tc2.max_epochs = 5;
  tc2.gamma_uplift = 0.6;
  FitResult s2 = stage2_train(pseudo, mc2, schema, norm, tc2);
  REQUIRE(!s2.epochs.empty());
  CHECK(s2.model.config().variant == Variant::kCanD);
  CHECK(s2.epochs.back().train.factual_mse < s2.initial_validation.factual_mse);
  for (const EpochLog& e : s2.epochs) {
    CHECK(std::abs(e.train.total -
                   (e.train.factual_mse + tc2.gamma_uplift * e.train.uplift_mse)) < 1e-12);
  }

  // The trained second stage predicts uplift without a treatment head.
  CHECK_THROWS_AS(s2.model.propensity(recs[0]), VariantError);
  CHECK(std::isfinite(s2.model.predict_uplift(recs[0], 0.0, 1.0)));
}

TEST_CASE("stage 2 validates its inputs") {
  auto recs = normalized_synthetic(50, 66);
  const FeatureSchema schema = synthetic_schema(TreatmentKind::kBinary);
  const NormalizationParams norm{TreatmentKind::kBinary, 0.0, 1.0};
  TrainConfig tc = tiny_train();
  std::vector<PseudoLabeledRecord> pseudo;
  for (const auto& r : recs) {
    PseudoLabeledRecord p;
    p.base = r;
    p.t_cf = 1.0 - r.treatment;
    p.u_tilde = 0.5;
    pseudo.push_back(p);
  }

  ModelConfig u = tiny_model();  // kCanU: wrong variant for stage 2
  CHECK_THROWS_AS(stage2_train(pseudo, u, schema, norm, tc), VariantError);

  ModelConfig d = tiny_model();
  d.variant = Variant::kCanD;
  TrainConfig resample = tc;
  resample.resample_counterfactuals = true;
  CHECK_THROWS_AS(stage2_train(pseudo, d, schema, norm, resample, nullptr), ConfigError);
}

TEST_CASE("counterfactual resampling with a source model runs and stays finite") {
  auto recs = normalized_synthetic(120, 91);
  const FeatureSchema schema = synthetic_schema(TreatmentKind::kBinary);
  const NormalizationParams norm{TreatmentKind::kBinary, 0.0, 1.0};
  TrainConfig tc = tiny_train(41);
  tc.max_epochs = 2;
  FitResult s1 = stage1_train(recs, tiny_model(), schema, norm, tc);
  auto pseudo = generate_pseudo_labels(s1.model, recs, CfStrategy::kUniform, 3);

  ModelConfig mc2 = tiny_model();
  mc2.variant = Variant::kCanD;
  TrainConfig tc2 = tiny_train(42);
  tc2.max_epochs = 3;
  tc2.resample_counterfactuals = true;
  FitResult s2 = stage2_train(pseudo, mc2, schema, norm, tc2, &s1.model);
  REQUIRE(s2.epochs.size() >= 1);
  for (const EpochLog& e : s2.epochs) CHECK(std::isfinite(e.train.total));
}
