#include <cmath>
#include <vector>

#include "doctest.h"
#include "tscan/baselines.hpp"
#include "tscan/errors.hpp"
#include "tscan/rng.hpp"
#include "tscan/schema.hpp"

using namespace tscan;

namespace {

FeatureSchema flat_schema(TreatmentKind kind = TreatmentKind::kBinary) {
  FeatureSchema s;
  s.merchant_categorical = {{"segment", 2}};
  s.merchant_numeric = {"x"};
  s.treatment_kind = kind;
  s.outcome_name = "y";
  return s;
}

// y = 2t + x + segment: constant uplift of 2, learnable by any regressor.
std::vector<InstanceRecord> constant_uplift_data(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<InstanceRecord> recs;
  recs.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    InstanceRecord r;
    const int seg = static_cast<int>(rng.uniform_int(2));
    const double x = rng.normal();
    const double t = rng.uniform() < 0.5 ? 0.0 : 1.0;
    r.merchant_cat = {seg};
    r.merchant_num = {x};
    r.treatment = t;
    r.outcome = 2.0 * t + x + seg + 0.05 * rng.normal();
    recs.push_back(std::move(r));
  }
  return recs;
}

TrainConfig fast_train(std::uint64_t seed = 3) {
  TrainConfig c;
  c.batch_size = 64;
  c.max_epochs = 40;
  c.patience = 6;
  c.validation_fraction = 0.15;
  c.learning_rate = 0.01;
  c.seed = seed;
  return c;
}

NormalizationParams binary_norm() { return {TreatmentKind::kBinary, 0.0, 1.0}; }

}  // namespace

TEST_CASE("single-model baseline recovers a constant uplift") {
  auto recs = constant_uplift_data(800, 11);
  BaselineModel m = train_baseline(BaselineKind::kSLearner, recs, flat_schema(), binary_norm(),
                                   fast_train());
  CHECK(m.kind() == BaselineKind::kSLearner);
  double total = 0.0;
  for (int i = 0; i < 50; ++i) {
    const double u = m.predict_uplift(recs[static_cast<std::size_t>(i)], 0.0, 1.0);
    total += u;
  }
  CHECK(total / 50.0 == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("two-model baseline recovers a constant uplift") {
  auto recs = constant_uplift_data(800, 13);
  BaselineModel m = train_baseline(BaselineKind::kTLearner, recs, flat_schema(), binary_norm(),
                                   fast_train());
  CHECK(m.kind() == BaselineKind::kTLearner);
  double total = 0.0;
  for (int i = 0; i < 50; ++i)
    total += m.predict_uplift(recs[static_cast<std::size_t>(i)], 0.0, 1.0);
  CHECK(total / 50.0 == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("uplift is the difference of the two outcome predictions") {
  auto recs = constant_uplift_data(300, 17);
  for (BaselineKind kind : {BaselineKind::kSLearner, BaselineKind::kTLearner}) {
    BaselineModel m = train_baseline(kind, recs, flat_schema(), binary_norm(), fast_train());
    for (int i = 0; i < 20; ++i) {
      const InstanceRecord& r = recs[static_cast<std::size_t>(i)];
      CHECK(m.predict_uplift(r, 0.0, 1.0) ==
            m.predict_outcome(r, 1.0) - m.predict_outcome(r, 0.0));
    }
  }
}

TEST_CASE("training is deterministic under the seed") {
  auto recs = constant_uplift_data(200, 19);
  TrainConfig tc = fast_train(7);
  tc.max_epochs = 5;
  BaselineModel a = train_baseline(BaselineKind::kSLearner, recs, flat_schema(), binary_norm(), tc);
  BaselineModel b = train_baseline(BaselineKind::kSLearner, recs, flat_schema(), binary_norm(), tc);
  for (int i = 0; i < 10; ++i) {
    const InstanceRecord& r = recs[static_cast<std::size_t>(i)];
    CHECK(a.predict_uplift(r, 0.0, 1.0) == b.predict_uplift(r, 0.0, 1.0));
    CHECK(a.predict_outcome(r, 1.0) == b.predict_outcome(r, 1.0));
  }
}

TEST_CASE("the single-model baseline accepts continuous doses") {
  Rng rng(23);
  std::vector<InstanceRecord> recs;
  for (int i = 0; i < 400; ++i) {
    InstanceRecord r;
    const double x = rng.normal();
    const double t = rng.uniform();
    r.merchant_cat = {static_cast<int>(rng.uniform_int(2))};
    r.merchant_num = {x};
    r.treatment = t;
    r.outcome = 3.0 * t + x + 0.05 * rng.normal();
    recs.push_back(std::move(r));
  }
  NormalizationParams norm{TreatmentKind::kContinuous, 0.0, 1.0};
  BaselineModel m = train_baseline(BaselineKind::kSLearner, recs, flat_schema(
                                       TreatmentKind::kContinuous), norm, fast_train());
  double total = 0.0;
  for (int i = 0; i < 50; ++i)
    total += m.predict_uplift(recs[static_cast<std::size_t>(i)], 0.0, 1.0);
  CHECK(total / 50.0 == doctest::Approx(3.0).epsilon(0.2));
}

TEST_CASE("the two-model baseline rejects continuous treatments") {
  Rng rng(29);
  std::vector<InstanceRecord> recs;
  for (int i = 0; i < 20; ++i) {
    InstanceRecord r;
    r.merchant_cat = {0};
    r.merchant_num = {rng.normal()};
    r.treatment = rng.uniform();
    r.outcome = 1.0;
    recs.push_back(std::move(r));
  }
  NormalizationParams norm{TreatmentKind::kContinuous, 0.0, 1.0};
  CHECK_THROWS_AS(train_baseline(BaselineKind::kTLearner, recs,
                                 flat_schema(TreatmentKind::kContinuous), norm, fast_train()),
                  UnsupportedError);
}

TEST_CASE("the two-model baseline needs both arms") {
  auto recs = constant_uplift_data(100, 31);
  for (auto& r : recs) r.treatment = 1.0;  // all treated
  CHECK_THROWS_AS(train_baseline(BaselineKind::kTLearner, recs, flat_schema(), binary_norm(),
                                 fast_train()),
                  DegenerateTreatmentError);
}

TEST_CASE("baseline kind names round-trip") {
  CHECK(to_string(BaselineKind::kSLearner) == "s_learner");
  CHECK(to_string(BaselineKind::kTLearner) == "t_learner");
  CHECK(baseline_kind_from_string("s_learner") == BaselineKind::kSLearner);
  CHECK(baseline_kind_from_string("t_learner") == BaselineKind::kTLearner);
  CHECK_THROWS_AS(baseline_kind_from_string("x_learner"), ConfigError);
}
