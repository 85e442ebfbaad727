#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "nlohmann/json.hpp"
#include "tscan/errors.hpp"
#include "tscan/pipeline.hpp"
#include "tscan/rng.hpp"
#include "tscan/synthetic.hpp"

using namespace tscan;

namespace {

BenchConfig small_config() {
  BenchConfig c;
  c.name = "smoke";
  c.synthetic.n = 400;
  c.synthetic.treatment_kind = TreatmentKind::kBinary;
  c.synthetic.bias_strength = 1.0;
  c.synthetic.context_modulation = 0.5;
  c.synthetic.noise_sd = 0.5;
  c.model.embedding_dim = 4;
  c.model.attention_heads = 1;
  c.model.head_mlp_widths = {8};
  c.model.context_mlp_widths = {6};
  c.train.max_epochs = 2;
  c.train.patience = 2;
  c.train.batch_size = 64;
  c.seeds = {1, 2};
  c.train_fraction = 0.8;
  c.eval_bins = 3;
  c.min_group_size = 5;
  return c;
}

}  // namespace

TEST_CASE("bench config round-trips through JSON") {
  BenchConfig c = small_config();
  c.tie_average = true;
  BenchConfig back = BenchConfig::from_json(c.to_json());
  CHECK(back.name == c.name);
  CHECK(back.synthetic.n == c.synthetic.n);
  CHECK(back.synthetic.bias_strength == c.synthetic.bias_strength);
  CHECK(back.model.embedding_dim == c.model.embedding_dim);
  CHECK(back.model.head_mlp_widths == c.model.head_mlp_widths);
  CHECK(back.train.max_epochs == c.train.max_epochs);
  CHECK(back.seeds == c.seeds);
  CHECK(back.train_fraction == c.train_fraction);
  CHECK(back.eval_bins == c.eval_bins);
  CHECK(back.min_group_size == c.min_group_size);
  CHECK(back.tie_average == c.tie_average);
}

TEST_CASE("bench config validation rejects bad values") {
  BenchConfig c = small_config();
  c.train_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.seeds.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.eval_bins = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.min_group_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(BenchConfig::from_json("{\"name\": \"x\", \"mystery\": 1}"), ConfigError);
  CHECK_THROWS_AS(BenchConfig::from_json("not json"), ParseError);
}

TEST_CASE("score_metrics evaluates a scorer over a binary test split") {
  SyntheticConfig syn;
  syn.n = 800;
  syn.treatment_kind = TreatmentKind::kBinary;
  syn.bias_strength = 0.0;
  syn.context_modulation = 0.5;
  syn.noise_sd = 0.5;
  syn.seed = 9;
  std::vector<InstanceRecord> test = generate_synthetic(syn);

  UpliftScorer oracle = [](const InstanceRecord& r, double, double) { return *r.true_ite; };
  GainCurve curve;
  MetricMap m = score_metrics(test, oracle, TreatmentKind::kBinary, 3, 10, false, &curve);
  REQUIRE(m.count("auuc") == 1);
  REQUIRE(m.count("qini") == 1);
  REQUIRE(m.count("cauuc") == 1);
  REQUIRE(m.count("uplift_rmse") == 1);
  CHECK(m["auuc"] > 0.55);          // the known effect ranks well
  CHECK(m["uplift_rmse"] == 0.0);   // scoring with the effect itself
  CHECK(curve.points.size() == test.size() + 1);
  CHECK(curve.points.back().second == 1.0);

  // A random scorer hovers at the null values on the same split.
  Rng rng(11);
  UpliftScorer noise = [&rng](const InstanceRecord&, double, double) { return rng.uniform(); };
  MetricMap r = score_metrics(test, noise, TreatmentKind::kBinary, 3, 10, false);
  CHECK(r["auuc"] == doctest::Approx(0.5).epsilon(0.25));
  CHECK(m["auuc"] > r["auuc"]);
}

TEST_CASE("score_metrics binarizes continuous treatments") {
  SyntheticConfig syn;
  syn.n = 900;
  syn.treatment_kind = TreatmentKind::kContinuous;
  syn.dose_shape = DoseShape::kLinear;
  syn.bias_strength = 0.0;
  syn.context_modulation = 0.5;
  syn.noise_sd = 0.5;
  syn.seed = 13;
  std::vector<InstanceRecord> test = generate_synthetic(syn);

  UpliftScorer oracle = [](const InstanceRecord& r, double lo, double hi) {
    return *r.true_ite * (hi - lo);
  };
  MetricMap m = score_metrics(test, oracle, TreatmentKind::kContinuous, 4, 10, false);
  REQUIRE(m.count("auuc") == 1);
  CHECK(m["auuc"] > 0.5);
  CHECK(std::isfinite(m["qini"]));
  // RMSE scores the full dose move 0 -> 1, which this scorer predicts exactly.
  REQUIRE(m.count("uplift_rmse") == 1);
  CHECK(m["uplift_rmse"] == 0.0);
}

TEST_CASE("bench summary accessors find rows and means") {
  BenchSummary s;
  s.name = "demo";
  s.seeds = {1, 2};
  BenchRow row;
  row.model = "m";
  row.per_seed = {{{"auuc", 0.6}}, {{"auuc", 0.7}}};
  row.means = {{"auuc", 0.65}};
  s.rows.push_back(row);
  REQUIRE(s.row("m") != nullptr);
  CHECK(s.row("missing") == nullptr);
  REQUIRE(s.mean_of("m", "auuc").has_value());
  CHECK(*s.mean_of("m", "auuc") == 0.65);
  CHECK_FALSE(s.mean_of("m", "cauuc").has_value());
  CHECK_FALSE(s.mean_of("missing", "auuc").has_value());

  nlohmann::json j = nlohmann::json::parse(s.to_json());
  CHECK(j["name"] == "demo");
  CHECK(j["rows"].size() == 1);
}
