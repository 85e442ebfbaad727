#include "tscan/synthetic.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "tscan/errors.hpp"
#include "json_util.hpp"

namespace tscan {

using nlohmann::json;

namespace {

// Coefficient tables of the generating process. These are fixed: the same
// numbers drive generation, describe_dgp() and the ground-truth tests.
constexpr double kSelQuality = 0.8, kSelExposure = 0.4, kSelSupplyDemand = 0.3;
constexpr double kSelSegment[4] = {-0.4, -0.1, 0.1, 0.4};
constexpr double kSelDistrict[3] = {-0.3, 0.0, 0.3};

constexpr double kBaseIntercept = 3.0, kBaseQuality = 1.0, kBaseExposure = 0.6,
                 kBaseSupplyDemand = 0.5;
constexpr double kBaseSegment[4] = {0.0, 0.2, 0.4, 0.6};
constexpr double kBaseDistrict[3] = {0.0, 0.3, 0.6};
constexpr double kBaseTimePeriod[4] = {0.0, 0.5, 0.3, 0.1};

constexpr double kTauIntercept = 1.0, kTauQuality = 0.5;
constexpr double kTauSegment[4] = {0.2, 0.0, -0.2, 0.4};
constexpr double kModDistrict[3] = {0.6, -0.7, 0.1};
constexpr double kModTimePeriod[4] = {0.4, -0.7, 0.3, -0.4};
constexpr double kModSupplyDemandTanh = 0.5;

constexpr double kBetaConcentration = 4.0;  // continuous assignment Beta(mu*k, (1-mu)*k)

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double dose(DoseShape shape, double t) {
  return shape == DoseShape::kLinear ? t : t * (2.0 - t);
}

}  // namespace

double dose_value(DoseShape shape, double t) { return dose(shape, t); }

std::string to_string(DoseShape d) { return d == DoseShape::kLinear ? "linear" : "concave"; }

DoseShape dose_shape_from_string(const std::string& s) {
  if (s == "linear") return DoseShape::kLinear;
  if (s == "concave") return DoseShape::kConcave;
  throw ConfigError("unknown dose shape '" + s + "' (expected linear|concave)");
}

void SyntheticConfig::validate() const {
  if (n < 1) throw ConfigError("synthetic: n must be >= 1, got " + std::to_string(n));
  if (!(noise_sd >= 0.0)) throw ConfigError("synthetic: noise_sd must be >= 0");
  if (!std::isfinite(bias_strength)) throw ConfigError("synthetic: bias_strength must be finite");
  if (!std::isfinite(context_modulation))
    throw ConfigError("synthetic: context_modulation must be finite");
}

std::string SyntheticConfig::to_json() const {
  json j{{"n", n},
         {"treatment_kind", to_string(treatment_kind)},
         {"bias_strength", bias_strength},
         {"context_modulation", context_modulation},
         {"noise_sd", noise_sd},
         {"dose_shape", to_string(dose_shape)},
         {"seed", seed}};
  return j.dump(2);
}

SyntheticConfig SyntheticConfig::from_json(const std::string& text) {
  json j = parse_json(text, "synthetic config");
  reject_unknown_keys(j,
                      {"n", "treatment_kind", "bias_strength", "context_modulation", "noise_sd",
                       "dose_shape", "seed"},
                      "synthetic config");
  SyntheticConfig c;
  try {
    if (j.contains("n")) c.n = j["n"].get<std::int64_t>();
    if (j.contains("treatment_kind")) {
      c.treatment_kind = treatment_kind_from_string(j["treatment_kind"].get<std::string>());
    }
    if (j.contains("bias_strength")) c.bias_strength = j["bias_strength"].get<double>();
    if (j.contains("context_modulation")) {
      c.context_modulation = j["context_modulation"].get<double>();
    }
    if (j.contains("noise_sd")) c.noise_sd = j["noise_sd"].get<double>();
    if (j.contains("dose_shape")) {
      c.dose_shape = dose_shape_from_string(j["dose_shape"].get<std::string>());
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synthetic config: ") + e.what());
  }
  c.validate();
  return c;
}

FeatureSchema synthetic_schema(TreatmentKind kind) {
  FeatureSchema s;
  s.merchant_categorical = {{"segment", 4}};
  s.merchant_numeric = {"quality", "exposure"};
  s.context_categorical = {{"district", 3}, {"time_period", 4}};
  s.context_numeric = {"supply_demand"};
  s.treatment_kind = kind;
  s.outcome_name = "orders";
  return s;
}

std::vector<InstanceRecord> generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::vector<InstanceRecord> out;
  out.reserve(static_cast<std::size_t>(config.n));
  for (std::int64_t i = 0; i < config.n; ++i) {
    // Draw order is part of the contract; reordering would silently change
    // every dataset generated from a given seed.
    const double quality = rng.normal();
    const double exposure = rng.normal();
    const int segment = static_cast<int>(rng.uniform_int(4));
    const int district = static_cast<int>(rng.uniform_int(3));
    const int time_period = static_cast<int>(rng.uniform_int(4));
    const double supply_demand = rng.normal();

    const double sel = kSelQuality * quality + kSelExposure * exposure + kSelSegment[segment] +
                       kSelDistrict[district] + kSelSupplyDemand * supply_demand;
    double t;
    if (config.treatment_kind == TreatmentKind::kBinary) {
      const double pi = sigmoid(config.bias_strength * sel);
      t = rng.uniform() < pi ? 1.0 : 0.0;
    } else {
      const double mu = sigmoid(config.bias_strength * sel);
      t = rng.beta(mu * kBetaConcentration, (1.0 - mu) * kBetaConcentration);
    }

    const double noise = rng.normal() * config.noise_sd;

    const double base = kBaseIntercept + kBaseQuality * quality + kBaseExposure * exposure +
                        kBaseSegment[segment] + kBaseDistrict[district] +
                        kBaseSupplyDemand * supply_demand + kBaseTimePeriod[time_period];
    const double tau0 = kTauIntercept + kTauQuality * quality + kTauSegment[segment];
    const double mod = kModDistrict[district] + kModTimePeriod[time_period] +
                       kModSupplyDemandTanh * std::tanh(supply_demand);
    const double tau = tau0 * (1.0 + config.context_modulation * mod);

    InstanceRecord r;
    r.merchant_cat = {segment};
    r.merchant_num = {quality, exposure};
    r.context_cat = {district, time_period};
    r.context_num = {supply_demand};
    r.treatment = t;
    r.outcome = base + tau * dose(config.dose_shape, t) + noise;
    r.true_ite = tau * (dose(config.dose_shape, 1.0) - dose(config.dose_shape, 0.0));
    r.group_key = "d" + std::to_string(district) + "_p" + std::to_string(time_period);
    out.push_back(std::move(r));
  }
  return out;
}

std::string describe_dgp(const SyntheticConfig& config) {
  config.validate();
  json j;
  j["n"] = config.n;
  j["seed"] = config.seed;
  j["treatment_kind"] = to_string(config.treatment_kind);
  j["dose_shape"] = to_string(config.dose_shape);
  j["noise_sd"] = config.noise_sd;
  j["schema"] = json::parse(synthetic_schema(config.treatment_kind).to_json());
  j["draw_order"] = {"quality",     "exposure",      "segment",   "district",
                     "time_period", "supply_demand", "treatment", "noise"};
  j["selection_score"] = {
      {"quality", kSelQuality},
      {"exposure", kSelExposure},
      {"segment", std::vector<double>(std::begin(kSelSegment), std::end(kSelSegment))},
      {"district", std::vector<double>(std::begin(kSelDistrict), std::end(kSelDistrict))},
      {"supply_demand", kSelSupplyDemand},
  };
  if (config.treatment_kind == TreatmentKind::kBinary) {
    j["treatment_assignment"] = {{"kind", "binary"},
                                 {"mechanism", "P(t=1) = sigmoid(bias_strength * selection_score)"},
                                 {"bias_strength", config.bias_strength}};
  } else {
    j["treatment_assignment"] = {
        {"kind", "continuous"},
        {"mechanism",
         "t ~ Beta(mu*kappa, (1-mu)*kappa), mu = sigmoid(bias_strength * selection_score)"},
        {"bias_strength", config.bias_strength},
        {"concentration", kBetaConcentration}};
  }
  j["baseline_outcome"] = {
      {"intercept", kBaseIntercept},
      {"quality", kBaseQuality},
      {"exposure", kBaseExposure},
      {"segment", std::vector<double>(std::begin(kBaseSegment), std::end(kBaseSegment))},
      {"district", std::vector<double>(std::begin(kBaseDistrict), std::end(kBaseDistrict))},
      {"supply_demand", kBaseSupplyDemand},
      {"time_period", std::vector<double>(std::begin(kBaseTimePeriod), std::end(kBaseTimePeriod))},
  };
  j["treatment_effect"] = {
      {"base",
       {{"intercept", kTauIntercept},
        {"quality", kTauQuality},
        {"segment", std::vector<double>(std::begin(kTauSegment), std::end(kTauSegment))}}},
      {"context_modifier",
       {{"district", std::vector<double>(std::begin(kModDistrict), std::end(kModDistrict))},
        {"time_period", std::vector<double>(std::begin(kModTimePeriod), std::end(kModTimePeriod))},
        {"supply_demand_tanh", kModSupplyDemandTanh}}},
      {"context_modulation", config.context_modulation},
      {"formula", "tau = base * (1 + context_modulation * modifier)"},
  };
  j["outcome"] = "orders = baseline + tau * dose(treatment) + N(0, noise_sd)";
  j["dose"] = config.dose_shape == DoseShape::kLinear ? "dose(t) = t" : "dose(t) = t * (2 - t)";
  j["true_ite"] = "tau * (dose(1) - dose(0)) = tau";
  j["group_key"] = "d{district}_p{time_period}";
  return j.dump(2) + "\n";
}

}  // namespace tscan
