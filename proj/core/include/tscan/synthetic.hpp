#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tscan/dataset.hpp"
#include "tscan/schema.hpp"

namespace tscan {

// Response curve in the treatment dose; both shapes move by exactly 1
// between dose 0 and dose 1, so the stored ITE is the effect multiplier.
enum class DoseShape { kLinear, kConcave };

std::string to_string(DoseShape d);
DoseShape dose_shape_from_string(const std::string& s);

// Position on the response curve at dose t; dose_value(s,1) - dose_value(s,0)
// is 1 for every shape.
double dose_value(DoseShape shape, double t);

struct SyntheticConfig {
  std::int64_t n = 10000;
  TreatmentKind treatment_kind = TreatmentKind::kBinary;
  double bias_strength = 1.0;       // 0 -> randomized assignment
  double context_modulation = 1.0;  // 0 -> context never modifies the effect
  double noise_sd = 0.5;
  DoseShape dose_shape = DoseShape::kLinear;
  std::uint64_t seed = 1;

  void validate() const;
  std::string to_json() const;
  static SyntheticConfig from_json(const std::string& text);
};

// The fixed feature layout produced by the generator (coefficients for it
// are compiled in; describe_dgp exposes them).
FeatureSchema synthetic_schema(TreatmentKind kind);

// Draws n records with confounded treatment assignment and a context-
// modulated treatment effect; every record carries its true ITE and a
// context group key.
std::vector<InstanceRecord> generate_synthetic(const SyntheticConfig& config);

// JSON description of the generating process: coefficient tables, draw
// order, assignment mechanism. The ground truth for tests and docs.
std::string describe_dgp(const SyntheticConfig& config);

}  // namespace tscan
