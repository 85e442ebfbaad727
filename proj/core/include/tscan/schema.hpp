#pragma once

#include <string>
#include <vector>

namespace tscan {

enum class TreatmentKind { kBinary, kContinuous };

std::string to_string(TreatmentKind k);
TreatmentKind treatment_kind_from_string(const std::string& s);

struct CategoricalField {
  std::string name;
  int cardinality = 0;  // valid codes are 0 .. cardinality-1
};

// Declares the columns of a dataset: merchant-side features (the unit being
// scored), context features (environment shared across units), the treatment
// kind, and the outcome column name. Treatment lives in column "treatment".
struct FeatureSchema {
  std::vector<CategoricalField> merchant_categorical;
  std::vector<std::string> merchant_numeric;
  std::vector<CategoricalField> context_categorical;
  std::vector<std::string> context_numeric;
  TreatmentKind treatment_kind = TreatmentKind::kBinary;
  std::string outcome_name = "outcome";

  // Throws SchemaError on duplicate/empty names, reserved-name clashes or
  // cardinality < 2.
  void validate() const;

  int merchant_token_count() const {
    return static_cast<int>(merchant_categorical.size() + merchant_numeric.size());
  }
  int context_token_count() const {
    return static_cast<int>(context_categorical.size() + context_numeric.size());
  }

  std::string to_json() const;
  static FeatureSchema from_json(const std::string& text);
};

FeatureSchema load_schema(const std::string& path);
void save_schema(const FeatureSchema& schema, const std::string& path);

}  // namespace tscan
