#include "tscan/schema.hpp"

#include <set>

#include <nlohmann/json.hpp>

#include "tscan/errors.hpp"
#include "tscan/io_util.hpp"

namespace tscan {

using nlohmann::json;

std::string to_string(TreatmentKind k) {
  return k == TreatmentKind::kBinary ? "binary" : "continuous";
}

TreatmentKind treatment_kind_from_string(const std::string& s) {
  if (s == "binary") return TreatmentKind::kBinary;
  if (s == "continuous") return TreatmentKind::kContinuous;
  throw SchemaError("unknown treatment kind '" + s + "' (expected binary|continuous)");
}

void FeatureSchema::validate() const {
  std::set<std::string> seen{"treatment"};
  auto claim = [&seen](const std::string& name, const char* role) {
    if (name.empty()) throw SchemaError(std::string("empty ") + role + " field name");
    if (!seen.insert(name).second)
      throw SchemaError("duplicate or reserved column name '" + name + "'");
  };
  for (const auto& f : merchant_categorical) {
    claim(f.name, "merchant categorical");
    if (f.cardinality < 2)
      throw SchemaError("field '" + f.name + "': cardinality " +
                        std::to_string(f.cardinality) + " is below 2");
  }
  for (const auto& n : merchant_numeric) claim(n, "merchant numeric");
  for (const auto& f : context_categorical) {
    claim(f.name, "context categorical");
    if (f.cardinality < 2)
      throw SchemaError("field '" + f.name + "': cardinality " +
                        std::to_string(f.cardinality) + " is below 2");
  }
  for (const auto& n : context_numeric) claim(n, "context numeric");
  claim(outcome_name, "outcome");
  if (merchant_token_count() == 0) throw SchemaError("schema has no merchant features");
}

namespace {

json cat_list_to_json(const std::vector<CategoricalField>& fields) {
  json arr = json::array();
  for (const auto& f : fields) arr.push_back({{"name", f.name}, {"cardinality", f.cardinality}});
  return arr;
}

std::vector<CategoricalField> cat_list_from_json(const json& arr, const char* key) {
  if (!arr.is_array()) throw SchemaError(std::string("schema key '") + key + "' must be an array");
  std::vector<CategoricalField> out;
  for (const auto& e : arr) {
    CategoricalField f;
    f.name = e.at("name").get<std::string>();
    f.cardinality = e.at("cardinality").get<int>();
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace

std::string FeatureSchema::to_json() const {
  json j;
  j["merchant_categorical"] = cat_list_to_json(merchant_categorical);
  j["merchant_numeric"] = merchant_numeric;
  j["context_categorical"] = cat_list_to_json(context_categorical);
  j["context_numeric"] = context_numeric;
  j["treatment_kind"] = to_string(treatment_kind);
  j["outcome_name"] = outcome_name;
  return j.dump(2) + "\n";
}

FeatureSchema FeatureSchema::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("schema JSON: ") + e.what());
  }
  FeatureSchema s;
  try {
    s.merchant_categorical = cat_list_from_json(j.at("merchant_categorical"), "merchant_categorical");
    s.merchant_numeric = j.at("merchant_numeric").get<std::vector<std::string>>();
    s.context_categorical = cat_list_from_json(j.at("context_categorical"), "context_categorical");
    s.context_numeric = j.at("context_numeric").get<std::vector<std::string>>();
    s.treatment_kind = treatment_kind_from_string(j.at("treatment_kind").get<std::string>());
    s.outcome_name = j.at("outcome_name").get<std::string>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("schema JSON: ") + e.what());
  }
  s.validate();
  return s;
}

FeatureSchema load_schema(const std::string& path) {
  return FeatureSchema::from_json(read_file(path));
}

void save_schema(const FeatureSchema& schema, const std::string& path) {
  schema.validate();
  write_file(path, schema.to_json());
}

}  // namespace tscan
