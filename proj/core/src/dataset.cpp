#include "tscan/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tscan/errors.hpp"
#include "tscan/io_util.hpp"

namespace tscan {

using nlohmann::json;

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

double parse_cell_double(const std::string& cell, std::size_t row, const std::string& col) {
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e)
    throw ParseError("data row " + std::to_string(row) + ", column '" + col +
                     "': cannot parse '" + cell + "' as number");
  return v;
}

int parse_cell_int(const std::string& cell, std::size_t row, const std::string& col) {
  int v = 0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e)
    throw ParseError("data row " + std::to_string(row) + ", column '" + col +
                     "': cannot parse '" + cell + "' as integer code");
  return v;
}

int apply_oov(int code, int cardinality, OovPolicy oov, std::size_t row, const std::string& col) {
  if (code >= 0 && code < cardinality) return code;
  if (oov == OovPolicy::kStrict)
    throw OovError("data row " + std::to_string(row) + ", column '" + col + "': code " +
                   std::to_string(code) + " outside cardinality " + std::to_string(cardinality));
  return 0;  // reserved bucket
}

void check_treatment(double t, TreatmentKind kind, std::size_t row) {
  if (!std::isfinite(t))
    throw ParseError("data row " + std::to_string(row) + ", column 'treatment': non-finite value");
  if (kind == TreatmentKind::kBinary && t != 0.0 && t != 1.0)
    throw ParseError("data row " + std::to_string(row) + ", column 'treatment': value " +
                     format_double(t) + " is not 0/1 for a binary treatment");
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

std::vector<InstanceRecord> load_csv(const std::string& text, const FeatureSchema& schema,
                                     OovPolicy oov) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty dataset file");
  const std::vector<std::string> header = split_csv_line(line);
  std::map<std::string, int> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = static_cast<int>(i);
  auto require_col = [&col](const std::string& name) {
    auto it = col.find(name);
    if (it == col.end()) throw ParseError("missing column '" + name + "' in CSV header");
    return it->second;
  };
  struct CatCol {
    int idx;
    int cardinality;
    std::string name;
  };
  std::vector<CatCol> mcat, ccat;
  std::vector<int> mnum, cnum;
  for (const auto& f : schema.merchant_categorical)
    mcat.push_back({require_col(f.name), f.cardinality, f.name});
  for (const auto& n : schema.merchant_numeric) mnum.push_back(require_col(n));
  for (const auto& f : schema.context_categorical)
    ccat.push_back({require_col(f.name), f.cardinality, f.name});
  for (const auto& n : schema.context_numeric) cnum.push_back(require_col(n));
  const int t_idx = require_col("treatment");
  const int y_idx = require_col(schema.outcome_name);
  const int ite_idx = col.count("true_ite") ? col["true_ite"] : -1;
  const int grp_idx = col.count("group_key") ? col["group_key"] : -1;

  std::vector<InstanceRecord> out;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("data row " + std::to_string(row) + ": " + std::to_string(cells.size()) +
                       " cells, header has " + std::to_string(header.size()));
    InstanceRecord r;
    for (const auto& c : mcat)
      r.merchant_cat.push_back(
          apply_oov(parse_cell_int(cells[c.idx], row, c.name), c.cardinality, oov, row, c.name));
    for (std::size_t k = 0; k < mnum.size(); ++k)
      r.merchant_num.push_back(
          parse_cell_double(cells[mnum[k]], row, schema.merchant_numeric[k]));
    for (const auto& c : ccat)
      r.context_cat.push_back(
          apply_oov(parse_cell_int(cells[c.idx], row, c.name), c.cardinality, oov, row, c.name));
    for (std::size_t k = 0; k < cnum.size(); ++k)
      r.context_num.push_back(parse_cell_double(cells[cnum[k]], row, schema.context_numeric[k]));
    r.treatment = parse_cell_double(cells[t_idx], row, "treatment");
    check_treatment(r.treatment, schema.treatment_kind, row);
    r.outcome = parse_cell_double(cells[y_idx], row, schema.outcome_name);
    if (ite_idx >= 0 && !cells[ite_idx].empty())
      r.true_ite = parse_cell_double(cells[ite_idx], row, "true_ite");
    if (grp_idx >= 0 && !cells[grp_idx].empty()) r.group_key = cells[grp_idx];
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<InstanceRecord> load_jsonl(const std::string& text, const FeatureSchema& schema,
                                       OovPolicy oov) {
  std::istringstream in(text);
  std::string line;
  std::vector<InstanceRecord> out;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("data row " + std::to_string(row) + ": " + e.what());
    }
    auto get_num = [&](const std::string& key) -> double {
      if (!j.contains(key))
        throw ParseError("data row " + std::to_string(row) + ": missing key '" + key + "'");
      const json& v = j.at(key);
      if (!v.is_number())
        throw ParseError("data row " + std::to_string(row) + ", key '" + key +
                         "': expected a number");
      return v.get<double>();
    };
    auto get_code = [&](const std::string& key) -> int {
      if (!j.contains(key))
        throw ParseError("data row " + std::to_string(row) + ": missing key '" + key + "'");
      const json& v = j.at(key);
      if (!v.is_number_integer())
        throw ParseError("data row " + std::to_string(row) + ", key '" + key +
                         "': expected an integer code");
      return v.get<int>();
    };
    InstanceRecord r;
    for (const auto& f : schema.merchant_categorical)
      r.merchant_cat.push_back(apply_oov(get_code(f.name), f.cardinality, oov, row, f.name));
    for (const auto& n : schema.merchant_numeric) r.merchant_num.push_back(get_num(n));
    for (const auto& f : schema.context_categorical)
      r.context_cat.push_back(apply_oov(get_code(f.name), f.cardinality, oov, row, f.name));
    for (const auto& n : schema.context_numeric) r.context_num.push_back(get_num(n));
    r.treatment = get_num("treatment");
    check_treatment(r.treatment, schema.treatment_kind, row);
    r.outcome = get_num(schema.outcome_name);
    if (j.contains("true_ite") && !j.at("true_ite").is_null())
      r.true_ite = j.at("true_ite").get<double>();
    if (j.contains("group_key") && !j.at("group_key").is_null())
      r.group_key = j.at("group_key").get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

void check_record_arity(const InstanceRecord& r, const FeatureSchema& schema, std::size_t row) {
  if (r.merchant_cat.size() != schema.merchant_categorical.size() ||
      r.merchant_num.size() != schema.merchant_numeric.size() ||
      r.context_cat.size() != schema.context_categorical.size() ||
      r.context_num.size() != schema.context_numeric.size())
    throw SchemaError("record " + std::to_string(row) + " does not match the schema arity");
}

}  // namespace

std::vector<InstanceRecord> load_dataset(const std::string& path, const FeatureSchema& schema,
                                         OovPolicy oov) {
  schema.validate();
  const std::string text = read_file(path);
  if (ends_with(path, ".csv")) return load_csv(text, schema, oov);
  if (ends_with(path, ".jsonl")) return load_jsonl(text, schema, oov);
  throw UnsupportedError("dataset path '" + path + "' must end in .csv or .jsonl");
}

void save_dataset(const std::string& path, const FeatureSchema& schema,
                  const std::vector<InstanceRecord>& records) {
  schema.validate();
  const bool any_ite =
      std::any_of(records.begin(), records.end(), [](const auto& r) { return r.true_ite.has_value(); });
  const bool any_grp = std::any_of(records.begin(), records.end(),
                                   [](const auto& r) { return r.group_key.has_value(); });
  std::string out;
  if (ends_with(path, ".csv")) {
    std::vector<std::string> cols;
    for (const auto& f : schema.merchant_categorical) cols.push_back(f.name);
    for (const auto& n : schema.merchant_numeric) cols.push_back(n);
    for (const auto& f : schema.context_categorical) cols.push_back(f.name);
    for (const auto& n : schema.context_numeric) cols.push_back(n);
    cols.push_back("treatment");
    cols.push_back(schema.outcome_name);
    if (any_ite) cols.push_back("true_ite");
    if (any_grp) cols.push_back("group_key");
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i) out.push_back(',');
      out += cols[i];
    }
    out.push_back('\n');
    std::size_t row = 0;
    for (const auto& r : records) {
      check_record_arity(r, schema, ++row);
      for (std::size_t i = 0; i < r.merchant_cat.size(); ++i)
        out += std::to_string(r.merchant_cat[i]) + ",";
      for (std::size_t i = 0; i < r.merchant_num.size(); ++i)
        out += format_double(r.merchant_num[i]) + ",";
      for (std::size_t i = 0; i < r.context_cat.size(); ++i)
        out += std::to_string(r.context_cat[i]) + ",";
      for (std::size_t i = 0; i < r.context_num.size(); ++i)
        out += format_double(r.context_num[i]) + ",";
      out += format_double(r.treatment) + "," + format_double(r.outcome);
      if (any_ite) {
        out.push_back(',');
        if (r.true_ite) out += format_double(*r.true_ite);
      }
      if (any_grp) {
        out.push_back(',');
        if (r.group_key) out += *r.group_key;
      }
      out.push_back('\n');
    }
  } else if (ends_with(path, ".jsonl")) {
    std::size_t row = 0;
    for (const auto& r : records) {
      check_record_arity(r, schema, ++row);
      json j;
      for (std::size_t i = 0; i < schema.merchant_categorical.size(); ++i)
        j[schema.merchant_categorical[i].name] = r.merchant_cat[i];
      for (std::size_t i = 0; i < schema.merchant_numeric.size(); ++i)
        j[schema.merchant_numeric[i]] = r.merchant_num[i];
      for (std::size_t i = 0; i < schema.context_categorical.size(); ++i)
        j[schema.context_categorical[i].name] = r.context_cat[i];
      for (std::size_t i = 0; i < schema.context_numeric.size(); ++i)
        j[schema.context_numeric[i]] = r.context_num[i];
      j["treatment"] = r.treatment;
      j[schema.outcome_name] = r.outcome;
      if (r.true_ite) j["true_ite"] = *r.true_ite;
      if (r.group_key) j["group_key"] = *r.group_key;
      out += j.dump();
      out.push_back('\n');
    }
  } else {
    throw UnsupportedError("dataset path '" + path + "' must end in .csv or .jsonl");
  }
  write_file(path, out);
}

// ---- pseudo-label files -------------------------------------------------

void save_pseudo_labels(const std::string& path, const FeatureSchema& schema,
                        const std::vector<PseudoLabeledRecord>& records) {
  if (!ends_with(path, ".jsonl"))
    throw UnsupportedError("pseudo-label path '" + path + "' must end in .jsonl");
  schema.validate();
  std::string out;
  std::size_t row = 0;
  for (const auto& p : records) {
    const InstanceRecord& r = p.base;
    check_record_arity(r, schema, ++row);
    json j;
    for (std::size_t i = 0; i < schema.merchant_categorical.size(); ++i)
      j[schema.merchant_categorical[i].name] = r.merchant_cat[i];
    for (std::size_t i = 0; i < schema.merchant_numeric.size(); ++i)
      j[schema.merchant_numeric[i]] = r.merchant_num[i];
    for (std::size_t i = 0; i < schema.context_categorical.size(); ++i)
      j[schema.context_categorical[i].name] = r.context_cat[i];
    for (std::size_t i = 0; i < schema.context_numeric.size(); ++i)
      j[schema.context_numeric[i]] = r.context_num[i];
    j["treatment"] = r.treatment;
    j[schema.outcome_name] = r.outcome;
    if (r.true_ite) j["true_ite"] = *r.true_ite;
    if (r.group_key) j["group_key"] = *r.group_key;
    j["t_cf"] = p.t_cf;
    j["u_tilde"] = p.u_tilde;
    out += j.dump();
    out.push_back('\n');
  }
  write_file(path, out);
}

std::vector<PseudoLabeledRecord> load_pseudo_labels(const std::string& path,
                                                    const FeatureSchema& schema, OovPolicy oov) {
  if (!ends_with(path, ".jsonl"))
    throw UnsupportedError("pseudo-label path '" + path + "' must end in .jsonl");
  schema.validate();
  std::istringstream in(read_file(path));
  std::string line;
  std::string stripped;
  std::vector<std::pair<double, double>> extras;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("pseudo-label row " + std::to_string(row) + ": " + e.what());
    }
    if (!j.contains("t_cf") || !j.at("t_cf").is_number() || !j.contains("u_tilde") ||
        !j.at("u_tilde").is_number())
      throw ParseError("pseudo-label row " + std::to_string(row) +
                       ": missing numeric 't_cf'/'u_tilde'");
    const double t_cf = j.at("t_cf").get<double>();
    if (!(t_cf >= 0.0 && t_cf <= 1.0))
      throw ParseError("pseudo-label row " + std::to_string(row) + ": t_cf " +
                       format_double(t_cf) + " is outside [0,1]");
    extras.emplace_back(t_cf, j.at("u_tilde").get<double>());
    j.erase("t_cf");
    j.erase("u_tilde");
    stripped += j.dump();
    stripped.push_back('\n');
  }
  std::vector<InstanceRecord> bases = load_jsonl(stripped, schema, oov);
  std::vector<PseudoLabeledRecord> out(bases.size());
  for (std::size_t i = 0; i < bases.size(); ++i) {
    out[i].base = std::move(bases[i]);
    out[i].t_cf = extras[i].first;
    out[i].u_tilde = extras[i].second;
  }
  return out;
}

// ---- treatment normalization -------------------------------------------

double NormalizationParams::apply(double raw) const {
  if (kind == TreatmentKind::kBinary) {
    if (raw != 0.0 && raw != 1.0)
      throw ContractError("treatment " + format_double(raw) + " is not 0/1 for a binary kind");
    return raw;
  }
  const double span = t_max - t_min;
  const double z = (raw - t_min) / span;
  return std::clamp(z, 0.0, 1.0);
}

std::string NormalizationParams::to_json() const {
  json j;
  j["kind"] = to_string(kind);
  j["t_min"] = t_min;
  j["t_max"] = t_max;
  return j.dump();
}

NormalizationParams NormalizationParams::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("normalization JSON: ") + e.what());
  }
  NormalizationParams p;
  p.kind = treatment_kind_from_string(j.at("kind").get<std::string>());
  p.t_min = j.at("t_min").get<double>();
  p.t_max = j.at("t_max").get<double>();
  return p;
}

NormalizationParams normalize_treatment(std::vector<InstanceRecord>& records, TreatmentKind kind) {
  if (records.empty()) throw ContractError("normalize_treatment: no records");
  double lo = records[0].treatment, hi = records[0].treatment;
  for (const auto& r : records) {
    if (kind == TreatmentKind::kBinary && r.treatment != 0.0 && r.treatment != 1.0)
      throw ContractError("binary treatment value " + format_double(r.treatment));
    lo = std::min(lo, r.treatment);
    hi = std::max(hi, r.treatment);
  }
  if (lo == hi)
    throw DegenerateTreatmentError("treatment column is constant at " + format_double(lo));
  NormalizationParams p;
  p.kind = kind;
  if (kind == TreatmentKind::kBinary) {
    p.t_min = 0.0;
    p.t_max = 1.0;
  } else {
    p.t_min = lo;
    p.t_max = hi;
    for (auto& r : records) r.treatment = (r.treatment - lo) / (hi - lo);
  }
  return p;
}

std::pair<std::vector<InstanceRecord>, std::vector<InstanceRecord>> split_train_test(
    const std::vector<InstanceRecord>& records, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ContractError("split_train_test: fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  const std::size_t n_train =
      static_cast<std::size_t>(std::llround(static_cast<double>(records.size()) * train_fraction));
  std::pair<std::vector<InstanceRecord>, std::vector<InstanceRecord>> out;
  out.first.reserve(n_train);
  out.second.reserve(records.size() - n_train);
  for (std::size_t i = 0; i < idx.size(); ++i)
    (i < n_train ? out.first : out.second).push_back(records[idx[i]]);
  return out;
}

// ---- counterfactual sampling -------------------------------------------

std::string to_string(CfStrategy s) {
  return s == CfStrategy::kUniform ? "uniform" : "empirical";
}

CfStrategy cf_strategy_from_string(const std::string& s) {
  if (s == "uniform") return CfStrategy::kUniform;
  if (s == "empirical") return CfStrategy::kEmpirical;
  throw ConfigError("unknown counterfactual strategy '" + s + "' (expected uniform|empirical)");
}

int CounterfactualSampler::level_of(double t, int levels) {
  if (!(t >= 0.0 && t <= 1.0))
    throw ContractError("treatment " + format_double(t) + " outside [0, 1]");
  return static_cast<int>(std::floor(t * levels));  // t == 1 maps to the top level
}

CounterfactualSampler::CounterfactualSampler(CfStrategy strategy, int levels,
                                             std::vector<double> observed_pool)
    : strategy_(strategy), levels_(levels), pool_(std::move(observed_pool)) {
  if (levels_ < 1) throw ContractError("counterfactual sampler: levels must be >= 1");
  if (strategy_ == CfStrategy::kEmpirical && pool_.empty())
    throw ContractError("counterfactual sampler: empirical strategy needs observed treatments");
  for (double t : pool_) level_of(t, levels_);  // validates range
}

double CounterfactualSampler::sample(double t_f, Rng& rng) const {
  const int k_f = level_of(t_f, levels_);
  if (levels_ == 1) {
    // Two levels total: [0,1) and {1}. The complement is deterministic.
    return k_f == 0 ? 1.0 : 0.0;
  }
  constexpr int kMaxDraws = 1000;
  if (strategy_ == CfStrategy::kUniform) {
    for (int i = 0; i < kMaxDraws; ++i) {
      const double u = rng.uniform();
      if (level_of(u, levels_) != k_f) return u;
    }
  } else {
    for (int i = 0; i < kMaxDraws; ++i) {
      const double v = pool_[rng.uniform_int(pool_.size())];
      if (level_of(v, levels_) != k_f) return v;
    }
  }
  // Rejection exhausted (degenerate pool or unlucky stream): pick one of the
  // other levels uniformly and draw inside it.
  const int pick = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(levels_)));
  const int j = pick >= k_f ? pick + 1 : pick;  // skip the factual level
  if (j >= levels_) return 1.0;
  return (j + rng.uniform()) / levels_;
}

}  // namespace tscan
