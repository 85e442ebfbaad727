#include "tscan/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "tscan/errors.hpp"
#include "tscan/io_util.hpp"

namespace tscan {

std::string to_string(RankMetric m) { return m == RankMetric::kAuuc ? "auuc" : "qini"; }

namespace {

std::vector<int> rank_descending(const std::vector<ScoredRecord>& scored) {
  for (const ScoredRecord& r : scored) {
    if (!std::isfinite(r.score)) throw ContractError("uplift scores must be finite");
    if (r.treatment != 0.0 && r.treatment != 1.0) {
      throw ContractError("ranking metrics need 0/1 treatment indicators");
    }
  }
  std::vector<int> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scored[a].score > scored[b].score; });
  return order;
}

// Normalized cumulative curve evaluated at every prefix, or only at
// tied-block boundaries when tie_average is set. qini_mode switches the
// prefix statistic from k*(mean_t - mean_c) to sum_t - sum_c*(n_t/n_c).
std::vector<std::pair<double, double>> normalized_curve(const std::vector<ScoredRecord>& scored,
                                                        bool tie_average, bool qini_mode) {
  const int n = static_cast<int>(scored.size());
  if (n == 0) throw MetricUndefinedError("cannot rank an empty record set");
  const std::vector<int> order = rank_descending(scored);

  int total1 = 0;
  for (const ScoredRecord& r : scored) total1 += r.treatment == 1.0 ? 1 : 0;
  if (total1 == 0 || total1 == n) {
    throw MetricUndefinedError("one treatment arm is entirely absent");
  }

  std::vector<std::pair<double, double>> raw;
  raw.reserve(static_cast<std::size_t>(n) + 1);
  double s1 = 0.0, s0 = 0.0;
  int n1 = 0, n0 = 0;
  double carry = 0.0;
  for (int k = 1; k <= n; ++k) {
    const ScoredRecord& r = scored[order[k - 1]];
    if (r.treatment == 1.0) {
      s1 += r.outcome;
      ++n1;
    } else {
      s0 += r.outcome;
      ++n0;
    }
    double value;
    if (qini_mode) {
      value = n0 == 0 ? s1 : s1 - s0 * (static_cast<double>(n1) / n0);
    } else {
      if (n1 == 0 || n0 == 0) {
        value = carry;
      } else {
        value = k * (s1 / n1 - s0 / n0);
        carry = value;
      }
    }
    const bool boundary =
        k == n || scored[order[k]].score != scored[order[k - 1]].score;
    if (!tie_average || boundary) raw.emplace_back(static_cast<double>(k), value);
  }

  const double terminal = raw.back().second;
  if (terminal == 0.0) {
    throw MetricUndefinedError("terminal cumulative uplift is zero; ranking cannot be scored");
  }
  std::vector<std::pair<double, double>> points;
  points.reserve(raw.size() + 1);
  points.emplace_back(0.0, 0.0);
  for (const auto& [k, v] : raw) points.emplace_back(k / n, v / terminal);
  return points;
}

double trapezoid_area(const std::vector<std::pair<double, double>>& points) {
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += (points[i].first - points[i - 1].first) *
            (points[i].second + points[i - 1].second) * 0.5;
  }
  return area;
}

double rank_metric_value(const std::vector<ScoredRecord>& scored, RankMetric metric,
                         bool tie_average) {
  return metric == RankMetric::kAuuc ? auuc(scored, tie_average) : qini(scored, tie_average);
}

}  // namespace

GainCurve uplift_curve(const std::vector<ScoredRecord>& scored, bool tie_average) {
  GainCurve curve;
  curve.points = normalized_curve(scored, tie_average, false);
  return curve;
}

double auuc(const std::vector<ScoredRecord>& scored, bool tie_average) {
  return trapezoid_area(normalized_curve(scored, tie_average, false));
}

double qini(const std::vector<ScoredRecord>& scored, bool tie_average) {
  return trapezoid_area(normalized_curve(scored, tie_average, true)) - 0.5;
}

StratifiedResult stratified_metric(const std::vector<ScoredRecord>& scored, RankMetric metric,
                                   int min_group_size, bool tie_average) {
  if (min_group_size < 1) throw ContractError("min_group_size must be at least 1");
  std::map<std::string, std::vector<ScoredRecord>> groups;
  for (const ScoredRecord& r : scored) {
    if (!r.group_key) throw ContractError("stratified metrics need a group key on every record");
    groups[*r.group_key].push_back(r);
  }
  if (groups.empty()) throw MetricUndefinedError("no records to stratify");

  StratifiedResult result;
  double weighted = 0.0, weight = 0.0;
  for (const auto& [key, members] : groups) {
    GroupRow row;
    row.group_key = key;
    row.n = static_cast<int>(members.size());
    if (row.n < min_group_size) {
      row.reason = "too_small";
      result.groups.push_back(std::move(row));
      continue;
    }
    int n1 = 0;
    for (const ScoredRecord& r : members) n1 += r.treatment == 1.0 ? 1 : 0;
    if (n1 == 0 || n1 == row.n) {
      row.reason = "one_armed";
      result.groups.push_back(std::move(row));
      continue;
    }
    try {
      row.value = rank_metric_value(members, metric, tie_average);
    } catch (const MetricUndefinedError&) {
      row.reason = "undefined";
      result.groups.push_back(std::move(row));
      continue;
    }
    row.included = true;
    weighted += row.n * row.value;
    weight += row.n;
    result.groups.push_back(std::move(row));
  }
  if (weight == 0.0) {
    throw MetricUndefinedError("no group qualifies for the stratified metric");
  }
  // n*v/n can round twice; a lone group must reproduce its metric bit-exactly.
  int included = 0;
  const GroupRow* lone = nullptr;
  for (const GroupRow& g : result.groups) {
    if (g.included) {
      ++included;
      lone = &g;
    }
  }
  result.value = included == 1 ? lone->value : weighted / weight;
  return result;
}

std::vector<BinPair> binarize_continuous(const std::vector<InstanceRecord>& records,
                                         const UpliftScorer& scorer, int bins) {
  if (bins < 2) throw ContractError("interval binarization needs at least 2 bins");
  const int n = static_cast<int>(records.size());
  if (n < 2) throw MetricUndefinedError("too few records to binarize");
  if (!scorer) throw ContractError("interval binarization needs a scorer");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return records[a].treatment < records[b].treatment;
  });

  // Tied doses stay together: the whole run lands in the bin of its middle
  // rank, so a dominant value cannot straddle a boundary.
  std::vector<std::vector<int>> bin_members(bins);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j < n && records[order[j]].treatment == records[order[i]].treatment) ++j;
    const int mid_rank = i + (j - i - 1) / 2;
    const int bin = static_cast<int>(static_cast<std::int64_t>(mid_rank) * bins / n);
    for (int k = i; k < j; ++k) bin_members[bin].push_back(order[k]);
    i = j;
  }

  std::vector<double> mids(bins, 0.0);
  for (int b = 0; b < bins; ++b) {
    if (bin_members[b].empty()) continue;
    double lo = records[bin_members[b].front()].treatment;
    double hi = records[bin_members[b].back()].treatment;
    mids[b] = (lo + hi) / 2.0;
  }

  std::vector<BinPair> pairs;
  pairs.reserve(bins - 1);
  for (int b = 0; b + 1 < bins; ++b) {
    BinPair pair;
    pair.low_bin = b;
    pair.high_bin = b + 1;
    pair.low_mid = mids[b];
    pair.high_mid = mids[b + 1];
    if (bin_members[b].empty() || bin_members[b + 1].empty()) {
      pair.skipped = true;
      pair.reason = "empty_bin";
      pairs.push_back(std::move(pair));
      continue;
    }
    for (int arm = 0; arm < 2; ++arm) {
      for (int idx : bin_members[b + arm]) {
        const InstanceRecord& r = records[idx];
        ScoredRecord s;
        s.score = scorer(r, pair.low_mid, pair.high_mid);
        s.treatment = arm;
        s.outcome = r.outcome;
        s.group_key = r.group_key;
        s.true_ite = r.true_ite;
        pair.scored.push_back(std::move(s));
      }
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

double binned_metric_mean(std::vector<BinPair>& pairs, RankMetric metric, bool tie_average) {
  double sum = 0.0;
  int count = 0;
  for (BinPair& pair : pairs) {
    if (pair.skipped) continue;
    try {
      sum += rank_metric_value(pair.scored, metric, tie_average);
      ++count;
    } catch (const MetricUndefinedError&) {
      pair.skipped = true;
      pair.reason = "undefined";
    }
  }
  if (count == 0) {
    throw MetricUndefinedError("no usable adjacent bin pair for the binned metric");
  }
  return sum / count;
}

double uplift_rmse(const std::vector<ScoredRecord>& scored) {
  if (scored.empty()) throw ContractError("uplift RMSE needs records");
  double sq = 0.0;
  for (const ScoredRecord& r : scored) {
    if (!r.true_ite) throw ContractError("uplift RMSE needs true_ite on every record");
    const double d = r.score - *r.true_ite;
    sq += d * d;
  }
  return std::sqrt(sq / scored.size());
}

void export_gain_curves(const std::vector<GainCurve>& curves, const std::string& path) {
  if (curves.empty()) throw ContractError("gain-curve export needs at least one curve");
  std::string out = "model,fraction,cumulative_uplift\n";
  for (const GainCurve& c : curves) {
    for (const auto& [x, y] : c.points) {
      out += c.model;
      out += ',';
      out += format_double(x);
      out += ',';
      out += format_double(y);
      out += '\n';
    }
  }
  write_file(path, out);
}

namespace {

nlohmann::json group_rows_json(const std::vector<GroupRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const GroupRow& g : rows) {
    nlohmann::json j{{"group_key", g.group_key}, {"n", g.n}, {"included", g.included}};
    if (g.included) {
      j["value"] = g.value;
    } else {
      j["reason"] = g.reason;
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["model"] = model;
  j["auuc"] = auuc;
  j["qini"] = qini;
  if (cauuc) j["cauuc"] = *cauuc;
  if (cqini) j["cqini"] = *cqini;
  if (!auuc_groups.empty()) j["auuc_groups"] = group_rows_json(auuc_groups);
  if (!qini_groups.empty()) j["qini_groups"] = group_rows_json(qini_groups);
  if (uplift_rmse) j["uplift_rmse"] = *uplift_rmse;
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& [x, y] : curve.points) pts.push_back({x, y});
  j["gain_curve"] = std::move(pts);
  return j.dump(2);
}

EvalReport evaluate_scored(const std::string& model, const std::vector<ScoredRecord>& scored,
                           int min_group_size, bool tie_average) {
  EvalReport report;
  report.model = model;
  report.auuc = auuc(scored, tie_average);
  report.qini = qini(scored, tie_average);
  report.curve = uplift_curve(scored, tie_average);
  report.curve.model = model;

  bool all_grouped = !scored.empty();
  bool all_ite = !scored.empty();
  for (const ScoredRecord& r : scored) {
    all_grouped = all_grouped && r.group_key.has_value();
    all_ite = all_ite && r.true_ite.has_value();
  }
  if (all_grouped) {
    try {
      StratifiedResult a = stratified_metric(scored, RankMetric::kAuuc, min_group_size, tie_average);
      StratifiedResult q = stratified_metric(scored, RankMetric::kQini, min_group_size, tie_average);
      report.cauuc = a.value;
      report.cqini = q.value;
      report.auuc_groups = std::move(a.groups);
      report.qini_groups = std::move(q.groups);
    } catch (const MetricUndefinedError&) {
      // strata too sparse; the unstratified metrics stand alone
    }
  }
  if (all_ite) report.uplift_rmse = uplift_rmse(scored);
  return report;
}

}  // namespace tscan
