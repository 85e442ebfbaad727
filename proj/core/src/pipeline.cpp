#include "tscan/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "tscan/baselines.hpp"
#include "tscan/checkpoint.hpp"
#include "tscan/errors.hpp"
#include "tscan/evaluation.hpp"
#include "tscan/io_util.hpp"
#include "tscan/version.hpp"
#include "json_util.hpp"

namespace tscan {

namespace fs = std::filesystem;
using nlohmann::json;

void BenchConfig::validate() const {
  synthetic.validate();
  model.validate(synthetic_schema(synthetic.treatment_kind));
  train.validate();
  if (seeds.empty()) throw ConfigError("bench config: seeds must not be empty");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("bench config: train_fraction must lie in (0,1)");
  }
  if (eval_bins < 2) throw ConfigError("bench config: eval_bins must be at least 2");
  if (min_group_size < 1) throw ConfigError("bench config: min_group_size must be at least 1");
  if (name.empty()) throw ConfigError("bench config: name must not be empty");
}

std::string BenchConfig::to_json() const {
  json j{{"name", name},
         {"synthetic", json::parse(synthetic.to_json())},
         {"model", json::parse(model.to_json())},
         {"train", json::parse(train.to_json())},
         {"seeds", seeds},
         {"train_fraction", train_fraction},
         {"eval_bins", eval_bins},
         {"min_group_size", min_group_size},
         {"tie_average", tie_average}};
  return j.dump(2);
}

BenchConfig BenchConfig::from_json(const std::string& text) {
  json j = parse_json(text, "bench config");
  reject_unknown_keys(j,
                      {"name", "synthetic", "model", "train", "seeds", "train_fraction",
                       "eval_bins", "min_group_size", "tie_average"},
                      "bench config");
  BenchConfig c;
  try {
    if (j.contains("name")) c.name = j["name"].get<std::string>();
    if (j.contains("synthetic")) c.synthetic = SyntheticConfig::from_json(j["synthetic"].dump());
    if (j.contains("model")) c.model = ModelConfig::from_json(j["model"].dump());
    if (j.contains("train")) c.train = TrainConfig::from_json(j["train"].dump());
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("train_fraction")) c.train_fraction = j["train_fraction"].get<double>();
    if (j.contains("eval_bins")) c.eval_bins = j["eval_bins"].get<int>();
    if (j.contains("min_group_size")) c.min_group_size = j["min_group_size"].get<int>();
    if (j.contains("tie_average")) c.tie_average = j["tie_average"].get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bench config: ") + e.what());
  }
  c.validate();
  return c;
}

const BenchRow* BenchSummary::row(const std::string& model) const {
  for (const BenchRow& r : rows) {
    if (r.model == model) return &r;
  }
  return nullptr;
}

std::optional<double> BenchSummary::mean_of(const std::string& model,
                                            const std::string& metric) const {
  const BenchRow* r = row(model);
  if (!r) return std::nullopt;
  auto it = r->means.find(metric);
  if (it == r->means.end()) return std::nullopt;
  return it->second;
}

std::string BenchSummary::to_json() const {
  json j;
  j["name"] = name;
  j["treatment_kind"] = treatment_kind;
  j["seeds"] = seeds;
  json jrows = json::array();
  for (const BenchRow& r : rows) {
    json jr;
    jr["model"] = r.model;
    json per_seed = json::array();
    for (const MetricMap& m : r.per_seed) per_seed.push_back(m);
    jr["per_seed"] = std::move(per_seed);
    jr["means"] = r.means;
    jrows.push_back(std::move(jr));
  }
  j["rows"] = std::move(jrows);
  json jd = json::array();
  for (const SeedDiagnostics& d : diagnostics) {
    jd.push_back({{"seed", d.seed},
                  {"initial_val_mmd", d.initial_val_mmd},
                  {"best_epoch_val_mmd", d.best_epoch_val_mmd},
                  {"stage1_best_epoch", d.stage1_best_epoch},
                  {"stage2_best_epoch", d.stage2_best_epoch}});
  }
  j["diagnostics"] = std::move(jd);
  return j.dump(2);
}

namespace {

struct NamedScorer {
  std::string name;
  UpliftScorer fn;  // empty when the scorer is unavailable for this data
};

template <class F>
void try_metric(MetricMap& m, const char* key, F&& f) {
  try {
    m[key] = f();
  } catch (const MetricUndefinedError&) {
  }
}

std::vector<ScoredRecord> score_all(const std::vector<InstanceRecord>& test,
                                    const UpliftScorer& fn, double t_from, double t_to) {
  std::vector<ScoredRecord> scored;
  scored.reserve(test.size());
  for (const InstanceRecord& r : test) {
    ScoredRecord s;
    s.score = fn(r, t_from, t_to);
    s.treatment = r.treatment;
    s.outcome = r.outcome;
    s.group_key = r.group_key;
    s.true_ite = r.true_ite;
    scored.push_back(std::move(s));
  }
  return scored;
}

std::string save_and_hash(const CanModel& model, const fs::path& path) {
  save_checkpoint(model, path.string());
  return file_hash_hex(path.string());
}

void progress(std::ostream* log, const std::string& line) {
  if (log) *log << line << std::endl;
}

}  // namespace

MetricMap score_metrics(const std::vector<InstanceRecord>& test, const UpliftScorer& fn,
                        TreatmentKind kind, int eval_bins, int min_group_size, bool tie_average,
                        GainCurve* curve_out) {
  MetricMap m;
  if (kind == TreatmentKind::kBinary) {
    const std::vector<ScoredRecord> scored = score_all(test, fn, 0.0, 1.0);
    try_metric(m, "auuc", [&] { return auuc(scored, tie_average); });
    try_metric(m, "qini", [&] { return qini(scored, tie_average); });
    try_metric(m, "cauuc", [&] {
      return stratified_metric(scored, RankMetric::kAuuc, min_group_size, tie_average).value;
    });
    try_metric(m, "cqini", [&] {
      return stratified_metric(scored, RankMetric::kQini, min_group_size, tie_average).value;
    });
    try_metric(m, "uplift_rmse", [&] { return uplift_rmse(scored); });
    if (curve_out) {
      try {
        *curve_out = uplift_curve(scored, tie_average);
      } catch (const MetricUndefinedError&) {
      }
    }
    return m;
  }

  const std::vector<BinPair> pairs = binarize_continuous(test, fn, eval_bins);
  try_metric(m, "auuc", [&] {
    std::vector<BinPair> p = pairs;
    return binned_metric_mean(p, RankMetric::kAuuc, tie_average);
  });
  try_metric(m, "qini", [&] {
    std::vector<BinPair> p = pairs;
    return binned_metric_mean(p, RankMetric::kQini, tie_average);
  });
  // Stratified values mean over usable pairs, mirroring the interval scheme.
  for (RankMetric metric : {RankMetric::kAuuc, RankMetric::kQini}) {
    double sum = 0.0;
    int count = 0;
    for (const BinPair& pair : pairs) {
      if (pair.skipped) continue;
      try {
        sum += stratified_metric(pair.scored, metric, min_group_size, tie_average).value;
        ++count;
      } catch (const MetricUndefinedError&) {
      }
    }
    if (count > 0) m[metric == RankMetric::kAuuc ? "cauuc" : "cqini"] = sum / count;
  }
  try_metric(m, "uplift_rmse", [&] { return uplift_rmse(score_all(test, fn, 0.0, 1.0)); });
  return m;
}

BenchSummary run_bench(const BenchConfig& config, const std::string& out_dir, std::ostream* log) {
  config.validate();
  fs::create_directories(out_dir);

  const bool binary = config.synthetic.treatment_kind == TreatmentKind::kBinary;
  const std::vector<std::string> model_names = {"tscan",     "tscan_rc",  "tscan_ra",
                                                "tscan_riso", "can_u",    "s_learner",
                                                "t_learner", "oracle",    "random"};

  BenchSummary summary;
  summary.name = config.name;
  summary.treatment_kind = to_string(config.synthetic.treatment_kind);
  summary.seeds = config.seeds;
  for (const std::string& name : model_names) {
    BenchRow row;
    row.model = name;
    row.per_seed.resize(config.seeds.size());
    summary.rows.push_back(std::move(row));
  }

  json manifest_seeds = json::array();
  const FeatureSchema schema = synthetic_schema(config.synthetic.treatment_kind);

  for (std::size_t si = 0; si < config.seeds.size(); ++si) {
    const std::uint64_t seed = config.seeds[si];
    const auto t0 = std::chrono::steady_clock::now();
    progress(log, "[" + config.name + "] seed " + std::to_string(seed) + ": generating data");

    // Training data keeps the configured selection bias; the held-out split
    // re-draws assignment randomized (bias 0) so the rank metrics are not
    // confounded by the assignment mechanism they are meant to judge.
    SyntheticConfig syn_train = config.synthetic;
    syn_train.seed = seed;
    syn_train.n = std::clamp<std::int64_t>(
        std::llround(static_cast<double>(config.synthetic.n) * config.train_fraction), 1,
        config.synthetic.n - 1);
    SyntheticConfig syn_test = config.synthetic;
    syn_test.bias_strength = 0.0;
    syn_test.seed = seed ^ 0x7e57ULL;
    syn_test.n = config.synthetic.n - syn_train.n;
    std::vector<InstanceRecord> train_recs = generate_synthetic(syn_train);
    std::vector<InstanceRecord> test_recs = generate_synthetic(syn_test);

    // Saved datasets keep raw treatments; normalization is a model-side step
    // recorded in each checkpoint.
    const fs::path seed_dir = fs::path(out_dir) / ("seed_" + std::to_string(seed));
    fs::create_directories(seed_dir);
    save_dataset((seed_dir / "train.csv").string(), schema, train_recs);
    save_dataset((seed_dir / "test.csv").string(), schema, test_recs);
    save_schema(schema, (seed_dir / "schema.json").string());

    NormalizationParams norm = normalize_treatment(train_recs, schema.treatment_kind);
    for (InstanceRecord& r : test_recs) r.treatment = norm.apply(r.treatment);

    TrainConfig tc = config.train;
    tc.seed = seed;

    ModelConfig mu = config.model;
    mu.variant = Variant::kCanU;
    mu.ablations = {};
    ModelConfig md = mu;
    md.variant = Variant::kCanD;

    progress(log, "  stage 1 (full)");
    FitResult s1 = stage1_train(train_recs, mu, schema, norm, tc);
    std::vector<PseudoLabeledRecord> pseudo =
        generate_pseudo_labels(s1.model, train_recs, tc.cf_strategy, seed);
    progress(log, "  stage 2 (full)");
    FitResult s2 = stage2_train(pseudo, md, schema, norm, tc);

    ModelConfig mu_rc = mu, md_rc = md;
    mu_rc.ablations.remove_context = md_rc.ablations.remove_context = true;
    progress(log, "  context-removed variant");
    FitResult s1_rc = stage1_train(train_recs, mu_rc, schema, norm, tc);
    FitResult s2_rc = stage2_train(generate_pseudo_labels(s1_rc.model, train_recs, tc.cf_strategy, seed),
                                   md_rc, schema, norm, tc);

    ModelConfig mu_ra = mu, md_ra = md;
    mu_ra.ablations.replace_attention_with_dense = md_ra.ablations.replace_attention_with_dense =
        true;
    progress(log, "  dense-context variant");
    FitResult s1_ra = stage1_train(train_recs, mu_ra, schema, norm, tc);
    FitResult s2_ra = stage2_train(generate_pseudo_labels(s1_ra.model, train_recs, tc.cf_strategy, seed),
                                   md_ra, schema, norm, tc);

    ModelConfig md_riso = md;
    md_riso.ablations.replace_isotonic_with_dense = true;
    progress(log, "  dense-head variant");
    FitResult s2_riso = stage2_train(pseudo, md_riso, schema, norm, tc);

    progress(log, "  reference learners");
    BaselineModel slearner = train_baseline(BaselineKind::kSLearner, train_recs, schema, norm, tc);
    std::optional<BaselineModel> tlearner;
    if (binary) {
      tlearner = train_baseline(BaselineKind::kTLearner, train_recs, schema, norm, tc);
    }

    json ckpts;
    ckpts["tscan_stage1"] = save_and_hash(s1.model, seed_dir / "canu.ckpt");
    ckpts["tscan_stage2"] = save_and_hash(s2.model, seed_dir / "cand.ckpt");
    ckpts["tscan_rc_stage1"] = save_and_hash(s1_rc.model, seed_dir / "canu_rc.ckpt");
    ckpts["tscan_rc_stage2"] = save_and_hash(s2_rc.model, seed_dir / "cand_rc.ckpt");
    ckpts["tscan_ra_stage1"] = save_and_hash(s1_ra.model, seed_dir / "canu_ra.ckpt");
    ckpts["tscan_ra_stage2"] = save_and_hash(s2_ra.model, seed_dir / "cand_ra.ckpt");
    ckpts["tscan_riso_stage2"] = save_and_hash(s2_riso.model, seed_dir / "cand_riso.ckpt");

    progress(log, "  scoring the test split");
    std::vector<double> random_scores(test_recs.size());
    {
      Rng rrng(seed ^ 0x72616e646f6dULL);
      for (double& v : random_scores) v = rrng.uniform();
    }
    const InstanceRecord* base = test_recs.data();
    const DoseShape shape = config.synthetic.dose_shape;

    const auto model_scorer = [](const CanModel& m) {
      return [&m](const InstanceRecord& r, double lo, double hi) {
        return m.predict_uplift(r, lo, hi);
      };
    };
    std::vector<NamedScorer> scorers;
    scorers.push_back({"tscan", model_scorer(s2.model)});
    scorers.push_back({"tscan_rc", model_scorer(s2_rc.model)});
    scorers.push_back({"tscan_ra", model_scorer(s2_ra.model)});
    scorers.push_back({"tscan_riso", model_scorer(s2_riso.model)});
    scorers.push_back({"can_u", model_scorer(s1.model)});
    scorers.push_back({"s_learner", [&slearner](const InstanceRecord& r, double lo, double hi) {
                         return slearner.predict_uplift(r, lo, hi);
                       }});
    if (tlearner) {
      scorers.push_back({"t_learner", [&tl = *tlearner](const InstanceRecord& r, double lo,
                                                        double hi) {
                           return tl.predict_uplift(r, lo, hi);
                         }});
    } else {
      scorers.push_back({"t_learner", UpliftScorer{}});
    }
    scorers.push_back({"oracle", [shape](const InstanceRecord& r, double lo, double hi) {
                         return *r.true_ite * (dose_value(shape, hi) - dose_value(shape, lo));
                       }});
    scorers.push_back({"random", [base, &random_scores](const InstanceRecord& r, double, double) {
                         return random_scores[&r - base];
                       }});

    std::vector<GainCurve> curves;
    for (std::size_t k = 0; k < scorers.size(); ++k) {
      if (!scorers[k].fn) continue;
      GainCurve curve;
      summary.rows[k].per_seed[si] =
          score_metrics(test_recs, scorers[k].fn, config.synthetic.treatment_kind,
                        config.eval_bins, config.min_group_size, config.tie_average,
                        binary ? &curve : nullptr);
      if (!curve.points.empty()) {
        curve.model = scorers[k].name;
        curves.push_back(std::move(curve));
      }
    }
    if (!curves.empty()) {
      export_gain_curves(curves, (seed_dir / "gain_curves.csv").string());
    }

    SeedDiagnostics diag;
    diag.seed = seed;
    diag.initial_val_mmd = s1.initial_validation.ipm;
    diag.best_epoch_val_mmd =
        s1.best_epoch > 0 ? s1.epochs[s1.best_epoch - 1].val.ipm : s1.initial_validation.ipm;
    diag.stage1_best_epoch = s1.best_epoch;
    diag.stage2_best_epoch = s2.best_epoch;
    diag.duration_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    summary.diagnostics.push_back(diag);

    json seed_entry;
    seed_entry["seed"] = seed;
    seed_entry["train_csv_hash"] = file_hash_hex((seed_dir / "train.csv").string());
    seed_entry["test_csv_hash"] = file_hash_hex((seed_dir / "test.csv").string());
    seed_entry["checkpoint_hashes"] = std::move(ckpts);
    seed_entry["duration_seconds"] = diag.duration_seconds;
    manifest_seeds.push_back(std::move(seed_entry));
    progress(log, "  done in " + std::to_string(diag.duration_seconds) + "s");
  }

  for (BenchRow& row : summary.rows) {
    std::map<std::string, std::pair<double, int>> agg;
    for (const MetricMap& m : row.per_seed) {
      for (const auto& [key, value] : m) {
        agg[key].first += value;
        agg[key].second += 1;
      }
    }
    for (const auto& [key, sv] : agg) row.means[key] = sv.first / sv.second;
  }

  const std::string summary_text = summary.to_json();
  write_file((fs::path(out_dir) / "summary.json").string(), summary_text);

  json manifest;
  manifest["tool_version"] = kVersion;
  manifest["config"] = json::parse(config.to_json());
  manifest["summary_file"] = "summary.json";
  manifest["summary_hash"] = bytes_hash_hex(summary_text);
  manifest["seeds"] = std::move(manifest_seeds);
  write_file((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2));

  return summary;
}

BenchReplay rerun_from_manifest(const std::string& manifest_path, const std::string& out_dir,
                                std::ostream* log) {
  json manifest = parse_json(read_file(manifest_path), "bench manifest");
  if (!manifest.contains("config")) {
    throw ArtifactMismatchError("bench manifest '" + manifest_path + "' carries no config");
  }
  BenchConfig config = BenchConfig::from_json(manifest["config"].dump());
  const fs::path stored_path = fs::path(manifest_path).parent_path() /
                               manifest.value("summary_file", std::string("summary.json"));

  BenchReplay replay;
  replay.stored_summary = read_file(stored_path.string());
  replay.summary = run_bench(config, out_dir, log);
  replay.matches_stored = replay.summary.to_json() == replay.stored_summary;
  return replay;
}

}  // namespace tscan
