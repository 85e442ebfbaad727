// Batch CLI: data generation, two-stage training, prediction, evaluation,
// and the seeded benchmark. JSON configs, overridable by flags (flags win);
// every command writes a manifest echoing the fully resolved form.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tscan/baselines.hpp"
#include "tscan/checkpoint.hpp"
#include "tscan/dataset.hpp"
#include "tscan/errors.hpp"
#include "tscan/evaluation.hpp"
#include "tscan/io_util.hpp"
#include "tscan/model.hpp"
#include "tscan/pipeline.hpp"
#include "tscan/schema.hpp"
#include "tscan/synthetic.hpp"
#include "tscan/training.hpp"
#include "tscan/version.hpp"
#include "json_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tscan;

namespace {

// ---- small shared pieces ------------------------------------------------

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

json file_entry(const std::string& path) {
  return json{{"path", path}, {"hash", file_hash_hex(path)}};
}

json loss_json(const LossReport& r) {
  return json{{"factual_mse", r.factual_mse}, {"ipm", r.ipm},
              {"propensity_mse", r.propensity_mse}, {"l2", r.l2},
              {"uplift_mse", r.uplift_mse}, {"total", r.total}};
}

void write_fit_log(const std::string& path, const FitResult& fit, int stage) {
  json j;
  j["stage"] = stage;
  j["best_epoch"] = fit.best_epoch;
  j["initial_validation"] = loss_json(fit.initial_validation);
  json epochs = json::array();
  for (const EpochLog& e : fit.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train", loss_json(e.train)}, {"val", loss_json(e.val)}});
  }
  j["epochs"] = std::move(epochs);
  write_file(path, j.dump(2));
}

std::string cell(const MetricMap& m, const char* key) {
  auto it = m.find(key);
  if (it == m.end()) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", it->second);
  return buf;
}

void print_metric_table(const std::vector<std::pair<std::string, MetricMap>>& rows,
                        std::ostream& out) {
  std::size_t width = 10;
  for (const auto& [name, m] : rows) width = std::max(width, name.size() + 2);
  out << std::string(width, ' ');
  for (const char* col : {"CQINI", "QINI", "CAUUC", "AUUC"})
    out << std::string(9 - std::string(col).size(), ' ') << col;
  out << "\n";
  for (const auto& [name, m] : rows) {
    out << name << std::string(width - name.size(), ' ');
    for (const char* key : {"cqini", "qini", "cauuc", "auuc"}) {
      const std::string c = cell(m, key);
      out << std::string(9 - c.size(), ' ') << c;
    }
    out << "\n";
  }
}

// Loads a JSON config file when a path was given; {} otherwise.
json load_config_file(const std::string& path, const char* context) {
  if (path.empty()) return json::object();
  return parse_json(read_file(path), context);
}

std::string default_schema_path(const std::string& data_path) {
  return (fs::path(data_path).parent_path() / "schema.json").string();
}

// "name=path" -> {name, path}; bare paths use the filename stem as name.
std::pair<std::string, std::string> split_named_path(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq != std::string::npos && eq > 0)
    return {arg.substr(0, eq), arg.substr(eq + 1)};
  return {fs::path(arg).stem().string(), arg};
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

// ---- gen-data -----------------------------------------------------------

int run_gen_data(const std::string& config_path, const json& flags) {
  Stopwatch timer;
  json cfg = load_config_file(config_path, "gen-data config");
  reject_unknown_keys(cfg, {"synthetic", "train_fraction", "out_dir"}, "gen-data config");

  SyntheticConfig syn = cfg.contains("synthetic")
                            ? SyntheticConfig::from_json(cfg["synthetic"].dump())
                            : SyntheticConfig{};
  double train_fraction = cfg.value("train_fraction", 0.9);
  std::string out_dir = cfg.value("out_dir", std::string("data_out"));

  json syn_json = json::parse(syn.to_json());
  for (const auto& [key, value] : flags.items()) {
    if (key == "train_fraction")
      train_fraction = value.get<double>();
    else if (key == "out_dir")
      out_dir = value.get<std::string>();
    else
      syn_json[key] = value;
  }
  syn = SyntheticConfig::from_json(syn_json.dump());
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train_fraction must lie in (0,1), got " + format_double(train_fraction));

  const FeatureSchema schema = synthetic_schema(syn.treatment_kind);
  std::vector<InstanceRecord> records = generate_synthetic(syn);
  auto [train_recs, test_recs] = split_train_test(records, train_fraction, syn.seed);

  fs::create_directories(out_dir);
  const std::string train_path = (fs::path(out_dir) / "train.csv").string();
  const std::string test_path = (fs::path(out_dir) / "test.csv").string();
  const std::string schema_path = (fs::path(out_dir) / "schema.json").string();
  const std::string dgp_path = (fs::path(out_dir) / "dgp.json").string();
  save_dataset(train_path, schema, train_recs);
  save_dataset(test_path, schema, test_recs);
  save_schema(schema, schema_path);
  write_file(dgp_path, describe_dgp(syn));

  json manifest;
  manifest["tool_version"] = kVersion;
  manifest["command"] = "gen-data";
  manifest["config"] = {{"synthetic", json::parse(syn.to_json())},
                        {"train_fraction", train_fraction},
                        {"out_dir", out_dir}};
  manifest["outputs"] = {{"train", file_entry(train_path)},
                         {"test", file_entry(test_path)},
                         {"schema", file_entry(schema_path)},
                         {"dgp", file_entry(dgp_path)}};
  manifest["duration_seconds"] = timer.seconds();
  write_file((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2));

  std::cout << "wrote " << train_recs.size() << " train and " << test_recs.size()
            << " test records to " << out_dir << "\n";
  return 0;
}

// ---- train --------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string data;
  std::string schema_path;
  std::string out_dir;
  std::string stage;
  std::vector<std::string> ablate;
  bool ablate_given = false;
  bool can_u_only = false;
  bool can_u_only_given = false;
  std::string stage1_checkpoint;
  std::string pseudo_labels;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& args) {
  Stopwatch timer;
  json cfg = load_config_file(args.config_path, "train config");
  reject_unknown_keys(cfg,
                      {"data", "schema", "out_dir", "stage", "ablate", "can_u_only",
                       "stage1_checkpoint", "pseudo_labels", "model", "train"},
                      "train config");

  std::string data = cfg.value("data", std::string());
  std::string schema_path = cfg.value("schema", std::string());
  std::string out_dir = cfg.value("out_dir", std::string("train_out"));
  std::string stage = cfg.value("stage", std::string("both"));
  std::vector<std::string> ablate;
  if (cfg.contains("ablate")) ablate = cfg["ablate"].get<std::vector<std::string>>();
  bool can_u_only = cfg.value("can_u_only", false);
  std::string stage1_checkpoint = cfg.value("stage1_checkpoint", std::string());
  std::string pseudo_labels = cfg.value("pseudo_labels", std::string());
  ModelConfig model = cfg.contains("model") ? ModelConfig::from_json(cfg["model"].dump())
                                            : ModelConfig{};
  TrainConfig train = cfg.contains("train") ? TrainConfig::from_json(cfg["train"].dump())
                                            : TrainConfig{};

  if (!args.data.empty()) data = args.data;
  if (!args.schema_path.empty()) schema_path = args.schema_path;
  if (!args.out_dir.empty()) out_dir = args.out_dir;
  if (!args.stage.empty()) stage = args.stage;
  if (args.ablate_given) ablate = args.ablate;
  if (args.can_u_only_given) can_u_only = args.can_u_only;
  if (!args.stage1_checkpoint.empty()) stage1_checkpoint = args.stage1_checkpoint;
  if (!args.pseudo_labels.empty()) pseudo_labels = args.pseudo_labels;
  if (args.seed) train.seed = *args.seed;

  if (data.empty()) throw ConfigError("train: no dataset given (--data or config 'data')");
  if (stage != "1" && stage != "2" && stage != "both")
    throw ConfigError("train: stage must be 1, 2 or both, got '" + stage + "'");
  if (can_u_only && stage == "2")
    throw ConfigError("train: --can-u-only trains the first stage only and "
                      "contradicts --stage 2");
  AblationFlags flags = model.ablations;
  for (const std::string& a : ablate) {
    if (a == "rc")
      flags.remove_context = true;
    else if (a == "ra")
      flags.replace_attention_with_dense = true;
    else if (a == "riso")
      flags.replace_isotonic_with_dense = true;
    else
      throw ConfigError("train: unknown ablation '" + a + "' (expected rc, ra or riso)");
  }
  if (schema_path.empty()) schema_path = default_schema_path(data);

  const FeatureSchema schema = load_schema(schema_path);
  std::vector<InstanceRecord> records = load_dataset(data, schema);
  train.validate();

  // The first stage always keeps the monotone head; the dense-head ablation
  // applies to the second stage it was defined for.
  ModelConfig mc_u = model;
  mc_u.variant = Variant::kCanU;
  mc_u.ablations = flags;
  mc_u.ablations.replace_isotonic_with_dense = false;
  ModelConfig mc_d = model;
  mc_d.variant = Variant::kCanD;
  mc_d.ablations = flags;
  mc_u.validate(schema);
  mc_d.validate(schema);

  fs::create_directories(out_dir);
  const auto out_path = [&](const char* name) { return (fs::path(out_dir) / name).string(); };

  json outputs;
  NormalizationParams norm;
  std::optional<FitResult> s1;
  std::optional<CanModel> s1_loaded;
  std::vector<PseudoLabeledRecord> pseudo;

  if (stage == "1" || stage == "both") {
    norm = normalize_treatment(records, schema.treatment_kind);
    std::cerr << "training first stage on " << records.size() << " records\n";
    s1 = stage1_train(records, mc_u, schema, norm, train);
    save_checkpoint(s1->model, out_path("canu.ckpt"));
    write_fit_log(out_path("stage1_log.json"), *s1, 1);
    outputs["canu_ckpt"] = file_entry(out_path("canu.ckpt"));
    outputs["stage1_log"] = file_entry(out_path("stage1_log.json"));
  }

  const bool want_stage2 = (stage == "2" || stage == "both") && !can_u_only;
  if (want_stage2) {
    const CanModel* pseudo_source = nullptr;
    if (s1) {
      pseudo = generate_pseudo_labels(s1->model, records, train.cf_strategy, train.seed);
      pseudo_source = &s1->model;
    } else if (!stage1_checkpoint.empty()) {
      s1_loaded = load_checkpoint(stage1_checkpoint);
      if (json::parse(s1_loaded->schema().to_json()) != json::parse(schema.to_json()))
        throw ArtifactMismatchError("checkpoint '" + stage1_checkpoint +
                                    "' was trained under a different schema than '" +
                                    schema_path + "'");
      norm = s1_loaded->normalization();
      for (InstanceRecord& r : records) r.treatment = norm.apply(r.treatment);
      pseudo = generate_pseudo_labels(*s1_loaded, records, train.cf_strategy, train.seed);
      pseudo_source = &*s1_loaded;
    } else if (!pseudo_labels.empty()) {
      pseudo = load_pseudo_labels(pseudo_labels, schema);
      // Labels in the file already carry normalized treatments.
      norm = NormalizationParams{schema.treatment_kind, 0.0, 1.0};
    } else {
      throw PipelineOrderError(
          "second stage needs pseudo labels: run --stage both, or pass "
          "--stage1-checkpoint or --pseudo-labels");
    }
    if (pseudo_labels.empty()) {
      save_pseudo_labels(out_path("pseudo_labels.jsonl"), schema, pseudo);
      outputs["pseudo_labels"] = file_entry(out_path("pseudo_labels.jsonl"));
    }
    std::cerr << "training second stage on " << pseudo.size() << " pseudo-labeled records\n";
    FitResult s2 = stage2_train(pseudo, mc_d, schema, norm, train, pseudo_source);
    save_checkpoint(s2.model, out_path("cand.ckpt"));
    write_fit_log(out_path("stage2_log.json"), s2, 2);
    outputs["cand_ckpt"] = file_entry(out_path("cand.ckpt"));
    outputs["stage2_log"] = file_entry(out_path("stage2_log.json"));
  }

  json manifest;
  manifest["tool_version"] = kVersion;
  manifest["command"] = "train";
  json rc;
  rc["data"] = data;
  rc["schema"] = schema_path;
  rc["out_dir"] = out_dir;
  rc["stage"] = stage;
  rc["can_u_only"] = can_u_only;
  if (!stage1_checkpoint.empty()) rc["stage1_checkpoint"] = stage1_checkpoint;
  if (!pseudo_labels.empty()) rc["pseudo_labels"] = pseudo_labels;
  rc["model_stage1"] = json::parse(mc_u.to_json());
  rc["model_stage2"] = json::parse(mc_d.to_json());
  rc["train"] = json::parse(train.to_json());
  manifest["config"] = std::move(rc);
  manifest["normalization"] = json::parse(norm.to_json());
  manifest["inputs"] = {{"data", file_entry(data)}, {"schema", file_entry(schema_path)}};
  manifest["outputs"] = std::move(outputs);
  manifest["duration_seconds"] = timer.seconds();
  write_file(out_path("manifest.json"), manifest.dump(2));
  std::cout << "artifacts written to " << out_dir << "\n";
  return 0;
}

// ---- predict ------------------------------------------------------------

int run_predict(const std::string& ckpt_path, const std::string& data,
                const std::string& schema_arg, const std::string& out_path,
                const std::string& cf_strategy, std::uint64_t seed) {
  Stopwatch timer;
  if (ckpt_path.empty() || data.empty() || out_path.empty())
    throw ConfigError("predict needs --checkpoint, --data and --out");
  const CanModel model = load_checkpoint(ckpt_path);

  FeatureSchema schema = model.schema();
  std::string schema_path = schema_arg;
  if (!schema_path.empty()) {
    const FeatureSchema file_schema = load_schema(schema_path);
    if (json::parse(file_schema.to_json()) != json::parse(schema.to_json()))
      throw ArtifactMismatchError("schema '" + schema_path +
                                  "' does not match the one stored in checkpoint '" + ckpt_path +
                                  "'");
  }

  std::vector<InstanceRecord> records = load_dataset(data, schema);
  const NormalizationParams& norm = model.normalization();
  for (InstanceRecord& r : records) r.treatment = norm.apply(r.treatment);

  std::vector<double> pool;
  pool.reserve(records.size());
  for (const InstanceRecord& r : records) pool.push_back(r.treatment);
  CounterfactualSampler sampler(cf_strategy_from_string(cf_strategy), model.config().iso_levels,
                                std::move(pool));
  Rng rng(seed);

  std::string out = "record_id,y_hat_factual,t_cf,y_hat_counterfactual,uplift_hat\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const InstanceRecord& r = records[i];
    const double t_cf = sampler.sample(r.treatment, rng);
    const double y_f = model.predict_outcome(r, r.treatment);
    const double y_cf = model.predict_outcome(r, t_cf);
    const double u = model.predict_uplift(r, r.treatment, t_cf);
    out += std::to_string(i) + "," + format_double(y_f) + "," + format_double(t_cf) + "," +
           format_double(y_cf) + "," + format_double(u) + "\n";
  }
  write_file(out_path, out);

  json manifest;
  manifest["tool_version"] = kVersion;
  manifest["command"] = "predict";
  manifest["config"] = {{"checkpoint", ckpt_path},
                        {"data", data},
                        {"out", out_path},
                        {"cf_strategy", cf_strategy},
                        {"seed", seed}};
  manifest["inputs"] = {{"checkpoint", file_entry(ckpt_path)}, {"data", file_entry(data)}};
  manifest["outputs"] = {{"predictions", file_entry(out_path)}};
  manifest["duration_seconds"] = timer.seconds();
  write_file(out_path + ".manifest.json", manifest.dump(2));
  std::cout << "wrote " << records.size() << " predictions to " << out_path << "\n";
  return 0;
}

// ---- evaluate -----------------------------------------------------------

struct EvalArgs {
  std::string data;
  std::string schema_path;
  std::vector<std::string> checkpoints;
  std::vector<std::string> predictions;
  bool oracle = false;
  bool random = false;
  std::uint64_t random_seed = 1;
  std::string group_by;
  int min_group_size = 100;
  int bins = 5;
  bool tie_average = false;
  std::string dose_shape = "linear";
  std::string out_dir = "eval_out";
};

// Pulls one raw column out of the data file, in record order.
std::vector<std::string> read_raw_column(const std::string& path, const std::string& column) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> values;
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") {
    if (!std::getline(in, line)) throw ParseError("empty data file '" + path + "'");
    const std::vector<std::string> header = split_line(line);
    int idx = -1;
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == column) idx = static_cast<int>(i);
    if (idx < 0)
      throw ConfigError("--group-by column '" + column + "' not found in '" + path + "'");
    while (std::getline(in, line)) {
      if (line.empty() || line == "\r") continue;
      const std::vector<std::string> cells = split_line(line);
      if (idx >= static_cast<int>(cells.size()))
        throw ParseError("row with too few cells in '" + path + "'");
      values.push_back(cells[idx]);
    }
    return values;
  }
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    json j = parse_json(line, "data row");
    if (!j.contains(column))
      throw ConfigError("--group-by column '" + column + "' not found in '" + path + "'");
    const json& v = j.at(column);
    values.push_back(v.is_string() ? v.get<std::string>() : v.dump());
  }
  return values;
}

// Each row's uplift_hat points toward that row's own sampled counterfactual.
// For ranking, rows with t_cf == 0 are flipped to the canonical 0 -> 1
// direction (exact for binary uplift, which is antisymmetric).
std::vector<double> load_prediction_scores(const std::string& path, std::size_t expect) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty predictions file '" + path + "'");
  const std::vector<std::string> header = split_line(line);
  int idx = -1, cf_idx = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "uplift_hat") idx = static_cast<int>(i);
    if (header[i] == "t_cf") cf_idx = static_cast<int>(i);
  }
  if (idx < 0) throw ParseError("predictions file '" + path + "' has no uplift_hat column");
  std::vector<double> scores;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const std::vector<std::string> cells = split_line(line);
    if (idx >= static_cast<int>(cells.size()) || cf_idx >= static_cast<int>(cells.size()))
      throw ParseError("predictions file '" + path + "' row " + std::to_string(row) +
                       " has too few cells");
    try {
      double u = std::stod(cells[idx]);
      if (cf_idx >= 0 && std::stod(cells[cf_idx]) == 0.0) u = -u;
      scores.push_back(u);
    } catch (const std::exception&) {
      throw ParseError("predictions file '" + path + "' row " + std::to_string(row) +
                       ": uplift_hat/t_cf is not a number");
    }
  }
  if (scores.size() != expect)
    throw ArtifactMismatchError("predictions file '" + path + "' has " +
                                std::to_string(scores.size()) + " rows, dataset has " +
                                std::to_string(expect));
  return scores;
}

int run_evaluate(const EvalArgs& args) {
  if (args.data.empty()) throw ConfigError("evaluate needs --data");
  if (args.checkpoints.empty() && args.predictions.empty() && !args.oracle && !args.random)
    throw ConfigError("evaluate needs at least one scorer "
                      "(--checkpoint, --predictions, --oracle or --random)");

  // Schema: explicit flag, else sibling schema.json, else the first checkpoint.
  std::vector<CanModel> models;
  std::vector<std::string> model_names;
  for (const std::string& arg : args.checkpoints) {
    auto [name, path] = split_named_path(arg);
    models.push_back(load_checkpoint(path));
    model_names.push_back(name);
  }
  FeatureSchema schema;
  std::string schema_path = args.schema_path;
  if (schema_path.empty() && fs::exists(default_schema_path(args.data)))
    schema_path = default_schema_path(args.data);
  if (!schema_path.empty()) {
    schema = load_schema(schema_path);
  } else if (!models.empty()) {
    schema = models.front().schema();
  } else {
    throw ConfigError("evaluate: no schema found (--schema, a sibling schema.json, "
                      "or a checkpoint)");
  }
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (json::parse(models[i].schema().to_json()) != json::parse(schema.to_json()))
      throw ArtifactMismatchError("checkpoint '" + args.checkpoints[i] +
                                  "' was trained under a different schema");
  }

  std::vector<InstanceRecord> records = load_dataset(args.data, schema);
  if (!args.group_by.empty()) {
    const std::vector<std::string> keys = read_raw_column(args.data, args.group_by);
    if (keys.size() != records.size())
      throw ParseError("group column count does not match record count");
    for (std::size_t i = 0; i < records.size(); ++i) records[i].group_key = keys[i];
  }

  const TreatmentKind kind = schema.treatment_kind;
  const bool binary = kind == TreatmentKind::kBinary;
  const DoseShape shape = dose_shape_from_string(args.dose_shape);

  std::vector<std::pair<std::string, UpliftScorer>> scorers;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const CanModel& m = models[i];
    scorers.emplace_back(model_names[i], [&m](const InstanceRecord& r, double lo, double hi) {
      InstanceRecord c = r;
      const NormalizationParams& norm = m.normalization();
      c.treatment = norm.apply(c.treatment);
      return m.predict_uplift(c, norm.apply(lo), norm.apply(hi));
    });
  }
  std::vector<std::vector<double>> prediction_scores;
  prediction_scores.reserve(args.predictions.size());
  const InstanceRecord* base = records.data();
  for (const std::string& arg : args.predictions) {
    auto [name, path] = split_named_path(arg);
    if (!binary)
      throw ConfigError("evaluate: prediction files carry one score per record and "
                        "cannot be re-scored per dose pair; use --checkpoint for "
                        "continuous treatments");
    prediction_scores.push_back(load_prediction_scores(path, records.size()));
    const std::vector<double>& scores = prediction_scores.back();
    scorers.emplace_back(name, [base, &scores](const InstanceRecord& r, double, double) {
      return scores[&r - base];
    });
  }
  if (args.oracle) {
    const bool all_ite = std::all_of(records.begin(), records.end(),
                                     [](const InstanceRecord& r) { return r.true_ite.has_value(); });
    if (!all_ite)
      throw ConfigError("evaluate: --oracle needs a true_ite column on every record");
    scorers.emplace_back("oracle", [shape](const InstanceRecord& r, double lo, double hi) {
      return *r.true_ite * (dose_value(shape, hi) - dose_value(shape, lo));
    });
  }
  std::vector<double> random_scores;
  if (args.random) {
    Rng rng(args.random_seed);
    random_scores.resize(records.size());
    for (double& v : random_scores) v = rng.uniform();
    scorers.emplace_back("random", [base, &random_scores](const InstanceRecord& r, double, double) {
      return random_scores[&r - base];
    });
  }

  fs::create_directories(args.out_dir);
  std::vector<std::pair<std::string, MetricMap>> rows;
  std::vector<GainCurve> curves;
  for (const auto& [name, fn] : scorers) {
    GainCurve curve;
    MetricMap m = score_metrics(records, fn, kind, args.bins, args.min_group_size,
                                args.tie_average, binary ? &curve : nullptr);
    if (!curve.points.empty()) {
      curve.model = name;
      curves.push_back(std::move(curve));
    }
    rows.emplace_back(name, std::move(m));
  }

  print_metric_table(rows, std::cout);

  json report;
  report["tool_version"] = kVersion;
  report["data"] = args.data;
  report["treatment_kind"] = to_string(kind);
  report["eval"] = {{"min_group_size", args.min_group_size},
                    {"bins", args.bins},
                    {"tie_average", args.tie_average},
                    {"group_by", args.group_by}};
  json jmodels = json::array();
  for (const auto& [name, m] : rows) jmodels.push_back({{"name", name}, {"metrics", m}});
  report["models"] = std::move(jmodels);
  write_file((fs::path(args.out_dir) / "report.json").string(), report.dump(2));
  if (!curves.empty())
    export_gain_curves(curves, (fs::path(args.out_dir) / "gain_curves.csv").string());

  const bool any_defined = std::any_of(rows.begin(), rows.end(), [](const auto& row) {
    const MetricMap& m = row.second;
    return m.count("auuc") || m.count("qini") || m.count("cauuc") || m.count("cqini");
  });
  if (!any_defined) {
    std::cerr << "every ranking metric is undefined on this data\n";
    return 1;
  }
  return 0;
}

// ---- describe-dgp -------------------------------------------------------

int run_describe(const std::string& config_path, const json& flags, const std::string& out_path) {
  json cfg = load_config_file(config_path, "dgp config");
  SyntheticConfig syn =
      cfg.empty() ? SyntheticConfig{} : SyntheticConfig::from_json(cfg.dump());
  json syn_json = json::parse(syn.to_json());
  for (const auto& [key, value] : flags.items()) syn_json[key] = value;
  syn = SyntheticConfig::from_json(syn_json.dump());
  const std::string description = describe_dgp(syn);
  std::cout << description << "\n";
  if (!out_path.empty()) write_file(out_path, description);
  return 0;
}

// ---- bench --------------------------------------------------------------

int run_bench_cmd(const std::string& config_path, const std::string& manifest_path,
                  const std::string& out_dir) {
  if (config_path.empty() == manifest_path.empty())
    throw ConfigError("bench needs exactly one of --config or --manifest");

  if (!config_path.empty()) {
    const BenchConfig cfg = BenchConfig::from_json(read_file(config_path));
    const BenchSummary summary = run_bench(cfg, out_dir, &std::cerr);
    std::vector<std::pair<std::string, MetricMap>> rows;
    for (const BenchRow& r : summary.rows) rows.emplace_back(r.model, r.means);
    std::cout << "\n" << summary.name << " (" << summary.treatment_kind << ", "
              << summary.seeds.size() << " seeds, means)\n";
    print_metric_table(rows, std::cout);
    std::cout << "summary written to " << (fs::path(out_dir) / "summary.json").string() << "\n";
    return 0;
  }

  const BenchReplay replay = rerun_from_manifest(manifest_path, out_dir, &std::cerr);
  std::vector<std::pair<std::string, MetricMap>> rows;
  for (const BenchRow& r : replay.summary.rows) rows.emplace_back(r.model, r.means);
  std::cout << "\n" << replay.summary.name << " (replayed)\n";
  print_metric_table(rows, std::cout);
  if (!replay.matches_stored) {
    std::cerr << "replayed summary differs from the one stored next to " << manifest_path << "\n";
    return 4;
  }
  std::cout << "replay reproduced the stored summary byte for byte\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage context-aware uplift modeling toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  int rc = 0;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "draw a synthetic biased dataset and write "
                                             "train/test splits plus the generator description");
  std::string gen_config, gen_out, gen_treatment, gen_dose;
  std::int64_t gen_n = 0;
  double gen_bias = 0, gen_mod = 0, gen_noise = 0, gen_frac = 0;
  std::uint64_t gen_seed = 0;
  auto* gen_config_o = gen->add_option("--config", gen_config, "JSON config file");
  auto* gen_out_o = gen->add_option("--out", gen_out, "output directory");
  auto* gen_n_o = gen->add_option("--n", gen_n, "record count");
  auto* gen_treat_o = gen->add_option("--treatment", gen_treatment, "binary or continuous");
  auto* gen_bias_o = gen->add_option("--bias-strength", gen_bias, "selection-bias strength");
  auto* gen_mod_o = gen->add_option("--context-modulation", gen_mod, "context effect modulation");
  auto* gen_noise_o = gen->add_option("--noise-sd", gen_noise, "outcome noise sd");
  auto* gen_dose_o = gen->add_option("--dose-shape", gen_dose, "linear or concave");
  auto* gen_seed_o = gen->add_option("--seed", gen_seed, "generator seed");
  auto* gen_frac_o = gen->add_option("--train-fraction", gen_frac, "train split fraction");
  gen->callback([&] {
    json flags;
    if (*gen_out_o) flags["out_dir"] = gen_out;
    if (*gen_n_o) flags["n"] = gen_n;
    if (*gen_treat_o) flags["treatment_kind"] = gen_treatment;
    if (*gen_bias_o) flags["bias_strength"] = gen_bias;
    if (*gen_mod_o) flags["context_modulation"] = gen_mod;
    if (*gen_noise_o) flags["noise_sd"] = gen_noise;
    if (*gen_dose_o) flags["dose_shape"] = gen_dose;
    if (*gen_seed_o) flags["seed"] = gen_seed;
    if (*gen_frac_o) flags["train_fraction"] = gen_frac;
    rc = run_gen_data(gen_config, flags);
  });

  // train
  auto* tr = app.add_subcommand("train", "fit the two-stage model (or one stage) on a dataset");
  TrainArgs ta;
  std::uint64_t tr_seed = 0;
  tr->add_option("--config", ta.config_path, "JSON config file");
  tr->add_option("--data", ta.data, "training dataset (.csv or .jsonl)");
  tr->add_option("--schema", ta.schema_path, "feature schema JSON");
  tr->add_option("--out", ta.out_dir, "output directory");
  tr->add_option("--stage", ta.stage, "1, 2 or both");
  auto* tr_ablate_o = tr->add_option("--ablate", ta.ablate, "rc, ra or riso (repeatable)");
  auto* tr_cuo_o = tr->add_flag("--can-u-only", ta.can_u_only,
                                "train the first stage only and use it directly for uplift");
  tr->add_option("--stage1-checkpoint", ta.stage1_checkpoint,
                 "first-stage checkpoint (enables --stage 2)");
  tr->add_option("--pseudo-labels", ta.pseudo_labels,
                 "pseudo-label JSONL (alternative for --stage 2)");
  auto* tr_seed_o = tr->add_option("--seed", tr_seed, "training seed override");
  tr->callback([&] {
    ta.ablate_given = tr_ablate_o->count() > 0;
    ta.can_u_only_given = tr_cuo_o->count() > 0;
    if (*tr_seed_o) ta.seed = tr_seed;
    rc = run_train(ta);
  });

  // predict
  auto* pr = app.add_subcommand("predict", "score a dataset with a checkpoint: factual and "
                                           "counterfactual outcomes plus their uplift");
  std::string pr_ckpt, pr_data, pr_schema, pr_out, pr_cf = "uniform";
  std::uint64_t pr_seed = 1;
  pr->add_option("--checkpoint", pr_ckpt, "model checkpoint")->required();
  pr->add_option("--data", pr_data, "dataset to score")->required();
  pr->add_option("--schema", pr_schema, "schema JSON; must match the checkpoint");
  pr->add_option("--out", pr_out, "predictions CSV path")->required();
  pr->add_option("--cf-strategy", pr_cf, "uniform or empirical counterfactual draws");
  pr->add_option("--seed", pr_seed, "counterfactual sampling seed");
  pr->callback([&] { rc = run_predict(pr_ckpt, pr_data, pr_schema, pr_out, pr_cf, pr_seed); });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "rank a test split under one or more scorers and "
                                            "print the metric table");
  EvalArgs ea;
  auto* ev_rand_seed_o = ev->add_option("--random-seed", ea.random_seed, "seed for --random");
  ev->add_option("--data", ea.data, "test dataset")->required();
  ev->add_option("--schema", ea.schema_path, "schema JSON");
  ev->add_option("--checkpoint", ea.checkpoints, "name=path checkpoint scorer (repeatable)");
  ev->add_option("--predictions", ea.predictions,
                 "name=path predictions CSV scorer (repeatable, binary data)");
  ev->add_flag("--oracle", ea.oracle, "score by the stored true effect");
  auto* ev_rand_o = ev->add_flag("--random", ea.random, "add a random ranking");
  ev->add_option("--group-by", ea.group_by, "data column holding the stratum key");
  ev->add_option("--min-group-size", ea.min_group_size, "stratum inclusion threshold");
  ev->add_option("--bins", ea.bins, "dose bins for continuous treatments");
  ev->add_flag("--tie-average", ea.tie_average, "average the curve across tied scores");
  ev->add_option("--dose-shape", ea.dose_shape, "response shape for the oracle scorer");
  ev->add_option("--out", ea.out_dir, "report directory");
  ev->callback([&] {
    if (*ev_rand_seed_o && !*ev_rand_o) ea.random = true;
    rc = run_evaluate(ea);
  });

  // describe-dgp
  auto* dd = app.add_subcommand("describe-dgp", "print the synthetic generator's coefficient "
                                                "tables and assignment mechanism");
  std::string dd_config, dd_out, dd_treatment, dd_dose;
  double dd_bias = 0, dd_mod = 0;
  auto* dd_treat_o = dd->add_option("--treatment", dd_treatment, "binary or continuous");
  auto* dd_bias_o = dd->add_option("--bias-strength", dd_bias, "selection-bias strength");
  auto* dd_mod_o = dd->add_option("--context-modulation", dd_mod, "context effect modulation");
  auto* dd_dose_o = dd->add_option("--dose-shape", dd_dose, "linear or concave");
  dd->add_option("--config", dd_config, "generator config JSON");
  dd->add_option("--out", dd_out, "also write the description here");
  dd->callback([&] {
    json flags;
    if (*dd_treat_o) flags["treatment_kind"] = dd_treatment;
    if (*dd_bias_o) flags["bias_strength"] = dd_bias;
    if (*dd_mod_o) flags["context_modulation"] = dd_mod;
    if (*dd_dose_o) flags["dose_shape"] = dd_dose;
    rc = run_describe(dd_config, flags, dd_out);
  });

  // bench
  auto* be = app.add_subcommand("bench", "run the full seeded benchmark pipeline, or replay "
                                         "one from its manifest");
  std::string be_config, be_manifest, be_out;
  be->add_option("--config", be_config, "benchmark config JSON");
  be->add_option("--manifest", be_manifest, "manifest of a previous run to replay");
  be->add_option("--out", be_out, "output directory")->required();
  be->callback([&] { rc = run_bench_cmd(be_config, be_manifest, be_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const PipelineOrderError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ArtifactMismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const OovError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const UnsupportedError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DegenerateTreatmentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const VariantError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
