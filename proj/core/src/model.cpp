#include "tscan/model.hpp"

#include <cmath>

#include "json_util.hpp"
#include "tscan/errors.hpp"
#include "tscan/io_util.hpp"
#include "tscan/rng.hpp"

namespace tscan {

using nlohmann::json;

std::string to_string(Variant v) { return v == Variant::kCanU ? "can_u" : "can_d"; }

Variant variant_from_string(const std::string& s) {
  if (s == "can_u") return Variant::kCanU;
  if (s == "can_d") return Variant::kCanD;
  throw ConfigError("unknown variant '" + s + "' (expected can_u|can_d)");
}

void ModelConfig::validate(const FeatureSchema& schema) const {
  schema.validate();
  if (embedding_dim < 1) throw ConfigError("model: embedding_dim must be >= 1");
  if (iso_levels < 1) throw ConfigError("model: iso_levels must be >= 1");
  if (attention_heads < 1) throw ConfigError("model: attention_heads must be >= 1");
  if (embedding_dim % attention_heads != 0)
    throw ConfigError("model: embedding_dim " + std::to_string(embedding_dim) +
                      " not divisible by attention_heads " + std::to_string(attention_heads));
  for (int w : context_mlp_widths)
    if (w < 1) throw ConfigError("model: context_mlp_widths entries must be >= 1");
  for (int w : head_mlp_widths)
    if (w < 1) throw ConfigError("model: head_mlp_widths entries must be >= 1");
  if (schema.treatment_kind == TreatmentKind::kBinary && iso_levels != 1)
    throw ConfigError("model: binary treatment requires iso_levels=1, got " +
                      std::to_string(iso_levels));
}

std::string ModelConfig::to_json() const {
  json j;
  j["embedding_dim"] = embedding_dim;
  j["context_mlp_widths"] = context_mlp_widths;
  j["head_mlp_widths"] = head_mlp_widths;
  j["iso_levels"] = iso_levels;
  j["attention_heads"] = attention_heads;
  j["variant"] = to_string(variant);
  j["ablations"] = {{"remove_context", ablations.remove_context},
                    {"replace_attention_with_dense", ablations.replace_attention_with_dense},
                    {"replace_isotonic_with_dense", ablations.replace_isotonic_with_dense}};
  j["attention_residual"] = attention_residual;
  j["scalar_gates"] = scalar_gates;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = parse_json(text, "model config");
  reject_unknown_keys(j,
                      {"embedding_dim", "context_mlp_widths", "head_mlp_widths", "iso_levels",
                       "attention_heads", "variant", "ablations", "attention_residual",
                       "scalar_gates"},
                      "model config");
  ModelConfig c;
  try {
    if (j.contains("embedding_dim")) c.embedding_dim = j["embedding_dim"].get<int>();
    if (j.contains("context_mlp_widths"))
      c.context_mlp_widths = j["context_mlp_widths"].get<std::vector<int>>();
    if (j.contains("head_mlp_widths"))
      c.head_mlp_widths = j["head_mlp_widths"].get<std::vector<int>>();
    if (j.contains("iso_levels")) c.iso_levels = j["iso_levels"].get<int>();
    if (j.contains("attention_heads")) c.attention_heads = j["attention_heads"].get<int>();
    if (j.contains("variant")) c.variant = variant_from_string(j["variant"].get<std::string>());
    if (j.contains("ablations")) {
      const json& a = j["ablations"];
      reject_unknown_keys(
          a, {"remove_context", "replace_attention_with_dense", "replace_isotonic_with_dense"},
          "model config ablations");
      if (a.contains("remove_context"))
        c.ablations.remove_context = a["remove_context"].get<bool>();
      if (a.contains("replace_attention_with_dense"))
        c.ablations.replace_attention_with_dense = a["replace_attention_with_dense"].get<bool>();
      if (a.contains("replace_isotonic_with_dense"))
        c.ablations.replace_isotonic_with_dense = a["replace_isotonic_with_dense"].get<bool>();
    }
    if (j.contains("attention_residual"))
      c.attention_residual = j["attention_residual"].get<bool>();
    if (j.contains("scalar_gates")) c.scalar_gates = j["scalar_gates"].get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

std::vector<double> isotonic_encode(double t, int levels) {
  if (levels < 1) throw ContractError("isotonic_encode: levels must be >= 1");
  if (!(t >= 0.0 && t <= 1.0))
    throw ContractError("isotonic_encode: t=" + format_double(t) + " outside [0, 1]");
  const int k = static_cast<int>(std::floor(t * levels));  // t==1 -> k==levels
  std::vector<double> bits(static_cast<std::size_t>(levels) + 1, 0.0);
  for (int i = 0; i <= k; ++i) bits[i] = 1.0;
  return bits;
}

// ---- parameter registry -------------------------------------------------

class ModelBuilder {
 public:
  static void build(CanModel& m) {
    const ModelConfig& cfg = m.config_;
    const FeatureSchema& sch = m.schema_;
    Rng rng(m.init_seed_);
    const int d = cfg.embedding_dim;

    enum InitKind { kGlorot, kZeros, kEmbedding };
    auto add = [&](const std::string& name, int r, int c, InitKind kind) {
      Tensor t(r, c);
      if (kind == kGlorot) {
        const double lim = std::sqrt(6.0 / (r + c));
        for (auto& v : t.values()) v = rng.uniform(-lim, lim);
      } else if (kind == kEmbedding) {
        for (auto& v : t.values()) v = rng.normal() * 0.1;
      }
      t.requires_grad = true;
      m.index_[name] = static_cast<int>(m.params_.size());
      m.names_.push_back(name);
      m.params_.push_back(std::move(t));
      m.weight_matrix_.push_back(kind == kGlorot);
    };
    auto add_mlp = [&](const std::string& prefix, int in, const std::vector<int>& widths) {
      for (std::size_t i = 0; i < widths.size(); ++i) {
        add(prefix + "." + std::to_string(i) + ".W", in, widths[i], kGlorot);
        add(prefix + "." + std::to_string(i) + ".b", 1, widths[i], kZeros);
        in = widths[i];
      }
      return in;
    };
    auto add_attention = [&](const std::string& prefix) {
      const int dh = d / cfg.attention_heads;
      for (int h = 0; h < cfg.attention_heads; ++h) {
        const std::string hp = prefix + ".h" + std::to_string(h) + ".";
        add(hp + "Wq", d, dh, kGlorot);
        add(hp + "Wk", d, dh, kGlorot);
        add(hp + "Wv", d, dh, kGlorot);
      }
    };

    for (const auto& f : sch.merchant_categorical)
      add("embed.merchant." + f.name, f.cardinality, d, kEmbedding);
    for (const auto& n : sch.merchant_numeric) {
      add("encode.merchant." + n + ".w", 1, d, kGlorot);
      add("encode.merchant." + n + ".b", 1, d, kZeros);
    }
    for (const auto& f : sch.context_categorical)
      add("embed.context." + f.name, f.cardinality, d, kEmbedding);
    for (const auto& n : sch.context_numeric) {
      add("encode.context." + n + ".w", 1, d, kGlorot);
      add("encode.context." + n + ".b", 1, d, kZeros);
    }
    add("encode.treatment.w", 1, d, kGlorot);
    add("encode.treatment.b", 1, d, kZeros);

    const int s_tokens = sch.merchant_token_count();
    const int c_tokens = sch.context_token_count();
    const bool rc = cfg.ablations.remove_context;
    const bool ra = cfg.ablations.replace_attention_with_dense;
    const int gate_out = cfg.scalar_gates ? 1 : d;

    if (ra) {
      const int in = (rc ? s_tokens : s_tokens + c_tokens) * d;
      add("cal.dense.W", in, s_tokens * d, kGlorot);
      add("cal.dense.b", 1, s_tokens * d, kZeros);
    } else {
      if (!rc && c_tokens > 0) {
        const int last = add_mlp("cal.ctx_mlp", c_tokens * d, cfg.context_mlp_widths);
        add("cal.ctx_mlp.out.W", last, d, kGlorot);
        add("cal.ctx_mlp.out.b", 1, d, kZeros);
      }
      for (int i = 0; i < s_tokens; ++i) {
        add("cal.gate." + std::to_string(i) + ".W", 2 * d, gate_out, kGlorot);
        add("cal.gate." + std::to_string(i) + ".b", 1, gate_out, kZeros);
      }
      add_attention("cal.attn");
      add("cal.gate_t.W", 2 * d, gate_out, kGlorot);
      add("cal.gate_t.b", 1, gate_out, kZeros);
    }

    for (int i = 0; i < s_tokens; ++i) {
      add("tal.gate." + std::to_string(i) + ".W", 2 * d, gate_out, kGlorot);
      add("tal.gate." + std::to_string(i) + ".b", 1, gate_out, kZeros);
    }
    add_attention("tal.attn");

    const bool riso = cfg.ablations.replace_isotonic_with_dense;
    const int head_in = d + (riso ? cfg.iso_levels + 1 : 0);
    const int head_last = add_mlp("head.mlp", head_in, cfg.head_mlp_widths);
    add("head.out.W", head_last, riso ? 1 : cfg.iso_levels + 1, kGlorot);
    add("head.out.b", 1, riso ? 1 : cfg.iso_levels + 1, kZeros);

    if (cfg.variant == Variant::kCanU) {
      const int prop_last = add_mlp("prop.mlp", d, cfg.head_mlp_widths);
      add("prop.out.W", prop_last, 1, kGlorot);
      add("prop.out.b", 1, 1, kZeros);
    }
  }
};

CanModel::CanModel(const ModelConfig& config, const FeatureSchema& schema,
                   const NormalizationParams& normalization, std::uint64_t init_seed)
    : config_(config), schema_(schema), normalization_(normalization), init_seed_(init_seed) {
  config_.validate(schema_);
  ModelBuilder::build(*this);
}

int CanModel::param_index(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

std::vector<Tensor*> CanModel::param_ptrs() {
  std::vector<Tensor*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

// ---- bound forward ------------------------------------------------------

Var BoundModel::p(const std::string& name) const {
  const int i = model->param_index(name);
  if (i < 0) throw ContractError("model has no parameter '" + name + "'");
  return params[static_cast<std::size_t>(i)];
}

BoundModel bind_model(Tape& tape, const CanModel& model, bool track_gradients) {
  BoundModel bm;
  bm.tape = &tape;
  bm.model = &model;
  bm.params.reserve(static_cast<std::size_t>(model.param_count()));
  for (int i = 0; i < model.param_count(); ++i) {
    const Tensor& t = model.param(i);
    bm.params.push_back(track_gradients ? tape.leaf(t) : tape.constant(t));
  }
  return bm;
}

namespace {

Var affine(const BoundModel& bm, Var x, const std::string& w, const std::string& b) {
  return add_bias(matmul(x, bm.p(w)), bm.p(b));
}

Var mlp_elu(const BoundModel& bm, Var x, const std::string& prefix, std::size_t n_hidden) {
  for (std::size_t i = 0; i < n_hidden; ++i) {
    const std::string layer = prefix + "." + std::to_string(i);
    x = elu(affine(bm, x, layer + ".W", layer + ".b"));
  }
  return x;
}

Var self_attention(const BoundModel& bm, Var stack, const std::string& prefix) {
  const ModelConfig& cfg = bm.model->config();
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(cfg.attention_heads));
  for (int h = 0; h < cfg.attention_heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h) + ".";
    heads.push_back(
        attention(matmul(stack, bm.p(hp + "Wq")), matmul(stack, bm.p(hp + "Wk")),
                  matmul(stack, bm.p(hp + "Wv"))));
  }
  Var out = heads.size() == 1 ? heads[0] : concat_cols(*bm.tape, heads);
  if (cfg.attention_residual) out = add(out, stack);
  return out;
}

// Sigmoid-affine gate shifted into (1, 2).
Var gate(const BoundModel& bm, Var input, const std::string& w, const std::string& b) {
  return add_const(sigmoid(affine(bm, input, w, b)), 1.0);
}

struct TokenVars {
  std::vector<Var> merchant, context;
  Var treatment;
};

TokenVars build_tokens(const BoundModel& bm, const InstanceRecord& rec) {
  const FeatureSchema& sch = bm.model->schema();
  if (rec.merchant_cat.size() != sch.merchant_categorical.size() ||
      rec.merchant_num.size() != sch.merchant_numeric.size() ||
      rec.context_cat.size() != sch.context_categorical.size() ||
      rec.context_num.size() != sch.context_numeric.size())
    throw SchemaError("record does not match the model's schema arity");
  if (!(rec.treatment >= 0.0 && rec.treatment <= 1.0))
    throw ContractError("record treatment " + format_double(rec.treatment) +
                        " outside [0, 1]; normalize first");
  TokenVars tok;
  for (std::size_t i = 0; i < sch.merchant_categorical.size(); ++i) {
    const auto& f = sch.merchant_categorical[i];
    const int code = rec.merchant_cat[i];
    if (code < 0 || code >= f.cardinality)
      throw OovError("field '" + f.name + "': code " + std::to_string(code) +
                     " outside cardinality " + std::to_string(f.cardinality));
    Var table = bm.p("embed.merchant." + f.name);
    tok.merchant.push_back(slice_rows(table, code, code + 1));
  }
  for (std::size_t i = 0; i < sch.merchant_numeric.size(); ++i) {
    const std::string& n = sch.merchant_numeric[i];
    tok.merchant.push_back(add(scale(bm.p("encode.merchant." + n + ".w"), rec.merchant_num[i]),
                               bm.p("encode.merchant." + n + ".b")));
  }
  for (std::size_t i = 0; i < sch.context_categorical.size(); ++i) {
    const auto& f = sch.context_categorical[i];
    const int code = rec.context_cat[i];
    if (code < 0 || code >= f.cardinality)
      throw OovError("field '" + f.name + "': code " + std::to_string(code) +
                     " outside cardinality " + std::to_string(f.cardinality));
    tok.context.push_back(slice_rows(bm.p("embed.context." + f.name), code, code + 1));
  }
  for (std::size_t i = 0; i < sch.context_numeric.size(); ++i) {
    const std::string& n = sch.context_numeric[i];
    tok.context.push_back(add(scale(bm.p("encode.context." + n + ".w"), rec.context_num[i]),
                              bm.p("encode.context." + n + ".b")));
  }
  tok.treatment = add(scale(bm.p("encode.treatment.w"), rec.treatment),
                      bm.p("encode.treatment.b"));
  return tok;
}

struct CtxLayerVars {
  Var h_cal_rows;  // S x d
  Var h_t;         // 1 x d
  Var summary;     // 1 x d (invalid under the dense replacement)
  std::vector<Var> merchant_gates;
  Var treatment_gate;
};

CtxLayerVars build_context_layer(const BoundModel& bm, const TokenVars& tok) {
  const ModelConfig& cfg = bm.model->config();
  Tape& tp = *bm.tape;
  const int d = cfg.embedding_dim;
  const int s_tokens = static_cast<int>(tok.merchant.size());
  const bool rc = cfg.ablations.remove_context;
  const bool drop_context = rc || tok.context.empty();
  CtxLayerVars out;

  if (cfg.ablations.replace_attention_with_dense) {
    std::vector<Var> flats;
    flats.push_back(reshape(concat_rows(tp, tok.merchant), 1, s_tokens * d));
    if (!drop_context) {
      const int c_tokens = static_cast<int>(tok.context.size());
      flats.push_back(reshape(concat_rows(tp, tok.context), 1, c_tokens * d));
    }
    Var flat = flats.size() == 1 ? flats[0] : concat_cols(tp, flats);
    Var dense = elu(affine(bm, flat, "cal.dense.W", "cal.dense.b"));
    out.h_cal_rows = reshape(dense, s_tokens, d);
    out.h_t = tok.treatment;
    return out;
  }

  if (drop_context) {
    out.summary = tp.constant(Tensor::zeros(1, d));
  } else {
    const int c_tokens = static_cast<int>(tok.context.size());
    Var flat = reshape(concat_rows(tp, tok.context), 1, c_tokens * d);
    Var h = mlp_elu(bm, flat, "cal.ctx_mlp", cfg.context_mlp_widths.size());
    out.summary = affine(bm, h, "cal.ctx_mlp.out.W", "cal.ctx_mlp.out.b");
  }

  std::vector<Var> stack_parts;
  stack_parts.reserve(tok.merchant.size() + tok.context.size());
  for (int i = 0; i < s_tokens; ++i) {
    const std::string gp = "cal.gate." + std::to_string(i);
    const Var pair[] = {tok.merchant[static_cast<std::size_t>(i)], out.summary};
    Var gi = gate(bm, concat_cols(tp, pair), gp + ".W", gp + ".b");
    out.merchant_gates.push_back(gi);
    stack_parts.push_back(mul(gi, tok.merchant[static_cast<std::size_t>(i)]));
  }
  if (!drop_context)
    for (const Var& c : tok.context) stack_parts.push_back(c);
  Var attn = self_attention(bm, concat_rows(tp, stack_parts), "cal.attn");
  out.h_cal_rows = slice_rows(attn, 0, s_tokens);

  const Var tpair[] = {tok.treatment, out.summary};
  out.treatment_gate = gate(bm, concat_cols(tp, tpair), "cal.gate_t.W", "cal.gate_t.b");
  out.h_t = mul(out.treatment_gate, tok.treatment);
  return out;
}

struct TalLayerVars {
  Var h_tal;  // 1 x d
  std::vector<Var> gates;
};

TalLayerVars build_treatment_layer(const BoundModel& bm, Var h_cal_rows, Var h_t) {
  Tape& tp = *bm.tape;
  const int s_tokens = h_cal_rows.rows();
  TalLayerVars out;
  std::vector<Var> stack_parts;
  stack_parts.reserve(static_cast<std::size_t>(s_tokens) + 1);
  for (int i = 0; i < s_tokens; ++i) {
    Var row = slice_rows(h_cal_rows, i, i + 1);
    const std::string gp = "tal.gate." + std::to_string(i);
    const Var pair[] = {row, h_t};
    Var gi = gate(bm, concat_cols(tp, pair), gp + ".W", gp + ".b");
    out.gates.push_back(gi);
    stack_parts.push_back(mul(gi, row));
  }
  stack_parts.push_back(h_t);
  Var attn = self_attention(bm, concat_rows(tp, stack_parts), "tal.attn");
  out.h_tal = mean_pool_rows(attn);
  return out;
}

Var build_weight_head(const BoundModel& bm, Var h_tal) {
  const ModelConfig& cfg = bm.model->config();
  Var h = mlp_elu(bm, h_tal, "head.mlp", cfg.head_mlp_widths.size());
  return softplus(affine(bm, h, "head.out.W", "head.out.b"));
}

Var build_dense_head_outcome(const BoundModel& bm, Var h_tal, double t) {
  const ModelConfig& cfg = bm.model->config();
  Var ie = bm.tape->constant(Tensor::row(isotonic_encode(t, cfg.iso_levels)));
  const Var pair[] = {h_tal, ie};
  Var h = mlp_elu(bm, concat_cols(*bm.tape, pair), "head.mlp", cfg.head_mlp_widths.size());
  return affine(bm, h, "head.out.W", "head.out.b");
}

}  // namespace

RecordForward build_forward(const BoundModel& bound, const InstanceRecord& record,
                            ForwardTrace* trace) {
  const ModelConfig& cfg = bound.model->config();
  TokenVars tok = build_tokens(bound, record);
  CtxLayerVars ctx = build_context_layer(bound, tok);
  TalLayerVars tal = build_treatment_layer(bound, ctx.h_cal_rows, ctx.h_t);
  RecordForward fwd;
  fwd.pooled_hcal = mean_pool_rows(ctx.h_cal_rows);
  fwd.h_tal = tal.h_tal;
  if (!cfg.ablations.replace_isotonic_with_dense) fwd.v = build_weight_head(bound, tal.h_tal);
  if (trace) {
    Tape& tp = *bound.tape;
    trace->tokens.merchant_tokens = concat_rows(tp, tok.merchant).to_tensor();
    trace->tokens.context_tokens =
        tok.context.empty() ? Tensor() : concat_rows(tp, tok.context).to_tensor();
    trace->tokens.treatment_token = tok.treatment.to_tensor();
    trace->context_summary = ctx.summary.valid() ? ctx.summary.to_tensor() : Tensor();
    trace->merchant_gates = ctx.merchant_gates.empty()
                                ? Tensor()
                                : concat_rows(tp, ctx.merchant_gates).to_tensor();
    trace->treatment_gate =
        ctx.treatment_gate.valid() ? ctx.treatment_gate.to_tensor() : Tensor();
    trace->h_cal = ctx.h_cal_rows.to_tensor();
    trace->h_t = ctx.h_t.to_tensor();
    trace->tal_gates = tal.gates.empty() ? Tensor() : concat_rows(tp, tal.gates).to_tensor();
    trace->h_tal = tal.h_tal.to_tensor();
  }
  return fwd;
}

Var build_outcome(const BoundModel& bound, const RecordForward& fwd, double t) {
  const ModelConfig& cfg = bound.model->config();
  if (cfg.ablations.replace_isotonic_with_dense)
    return build_dense_head_outcome(bound, fwd.h_tal, t);
  Var mask = bound.tape->constant(Tensor::row(isotonic_encode(t, cfg.iso_levels)));
  return sum(mul(fwd.v, mask));
}

Var build_uplift(const BoundModel& bound, const RecordForward& fwd, double t_f, double t_cf) {
  return sub(build_outcome(bound, fwd, t_cf), build_outcome(bound, fwd, t_f));
}

Var build_propensity(const BoundModel& bound, const RecordForward& fwd,
                     std::optional<double> grl_lambda) {
  const CanModel& m = *bound.model;
  if (m.config().variant != Variant::kCanU)
    throw VariantError("propensity head exists only on the can_u variant");
  Var x = fwd.pooled_hcal;
  if (grl_lambda) x = gradient_reversal(x, *grl_lambda);
  Var h = mlp_elu(bound, x, "prop.mlp", m.config().head_mlp_widths.size());
  Var out = affine(bound, h, "prop.out.W", "prop.out.b");
  if (m.schema().treatment_kind == TreatmentKind::kBinary) out = sigmoid(out);
  return out;
}

// ---- record-level inference --------------------------------------------

EncodedTokens CanModel::encode_features(const InstanceRecord& record) const {
  Tape tape;
  BoundModel bm = bind_model(tape, *this, false);
  TokenVars tok = build_tokens(bm, record);
  EncodedTokens out;
  out.merchant_tokens = concat_rows(tape, tok.merchant).to_tensor();
  out.context_tokens = tok.context.empty() ? Tensor() : concat_rows(tape, tok.context).to_tensor();
  out.treatment_token = tok.treatment.to_tensor();
  return out;
}

ForwardTrace CanModel::trace_forward(const InstanceRecord& record) const {
  Tape tape;
  BoundModel bm = bind_model(tape, *this, false);
  ForwardTrace trace;
  build_forward(bm, record, &trace);
  return trace;
}

std::vector<double> CanModel::uplift_weights(const InstanceRecord& record) const {
  if (config_.ablations.replace_isotonic_with_dense)
    throw VariantError("the dense-head ablation has no level weight vector");
  Tape tape;
  BoundModel bm = bind_model(tape, *this, false);
  RecordForward fwd = build_forward(bm, record);
  auto v = fwd.v.value();
  return std::vector<double>(v.begin(), v.end());
}

double CanModel::predict_outcome(const InstanceRecord& record, double t) const {
  Tape tape;
  BoundModel bm = bind_model(tape, *this, false);
  RecordForward fwd = build_forward(bm, record);
  return build_outcome(bm, fwd, t).scalar();
}

double CanModel::predict_uplift(const InstanceRecord& record, double t_f, double t_cf) const {
  Tape tape;
  BoundModel bm = bind_model(tape, *this, false);
  RecordForward fwd = build_forward(bm, record);
  return build_uplift(bm, fwd, t_f, t_cf).scalar();
}

double CanModel::propensity(const InstanceRecord& record) const {
  Tape tape;
  BoundModel bm = bind_model(tape, *this, false);
  RecordForward fwd = build_forward(bm, record);
  return build_propensity(bm, fwd, std::nullopt).scalar();
}

}  // namespace tscan
