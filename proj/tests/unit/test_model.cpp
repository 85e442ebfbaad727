#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "tscan/checkpoint.hpp"
#include "tscan/errors.hpp"
#include "tscan/model.hpp"
#include "tscan/rng.hpp"
#include "tscan/schema.hpp"
#include "tscan/tape.hpp"

using namespace tscan;
namespace fs = std::filesystem;

namespace {

FeatureSchema small_schema(TreatmentKind kind = TreatmentKind::kBinary) {
  FeatureSchema s;
  s.merchant_categorical = {{"segment", 3}};
  s.merchant_numeric = {"quality"};
  s.context_categorical = {{"district", 2}};
  s.context_numeric = {"supply_demand"};
  s.treatment_kind = kind;
  s.outcome_name = "orders";
  return s;
}

ModelConfig small_config(Variant v = Variant::kCanU) {
  ModelConfig c;
  c.embedding_dim = 4;
  c.context_mlp_widths = {6};
  c.head_mlp_widths = {8};
  c.iso_levels = 1;
  c.variant = v;
  return c;
}

InstanceRecord sample_record(double t = 1.0) {
  InstanceRecord r;
  r.merchant_cat = {1};
  r.merchant_num = {0.35};
  r.context_cat = {0};
  r.context_num = {-0.8};
  r.treatment = t;
  r.outcome = 4.2;
  return r;
}

NormalizationParams binary_norm() {
  NormalizationParams p;
  p.kind = TreatmentKind::kBinary;
  return p;
}

std::string temp_path(const std::string& name) {
  static int counter = 0;
  return (fs::temp_directory_path() /
          ("tscan_model_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + "_" +
           name))
      .string();
}

}  // namespace

TEST_CASE("isotonic_encode produces a thermometer code") {
  CHECK(isotonic_encode(0.0, 1) == std::vector<double>{1.0, 0.0});
  CHECK(isotonic_encode(1.0, 1) == std::vector<double>{1.0, 1.0});
  CHECK(isotonic_encode(0.0, 5) == std::vector<double>{1, 0, 0, 0, 0, 0});
  CHECK(isotonic_encode(0.2, 5) == std::vector<double>{1, 1, 0, 0, 0, 0});
  CHECK(isotonic_encode(0.55, 5) == std::vector<double>{1, 1, 1, 0, 0, 0});
  CHECK(isotonic_encode(0.999, 5) == std::vector<double>{1, 1, 1, 1, 1, 0});
  CHECK(isotonic_encode(1.0, 5) == std::vector<double>{1, 1, 1, 1, 1, 1});
}

TEST_CASE("model construction is deterministic in the init seed") {
  FeatureSchema schema = small_schema();
  CanModel a(small_config(), schema, binary_norm(), 11);
  CanModel b(small_config(), schema, binary_norm(), 11);
  CanModel c(small_config(), schema, binary_norm(), 12);
  REQUIRE(a.param_count() == b.param_count());
  bool all_same = true, any_diff_seed = false;
  for (int i = 0; i < a.param_count(); ++i) {
    const Tensor &ta = a.param(i), &tb = b.param(i), &tc = c.param(i);
    for (std::int64_t j = 0; j < ta.size(); ++j) {
      if (ta.data()[j] != tb.data()[j]) all_same = false;
      if (ta.data()[j] != tc.data()[j]) any_diff_seed = true;
    }
  }
  CHECK(all_same);
  CHECK(any_diff_seed);
}

TEST_CASE("config validation enforces structural constraints") {
  FeatureSchema schema = small_schema();
  ModelConfig c = small_config();
  c.embedding_dim = 0;
  CHECK_THROWS_AS(c.validate(schema), ConfigError);
  c = small_config();
  c.iso_levels = 0;
  CHECK_THROWS_AS(c.validate(schema), ConfigError);
  c = small_config();
  c.attention_heads = 3;  // 4 % 3 != 0
  CHECK_THROWS_AS(c.validate(schema), ConfigError);
  c = small_config();
  c.head_mlp_widths = {8, 0};
  CHECK_THROWS_AS(c.validate(schema), ConfigError);
}

TEST_CASE("variant gates which heads exist") {
  FeatureSchema schema = small_schema();
  CanModel u(small_config(Variant::kCanU), schema, binary_norm(), 3);
  CanModel d(small_config(Variant::kCanD), schema, binary_norm(), 3);
  InstanceRecord r = sample_record();

  CHECK_NOTHROW(u.propensity(r));
  CHECK_THROWS_AS(d.propensity(r), VariantError);

  ModelConfig dense = small_config();
  dense.ablations.replace_isotonic_with_dense = true;
  CanModel md(dense, schema, binary_norm(), 3);
  CHECK_THROWS_AS(md.uplift_weights(r), VariantError);
  CHECK_NOTHROW(u.uplift_weights(r));
}

TEST_CASE("records that disagree with the schema are rejected") {
  FeatureSchema schema = small_schema();
  CanModel m(small_config(), schema, binary_norm(), 3);
  InstanceRecord bad = sample_record();
  bad.merchant_num.push_back(1.0);
  CHECK_THROWS_AS(m.predict_outcome(bad, 1.0), SchemaError);

  InstanceRecord oov = sample_record();
  oov.merchant_cat[0] = 5;
  CHECK_THROWS_AS(m.predict_outcome(oov, 1.0), OovError);

  InstanceRecord raw = sample_record();
  raw.treatment = 3.0;  // unnormalized
  CHECK_THROWS_AS(m.predict_outcome(raw, 1.0), ContractError);
}

TEST_CASE("gates live strictly inside (1, 2)") {
  FeatureSchema schema = small_schema();
  CanModel m(small_config(), schema, binary_norm(), 9);
  ForwardTrace tr = m.trace_forward(sample_record());
  REQUIRE(tr.merchant_gates.size() > 0);
  REQUIRE(tr.treatment_gate.size() > 0);
  REQUIRE(tr.tal_gates.size() > 0);
  for (const Tensor* g : {&tr.merchant_gates, &tr.treatment_gate, &tr.tal_gates})
    for (std::int64_t i = 0; i < g->size(); ++i) {
      CHECK(g->data()[i] > 1.0);
      CHECK(g->data()[i] < 2.0);
    }
}

TEST_CASE("context layer output matches a by-hand recomputation from the trace") {
  // The trace exposes each intermediate, so the gating arithmetic
  // h_t = gate_t * treatment_token can be checked exactly.
  FeatureSchema schema = small_schema();
  CanModel m(small_config(), schema, binary_norm(), 17);
  ForwardTrace tr = m.trace_forward(sample_record());
  const int d = m.config().embedding_dim;
  REQUIRE(tr.h_t.rows() == 1);
  REQUIRE(tr.h_t.cols() == d);
  REQUIRE(tr.treatment_gate.cols() == d);
  for (int j = 0; j < d; ++j)
    CHECK(tr.h_t.at(0, j) == tr.treatment_gate.at(0, j) * tr.tokens.treatment_token.at(0, j));
}

TEST_CASE("removing context makes the forward invariant to context features") {
  FeatureSchema schema = small_schema();
  ModelConfig rc = small_config();
  rc.ablations.remove_context = true;
  CanModel m(rc, schema, binary_norm(), 5);

  InstanceRecord a = sample_record();
  InstanceRecord b = sample_record();
  b.context_cat = {1};
  b.context_num = {2.5};
  CHECK(m.predict_outcome(a, 1.0) == m.predict_outcome(b, 1.0));
  CHECK(m.predict_uplift(a, 0.0, 1.0) == m.predict_uplift(b, 0.0, 1.0));

  // The full model must react to the same context change.
  CanModel full(small_config(), schema, binary_norm(), 5);
  CHECK(full.predict_outcome(a, 1.0) != full.predict_outcome(b, 1.0));
}

TEST_CASE("uplift equals the outcome difference with zero ulp error") {
  FeatureSchema schema = small_schema(TreatmentKind::kContinuous);
  ModelConfig c = small_config(Variant::kCanD);
  c.iso_levels = 5;
  CanModel m(c, schema, binary_norm(), 23);
  Rng rng(404);
  for (int trial = 0; trial < 1000; ++trial) {
    InstanceRecord r = sample_record(rng.uniform());
    r.merchant_num[0] = rng.normal();
    r.context_num[0] = rng.normal();
    const double t0 = rng.uniform(), t1 = rng.uniform();
    // Both sides reduce to the same two masked weight sums, so the
    // difference is computed on identical doubles: exact, not approximate.
    const double diff = m.predict_outcome(r, t1) - m.predict_outcome(r, t0);
    CHECK(m.predict_uplift(r, t0, t1) == diff);
    // Swapping the endpoints negates the result exactly as well.
    CHECK(m.predict_uplift(r, t1, t0) == -diff);
  }
}

TEST_CASE("isotonic head makes the outcome monotone in the treatment level") {
  FeatureSchema schema = small_schema(TreatmentKind::kContinuous);
  ModelConfig c = small_config(Variant::kCanD);
  c.iso_levels = 4;
  CanModel m(c, schema, binary_norm(), 31);
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    InstanceRecord r = sample_record(rng.uniform());
    r.merchant_num[0] = rng.normal();
    double prev = -1e300;
    // One representative treatment per level, ascending.
    for (int level = 0; level <= 4; ++level) {
      const double t = level == 4 ? 1.0 : level / 4.0 + 0.1;
      const double y = m.predict_outcome(r, t);
      CHECK(y >= prev);
      prev = y;
    }
  }
}

TEST_CASE("uplift weights are positive and length M+1") {
  FeatureSchema schema = small_schema(TreatmentKind::kContinuous);
  ModelConfig c = small_config();
  c.iso_levels = 3;
  NormalizationParams n;
  n.kind = TreatmentKind::kContinuous;
  CanModel m(c, schema, n, 41);
  auto w = m.uplift_weights(sample_record(0.4));
  REQUIRE(w.size() == 4);
  for (double v : w) CHECK(v > 0.0);
  // predict_outcome(t) equals the masked partial sum of the weights.
  const double y0 = m.predict_outcome(sample_record(0.4), 0.0);
  CHECK(y0 == doctest::Approx(w[0]).epsilon(1e-12));
  const double y1 = m.predict_outcome(sample_record(0.4), 1.0);
  CHECK(y1 == doctest::Approx(w[0] + w[1] + w[2] + w[3]).epsilon(1e-12));
}

TEST_CASE("binary propensity lies in (0,1), continuous is unconstrained in form") {
  FeatureSchema bschema = small_schema(TreatmentKind::kBinary);
  CanModel mb(small_config(), bschema, binary_norm(), 51);
  const double pb = mb.propensity(sample_record());
  CHECK(pb > 0.0);
  CHECK(pb < 1.0);

  FeatureSchema cschema = small_schema(TreatmentKind::kContinuous);
  NormalizationParams cn;
  cn.kind = TreatmentKind::kContinuous;
  cn.t_min = 0.0;
  cn.t_max = 10.0;
  CanModel mc(small_config(), cschema, cn, 51);
  CHECK(std::isfinite(mc.propensity(sample_record(0.5))));
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  FeatureSchema schema = small_schema(TreatmentKind::kContinuous);
  ModelConfig c = small_config();
  c.iso_levels = 5;
  c.attention_heads = 2;
  NormalizationParams n;
  n.kind = TreatmentKind::kContinuous;
  n.t_min = -2.0;
  n.t_max = 7.5;
  CanModel m(c, schema, n, 1234);
  const std::string path = temp_path("model.ckpt");
  save_checkpoint(m, path);
  CanModel back = load_checkpoint(path);
  fs::remove(path);

  CHECK(back.init_seed() == m.init_seed());
  CHECK(back.config().iso_levels == 5);
  CHECK(back.config().attention_heads == 2);
  CHECK(back.normalization().t_min == -2.0);
  CHECK(back.normalization().t_max == 7.5);
  CHECK(back.schema().to_json() == m.schema().to_json());
  REQUIRE(back.param_count() == m.param_count());
  for (int i = 0; i < m.param_count(); ++i) {
    CHECK(back.param_name(i) == m.param_name(i));
    const Tensor &ta = m.param(i), &tb = back.param(i);
    REQUIRE(ta.size() == tb.size());
    CHECK(std::memcmp(ta.data(), tb.data(),
                      static_cast<std::size_t>(ta.size()) * sizeof(double)) == 0);
  }

  // Inference through the reloaded model is bit-identical.
  InstanceRecord r = sample_record(0.6);
  CHECK(back.predict_outcome(r, 0.3) == m.predict_outcome(r, 0.3));
  CHECK(back.predict_uplift(r, 0.1, 0.9) == m.predict_uplift(r, 0.1, 0.9));
}

TEST_CASE("corrupt checkpoints are rejected") {
  FeatureSchema schema = small_schema();
  CanModel m(small_config(), schema, binary_norm(), 3);
  const std::string path = temp_path("trunc.ckpt");
  save_checkpoint(m, path);
  // Truncate the parameter section.
  const auto full = fs::file_size(path);
  fs::resize_file(path, full - 16);
  CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  fs::remove(path);

  const std::string garbage = temp_path("garbage.ckpt");
  {
    std::FILE* f = std::fopen(garbage.c_str(), "wb");
    std::fputs("not a checkpoint at all", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint(garbage), ParseError);
  fs::remove(garbage);
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), IoError);
}

TEST_CASE("whole-model gradients agree with finite differences") {
  // End-to-end check through tokens, gates, attention, and both heads.
  FeatureSchema schema = small_schema();
  ModelConfig c = small_config();
  CanModel m(c, schema, binary_norm(), 61);
  InstanceRecord r = sample_record();

  Tape tape;
  BoundModel bm = bind_model(tape, m, true);
  RecordForward fwd = build_forward(bm, r);
  Var y1 = build_outcome(bm, fwd, 1.0);
  Var prop = build_propensity(bm, fwd, std::nullopt);
  Var loss = add(mul(sub(y1, tape.constant_scalar(3.0)),
                     sub(y1, tape.constant_scalar(3.0))),
                 mul(prop, prop));
  tape.backward(loss);

  // Collect analytic gradients, then recompute the loss under perturbation.
  const double base_loss = loss.scalar();
  CHECK(std::isfinite(base_loss));
  const double step = 1e-5;
  double max_rel = 0.0;
  int checked = 0;
  Rng pick(7);
  for (int pi = 0; pi < m.param_count(); ++pi) {
    auto g = tape.grad(bm.p(pi));
    Tensor& pt = m.param(pi);
    // Two random coordinates per parameter tensor keep the runtime sane.
    for (int probe = 0; probe < 2; ++probe) {
      const std::int64_t j =
          static_cast<std::int64_t>(pick.uniform_int(static_cast<std::uint64_t>(pt.size())));
      const double saved = pt.data()[j];
      auto eval = [&](double v) {
        pt.data()[j] = v;
        Tape t2;
        BoundModel b2 = bind_model(t2, m, false);
        RecordForward f2 = build_forward(b2, r);
        Var yy = build_outcome(b2, f2, 1.0);
        Var pp = build_propensity(b2, f2, std::nullopt);
        const double yv = yy.scalar(), pv = pp.scalar();
        return (yv - 3.0) * (yv - 3.0) + pv * pv;
      };
      const double up = eval(saved + step), dn = eval(saved - step);
      pt.data()[j] = saved;
      const double fd = (up - dn) / (2.0 * step);
      const double an = g[static_cast<std::size_t>(j)];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
      max_rel = std::max(max_rel, rel);
      ++checked;
    }
  }
  CHECK(checked > 30);
  CHECK(max_rel < 1e-4);
}

TEST_CASE("gradient reversal flips only the representation-to-propensity path") {
  FeatureSchema schema = small_schema();
  CanModel m(small_config(), schema, binary_norm(), 71);
  InstanceRecord r = sample_record();

  auto prop_grads = [&](std::optional<double> lam) {
    Tape tape;
    BoundModel bm = bind_model(tape, m, true);
    RecordForward fwd = build_forward(bm, r);
    Var p = build_propensity(bm, fwd, lam);
    tape.backward(p);
    // The first merchant embedding table sits upstream of the reversal;
    // the propensity head's own output weight sits downstream.
    std::vector<double> out;
    const int emb = m.param_index("embed.merchant.segment");
    const int head = m.param_index("prop.out.W");
    REQUIRE(emb >= 0);
    REQUIRE(head >= 0);
    auto ge = tape.grad(bm.p(emb));
    auto gh = tape.grad(bm.p(head));
    out.assign(ge.begin(), ge.end());
    out.insert(out.end(), gh.begin(), gh.end());
    out.push_back(static_cast<double>(ge.size()));
    return out;
  };

  auto plain = prop_grads(std::nullopt);
  auto reversed = prop_grads(1.0);
  auto scaled = prop_grads(0.5);
  REQUIRE(plain.size() == reversed.size());
  const std::size_t n_emb = static_cast<std::size_t>(plain.back());
  bool any_nonzero = false;
  for (std::size_t i = 0; i + 1 < plain.size(); ++i) {
    if (i < n_emb) {
      // Upstream of the reversal: exact negation / scaling.
      CHECK(reversed[i] == doctest::Approx(-plain[i]).epsilon(1e-12));
      CHECK(scaled[i] == doctest::Approx(-0.5 * plain[i]).epsilon(1e-12));
      if (plain[i] != 0.0) any_nonzero = true;
    } else {
      // Downstream: untouched by the reversal.
      CHECK(reversed[i] == doctest::Approx(plain[i]).epsilon(1e-12));
      CHECK(scaled[i] == doctest::Approx(plain[i]).epsilon(1e-12));
    }
  }
  CHECK(any_nonzero);
}
