#include <benchmark/benchmark.h>

#include <vector>

#include "tscan/evaluation.hpp"
#include "tscan/model.hpp"
#include "tscan/pipeline.hpp"
#include "tscan/rng.hpp"
#include "tscan/synthetic.hpp"
#include "tscan/tape.hpp"
#include "tscan/training.hpp"

namespace {

using namespace tscan;

std::vector<InstanceRecord> bench_records(int n, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.n = n;
  cfg.seed = seed;
  auto records = generate_synthetic(cfg);
  normalize_treatment(records, cfg.treatment_kind);
  return records;
}

CanModel bench_model(Variant variant) {
  ModelConfig mc;
  mc.variant = variant;
  const FeatureSchema schema = synthetic_schema(TreatmentKind::kBinary);
  return CanModel(mc, schema, NormalizationParams{}, 7);
}

void BM_ForwardBatch(benchmark::State& state) {
  const auto records = bench_records(static_cast<int>(state.range(0)), 11);
  CanModel model = bench_model(Variant::kCanU);
  Tape tape;
  for (auto _ : state) {
    BoundModel bound = bind_model(tape, model, /*track_gradients=*/false);
    std::vector<Var> outs;
    outs.reserve(records.size());
    for (const auto& r : records) {
      RecordForward fwd = build_forward(bound, r);
      outs.push_back(build_outcome(bound, fwd, r.treatment));
    }
    benchmark::DoNotOptimize(outs.back().scalar());
    tape.reset();
  }
  state.SetItemsProcessed(state.iterations() * records.size());
}
BENCHMARK(BM_ForwardBatch)->Arg(64)->Arg(256);

void BM_TrainStep(benchmark::State& state) {
  const auto records = bench_records(static_cast<int>(state.range(0)), 13);
  CanModel model = bench_model(Variant::kCanU);
  Tape tape;
  for (auto _ : state) {
    tape.reset();
    BoundModel bound = bind_model(tape, model, /*track_gradients=*/true);
    std::vector<Var> yhat;
    std::vector<double> y;
    yhat.reserve(records.size());
    for (const auto& r : records) {
      RecordForward fwd = build_forward(bound, r);
      yhat.push_back(build_outcome(bound, fwd, r.treatment));
      y.push_back(r.outcome);
    }
    Var pred = concat_rows(tape, yhat);
    Var loss = mse(pred, tape.constant(Tensor::from(static_cast<int>(y.size()), 1, y)));
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.scalar());
  }
  state.SetItemsProcessed(state.iterations() * records.size());
}
BENCHMARK(BM_TrainStep)->Arg(64)->Arg(256);

void BM_MmdRbf(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(17);
  Tensor a(n, 8), b(n, 8);
  for (double& v : a.values()) v = rng.normal();
  for (double& v : b.values()) v = rng.normal() + 0.3;
  for (auto _ : state) {
    benchmark::DoNotOptimize(mmd_rbf_value(a, b, 2.0));
  }
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_MmdRbf)->Arg(128)->Arg(512);

void BM_RankMetrics(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(19);
  std::vector<ScoredRecord> scored(n);
  for (auto& s : scored) {
    s.score = rng.uniform();
    s.treatment = rng.uniform() < 0.5 ? 0.0 : 1.0;
    s.outcome = rng.normal() + s.treatment;
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(auuc(scored));
    benchmark::DoNotOptimize(qini(scored));
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_RankMetrics)->Arg(10000)->Arg(50000);

}  // namespace

BENCHMARK_MAIN();
