// Micro benchmarks at the desk geometry (16x16 gray, widths 8/16/32,
// batch 40) unless a range argument says otherwise.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "cimp/backbone.hpp"
#include "cimp/data.hpp"
#include "cimp/losses.hpp"
#include "cimp/synthesis.hpp"

using namespace cimp;

namespace {

ArchDescriptor desk_arch() {
  ArchDescriptor a;
  a.stem_width = 8;
  a.block_widths = {8, 16, 32};
  return a;
}

ImageBatch random_batch(int n, const ArchDescriptor& a, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  ImageBatch b(a.input_shape(n));
  for (double& v : b.storage()) v = g(rng);
  return b;
}

std::vector<int> labels_for(int n, int classes) {
  std::vector<int> l(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) l[static_cast<std::size_t>(i)] = i % classes;
  return l;
}

FeatureBatch random_features(int n, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  FeatureBatch f(n, d);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = g(rng);
  return f;
}

void BM_ForwardEval(benchmark::State& state) {
  const auto arch = desk_arch();
  const ModelState m = ModelState::create(arch, std::vector<int>{0, 1, 2, 3, 4}, 10.0, 1);
  const ImageBatch b = random_batch(static_cast<int>(state.range(0)), arch, 2);
  for (auto _ : state) benchmark::DoNotOptimize(forward_features(m, b));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardEval)->Arg(1)->Arg(40)->Unit(benchmark::kMicrosecond);

void BM_TrainStep(benchmark::State& state) {
  const auto arch = desk_arch();
  const ModelState m = ModelState::create(arch, std::vector<int>{0, 1, 2, 3, 4}, 10.0, 1);
  const ImageBatch b = random_batch(40, arch, 2);
  const auto labels = labels_for(40, 5);
  for (auto _ : state) {
    const ForwardTape tape = forward(m, b, Mode::Train);
    const LossTerm ce = cnce_loss(tape.features, labels, m);
    benchmark::DoNotOptimize(backward(m, tape, ce.dfeatures, nullptr, true, false));
  }
  state.SetItemsProcessed(state.iterations() * 40);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMicrosecond);

void BM_SynthesisObjective(benchmark::State& state) {
  const auto arch = desk_arch();
  ModelState m = ModelState::create(arch, std::vector<int>{0, 1, 2, 3}, 10.0, 1);
  set_running_stats(m, observe_bn(m, random_batch(64, arch, 3)));
  const ImageBatch b = random_batch(40, arch, 4);
  const std::vector<int> labels(40, 1);
  SynthesisConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(synthesis_objective(m, b, labels, cfg, true));
  state.SetItemsProcessed(state.iterations() * 40);
}
BENCHMARK(BM_SynthesisObjective)->Unit(benchmark::kMicrosecond);

void BM_CnceLoss(benchmark::State& state) {
  const auto arch = desk_arch();
  const ModelState m = ModelState::create(arch, std::vector<int>{0, 1, 2, 3, 4}, 10.0, 1);
  const FeatureBatch f = random_features(40, arch.feature_dim(), 5);
  const auto labels = labels_for(40, 5);
  for (auto _ : state) benchmark::DoNotOptimize(cnce_loss(f, labels, m));
}
BENCHMARK(BM_CnceLoss);

void BM_DistillationLoss(benchmark::State& state) {
  const FeatureBatch f = random_features(40, 32, 6);
  const FeatureBatch g = random_features(40, 32, 7);
  for (auto _ : state) benchmark::DoNotOptimize(distillation_loss(f, g));
}
BENCHMARK(BM_DistillationLoss);

void BM_ContrastiveLoss(benchmark::State& state) {
  const int classes = static_cast<int>(state.range(0));
  CentroidBank bank(32, 0.99);
  std::vector<int> ids;
  for (int c = 0; c < classes; ++c) {
    ids.push_back(c);
    bank.set(c, Domain::Source, random_features(1, 32, 10 + c).row(0).transpose());
    bank.set(c, Domain::Target, random_features(1, 32, 100 + c).row(0).transpose());
  }
  for (auto _ : state) benchmark::DoNotOptimize(contrastive_loss(bank, ids, 1.0));
}
BENCHMARK(BM_ContrastiveLoss)->Arg(4)->Arg(64);

void BM_TvAndL2(benchmark::State& state) {
  const ImageBatch b = random_batch(40, desk_arch(), 8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(tv_l2_reg_grad(b));
    benchmark::DoNotOptimize(l2_reg_grad(b));
  }
}
BENCHMARK(BM_TvAndL2)->Unit(benchmark::kMicrosecond);

void BM_DeskDataset(benchmark::State& state) {
  DeskSpec spec;
  spec.per_class = 100;
  for (auto _ : state) benchmark::DoNotOptimize(make_desk_dataset(spec));
  state.SetItemsProcessed(state.iterations() * spec.per_class * spec.classes);
}
BENCHMARK(BM_DeskDataset)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
