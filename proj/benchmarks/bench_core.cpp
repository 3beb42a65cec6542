// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <vector>

#include "curvloc/curvature.hpp"
#include "curvloc/evaluation.hpp"
#include "curvloc/random.hpp"
#include "curvloc/score_model.hpp"

namespace {

using curvloc::Matrix;
using curvloc::Vector;
namespace m = curvloc::model;

m::MlpConfig toy_config(int dim) {
  m::MlpConfig c;
  c.dim = dim;
  c.hidden = {128, 128, 128};
  c.time_embed_dim = 32;
  c.cond_embed_dim = 16;
  c.num_conditions = 24;
  return c;
}

void BM_Vjp(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const auto net = m::init_model(toy_config(d), 1);
  auto rng = curvloc::make_rng(2, {});
  const Vector x = curvloc::standard_normal(d, rng);
  const Vector v = curvloc::standard_normal(d, rng);
  const std::vector<int> ts{10};
  const std::vector<curvloc::diffusion::CondId> cs{3};
  for (auto _ : state) {
    benchmark::DoNotOptimize(curvloc::ad::vjp(
        [&](curvloc::ad::Tape& tape, curvloc::ad::NodeId n) { return net.build_eps(tape, n, ts, cs); }, x, v));
  }
}
BENCHMARK(BM_Vjp)->Arg(2)->Arg(64);

void BM_DhMap(benchmark::State& state) {
  const int K = static_cast<int>(state.range(0));
  const auto sched = curvloc::diffusion::make_linear_schedule(1000);
  const auto net = m::init_model(toy_config(64), 1, sched.fingerprint());
  auto rng = curvloc::make_rng(3, {});
  const Vector x = curvloc::standard_normal(64, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(curvloc::curvature::dh_map(net, nullptr, x, 1, 5, sched, {K, 4}, {1, 8, 8}));
  }
}
BENCHMARK(BM_DhMap)->Arg(4)->Arg(16);

void BM_TrainSteps(benchmark::State& state) {
  const auto sched = curvloc::diffusion::make_linear_schedule(1000);
  auto rng = curvloc::make_rng(5, {});
  const Matrix x0 = curvloc::standard_normal(64, 512, rng);
  std::vector<curvloc::diffusion::CondId> conds(512);
  for (std::size_t i = 0; i < conds.size(); ++i) conds[i] = static_cast<int>(i % 24);
  m::TrainOptions opt;
  opt.total_steps = 10;
  opt.batch_size = 128;
  opt.log_interval = 0;
  for (auto _ : state) {
    auto net = m::init_model(toy_config(64), 1, sched.fingerprint());
    benchmark::DoNotOptimize(m::train(net, x0, conds, sched, opt));
  }
  state.SetItemsProcessed(state.iterations() * 10);
}
BENCHMARK(BM_TrainSteps)->Unit(benchmark::kMillisecond);

void BM_ThresholdSweep(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto rng = curvloc::make_rng(6, {});
  std::vector<Matrix> maps;
  std::vector<curvloc::data::Mask> gt;
  std::bernoulli_distribution coin(0.3);
  for (std::size_t s = 0; s < n; ++s) {
    maps.push_back(curvloc::standard_normal(8, 8, rng));
    curvloc::data::Mask mk(64);
    for (auto& b : mk) b = coin(rng) ? 1 : 0;
    gt.push_back(mk);
  }
  const auto norm = curvloc::eval::global_normalize(maps);
  for (auto _ : state) benchmark::DoNotOptimize(curvloc::eval::threshold_sweep(norm, gt));
}
BENCHMARK(BM_ThresholdSweep)->Arg(32)->Arg(96)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
