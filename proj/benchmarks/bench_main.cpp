#include <benchmark/benchmark.h>

#include "bilbo/autodiff.hpp"
#include "bilbo/data.hpp"
#include "bilbo/model.hpp"
#include "bilbo/theory.hpp"

namespace {

using namespace bilbo;

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = rng.normal_tensor(300, n), b = rng.normal_tensor(n, n);
  for (auto _ : state) {
    Tape tape;
    Var c = matmul(tape.constant(a), tape.constant(b));
    benchmark::DoNotOptimize(c.value().storage().data());
  }
  state.SetItemsProcessed(state.iterations() * 300 * static_cast<int64_t>(n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(200)->Arg(784);

// One Adam step of the MNIST-sized network on a 300-example batch.
void BM_TrainStep(benchmark::State& state) {
  const bool learned = state.range(0) != 0;
  SyntheticSpec s;
  s.kind = SyntheticKind::LinearManifold;
  s.m = 784;
  s.n_true = 2;
  s.variances = Eigen::Vector2d(1.0, 1.0);
  s.noise_std = 0.1;
  s.count = 300;
  const Dataset data = gen_synthetic(s);
  TrainConfig c;
  c.objective.mode = learned ? ObjectiveMode::ElboLearnedSigma : ObjectiveMode::Bilbo;
  c.objective.likelihood = LikelihoodSpec::gaussian_fixed(1.0);
  if (!learned) c.objective.sigma_const = Eigen::VectorXd::Ones(2);
  c.epochs = 1;
  for (auto _ : state) {
    TrainResult r = train(data, c);
    benchmark::DoNotOptimize(r.log.steps);
  }
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_OptimalDecoder(benchmark::State& state) {
  const auto count = state.range(0);
  Rng rng(2);
  theory::TheoryDataset ds;
  ds.xs = rng.normal_tensor(static_cast<std::size_t>(count), 4).mat();
  ds.prior_var = Eigen::VectorXd::Ones(3);
  for (int64_t i = 0; i < count; ++i) {
    ds.posteriors.emplace_back(rng.normal_vector(3), Eigen::VectorXd::Constant(3, 0.2));
  }
  const Eigen::VectorXd z = rng.normal_vector(3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(theory::optimal_decoder(z, ds).value.data());
    benchmark::DoNotOptimize(theory::optimal_decoder_jacobian(z, ds).value.data());
  }
}
BENCHMARK(BM_OptimalDecoder)->Arg(10)->Arg(1000);

void BM_TraceLogMin(benchmark::State& state) {
  Rng rng(3);
  const Eigen::MatrixXd g = rng.normal_tensor(4, 4).mat();
  const Eigen::MatrixXd a = g * g.transpose() + Eigen::MatrixXd::Identity(4, 4);
  theory::TraceLogOptions opts;
  opts.steps = static_cast<int>(state.range(0));
  for (auto _ : state) {
    Rng r(4);
    benchmark::DoNotOptimize(theory::trace_log_min(a, opts, r).value);
  }
}
BENCHMARK(BM_TraceLogMin)->Arg(2000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
